//! Controllability certificates and their sampled verification.
//!
//! A certificate bundles comparison-function data with a policy oracle
//! that supplies the control sequence `u_x` for each initial state. Since
//! infinite control sequences are not representable, a policy yields a
//! finite prefix plus a declared tail rule.
//!
//! Verification replays the policy from every sample and evaluates each
//! inequality of the certificate up to a horizon. It is a falsification
//! check over the samples, not a proof of uniformity over the domain.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmpfn::{kl_decompose, log_grid, CmpError, KInfFn, KLFn, NonnegFn};
use crate::report::{Inequality, VerificationReport};
use crate::system::{rollout, ControlSystem, SimError, StageCost, StageCostSpec};

/// Default absolute slack on every inequality.
pub const DEFAULT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertError {
    #[error("malformed certificate: {0}")]
    Malformed(String),
    #[error("horizon {horizon} exceeds the policy prefix of {prefix} and no tail rule is declared")]
    HorizonExceedsPrefix { horizon: usize, prefix: usize },
    #[error("sample {index} lies outside the certified domain")]
    SampleOutsideDomain { index: usize },
    #[error("certificate kind {0} does not support this operation")]
    WrongKind(&'static str),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cmp(#[from] CmpError),
}

/// How a policy prefix is continued past its declared length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailRule {
    None,
    RepeatLast,
    ZeroInput,
}

type Law<S> = Arc<dyn Fn(&<S as ControlSystem>::State, usize) -> Vec<<S as ControlSystem>::Input> + Send + Sync>;

/// Maps an initial state to a control sequence.
pub struct PolicyOracle<S: ControlSystem> {
    name: String,
    law: Law<S>,
    /// Declared prefix length; `None` when the law produces any requested
    /// length.
    prefix_len: Option<usize>,
    tail: TailRule,
}

impl<S: ControlSystem> Clone for PolicyOracle<S> {
    fn clone(&self) -> Self {
        PolicyOracle {
            name: self.name.clone(),
            law: Arc::clone(&self.law),
            prefix_len: self.prefix_len,
            tail: self.tail,
        }
    }
}

impl<S: ControlSystem> fmt::Debug for PolicyOracle<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolicyOracle")
            .field("name", &self.name)
            .field("prefix_len", &self.prefix_len)
            .field("tail", &self.tail)
            .finish()
    }
}

impl<S: ControlSystem + 'static> PolicyOracle<S> {
    /// A policy from an arbitrary law `(x, len) -> controls`.
    pub fn new(
        name: impl Into<String>,
        prefix_len: Option<usize>,
        tail: TailRule,
        law: impl Fn(&S::State, usize) -> Vec<S::Input> + Send + Sync + 'static,
    ) -> Self {
        PolicyOracle {
            name: name.into(),
            law: Arc::new(law),
            prefix_len,
            tail,
        }
    }

    /// Closed-loop rollout of a state feedback `u = k(x)`.
    pub fn feedback(
        name: impl Into<String>,
        system: Arc<S>,
        k: impl Fn(&S::State) -> S::Input + Send + Sync + 'static,
    ) -> Self {
        Self::new(name, None, TailRule::None, move |x0, len| {
            let mut x = x0.clone();
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                let u = k(&x);
                x = system.step(&x, &u);
                out.push(u);
            }
            out
        })
    }

    /// The same input at every step.
    pub fn constant(name: impl Into<String>, u: S::Input) -> Self {
        Self::new(name, None, TailRule::None, move |_, len| vec![u.clone(); len])
    }

    /// The same open-loop prefix from every state.
    pub fn open_loop(name: impl Into<String>, controls: Vec<S::Input>, tail: TailRule) -> Self {
        let len = controls.len();
        Self::new(name, Some(len), tail, move |_, _| controls.clone())
    }
}

impl<S: ControlSystem> PolicyOracle<S> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn prefix_len(&self) -> Option<usize> {
        self.prefix_len
    }

    pub fn tail(&self) -> TailRule {
        self.tail
    }

    /// The first `horizon` controls for initial state `x`.
    pub fn controls(&self, sys: &S, x: &S::State, horizon: usize) -> Result<Vec<S::Input>, CertError> {
        let request = self.prefix_len.unwrap_or(horizon);
        let mut seq = (self.law)(x, request);
        if seq.len() < request {
            return Err(CertError::Malformed(format!(
                "policy '{}' returned {} controls, {} declared",
                self.name,
                seq.len(),
                request
            )));
        }
        if seq.len() < horizon {
            let filler = match self.tail {
                TailRule::None => {
                    return Err(CertError::HorizonExceedsPrefix {
                        horizon,
                        prefix: seq.len(),
                    })
                }
                TailRule::RepeatLast => seq
                    .last()
                    .cloned()
                    .ok_or_else(|| CertError::Malformed("cannot repeat an empty prefix".into()))?,
                TailRule::ZeroInput => sys
                    .zero_input()
                    .ok_or_else(|| CertError::Malformed("system declares no zero input".into()))?,
            };
            seq.resize(horizon, filler);
        }
        seq.truncate(horizon);
        Ok(seq)
    }
}

/// Membership predicate for the certified set of initial states.
pub enum Domain<S: ControlSystem> {
    All,
    SigmaAtMost(f64),
    Predicate {
        name: String,
        contains: Arc<dyn Fn(&S::State) -> bool + Send + Sync>,
    },
}

impl<S: ControlSystem> Clone for Domain<S> {
    fn clone(&self) -> Self {
        match self {
            Domain::All => Domain::All,
            Domain::SigmaAtMost(r) => Domain::SigmaAtMost(*r),
            Domain::Predicate { name, contains } => Domain::Predicate {
                name: name.clone(),
                contains: Arc::clone(contains),
            },
        }
    }
}

impl<S: ControlSystem> fmt::Debug for Domain<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::All => write!(f, "All"),
            Domain::SigmaAtMost(r) => write!(f, "SigmaAtMost({r})"),
            Domain::Predicate { name, .. } => write!(f, "Predicate({name})"),
        }
    }
}

impl<S: ControlSystem> Domain<S> {
    pub fn predicate(name: impl Into<String>, f: impl Fn(&S::State) -> bool + Send + Sync + 'static) -> Self {
        Domain::Predicate {
            name: name.into(),
            contains: Arc::new(f),
        }
    }

    pub fn contains(&self, sys: &S, x: &S::State) -> bool {
        match self {
            Domain::All => true,
            Domain::SigmaAtMost(r) => sys.sigma(x) <= *r,
            Domain::Predicate { contains, .. } => contains(x),
        }
    }

    pub fn describe(&self) -> String {
        format!("{self:?}")
    }
}

/// Uniform asymptotic controllability.
#[derive(Debug)]
pub struct UacCert<S: ControlSystem> {
    pub beta: KLFn,
    pub domain: Domain<S>,
    pub policy: PolicyOracle<S>,
}

/// Uniform asymptotic controllability with uniformly vanishing controls.
#[derive(Debug)]
pub struct UvcCert<S: ControlSystem> {
    pub beta_x: KLFn,
    pub beta_u: KLFn,
    pub domain: Domain<S>,
    pub policy: PolicyOracle<S>,
}

/// Uniform asymptotic controllability with uniformly bounded generalized
/// energy controls. `eta` may be merely nonnegative; whether it is
/// K-infinity decides which stage cost guarantees apply.
#[derive(Debug)]
pub struct UbgecCert<S: ControlSystem> {
    pub beta: KLFn,
    pub eta: NonnegFn,
    pub gamma: KInfFn,
    pub domain: Domain<S>,
    pub policy: PolicyOracle<S>,
}

/// Uniform cost controllability w.r.t. a stage cost and total cost bound.
#[derive(Debug)]
pub struct UccCert<S: ControlSystem> {
    pub ell: StageCost<S>,
    pub alpha_bar: KInfFn,
    pub domain: Domain<S>,
    pub policy: PolicyOracle<S>,
    /// Trajectories under the policy stay inside the domain.
    pub invariant: bool,
}

#[derive(Debug)]
pub enum Certificate<S: ControlSystem> {
    Uac(UacCert<S>),
    Uvc(UvcCert<S>),
    Ubgec(UbgecCert<S>),
    Ucc(UccCert<S>),
}

macro_rules! impl_clone {
    ($ty:ident { $($field:ident),* }) => {
        impl<S: ControlSystem> Clone for $ty<S> {
            fn clone(&self) -> Self {
                $ty { $($field: self.$field.clone()),* }
            }
        }
    };
}

impl_clone!(UacCert { beta, domain, policy });
impl_clone!(UvcCert {
    beta_x,
    beta_u,
    domain,
    policy
});
impl_clone!(UbgecCert {
    beta,
    eta,
    gamma,
    domain,
    policy
});
impl_clone!(UccCert {
    ell,
    alpha_bar,
    domain,
    policy,
    invariant
});

impl<S: ControlSystem> Clone for Certificate<S> {
    fn clone(&self) -> Self {
        match self {
            Certificate::Uac(c) => Certificate::Uac(c.clone()),
            Certificate::Uvc(c) => Certificate::Uvc(c.clone()),
            Certificate::Ubgec(c) => Certificate::Ubgec(c.clone()),
            Certificate::Ucc(c) => Certificate::Ucc(c.clone()),
        }
    }
}

/// The comparison-function part of a certificate, as stored in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CertificateData {
    Uac {
        beta: KLFn,
    },
    Uvc {
        beta_x: KLFn,
        beta_u: KLFn,
    },
    Ubgec {
        beta: KLFn,
        eta: NonnegFn,
        gamma: KInfFn,
    },
    Ucc {
        stage_cost: StageCostSpec,
        alpha_bar: KInfFn,
        #[serde(default)]
        invariant: bool,
    },
}

impl<S: ControlSystem> Certificate<S> {
    pub fn from_data(data: CertificateData, domain: Domain<S>, policy: PolicyOracle<S>) -> Self {
        match data {
            CertificateData::Uac { beta } => Certificate::Uac(UacCert { beta, domain, policy }),
            CertificateData::Uvc { beta_x, beta_u } => Certificate::Uvc(UvcCert {
                beta_x,
                beta_u,
                domain,
                policy,
            }),
            CertificateData::Ubgec { beta, eta, gamma } => Certificate::Ubgec(UbgecCert {
                beta,
                eta,
                gamma,
                domain,
                policy,
            }),
            CertificateData::Ucc {
                stage_cost,
                alpha_bar,
                invariant,
            } => Certificate::Ucc(UccCert {
                ell: stage_cost.into(),
                alpha_bar,
                domain,
                policy,
                invariant,
            }),
        }
    }

    /// Serializable data, unless the stage cost holds an opaque interaction.
    pub fn data(&self) -> Option<CertificateData> {
        Some(match self {
            Certificate::Uac(c) => CertificateData::Uac { beta: c.beta.clone() },
            Certificate::Uvc(c) => CertificateData::Uvc {
                beta_x: c.beta_x.clone(),
                beta_u: c.beta_u.clone(),
            },
            Certificate::Ubgec(c) => CertificateData::Ubgec {
                beta: c.beta.clone(),
                eta: c.eta.clone(),
                gamma: c.gamma.clone(),
            },
            Certificate::Ucc(c) => CertificateData::Ucc {
                stage_cost: c.ell.to_spec()?,
                alpha_bar: c.alpha_bar.clone(),
                invariant: c.invariant,
            },
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Certificate::Uac(_) => "uac",
            Certificate::Uvc(_) => "uvc",
            Certificate::Ubgec(_) => "ubgec",
            Certificate::Ucc(_) => "ucc",
        }
    }

    pub fn domain(&self) -> &Domain<S> {
        match self {
            Certificate::Uac(c) => &c.domain,
            Certificate::Uvc(c) => &c.domain,
            Certificate::Ubgec(c) => &c.domain,
            Certificate::Ucc(c) => &c.domain,
        }
    }

    pub fn policy(&self) -> &PolicyOracle<S> {
        match self {
            Certificate::Uac(c) => &c.policy,
            Certificate::Uvc(c) => &c.policy,
            Certificate::Ubgec(c) => &c.policy,
            Certificate::Ucc(c) => &c.policy,
        }
    }

    pub fn verify(
        &self,
        sys: &S,
        samples: &[S::State],
        horizon: usize,
        slack: f64,
    ) -> Result<VerificationReport, CertError> {
        let per_sample: Vec<VerificationReport> = samples
            .par_iter()
            .enumerate()
            .map(|(i, x)| self.verify_sample(sys, i, x, horizon, slack))
            .collect::<Result<_, _>>()?;
        let mut report = VerificationReport::new(slack, samples.len());
        for r in per_sample {
            report.rows.extend(r.rows);
        }
        Ok(report)
    }

    fn verify_sample(
        &self,
        sys: &S,
        index: usize,
        x: &S::State,
        horizon: usize,
        slack: f64,
    ) -> Result<VerificationReport, CertError> {
        let domain = self.domain();
        if !domain.contains(sys, x) {
            return Err(CertError::SampleOutsideDomain { index });
        }
        let u = self.policy().controls(sys, x, horizon)?;
        let traj = rollout(sys, x, &u, horizon)?;
        let s0 = sys.sigma(x);
        let mut rep = VerificationReport::new(slack, 1);
        match self {
            Certificate::Uac(c) => push_state_rows(&mut rep, sys, index, &traj.states, &c.beta, s0),
            Certificate::Uvc(c) => {
                push_state_rows(&mut rep, sys, index, &traj.states, &c.beta_x, s0);
                for (n, un) in traj.inputs.iter().enumerate() {
                    rep.push(index, Inequality::Control, n, sys.rho(un), c.beta_u.value(s0, n as f64));
                }
            }
            Certificate::Ubgec(c) => {
                push_state_rows(&mut rep, sys, index, &traj.states, &c.beta, s0);
                let bound = c.gamma.value(s0);
                let mut energy = 0.0;
                for (n, un) in traj.inputs.iter().enumerate() {
                    energy += c.eta.value(sys.rho(un));
                    rep.push(index, Inequality::Energy, n + 1, energy, bound);
                }
            }
            Certificate::Ucc(c) => {
                let bound = c.alpha_bar.value(s0);
                let mut cost = 0.0;
                for (n, (xn, un)) in traj.states.iter().zip(&traj.inputs).enumerate() {
                    cost += c.ell.eval(sys, xn, un);
                    rep.push(index, Inequality::Cost, n + 1, cost, bound);
                }
                if c.invariant {
                    for (n, xn) in traj.states.iter().enumerate() {
                        let outside = if domain.contains(sys, xn) { 0.0 } else { 1.0 };
                        rep.push(index, Inequality::Invariance, n, outside, 0.0);
                    }
                }
            }
        }
        Ok(rep)
    }
}

fn push_state_rows<S: ControlSystem>(
    rep: &mut VerificationReport,
    sys: &S,
    index: usize,
    states: &[S::State],
    beta: &KLFn,
    s0: f64,
) {
    for (n, xn) in states.iter().enumerate() {
        rep.push(index, Inequality::State, n, sys.sigma(xn), beta.value(s0, n as f64));
    }
}

macro_rules! verify_via_enum {
    ($ty:ident, $variant:ident) => {
        impl<S: ControlSystem> $ty<S> {
            pub fn verify(
                &self,
                sys: &S,
                samples: &[S::State],
                horizon: usize,
                slack: f64,
            ) -> Result<VerificationReport, CertError> {
                Certificate::$variant(self.clone()).verify(sys, samples, horizon, slack)
            }
        }
    };
}

verify_via_enum!(UacCert, Uac);
verify_via_enum!(UvcCert, Uvc);
verify_via_enum!(UbgecCert, Ubgec);
verify_via_enum!(UccCert, Ucc);

/// UVC to UBgEC: `beta = beta_x`, `eta = gamma2^{-1}` and
/// `gamma = gamma1 / (1 - theta)` for a KL decomposition of `beta_u`.
pub fn uvc_to_ubgec<S: ControlSystem>(cert: &UvcCert<S>, theta: f64) -> Result<UbgecCert<S>, CmpError> {
    let (gamma1, gamma2) = kl_decompose(&cert.beta_u, theta)?;
    Ok(UbgecCert {
        beta: cert.beta_x.clone(),
        eta: gamma2.inverse().as_nonneg(),
        gamma: gamma1.scale(1.0 / (1.0 - theta))?,
        domain: cert.domain.clone(),
        policy: cert.policy.clone(),
    })
}

/// Drops the energy bound.
pub fn ubgec_to_uac<S: ControlSystem>(cert: &UbgecCert<S>) -> UacCert<S> {
    UacCert {
        beta: cert.beta.clone(),
        domain: cert.domain.clone(),
        policy: cert.policy.clone(),
    }
}

/// Joint bound `w1 sigma + w2 rho <= beta` from separate state and control
/// bounds: `beta = max(w1, 1) beta_x + max(w2, 1) beta_u`.
pub fn joint_bound_merge<S: ControlSystem>(cert: &UvcCert<S>, w1: f64, w2: f64) -> Result<KLFn, CmpError> {
    if !(w1 >= 0.0 && w2 >= 0.0) {
        return Err(CmpError::Parameter(format!(
            "weights must be nonnegative, got {w1}, {w2}"
        )));
    }
    KLFn::weighted(vec![
        (w1.max(1.0), cert.beta_x.clone()),
        (w2.max(1.0), cert.beta_u.clone()),
    ])
}

/// Separate bounds from a joint bound `w1 sigma + w2 rho <= beta`:
/// `beta_x = beta_u = max(1/w1, 1/w2) beta`.
pub fn joint_bound_split(beta: &KLFn, w1: f64, w2: f64) -> Result<(KLFn, KLFn), CmpError> {
    if !(w1 > 0.0 && w2 > 0.0) {
        return Err(CmpError::Parameter(format!("weights must be positive, got {w1}, {w2}")));
    }
    let c = (1.0 / w1).max(1.0 / w2);
    let scaled = KLFn::weighted(vec![(c, beta.clone())])?;
    Ok((scaled.clone(), scaled))
}

/// Log-spaced sweep of the state measure in `[lo, hi]`, realized through
/// the system's probe states. Finite systems contribute all their states
/// instead.
pub fn sigma_sweep<S: ControlSystem>(sys: &S, count: usize, lo: f64, hi: f64) -> Vec<S::State> {
    if let Some(all) = sys.enumerate_states() {
        return all;
    }
    log_grid(lo, hi, count)
        .into_iter()
        .filter_map(|s| sys.probe_state(s))
        .collect()
}
