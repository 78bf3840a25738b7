//! Stage costs and total cost bounds from controllability certificates.
//!
//! Interaction bounds are checked by sampling over a grid of measure
//! values crossed with the pairs visited by the certificate's policy.
//! Passing such a check is evidence, not a proof, that the declared bound
//! holds on the whole domain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certificates::{CertError, Domain, UbgecCert, UccCert};
use crate::cmpfn::{kl_decompose, log_grid, CmpError, Expr, KInfFn, KLFn, NonnegFn, GRID_SLACK};
use crate::report::{Inequality, VerificationReport};
use crate::system::{rollout, ControlSystem, Interaction, MeasureTerm, StageCost};

/// Forward-search cap when looking for `beta(r, n) < R_sigma`.
pub const TRANSIENT_SEARCH_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("{which} choice rejected at r = {r}: {lhs} > {rhs}")]
    ChoiceRejected {
        which: &'static str,
        r: f64,
        lhs: f64,
        rhs: f64,
    },
    #[error("interaction rejected at sigma = {sigma}, rho = {rho}: s = {s} exceeds bound {bound}")]
    InteractionRejected { sigma: f64, rho: f64, s: f64, bound: f64 },
    #[error("interaction terms require an energy density eta of class K-infinity")]
    EtaNotKInf,
    #[error("base stage cost already carries an interaction term")]
    InteractionPresent,
    #[error("missing transient data (R_sigma, alpha_x, alpha_u)")]
    MissingTransient,
    #[error("beta({r}, n) stays at or above R_sigma for n < {cap}")]
    NonContraction { r: f64, cap: usize },
    #[error(transparent)]
    Cmp(#[from] CmpError),
    #[error(transparent)]
    Cert(#[from] CertError),
}

/// Tuning of [`synthesize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisParams {
    pub theta: f64,
    pub cq: f64,
    pub cr: f64,
    pub q_choice: Option<KInfFn>,
    pub r_choice: Option<NonnegFn>,
    /// Radii on which choices are checked against their caps.
    pub grid: Vec<f64>,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        SynthesisParams {
            theta: crate::cmpfn::DEFAULT_THETA,
            cq: 1.0,
            cr: 1.0,
            q_choice: None,
            r_choice: None,
            grid: default_grid(),
        }
    }
}

fn default_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend(log_grid(1e-4, 1e4, 64));
    g
}

/// The quantities a total cost bound was assembled from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub gamma1: KInfFn,
    pub gamma2: KInfFn,
    pub theta: f64,
    pub cq: f64,
    pub cr: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<KInfFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_sigma: Option<f64>,
}

#[derive(Debug)]
pub struct SynthesisResult<S: ControlSystem> {
    pub ell: StageCost<S>,
    pub alpha_bar: KInfFn,
    pub provenance: Provenance,
}

impl<S: ControlSystem> Clone for SynthesisResult<S> {
    fn clone(&self) -> Self {
        SynthesisResult {
            ell: self.ell.clone(),
            alpha_bar: self.alpha_bar.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// JSON form of a [`SynthesisResult`]. An opaque interaction is recorded
/// by name only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub q: KInfFn,
    pub r: NonnegFn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<MeasureTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_custom: Option<String>,
    pub alpha_bar: KInfFn,
    pub provenance: Provenance,
}

impl<S: ControlSystem> SynthesisResult<S> {
    pub fn record(&self) -> SynthesisRecord {
        let (s, s_custom) = match &self.ell.s {
            None => (None, None),
            Some(Interaction::Measure(m)) => (Some(m.clone()), None),
            Some(Interaction::Custom { name, .. }) => (None, Some(name.clone())),
        };
        SynthesisRecord {
            q: self.ell.q.clone(),
            r: self.ell.r.clone(),
            s,
            s_custom,
            alpha_bar: self.alpha_bar.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Total cost bound
/// `((cq + c1) / (1 - theta)) gamma1 + (cr + c2) gamma
///  + (c3 / (1 - theta)) gamma1 * (alpha ∘ eta^{-1} ∘ gamma)`.
fn assemble_bound(p: &Provenance, gamma: &KInfFn, eta: Option<&KInfFn>) -> Result<KInfFn, SynthError> {
    let k = 1.0 - p.theta;
    let mut bar = p.gamma1.scale((p.cq + p.c1) / k)?.add(&gamma.scale(p.cr + p.c2)?);
    if p.c3 > 0.0 {
        let alpha = p
            .alpha
            .as_ref()
            .ok_or_else(|| CmpError::Parameter("c3 > 0 needs alpha".into()))?;
        let eta = eta.ok_or(SynthError::EtaNotKInf)?;
        let growth = alpha.compose(&eta.inverse()).compose(gamma);
        bar = bar.add(&p.gamma1.mul(&growth).scale(p.c3 / k)?);
    }
    Ok(bar)
}

fn check_dominated(
    which: &'static str,
    grid: &[f64],
    f: impl Fn(f64) -> f64,
    cap: impl Fn(f64) -> f64,
) -> Result<(), SynthError> {
    for &r in grid {
        let (lhs, rhs) = (f(r), cap(r));
        if lhs > rhs + GRID_SLACK * rhs.max(1.0) {
            return Err(SynthError::ChoiceRejected { which, r, lhs, rhs });
        }
    }
    Ok(())
}

/// Stage cost `q(sigma) + r(rho)` and total cost bound
/// `(cq / (1 - theta)) gamma1 + cr gamma` from a UBgEC certificate.
///
/// Without explicit choices, `q = cq gamma2^{-1}` and `r = cr eta`.
pub fn synthesize<S: ControlSystem>(
    cert: &UbgecCert<S>,
    params: &SynthesisParams,
) -> Result<SynthesisResult<S>, SynthError> {
    for (name, c) in [("cq", params.cq), ("cr", params.cr)] {
        if !(c.is_finite() && c > 0.0) {
            return Err(CmpError::Parameter(format!("{name} must be positive, got {c}")).into());
        }
    }
    let (gamma1, gamma2) = kl_decompose(&cert.beta, params.theta)?;
    let q_cap = gamma2.inverse().scale(params.cq)?;
    let q = match &params.q_choice {
        Some(q) => {
            check_dominated("q", &params.grid, |r| q.value(r), |r| q_cap.value(r))?;
            q.clone()
        }
        None => q_cap,
    };
    let r_cap = NonnegFn::new(Expr::scale(params.cr, cert.eta.expr().clone()))?;
    let r = match &params.r_choice {
        Some(r) => {
            check_dominated("r", &params.grid, |s| r.value(s), |s| r_cap.value(s))?;
            r.clone()
        }
        None => r_cap,
    };
    let provenance = Provenance {
        gamma1,
        gamma2,
        theta: params.theta,
        cq: params.cq,
        cr: params.cr,
        c1: 0.0,
        c2: 0.0,
        c3: 0.0,
        alpha: None,
        r_sigma: None,
    };
    let alpha_bar = assemble_bound(&provenance, &cert.gamma, None)?;
    Ok(SynthesisResult {
        ell: StageCost::new(q, r),
        alpha_bar,
        provenance,
    })
}

/// The UCC certificate claimed by a synthesis result. Invariance holds
/// trivially when the domain is the whole state space.
pub fn ucc_certificate<S: ControlSystem>(result: &SynthesisResult<S>, cert: &UbgecCert<S>) -> UccCert<S> {
    UccCert {
        ell: result.ell.clone(),
        alpha_bar: result.alpha_bar.clone(),
        domain: cert.domain.clone(),
        policy: cert.policy.clone(),
        invariant: matches!(cert.domain, Domain::All),
    }
}

/// Checks `J_N(x, u_x | l) <= alpha_bar(sigma(x))` for all `N <= horizon`.
pub fn certify_ucc<S: ControlSystem>(
    result: &SynthesisResult<S>,
    cert: &UbgecCert<S>,
    sys: &S,
    samples: &[S::State],
    horizon: usize,
    slack: f64,
) -> Result<VerificationReport, CertError> {
    ucc_certificate(result, cert).verify(sys, samples, horizon, slack)
}

/// Data for the region `sigma >= R_sigma`, where the stage cost only
/// needs a rough additive bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientData {
    pub r_sigma: f64,
    pub alpha_x: KInfFn,
    pub alpha_u: KInfFn,
}

/// A stage cost term together with its declared bound
/// `s <= c1 gamma2^{-1}(sigma) + c2 eta(rho) + c3 gamma2^{-1}(sigma) alpha(rho)`.
#[derive(Clone, Debug)]
pub struct InteractionSpec<S: ControlSystem> {
    pub s: Interaction<S>,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha: Option<KInfFn>,
    pub transient: Option<TransientData>,
}

impl<S: ControlSystem> InteractionSpec<S> {
    pub fn new(s: Interaction<S>, c1: f64, c2: f64, c3: f64, alpha: Option<KInfFn>) -> Self {
        InteractionSpec {
            s,
            c1,
            c2,
            c3,
            alpha,
            transient: None,
        }
    }

    pub fn with_transient(mut self, data: TransientData) -> Self {
        self.transient = Some(data);
        self
    }

    fn validate(&self) -> Result<(), SynthError> {
        for (name, c) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3)] {
            if !(c.is_finite() && c >= 0.0) {
                return Err(CmpError::Parameter(format!("{name} must be nonnegative, got {c}")).into());
            }
        }
        if self.c3 > 0.0 && self.alpha.is_none() {
            return Err(CmpError::Parameter("c3 > 0 needs alpha".into()).into());
        }
        if let Some(t) = &self.transient {
            if !(t.r_sigma.is_finite() && t.r_sigma > 0.0) {
                return Err(CmpError::Parameter(format!("R_sigma must be positive, got {}", t.r_sigma)).into());
            }
        }
        Ok(())
    }

    /// Declared small-region bound at measure values `(sigma, rho)`.
    fn declared(&self, gamma2: &KInfFn, eta: &NonnegFn, sigma: f64, rho: f64) -> f64 {
        let g = gamma2.invert(sigma).unwrap_or(f64::INFINITY);
        let mut b = self.c1 * g + self.c2 * eta.value(rho);
        if let Some(alpha) = &self.alpha {
            if self.c3 > 0.0 && g > 0.0 {
                b += self.c3 * g * alpha.value(rho);
            }
        }
        b
    }
}

/// `s = alpha3(alpha1(sigma) + alpha2(rho))` with its admissible
/// coefficients `c1 = c2 = 1`, `c3 = 0`.
pub fn additive_interaction<S: ControlSystem>(
    alpha1: &KInfFn,
    alpha2: &KInfFn,
    gamma2: &KInfFn,
    eta: &KInfFn,
) -> InteractionSpec<S> {
    let outer = build_alpha3(alpha1, alpha2, gamma2, eta);
    let term = MeasureTerm::Additive {
        outer,
        state: alpha1.clone(),
        input: alpha2.clone(),
    };
    InteractionSpec::new(Interaction::Measure(term), 1.0, 1.0, 0.0, None)
}

/// Pairs `(x, u)` on which an interaction bound is falsification-tested.
pub struct PairSampler {
    pub sigmas: Vec<f64>,
    pub rhos: Vec<f64>,
    /// Steps of each policy rollout contributing visited pairs.
    pub rollout_len: usize,
}

impl Default for PairSampler {
    fn default() -> Self {
        let mut sigmas = vec![0.0];
        sigmas.extend(log_grid(1e-3, 1e3, 25));
        PairSampler {
            rhos: sigmas.clone(),
            sigmas,
            rollout_len: 32,
        }
    }
}

impl PairSampler {
    pub fn pairs<S: ControlSystem>(
        &self,
        sys: &S,
        cert: &UbgecCert<S>,
        samples: &[S::State],
    ) -> Result<Vec<(S::State, S::Input)>, CertError> {
        let states = sys
            .enumerate_states()
            .unwrap_or_else(|| self.sigmas.iter().filter_map(|&s| sys.probe_state(s)).collect());
        let inputs = sys
            .enumerate_inputs()
            .unwrap_or_else(|| self.rhos.iter().filter_map(|&r| sys.probe_input(r)).collect());
        let mut out = Vec::with_capacity(states.len() * inputs.len());
        for x in &states {
            for u in &inputs {
                out.push((x.clone(), u.clone()));
            }
        }
        for x in samples {
            let u = cert.policy.controls(sys, x, self.rollout_len)?;
            let traj = rollout(sys, x, &u, self.rollout_len)?;
            out.extend(traj.states.into_iter().zip(traj.inputs));
        }
        Ok(out)
    }
}

/// Adds an interaction term to a synthesized stage cost and enlarges the
/// total cost bound accordingly.
pub fn admit_interaction<S: ControlSystem>(
    spec: &InteractionSpec<S>,
    base: &SynthesisResult<S>,
    cert: &UbgecCert<S>,
    sys: &S,
    pairs: &[(S::State, S::Input)],
) -> Result<SynthesisResult<S>, SynthError> {
    spec.validate()?;
    if base.ell.s.is_some() {
        return Err(SynthError::InteractionPresent);
    }
    let eta = cert.eta.as_kinf().ok_or(SynthError::EtaNotKInf)?;
    let r_sigma = spec.transient.as_ref().map(|t| t.r_sigma);
    for (x, u) in pairs {
        let (sigma, rho) = (sys.sigma(x), sys.rho(u));
        if r_sigma.is_some_and(|rs| sigma >= rs) {
            continue;
        }
        let s = spec.s.value(sys, x, u);
        let bound = spec.declared(&base.provenance.gamma2, &cert.eta, sigma, rho);
        if s > bound + GRID_SLACK * bound.max(1.0) {
            return Err(SynthError::InteractionRejected { sigma, rho, s, bound });
        }
    }
    let provenance = Provenance {
        c1: spec.c1,
        c2: spec.c2,
        c3: spec.c3,
        alpha: spec.alpha.clone(),
        r_sigma,
        ..base.provenance.clone()
    };
    let alpha_bar = assemble_bound(&provenance, &cert.gamma, Some(&eta))?;
    Ok(SynthesisResult {
        ell: base.ell.clone().with_interaction(spec.s.clone()),
        alpha_bar,
        provenance,
    })
}

/// `alpha3(s) = min{gamma2^{-1}(alpha1^{-1}(s/2)), eta(alpha2^{-1}(s/2))}`.
pub fn build_alpha3(alpha1: &KInfFn, alpha2: &KInfFn, gamma2: &KInfFn, eta: &KInfFn) -> KInfFn {
    let half = KInfFn::linear(0.5).expect("0.5 is a valid slope");
    let left = gamma2.inverse().compose(&alpha1.inverse()).compose(&half);
    let right = eta.compose(&alpha2.inverse()).compose(&half);
    KInfFn::new(Expr::min(left.into_expr(), right.into_expr())).expect("min of K-infinity functions")
}

/// Bound for a stage cost that only satisfies the interaction bound below
/// `R_sigma` and a rough additive bound above it.
#[derive(Clone, Debug)]
pub struct TransientSplit<S: ControlSystem> {
    beta: KLFn,
    r_sigma: f64,
    /// `alpha_x(beta(r, 0)) + (alpha_u ∘ eta^{-1} ∘ gamma)(r)`
    per_step: KInfFn,
    /// Bound on the cost of steps below `R_sigma`.
    pub alpha2: NonnegFn,
    /// Running-max repaired `N` on the construction grid.
    pub n_table: Vec<(f64, usize)>,
    /// The full stage cost with the K-infinity bound on `alpha1 + alpha2`.
    pub result: SynthesisResult<S>,
}

impl<S: ControlSystem> TransientSplit<S> {
    /// `N(r) = min{n : beta(r, n) < R_sigma}` by forward search.
    pub fn n_of(&self, r: f64) -> Result<usize, SynthError> {
        first_below(&self.beta, r, self.r_sigma)
    }

    /// `alpha1(r) = N(r) (alpha_x(beta(r, 0)) + (alpha_u ∘ eta^{-1} ∘ gamma)(r))`
    pub fn alpha1(&self, r: f64) -> Result<f64, SynthError> {
        let n = self.n_of(r)?;
        Ok(if n == 0 { 0.0 } else { n as f64 * self.per_step.value(r) })
    }

    pub fn r_sigma(&self) -> f64 {
        self.r_sigma
    }
}

fn first_below(beta: &KLFn, r: f64, level: f64) -> Result<usize, SynthError> {
    (0..TRANSIENT_SEARCH_CAP)
        .find(|&n| beta.value(r, n as f64) < level)
        .ok_or(SynthError::NonContraction {
            r,
            cap: TRANSIENT_SEARCH_CAP,
        })
}

/// Builds the transient-split bound for `l = base.ell + spec.s`.
///
/// The coefficients of `spec` bound the whole stage cost on
/// `sigma < R_sigma`; `alpha_x`, `alpha_u` bound it on `sigma >= R_sigma`.
/// Both are falsification-tested on `pairs`. `grid` must cover the state
/// measures at which the bound will be used.
pub fn transient_split_bound<S: ControlSystem>(
    spec: &InteractionSpec<S>,
    base: &SynthesisResult<S>,
    cert: &UbgecCert<S>,
    sys: &S,
    pairs: &[(S::State, S::Input)],
    grid: &[f64],
) -> Result<TransientSplit<S>, SynthError> {
    spec.validate()?;
    let t = spec.transient.as_ref().ok_or(SynthError::MissingTransient)?;
    if base.ell.s.is_some() {
        return Err(SynthError::InteractionPresent);
    }
    let eta = cert.eta.as_kinf().ok_or(SynthError::EtaNotKInf)?;
    let theta = base.provenance.theta;
    let (gamma1, gamma2) = (&base.provenance.gamma1, &base.provenance.gamma2);
    let ell = base.ell.clone().with_interaction(spec.s.clone());

    for (x, u) in pairs {
        let (sigma, rho) = (sys.sigma(x), sys.rho(u));
        let l = ell.eval(sys, x, u);
        let bound = if sigma < t.r_sigma {
            spec.declared(gamma2, &cert.eta, sigma, rho)
        } else {
            t.alpha_x.value(sigma) + t.alpha_u.value(rho)
        };
        if l > bound + GRID_SLACK * bound.max(1.0) {
            return Err(SynthError::InteractionRejected {
                sigma,
                rho,
                s: l,
                bound,
            });
        }
    }

    let per_step = t
        .alpha_x
        .compose(&cert.beta.at_time_zero())
        .add(&t.alpha_u.compose(&eta.inverse()).compose(&cert.gamma));

    let k = 1.0 - theta;
    let mut terms = Vec::new();
    if spec.c1 > 0.0 {
        terms.push(Expr::scale(spec.c1 / k, gamma1.expr().clone()));
    }
    if spec.c2 > 0.0 {
        terms.push(Expr::scale(spec.c2, cert.gamma.expr().clone()));
    }
    if spec.c3 > 0.0 {
        let alpha = spec.alpha.as_ref().expect("validated");
        let growth = alpha.compose(&eta.inverse()).compose(&cert.gamma);
        terms.push(Expr::scale(spec.c3 / k, gamma1.mul(&growth).into_expr()));
    }
    let alpha2 = terms.into_iter().reduce(Expr::sum).unwrap_or(Expr::Zero);

    // Node i of the table carries alpha1 at node i + 1, so that linear
    // interpolation dominates alpha1 on (node i, node i + 1].
    let mut nodes: Vec<f64> = grid.iter().copied().filter(|r| r.is_finite() && *r > 0.0).collect();
    // the first node must lie where alpha1 vanishes
    let mut r0 = nodes.iter().copied().fold(t.r_sigma, f64::min);
    for _ in 0..1100 {
        if first_below(&cert.beta, r0, t.r_sigma)? == 0 {
            break;
        }
        r0 *= 0.5;
    }
    if first_below(&cert.beta, r0, t.r_sigma)? > 0 {
        return Err(CmpError::Parameter("no radius found where beta(r, 0) < R_sigma".into()).into());
    }
    nodes.push(r0);
    nodes.sort_by(f64::total_cmp);
    nodes.dedup();
    let mut n_table = Vec::with_capacity(nodes.len());
    let mut n_max = 0;
    for &r in &nodes {
        n_max = n_max.max(first_below(&cert.beta, r, t.r_sigma)?);
        n_table.push((r, n_max));
    }
    let a1 = |i: usize| {
        let (r, n) = n_table[i];
        if n == 0 {
            0.0
        } else {
            n as f64 * per_step.value(r)
        }
    };
    let last = nodes.len() - 1;
    let mut points = vec![[0.0, 0.0]];
    let mut running = 0.0f64;
    for (i, &r) in nodes.iter().enumerate() {
        running = running.max(a1((i + 1).min(last)));
        points.push([r, running]);
    }
    let envelope = Expr::sum(Expr::table(points), Expr::linear(GRID_SLACK));
    let alpha_bar = KInfFn::new(Expr::sum(envelope, alpha2.clone()))?;
    let provenance = Provenance {
        c1: spec.c1,
        c2: spec.c2,
        c3: spec.c3,
        alpha: spec.alpha.clone(),
        r_sigma: Some(t.r_sigma),
        ..base.provenance.clone()
    };
    Ok(TransientSplit {
        beta: cert.beta.clone(),
        r_sigma: t.r_sigma,
        per_step,
        alpha2: NonnegFn::new(alpha2)?,
        n_table,
        result: SynthesisResult {
            ell,
            alpha_bar,
            provenance,
        },
    })
}

/// Replays the policy and checks the split:
/// the cost of steps with `sigma >= R_sigma` against `alpha1`, their count
/// against `N`, and the remaining cost against `alpha2`.
pub fn verify_transient_split<S: ControlSystem>(
    split: &TransientSplit<S>,
    cert: &UbgecCert<S>,
    sys: &S,
    samples: &[S::State],
    horizon: usize,
    slack: f64,
) -> Result<VerificationReport, SynthError> {
    let ell = &split.result.ell;
    let mut rep = VerificationReport::new(slack, samples.len());
    for (i, x) in samples.iter().enumerate() {
        let u = cert.policy.controls(sys, x, horizon)?;
        let traj = rollout(sys, x, &u, horizon).map_err(CertError::from)?;
        let s0 = sys.sigma(x);
        let (a1, n_bound) = (split.alpha1(s0)?, split.n_of(s0)?);
        let a2 = split.alpha2.value(s0);
        let (mut c1, mut c2, mut count) = (0.0, 0.0, 0usize);
        for (n, (xn, un)) in traj.states.iter().zip(&traj.inputs).enumerate() {
            let l = ell.eval(sys, xn, un);
            if sys.sigma(xn) >= split.r_sigma {
                c1 += l;
                count += 1;
            } else {
                c2 += l;
            }
            rep.push(i, Inequality::TransientCost, n + 1, c1, a1);
            rep.push(i, Inequality::SteadyCost, n + 1, c2, a2);
        }
        rep.push(i, Inequality::TransientSteps, horizon, count as f64, n_bound as f64);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::{Domain, PolicyOracle, DEFAULT_SLACK};
    use crate::system::BuiltinSystem;

    type Sys = BuiltinSystem;

    fn cert_with_eta(eta: Expr) -> UbgecCert<Sys> {
        UbgecCert {
            beta: KLFn::exponential(1.0, 0.5).unwrap(),
            eta: NonnegFn::new(eta).unwrap(),
            gamma: KInfFn::linear(2.0).unwrap(),
            domain: Domain::All,
            policy: PolicyOracle::constant("zero", vec![0.0]),
        }
    }

    #[test]
    fn default_synthesis_formula() {
        let res = synthesize(&cert_with_eta(Expr::power(2.0)), &SynthesisParams::default()).unwrap();
        for r in [0.0, 0.5, 1.0, 3.0] {
            assert!((res.ell.q.value(r) - r).abs() < 1e-15);
            assert!((res.ell.r.value(r) - r * r).abs() < 1e-12);
            assert!((res.alpha_bar.value(r) - 4.0 * r).abs() < 1e-12);
        }
        assert!(res.ell.r.is_kinf());
    }

    #[test]
    fn q_choice_accepted_and_rejected() {
        let cert = cert_with_eta(Expr::power(2.0));
        let params = SynthesisParams {
            q_choice: Some(KInfFn::linear(0.5).unwrap()),
            ..Default::default()
        };
        let res = synthesize(&cert, &params).unwrap();
        assert!((res.alpha_bar.value(1.0) - 4.0).abs() < 1e-12);
        let params = SynthesisParams {
            q_choice: Some(KInfFn::power(2.0).unwrap()),
            ..Default::default()
        };
        assert!(matches!(
            synthesize(&cert, &params),
            Err(SynthError::ChoiceRejected { which: "q", .. })
        ));
    }

    #[test]
    fn certify_scalar_linear() {
        let cert = cert_with_eta(Expr::identity());
        let sys = BuiltinSystem::scalar_linear(0.5, 1.0);
        let res = synthesize(&cert, &SynthesisParams::default()).unwrap();
        let samples = vec![vec![0.0], vec![1.0], vec![-3.0]];
        let rep = certify_ucc(&res, &cert, &sys, &samples, 64, DEFAULT_SLACK).unwrap();
        assert!(rep.passed());
        let shrunk = SynthesisResult {
            alpha_bar: res.alpha_bar.scale(1e-3).unwrap(),
            ..res
        };
        assert!(!certify_ucc(&shrunk, &cert, &sys, &samples, 64, DEFAULT_SLACK)
            .unwrap()
            .passed());
    }

    #[test]
    fn alpha3_examples() {
        let id = KInfFn::identity();
        let a3 = build_alpha3(&id, &id, &id, &id);
        assert!((a3.value(3.0) - 1.5).abs() < 1e-15);
        assert_eq!(a3.value(0.0), 0.0);
        let sq = KInfFn::power(2.0).unwrap();
        let a3 = build_alpha3(&id, &id, &id, &sq);
        for s in [0.5, 2.0, 6.0] {
            let h: f64 = s / 2.0;
            assert!((a3.value(s) - h.min(h * h)).abs() < 1e-12);
        }
    }

    #[test]
    fn transient_n_examples() {
        let cert = cert_with_eta(Expr::identity());
        let sys = BuiltinSystem::scalar_linear(0.5, 1.0);
        let base = synthesize(&cert, &SynthesisParams::default()).unwrap();
        let id = KInfFn::identity();
        let zero = Interaction::Measure(MeasureTerm::Separate {
            state: NonnegFn::zero(),
            input: NonnegFn::zero(),
        });
        let spec = InteractionSpec::<Sys>::new(zero, 1.0, 1.0, 0.0, None).with_transient(TransientData {
            r_sigma: 1.0,
            alpha_x: id.clone(),
            alpha_u: id,
        });
        let split = transient_split_bound(&spec, &base, &cert, &sys, &[], &[4.0, 8.0]).unwrap();
        assert_eq!(split.n_of(4.0).unwrap(), 3);
        assert_eq!(split.n_of(0.5).unwrap(), 0);
        assert_eq!(split.alpha1(0.5).unwrap(), 0.0);
        assert!((split.alpha1(4.0).unwrap() - 36.0).abs() < 1e-12);
        assert!(split.result.alpha_bar.value(4.0) >= 36.0);
    }
}
