//! Built-in example systems with hand-checked certificates.
//!
//! | name | dynamics | control | bound |
//! |---|---|---|---|
//! | `scalar_linear` | `x+ = x/2 + u` | `u = 0` | `r 2^-t` |
//! | `double_integrator` | `[[1,1],[0,1]] x + [0,1] u` | deadbeat `u = -(x0 + 2 x1)` | `4 r 2^-t` |
//! | `scalar_nonlinear` | `x+ = x/(1+x^2) + u` | `u = x/2 - x/(1+x^2)` | `r 2^-t` |
//! | `chain` | 10 states, move left or stay | left until 0 | `r 0.9^t` |

use std::sync::Arc;

use rand::Rng;

use crate::certificates::{uvc_to_ubgec, Domain, PolicyOracle, UbgecCert, UvcCert};
use crate::cmpfn::{log_grid, CmpError, Expr, KInfFn, KLFn, NonnegFn};
use crate::oracle::FiniteSystem;
use crate::system::{BuiltinSystem, ControlSystem};

pub const BUILTIN_NAMES: [&str; 3] = ["scalar_linear", "double_integrator", "scalar_nonlinear"];

/// A system, its policy and certificates, and the KL rate to decompose with.
#[derive(Debug)]
pub struct Case<S: ControlSystem> {
    pub name: &'static str,
    pub system: Arc<S>,
    pub uvc: Option<UvcCert<S>>,
    pub ubgec: UbgecCert<S>,
    pub theta: f64,
    pub samples: Vec<S::State>,
}

/// `count` states with measures log-spaced in `[1e-2, 1e2]`.
pub fn builtin_samples(sys: &BuiltinSystem, count: usize) -> Vec<Vec<f64>> {
    sweep_samples(sys, count, 1e-2, 1e2)
}

fn oriented(sys: &BuiltinSystem, s: f64, angle: f64) -> Vec<f64> {
    match sys {
        BuiltinSystem::Linear2 { .. } => vec![s * angle.cos(), s * angle.sin()],
        _ => vec![if angle.cos() >= 0.0 { s } else { -s }],
    }
}

/// States with measures log-spaced in `[lo, hi]`, alternating in sign
/// and, for planar states, rotating by the golden angle.
pub fn sweep_samples(sys: &BuiltinSystem, count: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    log_grid(lo, hi, count)
        .into_iter()
        .enumerate()
        .map(|(k, s)| match sys {
            BuiltinSystem::Linear2 { .. } => oriented(sys, s, 2.399_963_229_728_653 * k as f64),
            _ => oriented(sys, s, if k % 2 == 0 { 0.0 } else { std::f64::consts::PI }),
        })
        .collect()
}

/// States with log-uniform measures in `[lo, hi]` and uniform direction.
pub fn random_samples(sys: &BuiltinSystem, count: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let s = if hi > lo {
                rng.gen_range(lo.ln()..=hi.ln()).exp()
            } else {
                lo
            };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            oriented(sys, s, angle)
        })
        .collect()
}

fn builtin_case(
    name: &'static str,
    sys: BuiltinSystem,
    policy: PolicyOracle<BuiltinSystem>,
    beta_x: KLFn,
    beta_u: KLFn,
) -> Result<Case<BuiltinSystem>, CmpError> {
    let theta = 0.5;
    let samples = builtin_samples(&sys, 32);
    let uvc = UvcCert {
        beta_x,
        beta_u,
        domain: Domain::All,
        policy,
    };
    let ubgec = uvc_to_ubgec(&uvc, theta)?;
    Ok(Case {
        name,
        system: Arc::new(sys),
        uvc: Some(uvc),
        ubgec,
        theta,
        samples,
    })
}

/// `x+ = x/2 + u` left uncontrolled.
pub fn scalar_linear() -> Case<BuiltinSystem> {
    builtin_case(
        "scalar_linear",
        BuiltinSystem::scalar_linear(0.5, 1.0),
        PolicyOracle::constant("zero", vec![0.0]),
        KLFn::exponential(1.0, 0.5).expect("valid"),
        KLFn::exponential(1.0, 0.5).expect("valid"),
    )
    .expect("valid case")
}

/// Double integrator under deadbeat feedback; the state is zero after two
/// steps, with `|x1| <= 2|x|`, `|u0| <= sqrt(5)|x|` and `|u1| <= sqrt(2)|x|`.
pub fn double_integrator() -> Case<BuiltinSystem> {
    let sys = BuiltinSystem::double_integrator();
    let policy = PolicyOracle::feedback("deadbeat", Arc::new(sys.clone()), |x: &Vec<f64>| {
        vec![-(x[0] + 2.0 * x[1])]
    });
    builtin_case(
        "double_integrator",
        sys,
        policy,
        KLFn::exponential(4.0, 0.5).expect("valid"),
        KLFn::exponential(3.0, 0.5).expect("valid"),
    )
    .expect("valid case")
}

/// Feedback cancelling the nonlinearity, leaving `x+ = x/2` and
/// `|u| <= |x|/2`.
pub fn scalar_nonlinear() -> Case<BuiltinSystem> {
    let sys = BuiltinSystem::ScalarNonlinear;
    let policy = PolicyOracle::feedback("cancel", Arc::new(sys.clone()), |x: &Vec<f64>| {
        vec![0.5 * x[0] - x[0] / (1.0 + x[0] * x[0])]
    });
    builtin_case(
        "scalar_nonlinear",
        sys,
        policy,
        KLFn::exponential(1.0, 0.5).expect("valid"),
        KLFn::exponential(0.5, 0.5).expect("valid"),
    )
    .expect("valid case")
}

/// Chain of `n` states under the move-left policy. From state `i` the
/// policy takes `i` unit steps, so `eta = gamma = id`; `max(i - t, 0) <= i 0.9^t`
/// because `1 - t/i <= 1 - t/10 <= 0.9^t` for `i < 10`.
///
/// # Panics
/// If `n > 10`, where the decay rate no longer holds.
pub fn chain(n: usize) -> Case<FiniteSystem> {
    assert!((1..=10).contains(&n), "chain length must lie in 1..=10");
    let sys = Arc::new(FiniteSystem::chain(n));
    let policy = PolicyOracle::feedback("left", Arc::clone(&sys), |x: &usize| usize::from(*x > 0));
    let ubgec = UbgecCert {
        beta: KLFn::exponential(1.0, 0.9).expect("valid"),
        eta: NonnegFn::new(Expr::identity()).expect("valid"),
        gamma: KInfFn::identity(),
        domain: Domain::All,
        policy,
    };
    Case {
        name: "chain",
        samples: (0..n).collect(),
        system: sys,
        uvc: None,
        ubgec,
        theta: 0.9,
    }
}

/// Looks up a real-vector case by name.
pub fn builtin(name: &str) -> Option<Case<BuiltinSystem>> {
    match name {
        "scalar_linear" => Some(scalar_linear()),
        "double_integrator" => Some(double_integrator()),
        "scalar_nonlinear" => Some(scalar_nonlinear()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::DEFAULT_SLACK;

    #[test]
    fn builtin_certificates_verify() {
        for name in BUILTIN_NAMES {
            let case = builtin(name).unwrap();
            let uvc = case.uvc.as_ref().unwrap();
            let rep = uvc.verify(&*case.system, &case.samples, 256, DEFAULT_SLACK).unwrap();
            assert!(rep.passed(), "{name}: {:?}", rep.first_violation());
            let rep = case
                .ubgec
                .verify(&*case.system, &case.samples, 256, DEFAULT_SLACK)
                .unwrap();
            assert!(rep.passed(), "{name}: {:?}", rep.first_violation());
        }
    }

    #[test]
    fn chain_certificate_verifies() {
        let case = chain(10);
        let rep = case
            .ubgec
            .verify(&*case.system, &case.samples, 64, DEFAULT_SLACK)
            .unwrap();
        assert!(rep.passed(), "{:?}", rep.first_violation());
    }

    #[test]
    fn deadbeat_reaches_zero() {
        let case = double_integrator();
        let x = vec![3.0, -1.5];
        let u = case.ubgec.policy.controls(&*case.system, &x, 3).unwrap();
        let traj = crate::system::rollout(&*case.system, &x, &u, 3).unwrap();
        assert!(case.system.sigma(&traj.states[2]) < 1e-12);
    }
}
