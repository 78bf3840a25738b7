//! Discrete-time control systems `x+ = f(x, u)` with state and control
//! measures, trajectory rollout, stage costs and total costs.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmpfn::{KInfFn, NonnegFn};
use crate::report::fmt_num;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("input sequence has {got} entries, {needed} required")]
    ShortInput { needed: usize, got: usize },
    #[error("transition produced an invalid state at step {step}")]
    InvalidState { step: usize },
    #[error("invalid initial state")]
    InvalidInitialState,
}

/// How states or inputs are encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "snake_case")]
pub enum Encoding {
    Vector { dim: usize },
    Finite { cardinality: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub state: Encoding,
    pub input: Encoding,
}

pub trait ControlSystem: Send + Sync {
    type State: Clone + fmt::Debug + Send + Sync;
    type Input: Clone + fmt::Debug + Send + Sync;

    fn step(&self, x: &Self::State, u: &Self::Input) -> Self::State;
    /// State measure.
    fn sigma(&self, x: &Self::State) -> f64;
    /// Control measure.
    fn rho(&self, u: &Self::Input) -> f64;
    fn descriptor(&self) -> Descriptor;

    /// Whether `x` is a well-formed encoding (e.g. all components finite).
    fn is_valid_state(&self, _x: &Self::State) -> bool {
        true
    }

    fn zero_input(&self) -> Option<Self::Input> {
        None
    }

    /// Some state with the given measure, used to build sample sets.
    fn probe_state(&self, _sigma: f64) -> Option<Self::State> {
        None
    }

    /// Some input with the given measure.
    fn probe_input(&self, _rho: f64) -> Option<Self::Input> {
        None
    }

    /// All states, for finite systems.
    fn enumerate_states(&self) -> Option<Vec<Self::State>> {
        None
    }

    /// All inputs, for finite systems.
    fn enumerate_inputs(&self) -> Option<Vec<Self::Input>> {
        None
    }
}

impl<S: ControlSystem + ?Sized> ControlSystem for Arc<S> {
    type State = S::State;
    type Input = S::Input;

    fn step(&self, x: &Self::State, u: &Self::Input) -> Self::State {
        (**self).step(x, u)
    }
    fn sigma(&self, x: &Self::State) -> f64 {
        (**self).sigma(x)
    }
    fn rho(&self, u: &Self::Input) -> f64 {
        (**self).rho(u)
    }
    fn descriptor(&self) -> Descriptor {
        (**self).descriptor()
    }
    fn is_valid_state(&self, x: &Self::State) -> bool {
        (**self).is_valid_state(x)
    }
    fn zero_input(&self) -> Option<Self::Input> {
        (**self).zero_input()
    }
    fn probe_state(&self, sigma: f64) -> Option<Self::State> {
        (**self).probe_state(sigma)
    }
    fn probe_input(&self, rho: f64) -> Option<Self::Input> {
        (**self).probe_input(rho)
    }
    fn enumerate_states(&self) -> Option<Vec<Self::State>> {
        (**self).enumerate_states()
    }
    fn enumerate_inputs(&self) -> Option<Vec<Self::Input>> {
        (**self).enumerate_inputs()
    }
}

/// Real-vector example systems. Both measures are Euclidean norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BuiltinSystem {
    /// `x+ = a x + b u`
    ScalarLinear { a: f64, b: f64 },
    /// `x+ = A x + B u` with a two-dimensional state and scalar input.
    Linear2 { a: [[f64; 2]; 2], b: [f64; 2] },
    /// `x+ = x / (1 + x^2) + u`
    ScalarNonlinear,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

impl BuiltinSystem {
    pub fn scalar_linear(a: f64, b: f64) -> Self {
        BuiltinSystem::ScalarLinear { a, b }
    }

    /// Double integrator `[[1, 1], [0, 1]]`, `[0, 1]`.
    pub fn double_integrator() -> Self {
        BuiltinSystem::Linear2 {
            a: [[1.0, 1.0], [0.0, 1.0]],
            b: [0.0, 1.0],
        }
    }

    fn state_dim(&self) -> usize {
        match self {
            BuiltinSystem::Linear2 { .. } => 2,
            _ => 1,
        }
    }
}

impl ControlSystem for BuiltinSystem {
    type State = Vec<f64>;
    type Input = Vec<f64>;

    fn step(&self, x: &Vec<f64>, u: &Vec<f64>) -> Vec<f64> {
        match self {
            BuiltinSystem::ScalarLinear { a, b } => vec![a * x[0] + b * u[0]],
            BuiltinSystem::Linear2 { a, b } => vec![
                a[0][0] * x[0] + a[0][1] * x[1] + b[0] * u[0],
                a[1][0] * x[0] + a[1][1] * x[1] + b[1] * u[0],
            ],
            BuiltinSystem::ScalarNonlinear => vec![x[0] / (1.0 + x[0] * x[0]) + u[0]],
        }
    }

    fn sigma(&self, x: &Vec<f64>) -> f64 {
        norm(x)
    }

    fn rho(&self, u: &Vec<f64>) -> f64 {
        norm(u)
    }

    fn descriptor(&self) -> Descriptor {
        Descriptor {
            state: Encoding::Vector { dim: self.state_dim() },
            input: Encoding::Vector { dim: 1 },
        }
    }

    fn is_valid_state(&self, x: &Vec<f64>) -> bool {
        x.len() == self.state_dim() && x.iter().all(|c| c.is_finite())
    }

    fn zero_input(&self) -> Option<Vec<f64>> {
        Some(vec![0.0])
    }

    fn probe_state(&self, sigma: f64) -> Option<Vec<f64>> {
        let mut x = vec![0.0; self.state_dim()];
        x[0] = sigma;
        Some(x)
    }

    fn probe_input(&self, rho: f64) -> Option<Vec<f64>> {
        Some(vec![rho])
    }
}

/// States `phi(0..=N)` and the inputs that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<X, U> {
    pub states: Vec<X>,
    pub inputs: Vec<U>,
}

impl<X, U> Trajectory<X, U> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn last_state(&self) -> &X {
        self.states
            .last()
            .expect("a trajectory holds at least its initial state")
    }
}

impl<X: PartialEq, U> Trajectory<X, U> {
    /// Re-simulates every transition and compares states exactly.
    pub fn replays<S>(&self, sys: &S) -> bool
    where
        S: ControlSystem<State = X, Input = U>,
    {
        self.states.len() == self.inputs.len() + 1
            && self
                .inputs
                .iter()
                .enumerate()
                .all(|(n, u)| sys.step(&self.states[n], u) == self.states[n + 1])
    }
}

/// Simulates `n` steps from `x0` under the first `n` entries of `u`.
pub fn rollout<S: ControlSystem>(
    sys: &S,
    x0: &S::State,
    u: &[S::Input],
    n: usize,
) -> Result<Trajectory<S::State, S::Input>, SimError> {
    if u.len() < n {
        return Err(SimError::ShortInput {
            needed: n,
            got: u.len(),
        });
    }
    if !sys.is_valid_state(x0) {
        return Err(SimError::InvalidInitialState);
    }
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.clone());
    for (k, uk) in u[..n].iter().enumerate() {
        let next = sys.step(&states[k], uk);
        if !sys.is_valid_state(&next) {
            return Err(SimError::InvalidState { step: k });
        }
        states.push(next);
    }
    Ok(Trajectory {
        states,
        inputs: u[..n].to_vec(),
    })
}

/// Interaction term of a stage cost written in the measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureTerm {
    /// `state(sigma) * input(rho)`
    Product { state: KInfFn, input: KInfFn },
    /// `outer(state(sigma) + input(rho))`
    Additive {
        outer: KInfFn,
        state: KInfFn,
        input: KInfFn,
    },
    /// `state(sigma) + input(rho)`
    Separate { state: NonnegFn, input: NonnegFn },
}

impl MeasureTerm {
    pub fn value(&self, sigma: f64, rho: f64) -> f64 {
        match self {
            MeasureTerm::Product { state, input } => {
                let a = state.value(sigma);
                if a == 0.0 {
                    0.0
                } else {
                    a * input.value(rho)
                }
            }
            MeasureTerm::Additive { outer, state, input } => outer.value(state.value(sigma) + input.value(rho)),
            MeasureTerm::Separate { state, input } => state.value(sigma) + input.value(rho),
        }
    }
}

type StateInputFn<S> = Arc<dyn Fn(&<S as ControlSystem>::State, &<S as ControlSystem>::Input) -> f64 + Send + Sync>;

/// Nonnegative interaction term `s(x, u)`.
pub enum Interaction<S: ControlSystem> {
    Measure(MeasureTerm),
    /// An opaque map on state-input pairs.
    Custom {
        name: String,
        f: StateInputFn<S>,
    },
}

impl<S: ControlSystem> Clone for Interaction<S> {
    fn clone(&self) -> Self {
        match self {
            Interaction::Measure(m) => Interaction::Measure(m.clone()),
            Interaction::Custom { name, f } => Interaction::Custom {
                name: name.clone(),
                f: Arc::clone(f),
            },
        }
    }
}

impl<S: ControlSystem> fmt::Debug for Interaction<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interaction::Measure(m) => f.debug_tuple("Measure").field(m).finish(),
            Interaction::Custom { name, .. } => f.debug_struct("Custom").field("name", name).finish(),
        }
    }
}

impl<S: ControlSystem> Interaction<S> {
    pub fn custom(name: impl Into<String>, f: impl Fn(&S::State, &S::Input) -> f64 + Send + Sync + 'static) -> Self {
        Interaction::Custom {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn value(&self, sys: &S, x: &S::State, u: &S::Input) -> f64 {
        match self {
            Interaction::Measure(m) => m.value(sys.sigma(x), sys.rho(u)),
            Interaction::Custom { f, .. } => f(x, u),
        }
    }
}

/// `l(x, u) = q(sigma(x)) + r(rho(u)) + s(x, u)`
pub struct StageCost<S: ControlSystem> {
    pub q: KInfFn,
    pub r: NonnegFn,
    pub s: Option<Interaction<S>>,
}

impl<S: ControlSystem> Clone for StageCost<S> {
    fn clone(&self) -> Self {
        StageCost {
            q: self.q.clone(),
            r: self.r.clone(),
            s: self.s.clone(),
        }
    }
}

impl<S: ControlSystem> fmt::Debug for StageCost<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageCost")
            .field("q", &self.q)
            .field("r", &self.r)
            .field("s", &self.s)
            .finish()
    }
}

/// Serializable form of a stage cost whose interaction is written in the
/// measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCostSpec {
    pub q: KInfFn,
    pub r: NonnegFn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<MeasureTerm>,
}

impl<S: ControlSystem> From<StageCostSpec> for StageCost<S> {
    fn from(spec: StageCostSpec) -> Self {
        StageCost {
            q: spec.q,
            r: spec.r,
            s: spec.s.map(Interaction::Measure),
        }
    }
}

impl<S: ControlSystem> StageCost<S> {
    pub fn new(q: KInfFn, r: NonnegFn) -> Self {
        StageCost { q, r, s: None }
    }

    pub fn with_interaction(mut self, s: Interaction<S>) -> Self {
        self.s = Some(s);
        self
    }

    pub fn eval(&self, sys: &S, x: &S::State, u: &S::Input) -> f64 {
        let base = self.q.value(sys.sigma(x)) + self.r.value(sys.rho(u));
        match &self.s {
            Some(s) => base + s.value(sys, x, u),
            None => base,
        }
    }

    /// Lower bound `q(sigma(x))`, which is K-infinity in the state measure.
    pub fn lower_bound(&self, sigma: f64) -> f64 {
        self.q.value(sigma)
    }

    /// Serializable form, unless the interaction is an opaque map.
    pub fn to_spec(&self) -> Option<StageCostSpec> {
        let s = match &self.s {
            None => None,
            Some(Interaction::Measure(m)) => Some(m.clone()),
            Some(Interaction::Custom { .. }) => return None,
        };
        Some(StageCostSpec {
            q: self.q.clone(),
            r: self.r.clone(),
            s,
        })
    }
}

/// Horizon for [`total_cost`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Finite(usize),
    /// Partial sums up to `n_max` terms; converged once the sum changed by
    /// less than `tol` over the last quarter of the steps taken.
    Infinite {
        n_max: usize,
        tol: f64,
    },
}

impl Horizon {
    pub fn infinite() -> Self {
        Horizon::Infinite {
            n_max: 2048,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostSummary {
    pub value: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Cumulative costs `J_1, ..., J_n` along the trajectory.
pub fn cumulative_costs<S: ControlSystem>(
    sys: &S,
    ell: &StageCost<S>,
    x0: &S::State,
    u: &[S::Input],
    n: usize,
) -> Result<Vec<f64>, SimError> {
    let traj = rollout(sys, x0, u, n)?;
    let mut acc = 0.0;
    Ok(traj
        .inputs
        .iter()
        .zip(&traj.states)
        .map(|(uk, xk)| {
            acc += ell.eval(sys, xk, uk);
            acc
        })
        .collect())
}

/// `J_N(x0, u | l)`, or its infinite-horizon proxy.
pub fn total_cost<S: ControlSystem>(
    sys: &S,
    ell: &StageCost<S>,
    x0: &S::State,
    u: &[S::Input],
    horizon: Horizon,
) -> Result<CostSummary, SimError> {
    match horizon {
        Horizon::Finite(n) => {
            let sums = cumulative_costs(sys, ell, x0, u, n)?;
            Ok(CostSummary {
                value: sums.last().copied().unwrap_or(0.0),
                steps: n,
                converged: true,
            })
        }
        Horizon::Infinite { n_max, tol } => {
            let n = n_max.min(u.len());
            if !sys.is_valid_state(x0) {
                return Err(SimError::InvalidInitialState);
            }
            let mut sums = Vec::with_capacity(n);
            let mut x = x0.clone();
            let mut acc = 0.0;
            for (k, uk) in u[..n].iter().enumerate() {
                acc += ell.eval(sys, &x, uk);
                sums.push(acc);
                let steps = k + 1;
                if steps >= 8 {
                    let quarter = steps - steps / 4;
                    if acc - sums[quarter - 1] < tol {
                        return Ok(CostSummary {
                            value: acc,
                            steps,
                            converged: true,
                        });
                    }
                }
                x = sys.step(&x, uk);
                if !sys.is_valid_state(&x) {
                    return Err(SimError::InvalidState { step: k });
                }
            }
            Ok(CostSummary {
                value: acc,
                steps: n,
                converged: false,
            })
        }
    }
}

/// Writes `(n, sigma, rho, stage_cost, cumulative_cost)` rows as CSV.
pub fn write_trajectory_csv<S: ControlSystem, W: Write>(
    sys: &S,
    ell: &StageCost<S>,
    traj: &Trajectory<S::State, S::Input>,
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "sigma", "rho", "stage_cost", "cumulative_cost"])?;
    let mut acc = 0.0;
    for (n, (x, u)) in traj.states.iter().zip(&traj.inputs).enumerate() {
        let stage = ell.eval(sys, x, u);
        acc += stage;
        w.write_record([
            n.to_string(),
            fmt_num(sys.sigma(x)),
            fmt_num(sys.rho(u)),
            fmt_num(stage),
            fmt_num(acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmpfn::{Expr, KInfFn};

    fn half() -> BuiltinSystem {
        BuiltinSystem::scalar_linear(0.5, 1.0)
    }

    fn squares() -> StageCost<BuiltinSystem> {
        StageCost::new(KInfFn::power(2.0).unwrap(), NonnegFn::new(Expr::power(2.0)).unwrap())
    }

    fn zeros(n: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0]; n]
    }

    #[test]
    fn rollout_geometric_decay() {
        let t = rollout(&half(), &vec![1.0], &zeros(3), 3).unwrap();
        let xs: Vec<f64> = t.states.iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![1.0, 0.5, 0.25, 0.125]);
        assert!(t.replays(&half()));
    }

    #[test]
    fn rollout_zero_steps() {
        let t = rollout(&half(), &vec![3.0], &[], 0).unwrap();
        assert_eq!(t.states, vec![vec![3.0]]);
        assert!(t.is_empty());
    }

    #[test]
    fn rollout_hand_replay() {
        let u = vec![vec![1.0], vec![0.0]];
        let t = rollout(&half(), &vec![0.0], &u, 2).unwrap();
        let xs: Vec<f64> = t.states.iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn rollout_errors() {
        assert_eq!(
            rollout(&half(), &vec![1.0], &zeros(1), 2).unwrap_err(),
            SimError::ShortInput { needed: 2, got: 1 }
        );
        let blowup = BuiltinSystem::scalar_linear(1e300, 1.0);
        assert_eq!(
            rollout(&blowup, &vec![1e10], &zeros(4), 4).unwrap_err(),
            SimError::InvalidState { step: 0 }
        );
    }

    #[test]
    fn total_cost_examples() {
        let c = total_cost(&half(), &squares(), &vec![1.0], &zeros(2), Horizon::Finite(2)).unwrap();
        assert_eq!(c.value, 1.25);
        let c = total_cost(&half(), &squares(), &vec![1.0], &zeros(2), Horizon::Finite(0)).unwrap();
        assert_eq!(c.value, 0.0);
        let c = total_cost(&half(), &squares(), &vec![1.0], &zeros(2048), Horizon::infinite()).unwrap();
        assert!(c.converged);
        assert!((c.value - 4.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn infinite_proxy_reports_divergence() {
        let unstable = BuiltinSystem::scalar_linear(1.0, 1.0);
        let c = total_cost(&unstable, &squares(), &vec![1.0], &zeros(100), Horizon::infinite()).unwrap();
        assert!(!c.converged);
        assert_eq!(c.steps, 100);
        assert_eq!(c.value, 100.0);
    }

    #[test]
    fn interaction_terms_add_to_stage_cost() {
        let ell = squares().with_interaction(Interaction::Measure(MeasureTerm::Product {
            state: KInfFn::identity(),
            input: KInfFn::identity(),
        }));
        assert_eq!(ell.eval(&half(), &vec![2.0], &vec![3.0]), 4.0 + 9.0 + 6.0);
        let custom = squares().with_interaction(Interaction::custom("x*u", |x: &Vec<f64>, u: &Vec<f64>| {
            (x[0] * u[0]).abs()
        }));
        assert_eq!(custom.eval(&half(), &vec![-2.0], &vec![3.0]), 19.0);
        assert!(custom.to_spec().is_none());
        assert!(ell.to_spec().is_some());
    }

    #[test]
    fn double_integrator_step() {
        let s = BuiltinSystem::double_integrator();
        assert_eq!(s.step(&vec![1.0, 2.0], &vec![-1.0]), vec![3.0, 1.0]);
        assert_eq!(s.sigma(&vec![3.0, 4.0]), 5.0);
    }

    #[test]
    fn trajectory_csv_columns() {
        let t = rollout(&half(), &vec![1.0], &zeros(2), 2).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&half(), &squares(), &t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "n,sigma,rho,stage_cost,cumulative_cost");
        assert_eq!(
            lines.next().unwrap(),
            "0,1.0000000000000000e0,0.0000000000000000e0,1.0000000000000000e0,1.0000000000000000e0"
        );
        assert!(lines.next().unwrap().ends_with("1.2500000000000000e0"));
    }
}
