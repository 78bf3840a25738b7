//! Value iteration on small finite systems.
//!
//! Supplies optimal controls and UCC certificates that serve as ground
//! truth for the converse construction.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certificates::{CertError, Domain, PolicyOracle, UccCert};
use crate::cmpfn::{CmpError, Expr, KInfFn, GRID_SLACK};
use crate::report::fmt_num;
use crate::system::{BuiltinSystem, ControlSystem, Descriptor, Encoding, StageCost};

pub const MAX_STATES: usize = 10_000;
pub const MAX_INPUTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("invalid finite system: {0}")]
    InvalidSystem(String),
    #[error("value iteration did not converge: residual {residual} after {iterations} sweeps")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("state {state} has sigma = {sigma} but value {value}; no K-infinity bound exists")]
    Envelope { state: usize, sigma: f64, value: f64 },
    #[error(transparent)]
    Cert(#[from] CertError),
    #[error(transparent)]
    Cmp(#[from] CmpError),
}

/// Explicit finite system: `transitions[x][u]` is the successor of `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFinite", into = "RawFinite")]
pub struct FiniteSystem {
    transitions: Vec<Vec<usize>>,
    sigma: Vec<f64>,
    rho: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawFinite {
    transitions: Vec<Vec<usize>>,
    sigma: Vec<f64>,
    rho: Vec<f64>,
}

impl TryFrom<RawFinite> for FiniteSystem {
    type Error = OracleError;

    fn try_from(raw: RawFinite) -> Result<Self, OracleError> {
        FiniteSystem::new(raw.transitions, raw.sigma, raw.rho)
    }
}

impl From<FiniteSystem> for RawFinite {
    fn from(s: FiniteSystem) -> Self {
        RawFinite {
            transitions: s.transitions,
            sigma: s.sigma,
            rho: s.rho,
        }
    }
}

impl FiniteSystem {
    pub fn new(transitions: Vec<Vec<usize>>, sigma: Vec<f64>, rho: Vec<f64>) -> Result<Self, OracleError> {
        let bad = |m: String| Err(OracleError::InvalidSystem(m));
        let (n, m) = (transitions.len(), rho.len());
        if n == 0 || n > MAX_STATES {
            return bad(format!("state count {n} outside 1..={MAX_STATES}"));
        }
        if m == 0 || m > MAX_INPUTS {
            return bad(format!("input count {m} outside 1..={MAX_INPUTS}"));
        }
        if sigma.len() != n {
            return bad(format!("{} sigma values for {n} states", sigma.len()));
        }
        for (x, row) in transitions.iter().enumerate() {
            if row.len() != m {
                return bad(format!("state {x} has {} transitions, expected {m}", row.len()));
            }
            if let Some(&y) = row.iter().find(|&&y| y >= n) {
                return bad(format!("state {x} maps to unknown state {y}"));
            }
        }
        if sigma.iter().chain(&rho).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("measures must be finite and nonnegative".into());
        }
        if !sigma.contains(&0.0) {
            return bad("no target state with sigma = 0".into());
        }
        Ok(FiniteSystem {
            transitions,
            sigma,
            rho,
        })
    }

    /// States `0..n` with `sigma(i) = i`; input 0 stays (rho 0), input 1
    /// moves one state towards 0 (rho 1).
    pub fn chain(n: usize) -> Self {
        let transitions = (0..n).map(|i| vec![i, i.saturating_sub(1)]).collect();
        let sigma = (0..n).map(|i| i as f64).collect();
        FiniteSystem::new(transitions, sigma, vec![0.0, 1.0]).expect("chain is valid")
    }

    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.rho.len()
    }

    pub fn successor(&self, x: usize, u: usize) -> usize {
        self.transitions[x][u]
    }

    /// Samples a scalar built-in system on a uniform grid. Successors snap
    /// to the nearest grid point, clamped to the grid bounds.
    pub fn discretize(cfg: &Discretizer) -> Result<Self, OracleError> {
        let bad = |m: &str| Err(OracleError::InvalidSystem(m.into()));
        if !matches!(
            cfg.system,
            BuiltinSystem::ScalarLinear { .. } | BuiltinSystem::ScalarNonlinear
        ) {
            return bad("only scalar systems can be discretized");
        }
        if !(cfg.x_max > 0.0 && cfg.x_max.is_finite()) || cfg.half_states == 0 {
            return bad("grid needs x_max > 0 and at least one state per side");
        }
        if cfg.inputs.is_empty() || cfg.inputs.iter().any(|u| !u.is_finite()) {
            return bad("inputs must be a nonempty list of finite values");
        }
        let h = cfg.half_states as i64;
        let dx = cfg.x_max / h as f64;
        let xs: Vec<f64> = (-h..=h).map(|k| k as f64 * dx).collect();
        let index = |x: f64| ((x / dx).round().clamp(-h as f64, h as f64) as i64 + h) as usize;
        let transitions = xs
            .iter()
            .map(|&x| {
                cfg.inputs
                    .iter()
                    .map(|&u| index(cfg.system.step(&vec![x], &vec![u])[0]))
                    .collect()
            })
            .collect();
        let sigma = xs.iter().map(|x| x.abs()).collect();
        let rho = cfg.inputs.iter().map(|u| u.abs()).collect();
        FiniteSystem::new(transitions, sigma, rho)
    }
}

/// Uniform grid `{-x_max, ..., 0, ..., x_max}` with `2 half_states + 1`
/// points and a finite input list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub system: BuiltinSystem,
    pub x_max: f64,
    pub half_states: usize,
    pub inputs: Vec<f64>,
}

impl ControlSystem for FiniteSystem {
    type State = usize;
    type Input = usize;

    fn step(&self, x: &usize, u: &usize) -> usize {
        self.transitions[*x][*u]
    }

    fn sigma(&self, x: &usize) -> f64 {
        self.sigma[*x]
    }

    fn rho(&self, u: &usize) -> f64 {
        self.rho[*u]
    }

    fn descriptor(&self) -> Descriptor {
        Descriptor {
            state: Encoding::Finite {
                cardinality: self.n_states(),
            },
            input: Encoding::Finite {
                cardinality: self.n_inputs(),
            },
        }
    }

    fn is_valid_state(&self, x: &usize) -> bool {
        *x < self.n_states()
    }

    fn zero_input(&self) -> Option<usize> {
        self.rho.iter().position(|&r| r == 0.0)
    }

    fn probe_state(&self, sigma: f64) -> Option<usize> {
        self.sigma.iter().position(|&s| s == sigma)
    }

    fn enumerate_states(&self) -> Option<Vec<usize>> {
        Some((0..self.n_states()).collect())
    }

    fn enumerate_inputs(&self) -> Option<Vec<usize>> {
        Some((0..self.n_inputs()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViOptions {
    pub vi_tol: f64,
    pub max_iter: usize,
}

impl Default for ViOptions {
    fn default() -> Self {
        ViOptions {
            vi_tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

/// Optimal infinite-horizon cost and a greedy policy. `f64::INFINITY`
/// marks states from which no finite-cost control exists.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub v: Vec<f64>,
    pub policy: Vec<usize>,
    pub iterations: usize,
    pub residual: f64,
}

impl ValueTable {
    pub fn is_finite(&self, x: usize) -> bool {
        self.v[x].is_finite()
    }

    /// Writes `(state, sigma, value, policy)` rows; infinite values as `inf`.
    pub fn write_csv<W: Write>(&self, sys: &FiniteSystem, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "sigma", "value", "policy"])?;
        for (x, (&v, &u)) in self.v.iter().zip(&self.policy).enumerate() {
            let value = if v.is_finite() { fmt_num(v) } else { "inf".into() };
            w.write_record([x.to_string(), fmt_num(sys.sigma[x]), value, u.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn stage_table(sys: &FiniteSystem, ell: &StageCost<FiniteSystem>) -> Vec<Vec<f64>> {
    (0..sys.n_states())
        .map(|x| (0..sys.n_inputs()).map(|u| ell.eval(sys, &x, &u)).collect())
        .collect()
}

/// States from which some control keeps the stage cost at zero forever,
/// and the states that can reach them.
fn finite_cost_states(sys: &FiniteSystem, cost: &[Vec<f64>]) -> Vec<bool> {
    let n = sys.n_states();
    // greatest fixed point of Z = {x : exists u, l(x,u) = 0, f(x,u) in Z}
    let mut zero = vec![true; n];
    loop {
        let next: Vec<bool> = (0..n)
            .map(|x| zero[x] && (0..sys.n_inputs()).any(|u| cost[x][u] == 0.0 && zero[sys.successor(x, u)]))
            .collect();
        if next == zero {
            break;
        }
        zero = next;
    }
    // backward reachability of Z
    let mut reach = zero;
    loop {
        let next: Vec<bool> = (0..n)
            .map(|x| reach[x] || (0..sys.n_inputs()).any(|u| reach[sys.successor(x, u)]))
            .collect();
        if next == reach {
            return reach;
        }
        reach = next;
    }
}

/// Jacobi value iteration from `V = 0`.
///
/// A finite-cost infinite trajectory eventually uses only zero-cost
/// transitions, so `V(x)` is finite exactly when `x` can reach the set on
/// which zero cost can be sustained. Other states are marked infinite up
/// front; the divergence cap guards the iteration as well.
pub fn value_iterate(
    sys: &FiniteSystem,
    ell: &StageCost<FiniteSystem>,
    opts: ViOptions,
) -> Result<ValueTable, OracleError> {
    let cost = stage_table(sys, ell);
    let finite = finite_cost_states(sys, &cost);
    let max_cost = cost.iter().flatten().copied().fold(0.0, f64::max);
    let cap = 1e6 * max_cost.max(f64::MIN_POSITIVE);
    let n = sys.n_states();
    let mut v: Vec<f64> = finite.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();

    let sweep = |v: &[f64]| -> Vec<(f64, usize)> {
        (0..n)
            .into_par_iter()
            .map(|x| {
                if v[x].is_infinite() {
                    return (f64::INFINITY, 0);
                }
                let mut best = (f64::INFINITY, 0);
                for (u, c) in cost[x].iter().enumerate() {
                    let q = c + v[sys.successor(x, u)];
                    if q < best.0 {
                        best = (q, u);
                    }
                }
                best
            })
            .collect()
    };

    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let next = sweep(&v);
        residual = 0.0;
        for (x, (q, _)) in next.iter().enumerate() {
            if v[x].is_finite() {
                let q = if *q > cap { f64::INFINITY } else { *q };
                if q.is_finite() {
                    residual = f64::max(residual, (q - v[x]).abs());
                }
                v[x] = q;
            }
        }
        if residual <= opts.vi_tol {
            break;
        }
    }
    if residual > opts.vi_tol {
        return Err(OracleError::NonConvergence { iterations, residual });
    }
    let policy = sweep(&v).into_iter().map(|(_, u)| u).collect();
    Ok(ValueTable {
        v,
        policy,
        iterations,
        residual,
    })
}

/// Cost of following a stationary policy from `x` forever. The path is
/// eventually periodic; a cycle of positive cost gives infinity.
pub fn policy_cost(sys: &FiniteSystem, ell: &StageCost<FiniteSystem>, policy: &[usize], x: usize) -> f64 {
    let mut seen: HashMap<usize, f64> = HashMap::new();
    let (mut x, mut acc) = (x, 0.0);
    loop {
        if let Some(&before) = seen.get(&x) {
            return if acc > before { f64::INFINITY } else { acc };
        }
        seen.insert(x, acc);
        let u = policy[x];
        acc += ell.eval(sys, &x, &u);
        x = sys.successor(x, u);
    }
}

/// UCC certificate from a value table: `alpha_bar` is the running-max
/// envelope of `margin V(x)` over the states sorted by `sigma`, plus a
/// small linear term; the domain is the set of finite-value states, which
/// the greedy policy keeps invariant.
pub fn extract_ucc(
    vt: &ValueTable,
    sys: &FiniteSystem,
    ell: &StageCost<FiniteSystem>,
    margin: f64,
) -> Result<UccCert<FiniteSystem>, OracleError> {
    if !(margin >= 1.0 && margin.is_finite()) {
        return Err(CmpError::Parameter(format!("margin must be at least 1, got {margin}")).into());
    }
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for x in 0..sys.n_states() {
        let value = vt.v[x];
        if !value.is_finite() {
            continue;
        }
        let sigma = sys.sigma[x];
        if sigma == 0.0 {
            if value > 0.0 {
                return Err(OracleError::Envelope { state: x, sigma, value });
            }
            continue;
        }
        pts.push((sigma, margin * value));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = vec![[0.0, 0.0]];
    for (sigma, value) in pts {
        let last = points.last_mut().expect("nonempty");
        if last[0] == sigma {
            // equal sigma: the level set takes the max value
            last[1] = last[1].max(value);
        } else {
            let running = last[1].max(value);
            points.push([sigma, running]);
        }
    }
    if points.len() < 2 {
        points.push([1.0, 0.0]);
    }
    let alpha_bar = KInfFn::new(Expr::sum(Expr::table(points), Expr::linear(GRID_SLACK)))?;

    let policy_table = vt.policy.clone();
    let policy = PolicyOracle::feedback("greedy", Arc::new(sys.clone()), move |x: &usize| policy_table[*x]);
    let finite: Vec<bool> = vt.v.iter().map(|v| v.is_finite()).collect();
    let domain = Domain::predicate("finite value", move |x: &usize| {
        finite.get(*x).copied().unwrap_or(false)
    });
    Ok(UccCert {
        ell: ell.clone(),
        alpha_bar,
        domain,
        policy,
        invariant: true,
    })
}
