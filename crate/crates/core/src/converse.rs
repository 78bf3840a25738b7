//! From uniform cost controllability back to bounded-energy asymptotic
//! controllability.
//!
//! Given a UCC certificate whose policy keeps trajectories in the domain,
//! the construction proceeds in five steps:
//!
//! 1. `gamma_sigma = q^{-1} ∘ alpha_bar` bounds the state measure along
//!    every certified control.
//! 2. For `R, eps`, a control that reaches `sigma < eps` within
//!    `N(R, eps)` steps is stitched from two certified controls, at cost
//!    `alpha_tilde = alpha_bar + alpha_bar ∘ gamma_sigma`.
//! 3. Chaining step 2 along a decreasing schedule `eps_tilde_m` gives one
//!    control that enters `sigma < eps_m` after `M_m` steps, at cost
//!    `alpha_hat = alpha_tilde + alpha_bar`.
//! 4. `eta = r` and `gamma = alpha_hat`.
//! 5. `nu_R(eps) = (2/eps) ∫_{eps/2}^{eps} N_R + R/eps` is inverted to a
//!    decay rate and assembled into a sampled KL bound.
//!
//! The schedule is computed to a finite depth; past it the KL bound is
//! extrapolated geometrically. Controls are generated lazily, so step
//! counts far beyond a verification horizon are never rolled out.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certificates::{CertError, PolicyOracle, TailRule, UbgecCert, UccCert};
use crate::cmpfn::{log_grid, CmpError, KInfFn, KLFn, SampledKL};
use crate::report::{fmt_num, Inequality, VerificationReport};
use crate::system::{rollout, ControlSystem};

/// Size of the vanishing term that makes the assembled bound strictly
/// decreasing in time.
const VANISHING: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConverseError {
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("step budget exceeded at m = {m}: ratio {ratio} for R = {r}, eps = {eps}")]
    Budget { m: usize, r: f64, eps: f64, ratio: f64 },
    #[error("no step n <= {n_bound} reaches the threshold from sigma = {sigma}; the UCC certificate is invalid")]
    NoReturn { sigma: f64, n_bound: u64 },
    #[error("KL assembly failed: {0}")]
    Construction(String),
    #[error("step {step}: {source}")]
    InStep { step: u8, source: Box<ConverseError> },
    #[error(transparent)]
    Cert(#[from] CertError),
    #[error(transparent)]
    Cmp(#[from] CmpError),
}

impl ConverseError {
    fn in_step(self, step: u8) -> Self {
        match self {
            e @ ConverseError::InStep { .. } => e,
            e => ConverseError::InStep {
                step,
                source: Box::new(e),
            },
        }
    }
}

/// Decreasing sequence `eps_m` in `(0, 1]` tending to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsRule {
    /// `1 / m`
    Harmonic,
    /// `ratio^(m - 1)`
    Geometric { ratio: f64 },
}

impl EpsRule {
    pub fn eps(&self, m: usize) -> f64 {
        match self {
            EpsRule::Harmonic => 1.0 / m as f64,
            EpsRule::Geometric { ratio } => ratio.powi(m as i32 - 1),
        }
    }

    fn validate(&self) -> Result<(), ConverseError> {
        match self {
            EpsRule::Harmonic => Ok(()),
            EpsRule::Geometric { ratio } if *ratio > 0.0 && *ratio < 1.0 => Ok(()),
            EpsRule::Geometric { ratio } => Err(ConverseError::Precondition(format!(
                "geometric ratio must lie in (0, 1), got {ratio}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConverseConfig {
    /// `eps_tilde = factor * eps` in step 2.
    pub eps_tilde_factor: f64,
    /// Depth of the step 3 schedule.
    pub m_max: usize,
    /// Schedule `eps_m = R * rule(m)`.
    pub eps_rule: EpsRule,
    /// Largest admissible `N(R, eps)`.
    pub step_cap: f64,
    /// Radii of the KL grid; sample measures are added.
    pub r_min: f64,
    pub r_max: f64,
    pub r_points: usize,
    /// Growth factor of the time grid past `t = 64`.
    pub t_growth: f64,
    pub horizon: usize,
    pub slack: f64,
}

impl Default for ConverseConfig {
    fn default() -> Self {
        ConverseConfig {
            eps_tilde_factor: 0.5,
            m_max: 16,
            eps_rule: EpsRule::Harmonic,
            step_cap: 1e9,
            r_min: 1e-3,
            r_max: 1e2,
            r_points: 33,
            t_growth: 1.25,
            horizon: 4096,
            slack: crate::certificates::DEFAULT_SLACK,
        }
    }
}

impl ConverseConfig {
    fn validate(&self) -> Result<(), ConverseError> {
        let bad = |m: String| Err(ConverseError::Precondition(m));
        if !(self.eps_tilde_factor > 0.0 && self.eps_tilde_factor < 1.0) {
            return bad(format!(
                "eps_tilde_factor must lie in (0, 1), got {}",
                self.eps_tilde_factor
            ));
        }
        if self.m_max == 0 {
            return bad("m_max must be positive".into());
        }
        if !(self.r_min > 0.0 && self.r_max > self.r_min && self.r_points >= 2) {
            return bad("radius grid needs 0 < r_min < r_max and two points".into());
        }
        if !(self.t_growth > 1.0) {
            return bad(format!("t_growth must exceed 1, got {}", self.t_growth));
        }
        self.eps_rule.validate()
    }
}

/// `gamma_sigma = q^{-1} ∘ alpha_bar`
pub fn gamma_sigma<S: ControlSystem>(ucc: &UccCert<S>) -> KInfFn {
    ucc.ell.q.inverse().compose(&ucc.alpha_bar)
}

/// `alpha_tilde = alpha_bar + alpha_bar ∘ gamma_sigma`
pub fn alpha_tilde<S: ControlSystem>(ucc: &UccCert<S>) -> KInfFn {
    ucc.alpha_bar.add(&ucc.alpha_bar.compose(&gamma_sigma(ucc)))
}

/// `alpha_hat = alpha_tilde + alpha_bar`
pub fn alpha_hat<S: ControlSystem>(ucc: &UccCert<S>) -> KInfFn {
    alpha_tilde(ucc).add(&ucc.alpha_bar)
}

/// Smallest positive integer `N >= alpha_bar(R) / q(gamma_sigma^{-1}(eps_tilde)) - 1`.
///
/// A relative tolerance of `1e-12` absorbs rounding in the ratio, so that
/// a ratio that is integral in exact arithmetic is not rounded up.
pub fn step2_n_tilde<S: ControlSystem>(
    ucc: &UccCert<S>,
    r: f64,
    eps_tilde: f64,
    step_cap: f64,
) -> Result<u64, ConverseError> {
    if !(r > 0.0 && eps_tilde > 0.0) {
        return Err(ConverseError::Precondition(format!(
            "R and eps must be positive, got {r}, {eps_tilde}"
        )));
    }
    let threshold = gamma_sigma(ucc).invert(eps_tilde)?;
    let ratio = ucc.alpha_bar.value(r) / ucc.ell.q.value(threshold);
    if !(ratio <= step_cap) {
        return Err(ConverseError::Budget {
            m: 0,
            r,
            eps: eps_tilde,
            ratio,
        });
    }
    let n = (ratio - 1.0 - 1e-12 * ratio).ceil();
    Ok(n.max(1.0) as u64)
}

/// `N(R, eps)` with `eps_tilde = factor * eps`.
pub fn step2_n<S: ControlSystem>(
    ucc: &UccCert<S>,
    r: f64,
    eps: f64,
    factor: f64,
    step_cap: f64,
) -> Result<u64, ConverseError> {
    step2_n_tilde(ucc, r, factor * eps, step_cap)
}

/// A stitched control and the facts established while building it.
#[derive(Clone, Debug, PartialEq)]
pub struct Stitched<U> {
    pub controls: Vec<U>,
    /// First step at which the certified control reached the threshold.
    pub n_q: Option<u64>,
    pub n_bound: u64,
}

fn base_controls<S: ControlSystem>(
    ucc: &UccCert<S>,
    sys: &S,
    x: &S::State,
    len: usize,
) -> Result<Vec<S::Input>, CertError> {
    ucc.policy.controls(sys, x, len)
}

/// Follows the certified control from `x` until `sigma <= threshold`
/// (at most `n_bound` steps), then restarts the certified control there.
/// Produces `len` controls; `len` may be below `n_bound`, in which case
/// the scan stops early.
fn stitch_segment<S: ControlSystem>(
    ucc: &UccCert<S>,
    sys: &S,
    x: &S::State,
    threshold: f64,
    n_bound: u64,
    len: usize,
) -> Result<Stitched<S::Input>, ConverseError> {
    let q_thr = ucc.ell.q.value(threshold);
    let reached = |s: &S::State| ucc.ell.q.value(sys.sigma(s)) <= q_thr;
    let scan_to = (n_bound as usize).min(len);
    // chunked scan: the certified control is regenerated with doubling length
    let mut chunk = 64usize.min(scan_to.max(1));
    let (n_q, u1, state_q) = loop {
        let u1 = base_controls(ucc, sys, x, chunk)?;
        let traj = rollout(sys, x, &u1, chunk).map_err(CertError::from)?;
        if let Some(k) = traj.states.iter().position(reached) {
            break (Some(k), u1, Some(traj.states[k].clone()));
        }
        if chunk >= scan_to {
            break (None, u1, None);
        }
        chunk = (chunk * 2).min(scan_to);
    };
    let controls = match (n_q, state_q) {
        (Some(k), Some(xq)) => {
            let mut c = u1[..k.min(len)].to_vec();
            if len > k {
                c.extend(base_controls(ucc, sys, &xq, len - k)?);
            }
            c
        }
        _ => {
            if (len as u64) >= n_bound {
                return Err(ConverseError::NoReturn {
                    sigma: sys.sigma(x),
                    n_bound,
                });
            }
            let mut c = u1;
            c.truncate(len);
            c
        }
    };
    Ok(Stitched {
        controls,
        n_q: n_q.map(|k| k as u64),
        n_bound,
    })
}

/// Step 2 control `u(x, eps)` for `sigma(x) <= R`, truncated to `len`.
pub fn step2_stitch<S: ControlSystem>(
    ucc: &UccCert<S>,
    sys: &S,
    x: &S::State,
    r: f64,
    eps: f64,
    cfg: &ConverseConfig,
    len: usize,
) -> Result<Stitched<S::Input>, ConverseError> {
    let n_bound = step2_n(ucc, r, eps, cfg.eps_tilde_factor, cfg.step_cap)?;
    let threshold = gamma_sigma(ucc).invert(cfg.eps_tilde_factor * eps)?;
    stitch_segment(ucc, sys, x, threshold, n_bound, len)
}

/// Step 3 schedule for one radius `R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub r: f64,
    pub eps: Vec<f64>,
    pub eps_tilde: Vec<f64>,
    /// `N(R, eps_tilde_m)`
    pub n: Vec<u64>,
    /// `M_m = sum_{k <= m} N(R, eps_tilde_k)`
    pub m: Vec<u64>,
}

/// `eps_tilde_m = min{alpha_tilde^{-1}(q(eps_m)), alpha_tilde^{-1}(2^{-m} alpha_bar(R)), R}`
/// and the cumulative step counts.
pub fn step3_schedule<S: ControlSystem>(
    ucc: &UccCert<S>,
    r: f64,
    cfg: &ConverseConfig,
) -> Result<Schedule, ConverseError> {
    cfg.validate()?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(ConverseError::Precondition(format!("R must be positive, got {r}")));
    }
    let at = alpha_tilde(ucc);
    let abar_r = ucc.alpha_bar.value(r);
    let mut s = Schedule {
        r,
        eps: Vec::with_capacity(cfg.m_max),
        eps_tilde: Vec::with_capacity(cfg.m_max),
        n: Vec::with_capacity(cfg.m_max),
        m: Vec::with_capacity(cfg.m_max),
    };
    let mut total = 0u64;
    for m in 1..=cfg.m_max {
        let eps = r * cfg.eps_rule.eps(m);
        let a = at.invert(ucc.ell.q.value(eps))?;
        let b = at.invert(abar_r * 0.5f64.powi(m as i32))?;
        let et = a.min(b).min(r);
        let n = step2_n(ucc, r, et, cfg.eps_tilde_factor, cfg.step_cap).map_err(|e| match e {
            ConverseError::Budget { r, eps, ratio, .. } => ConverseError::Budget { m, r, eps, ratio },
            e => e,
        })?;
        total += n;
        s.eps.push(eps);
        s.eps_tilde.push(et);
        s.n.push(n);
        s.m.push(total);
    }
    Ok(s)
}

impl Schedule {
    fn depth(&self) -> usize {
        self.eps.len()
    }

    /// `N_R(s) = M_m` for `s` in `(eps_m, eps_{m-1}]`; `None` below the
    /// schedule depth.
    pub fn n_r(&self, s: f64) -> Option<u64> {
        let m = self.eps.iter().position(|&e| e < s)?;
        Some(self.m[m])
    }

    /// Smallest `eps` at which `nu_R` is computable.
    pub fn eps_floor(&self) -> f64 {
        2.0 * self.eps[self.depth() - 1]
    }

    /// `nu_R(eps)`, exact for the step function `N_R`.
    pub fn nu(&self, eps: f64) -> Option<f64> {
        if !(eps >= self.eps_floor()) {
            return None;
        }
        let (a, b) = (eps / 2.0, eps);
        let mut integral = 0.0;
        let mut upper = f64::INFINITY;
        for (k, &e) in self.eps.iter().enumerate() {
            let len = b.min(upper) - a.max(e);
            if len > 0.0 {
                integral += self.m[k] as f64 * len;
            }
            upper = e;
        }
        Some(2.0 / eps * integral + self.r / eps)
    }

    /// Largest time covered by the exact `nu_R`.
    pub fn t_end(&self) -> f64 {
        self.nu(self.eps_floor()).expect("floor is in range")
    }

    /// `nu_R^{-1}(t)` by bisection, rounded up. Infinite when `t` does not
    /// exceed `inf nu_R = M_1`; `None` past [`Schedule::t_end`].
    pub fn nu_inverse(&self, t: f64) -> Option<f64> {
        if t <= self.m[0] as f64 {
            return Some(f64::INFINITY);
        }
        let lo0 = self.eps_floor();
        if t > self.t_end() {
            return None;
        }
        let nu = |e: f64| self.nu(e).expect("in range");
        let mut hi = lo0 * 2.0;
        for _ in 0..2100 {
            if nu(hi) <= t {
                break;
            }
            hi *= 2.0;
        }
        let mut lo = lo0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if nu(mid) > t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(hi)
    }

    /// Upper bound on `sigma(phi(n))` for `n >= t >= 1` along the step 3
    /// control built for this radius.
    fn decay_bound(&self, t: f64) -> f64 {
        let last = self.depth() - 1;
        if t >= self.m[last] as f64 {
            return self.eps[last];
        }
        match self.nu_inverse(t) {
            Some(e) => e,
            None => self.eps_floor(),
        }
    }

    /// Last time covered by the finite schedule.
    pub fn tail_start(&self) -> f64 {
        self.t_end().max(self.m[self.depth() - 1] as f64)
    }

    /// Per-step ratio of `nu_R^{-1}` over its last stretch before
    /// [`Schedule::t_end`], used to continue the bound past the schedule.
    pub fn tail_ratio(&self) -> f64 {
        let (m1, end) = (self.m[0] as f64, self.t_end());
        let from = 0.5 * (m1 + end);
        let ratio = match (self.nu_inverse(from), self.nu_inverse(end)) {
            (Some(a), Some(b)) if end > from && a.is_finite() && b > 0.0 => (b / a).powf(1.0 / (end - from)),
            _ => f64::NAN,
        };
        if ratio > 0.0 && ratio < 1.0 {
            ratio
        } else {
            0.5f64.powf(1.0 / self.tail_start().max(1.0))
        }
    }

    /// [`Schedule::decay_bound`] up to [`Schedule::tail_start`], geometric
    /// with [`Schedule::tail_ratio`] beyond it.
    fn extended_bound(&self, t: f64, ratio: f64) -> f64 {
        let t0 = self.tail_start();
        if t <= t0 {
            self.decay_bound(t)
        } else {
            self.decay_bound(t0) * ratio.powf(t - t0)
        }
    }

    /// Step 3 controls from `x` with `sigma(x) <= R`, `len` long. Past the
    /// schedule depth the certified control takes over.
    fn controls<S: ControlSystem>(
        &self,
        ucc: &UccCert<S>,
        sys: &S,
        gs: &KInfFn,
        factor: f64,
        x: &S::State,
        len: usize,
    ) -> Result<Vec<S::Input>, ConverseError> {
        let mut out = Vec::with_capacity(len);
        let mut xm = x.clone();
        for k in 0..self.depth() {
            if out.len() >= len {
                return Ok(out);
            }
            let n = self.n[k];
            let need = (len - out.len()).min(n.min(usize::MAX as u64) as usize);
            let threshold = gs.invert(factor * self.eps_tilde[k])?;
            let seg = stitch_segment(ucc, sys, &xm, threshold, n, need)?;
            if (need as u64) == n {
                let traj = rollout(sys, &xm, &seg.controls, need).map_err(CertError::from)?;
                xm = traj.last_state().clone();
            }
            out.extend(seg.controls);
        }
        if out.len() < len {
            let rest = len - out.len();
            out.extend(base_controls(ucc, sys, &xm, rest)?);
        }
        Ok(out)
    }
}

/// The step 4 control `u_x`: the step 3 control with `R = sigma(x)`.
/// States with `sigma(x) = 0` keep the certified control.
pub fn stitched_policy<S: ControlSystem + 'static>(
    ucc: &UccCert<S>,
    sys: Arc<S>,
    cfg: &ConverseConfig,
) -> PolicyOracle<S> {
    let ucc = ucc.clone();
    let cfg = cfg.clone();
    let gs = gamma_sigma(&ucc);
    PolicyOracle::new("stitched", None, TailRule::None, move |x, len| {
        let r = sys.sigma(x);
        let out = if r == 0.0 {
            base_controls(&ucc, &*sys, x, len).map_err(ConverseError::from)
        } else {
            step3_schedule(&ucc, r, &cfg).and_then(|s| s.controls(&ucc, &*sys, &gs, cfg.eps_tilde_factor, x, len))
        };
        // a short sequence surfaces as a malformed-policy error
        out.unwrap_or_default()
    })
}

/// Sampled KL bound assembled in step 5, with the tables behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step5 {
    pub beta: KLFn,
    pub r_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    /// `nu_R^{-1}(t)` per radius and time; infinite where unconstrained.
    pub nu_inverse: Vec<Vec<f64>>,
    pub schedules: Vec<Schedule>,
}

fn time_grid(t_max: f64, growth: f64) -> Vec<f64> {
    let mut t: Vec<f64> = (0..=64).map(f64::from).collect();
    while *t.last().expect("nonempty") < t_max {
        let last = *t.last().expect("nonempty");
        t.push((last * growth).ceil().max(last + 1.0));
    }
    t
}

/// Assembles `beta` on a radius grid:
/// `beta(r, 0) = gamma_sigma(r) + c (gamma_sigma(r) + r)` and, for column `t_j`,
/// `min{gamma_sigma(r), nu_r^{-1}(t_{j-1} + 1)}` made monotone in `r` by a
/// running max, plus the vanishing term `c (gamma_sigma(r) + r) / (1 + t)`.
/// The `+ r` keeps the term strictly increasing at a resolvable scale
/// where `gamma_sigma` is nearly flat.
pub fn step5_beta<S: ControlSystem>(
    ucc: &UccCert<S>,
    r_grid: &[f64],
    cfg: &ConverseConfig,
) -> Result<Step5, ConverseError> {
    let mut radii: Vec<f64> = r_grid.iter().copied().filter(|r| *r > 0.0 && r.is_finite()).collect();
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    if radii.len() < 2 {
        return Err(ConverseError::Precondition(
            "radius grid needs two positive points".into(),
        ));
    }
    let schedules = radii
        .iter()
        .map(|&r| step3_schedule(ucc, r, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    // the last two columns lie past every schedule, so the sampled tail
    // extrapolates the geometric continuation
    let t_max = schedules.iter().map(Schedule::tail_start).fold(0.0, f64::max) * cfg.t_growth * cfg.t_growth + 2.0;
    let ratios: Vec<f64> = schedules.iter().map(Schedule::tail_ratio).collect();
    let t_grid = time_grid(t_max, cfg.t_growth);
    let gs = gamma_sigma(ucc);

    let nu_inverse: Vec<Vec<f64>> = schedules
        .iter()
        .map(|s| t_grid.iter().map(|&t| s.nu_inverse(t).unwrap_or(f64::NAN)).collect())
        .collect();

    // raw[i][j] before repair
    let mut raw: Vec<Vec<f64>> = schedules
        .iter()
        .zip(&radii)
        .zip(&ratios)
        .map(|((s, &r), &ratio)| {
            let g = gs.value(r);
            t_grid
                .iter()
                .enumerate()
                .map(|(j, _)| {
                    if j == 0 {
                        g
                    } else {
                        g.min(s.extended_bound(t_grid[j - 1] + 1.0, ratio))
                    }
                })
                .collect()
        })
        .collect();
    for j in 0..t_grid.len() {
        for i in 1..radii.len() {
            raw[i][j] = raw[i][j].max(raw[i - 1][j]);
        }
    }
    let values: Vec<Vec<f64>> = raw
        .iter()
        .zip(&radii)
        .map(|(row, &r)| {
            let g = gs.value(r);
            row.iter()
                .zip(&t_grid)
                .map(|(&v, &t)| v + VANISHING * (g + r) / (1.0 + t))
                .collect()
        })
        .collect();
    let sampled = SampledKL::new(radii.clone(), t_grid.clone(), values)
        .map_err(|e| ConverseError::Construction(e.to_string()))?;
    Ok(Step5 {
        beta: KLFn::Sampled(sampled),
        r_grid: radii,
        t_grid,
        nu_inverse,
        schedules,
    })
}

/// Everything the construction produced.
#[derive(Clone, Debug)]
pub struct ConverseResult<S: ControlSystem> {
    pub cert: UbgecCert<S>,
    pub gamma_sigma: KInfFn,
    pub alpha_tilde: KInfFn,
    pub alpha_hat: KInfFn,
    pub step5: Step5,
    /// Checks of the intermediate claims on the samples.
    pub claims: VerificationReport,
}

/// JSON form of a [`ConverseResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConverseRecord {
    pub beta: KLFn,
    pub eta: crate::cmpfn::NonnegFn,
    pub gamma: KInfFn,
    pub eta_is_kinf: bool,
    pub gamma_sigma: KInfFn,
    pub alpha_tilde: KInfFn,
    pub alpha_hat: KInfFn,
    pub schedules: Vec<Schedule>,
}

impl<S: ControlSystem> ConverseResult<S> {
    pub fn record(&self) -> ConverseRecord {
        ConverseRecord {
            beta: self.cert.beta.clone(),
            eta: self.cert.eta.clone(),
            gamma: self.cert.gamma.clone(),
            eta_is_kinf: self.cert.eta.is_kinf(),
            gamma_sigma: self.gamma_sigma.clone(),
            alpha_tilde: self.alpha_tilde.clone(),
            alpha_hat: self.alpha_hat.clone(),
            schedules: self.step5.schedules.clone(),
        }
    }

    /// Writes `(r, m, eps, eps_tilde, n, m_cum)` rows.
    pub fn write_schedule_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["r", "m", "eps", "eps_tilde", "n", "m_cum"])?;
        for s in &self.step5.schedules {
            for k in 0..s.eps.len() {
                w.write_record([
                    fmt_num(s.r),
                    (k + 1).to_string(),
                    fmt_num(s.eps[k]),
                    fmt_num(s.eps_tilde[k]),
                    s.n[k].to_string(),
                    s.m[k].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `(r, t, beta, nu_inverse)` rows on the construction grid.
    pub fn write_beta_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["r", "t", "beta", "nu_inverse"])?;
        let st = &self.step5;
        for (i, &r) in st.r_grid.iter().enumerate() {
            for (j, &t) in st.t_grid.iter().enumerate() {
                let inv = st.nu_inverse[i][j];
                let inv = if inv.is_nan() {
                    String::new()
                } else if inv.is_infinite() {
                    "inf".into()
                } else {
                    fmt_num(inv)
                };
                w.write_record([fmt_num(r), fmt_num(t), fmt_num(self.cert.beta.value(r, t)), inv])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Checks the claims of steps 1 and 3 on the samples:
/// `sigma <= gamma_sigma(sigma(x))` under the certified control,
/// `sigma < eps_m` from step `M_m` on and `J <= alpha_hat(sigma(x))`
/// under the stitched control.
pub fn check_claims<S: ControlSystem + 'static>(
    ucc: &UccCert<S>,
    sys: &S,
    stitched: &PolicyOracle<S>,
    samples: &[S::State],
    cfg: &ConverseConfig,
) -> Result<VerificationReport, ConverseError> {
    let gs = gamma_sigma(ucc);
    let ah = alpha_hat(ucc);
    let horizon = cfg.horizon;
    let mut rep = VerificationReport::new(cfg.slack, samples.len());
    for (i, x) in samples.iter().enumerate() {
        let s0 = sys.sigma(x);
        let u = base_controls(ucc, sys, x, horizon)?;
        let traj = rollout(sys, x, &u, horizon).map_err(CertError::from)?;
        let bound = gs.value(s0);
        for (n, xn) in traj.states.iter().enumerate() {
            rep.push(i, Inequality::State, n, sys.sigma(xn), bound);
        }

        let u = stitched.controls(sys, x, horizon)?;
        let traj = rollout(sys, x, &u, horizon).map_err(CertError::from)?;
        let mut cost = 0.0;
        let cost_bound = ah.value(s0);
        for (n, (xn, un)) in traj.states.iter().zip(&traj.inputs).enumerate() {
            cost += ucc.ell.eval(sys, xn, un);
            rep.push(i, Inequality::Cost, n + 1, cost, cost_bound);
        }
        if s0 > 0.0 {
            let sched = step3_schedule(ucc, s0, cfg)?;
            for (k, &mk) in sched.m.iter().enumerate() {
                let start = mk.min(horizon as u64 + 1) as usize;
                for (n, xn) in traj.states.iter().enumerate().skip(start) {
                    // strict inequality: equality counts as a violation
                    let s = sys.sigma(xn);
                    let lhs = if s < sched.eps[k] {
                        s
                    } else {
                        s + f64::EPSILON.max(cfg.slack * 2.0)
                    };
                    rep.push(i, Inequality::Tail, n, lhs, sched.eps[k]);
                }
            }
        }
    }
    Ok(rep)
}

/// Runs steps 1 to 5 and returns a UBgEC certificate with `eta = r`,
/// `gamma = alpha_hat` and the assembled `beta`.
pub fn converse_pipeline<S: ControlSystem + 'static>(
    ucc: &UccCert<S>,
    sys: Arc<S>,
    samples: &[S::State],
    cfg: &ConverseConfig,
) -> Result<ConverseResult<S>, ConverseError> {
    cfg.validate()?;
    if !ucc.invariant {
        return Err(ConverseError::Precondition(
            "the UCC certificate must declare that its controls keep the domain invariant".into(),
        ));
    }
    if ucc.ell.s.is_some() {
        return Err(ConverseError::Precondition(
            "the stage cost must be of the form q(sigma) + r(rho)".into(),
        ));
    }
    let pre = ucc.verify(&*sys, samples, cfg.horizon, cfg.slack)?;
    if !pre.passed() {
        let row = pre.first_violation().expect("failed report has a violation");
        return Err(ConverseError::Precondition(format!(
            "the UCC certificate fails on sample {} at n = {} ({} inequality)",
            row.sample,
            row.n,
            row.inequality.as_str()
        )));
    }

    let gs = gamma_sigma(ucc);
    let at = alpha_tilde(ucc);
    let ah = alpha_hat(ucc);

    let mut r_grid = log_grid(cfg.r_min, cfg.r_max, cfg.r_points);
    r_grid.extend(samples.iter().map(|x| sys.sigma(x)).filter(|s| *s > 0.0));
    let step5 = step5_beta(ucc, &r_grid, cfg).map_err(|e| e.in_step(5))?;

    let policy = stitched_policy(ucc, Arc::clone(&sys), cfg);
    let claims = check_claims(ucc, &*sys, &policy, samples, cfg).map_err(|e| e.in_step(3))?;
    let cert = UbgecCert {
        beta: step5.beta.clone(),
        eta: ucc.ell.r.clone(),
        gamma: ah.clone(),
        domain: ucc.domain.clone(),
        policy,
    };
    Ok(ConverseResult {
        cert,
        gamma_sigma: gs,
        alpha_tilde: at,
        alpha_hat: ah,
        step5,
        claims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::{Domain, DEFAULT_SLACK};
    use crate::cmpfn::{Expr, NonnegFn};
    use crate::system::{BuiltinSystem, StageCost};

    type Sys = BuiltinSystem;

    fn linear_ucc(q: KInfFn, alpha_bar: KInfFn) -> UccCert<Sys> {
        UccCert {
            ell: StageCost::new(q, NonnegFn::new(Expr::identity()).unwrap()),
            alpha_bar,
            domain: Domain::All,
            policy: PolicyOracle::constant("zero", vec![0.0]),
            invariant: true,
        }
    }

    fn two_id() -> UccCert<Sys> {
        linear_ucc(KInfFn::identity(), KInfFn::linear(2.0).unwrap())
    }

    #[test]
    fn gamma_sigma_examples() {
        let g = gamma_sigma(&two_id());
        assert!((g.value(3.0) - 6.0).abs() < 1e-15);
        let sq = KInfFn::power(2.0).unwrap();
        let g = gamma_sigma(&linear_ucc(sq.clone(), sq));
        for r in [0.1, 1.0, 7.0] {
            assert!((g.value(r) - r).abs() < 1e-12 * r);
        }
    }

    #[test]
    fn step2_n_examples() {
        let ucc = two_id();
        // gamma_sigma^{-1}(0.1) = 0.05, 2 / 0.05 - 1 = 39
        assert_eq!(step2_n_tilde(&ucc, 1.0, 0.1, 1e9).unwrap(), 39);
        assert_eq!(step2_n(&ucc, 1.0, 0.2, 0.5, 1e9).unwrap(), 39);
        // ratio exactly one: smallest positive integer >= 0
        assert_eq!(step2_n_tilde(&ucc, 1.0, 4.0, 1e9).unwrap(), 1);
        let n2 = step2_n_tilde(&ucc, 2.0, 0.1, 1e9).unwrap();
        assert_eq!(n2, 79);
        assert!(matches!(
            step2_n_tilde(&ucc, 1.0, 1e-12, 1e9),
            Err(ConverseError::Budget { .. })
        ));
    }

    #[test]
    fn step3_first_entry() {
        let ucc = two_id();
        let s = step3_schedule(&ucc, 1.0, &ConverseConfig::default()).unwrap();
        assert!((s.eps_tilde[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!(s.eps_tilde.windows(2).all(|w| w[1] <= w[0]));
        assert!(s.m.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(s.eps.len(), 16);
    }

    #[test]
    fn stitch_scalar_linear() {
        let sys = BuiltinSystem::scalar_linear(0.5, 1.0);
        let ucc = two_id();
        let cfg = ConverseConfig::default();
        // threshold gamma_sigma^{-1}(0.05) = 0.025; 0.5^n * 1 <= 0.025 first at n = 6
        let st = step2_stitch(&ucc, &sys, &vec![1.0], 1.0, 0.1, &cfg, 100).unwrap();
        assert_eq!(st.n_q, Some(6));
        assert_eq!(st.controls.len(), 100);
        let st = step2_stitch(&ucc, &sys, &vec![0.01], 1.0, 0.1, &cfg, 10).unwrap();
        assert_eq!(st.n_q, Some(0));
    }

    #[test]
    fn nu_properties() {
        let ucc = two_id();
        let s = step3_schedule(&ucc, 1.0, &ConverseConfig::default()).unwrap();
        let mut eps = s.eps_floor();
        while eps < 4.0 {
            let nu = s.nu(eps).unwrap();
            assert!(nu >= s.n_r(eps).unwrap() as f64);
            eps *= 1.1;
        }
        for n in [(s.m[0] + 1) as f64, 1e3, 1e5, s.t_end()] {
            let e = s.nu_inverse(n).unwrap();
            assert!((s.nu(e).unwrap() - n).abs() <= 1e-8 * n);
        }
        assert_eq!(s.nu_inverse(1.0), Some(f64::INFINITY));
    }

    #[test]
    fn pipeline_on_scalar_linear() {
        let sys = Arc::new(BuiltinSystem::scalar_linear(0.5, 1.0));
        let ucc = two_id();
        let samples = vec![vec![0.0], vec![0.05], vec![1.0], vec![-3.0]];
        let cfg = ConverseConfig {
            horizon: 512,
            ..Default::default()
        };
        let out = converse_pipeline(&ucc, Arc::clone(&sys), &samples, &cfg).unwrap();
        assert!(out.claims.passed(), "{:?}", out.claims.first_violation());
        assert!(out.cert.eta.is_kinf());
        let rep = out.cert.verify(&*sys, &samples, 512, DEFAULT_SLACK).unwrap();
        assert!(rep.passed(), "{:?}", rep.first_violation());
        out.cert
            .beta
            .check_invariants(&out.cert.beta.natural_grid(), 1e-12)
            .unwrap();
    }

    #[test]
    fn pipeline_requires_invariance() {
        let mut ucc = two_id();
        ucc.invariant = false;
        let sys = Arc::new(BuiltinSystem::scalar_linear(0.5, 1.0));
        assert!(matches!(
            converse_pipeline(&ucc, sys, &[vec![1.0]], &ConverseConfig::default()),
            Err(ConverseError::Precondition(_))
        ));
    }

    #[test]
    fn pipeline_on_oracle_chain() {
        use crate::oracle::{extract_ucc, value_iterate, FiniteSystem, ViOptions};
        let sys = FiniteSystem::chain(10);
        let ell = StageCost::new(KInfFn::identity(), NonnegFn::new(Expr::identity()).unwrap());
        let vt = value_iterate(&sys, &ell, ViOptions::default()).unwrap();
        let ucc = extract_ucc(&vt, &sys, &ell, 1.0).unwrap();
        let states: Vec<usize> = (0..10).collect();
        let sys = Arc::new(sys);
        let out = converse_pipeline(&ucc, Arc::clone(&sys), &states, &ConverseConfig::default()).unwrap();
        assert!(out.claims.passed(), "{:?}", out.claims.first_violation());
        let rep = out.cert.verify(&*sys, &states, 4096, DEFAULT_SLACK).unwrap();
        assert!(rep.passed(), "{:?}", rep.first_violation());
    }
}
