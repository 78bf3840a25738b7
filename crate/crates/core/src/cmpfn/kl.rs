use serde::{Deserialize, Serialize};

use super::{log_grid, CmpError, Expr, KInfFn, GRID_SLACK};

/// Grid on which numeric KL constructions are certified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationGrid {
    pub r: Vec<f64>,
    pub t: Vec<f64>,
}

impl ValidationGrid {
    /// Sorted union of both grids.
    pub fn merged(&self, other: &ValidationGrid) -> ValidationGrid {
        let union = |a: &[f64], b: &[f64]| {
            let mut v: Vec<f64> = a.iter().chain(b).copied().collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        ValidationGrid {
            r: union(&self.r, &other.r),
            t: union(&self.t, &other.t),
        }
    }
}

impl Default for ValidationGrid {
    /// 64 log-spaced radii in `[1e-4, 1e4]` times `t = 0..=64`.
    fn default() -> Self {
        ValidationGrid {
            r: log_grid(1e-4, 1e4, 64),
            t: (0..=64).map(f64::from).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerm {
    pub weight: f64,
    pub beta: KLFn,
}

/// A class KL function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KLFn {
    /// `gamma2(theta^t * gamma1(r))`
    Separable {
        gamma2: KInfFn,
        theta: f64,
        gamma1: KInfFn,
    },
    Sampled(SampledKL),
    /// `sum_i weight_i * beta_i(r, t)` with positive weights.
    Weighted {
        terms: Vec<WeightedTerm>,
    },
}

impl KLFn {
    pub fn separable(gamma2: KInfFn, theta: f64, gamma1: KInfFn) -> Result<Self, CmpError> {
        check_theta(theta)?;
        Ok(KLFn::Separable { gamma2, theta, gamma1 })
    }

    /// `c * r * theta^t`
    pub fn exponential(c: f64, theta: f64) -> Result<Self, CmpError> {
        Self::separable(KInfFn::identity(), theta, KInfFn::linear(c)?)
    }

    pub fn weighted(terms: Vec<(f64, KLFn)>) -> Result<Self, CmpError> {
        if terms.is_empty() {
            return Err(CmpError::Parameter(
                "weighted KL function needs at least one term".into(),
            ));
        }
        let terms = terms
            .into_iter()
            .map(|(weight, beta)| {
                if weight.is_finite() && weight > 0.0 {
                    Ok(WeightedTerm { weight, beta })
                } else {
                    Err(CmpError::Parameter(format!("weights must be positive, got {weight}")))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(KLFn::Weighted { terms })
    }

    pub fn eval(&self, r: f64, t: f64) -> Result<f64, CmpError> {
        if !(r >= 0.0) {
            return Err(CmpError::Domain(r));
        }
        if !(t >= 0.0) {
            return Err(CmpError::Domain(t));
        }
        Ok(self.value(r, t))
    }

    /// Unchecked evaluation for `r, t >= 0`.
    pub fn value(&self, r: f64, t: f64) -> f64 {
        match self {
            KLFn::Separable { gamma2, theta, gamma1 } => gamma2.value(theta.powf(t) * gamma1.value(r)),
            KLFn::Sampled(s) => s.value(r, t),
            KLFn::Weighted { terms } => terms.iter().map(|w| w.weight * w.beta.value(r, t)).sum(),
        }
    }

    /// `beta(., 0)` as a K-infinity function.
    pub fn at_time_zero(&self) -> KInfFn {
        let expr = match self {
            KLFn::Separable { gamma2, gamma1, .. } => Expr::compose(gamma2.expr().clone(), gamma1.expr().clone()),
            KLFn::Sampled(s) => {
                let mut points = vec![[0.0, 0.0]];
                points.extend(s.r.iter().zip(&s.values).map(|(&r, row)| [r, row[0]]));
                Expr::table(points)
            }
            KLFn::Weighted { terms } => terms
                .iter()
                .map(|w| Expr::scale(w.weight, w.beta.at_time_zero().into_expr()))
                .reduce(Expr::sum)
                .expect("nonempty"),
        };
        KInfFn::new(expr).expect("time sections of KL functions are K-infinity")
    }

    /// The grid this function is naturally certified on.
    pub fn natural_grid(&self) -> ValidationGrid {
        match self {
            KLFn::Sampled(s) => ValidationGrid {
                r: s.r.clone(),
                t: s.t.clone(),
            },
            _ => ValidationGrid::default(),
        }
    }

    /// Grid test of the KL invariants: strict increase in `r` for each `t`,
    /// strict decrease in `t` for each `r > 0`, and `beta(r, T) < tail_tol`
    /// for some `T` on a doubling probe past the grid.
    pub fn check_invariants(&self, grid: &ValidationGrid, tail_tol: f64) -> Result<(), CmpError> {
        for &t in &grid.t {
            let mut prev = self.value(0.0, t);
            if prev.abs() > 1e-12 {
                return Err(CmpError::KlInvariant {
                    r: 0.0,
                    t,
                    reason: format!("beta(0, t) = {prev}"),
                });
            }
            for &r in &grid.r {
                let v = self.value(r, t);
                if !(v > prev) {
                    return Err(CmpError::KlInvariant {
                        r,
                        t,
                        reason: format!("not increasing in r ({v} <= {prev})"),
                    });
                }
                prev = v;
            }
        }
        for &r in grid.r.iter().filter(|&&r| r > 0.0) {
            let mut prev = f64::INFINITY;
            for &t in &grid.t {
                let v = self.value(r, t);
                if !(v < prev) {
                    return Err(CmpError::KlInvariant {
                        r,
                        t,
                        reason: format!("not decreasing in t ({v} >= {prev})"),
                    });
                }
                prev = v;
            }
            let mut t = grid.t.last().copied().unwrap_or(0.0).max(1.0);
            let mut reached = false;
            for _ in 0..64 {
                if self.value(r, t) < tail_tol {
                    reached = true;
                    break;
                }
                t *= 2.0;
            }
            if !reached {
                return Err(CmpError::KlInvariant {
                    r,
                    t,
                    reason: format!("does not fall below {tail_tol}"),
                });
            }
        }
        Ok(())
    }
}

fn check_theta(theta: f64) -> Result<(), CmpError> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(CmpError::Parameter(format!("theta must lie in (0, 1), got {theta}")))
    }
}

/// A KL function known on a rectangular grid.
///
/// Between grid radii the values are interpolated linearly in `r` (and
/// through the origin below the first radius, proportionally above the
/// last). Between grid times they are interpolated linearly in `t`; past
/// the last time they decay geometrically with the slowest per-unit-time
/// ratio observed over the last two columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSampled", into = "RawSampled")]
pub struct SampledKL {
    r: Vec<f64>,
    t: Vec<f64>,
    /// `values[i][j] = beta(r[i], t[j])`
    values: Vec<Vec<f64>>,
    tail_ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawSampled {
    r: Vec<f64>,
    t: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl TryFrom<RawSampled> for SampledKL {
    type Error = CmpError;

    fn try_from(raw: RawSampled) -> Result<Self, CmpError> {
        SampledKL::new(raw.r, raw.t, raw.values)
    }
}

impl From<SampledKL> for RawSampled {
    fn from(s: SampledKL) -> Self {
        RawSampled {
            r: s.r,
            t: s.t,
            values: s.values,
        }
    }
}

impl SampledKL {
    pub fn new(r: Vec<f64>, t: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, CmpError> {
        let bad = |r: f64, t: f64, reason: &str| CmpError::KlInvariant {
            r,
            t,
            reason: reason.to_string(),
        };
        if r.is_empty() || t.len() < 2 {
            return Err(CmpError::Parameter(
                "sampled KL needs at least one radius and two times".into(),
            ));
        }
        if !(r[0] > 0.0) || r.windows(2).any(|w| !(w[0] < w[1])) || r.iter().any(|v| !v.is_finite()) {
            return Err(CmpError::Parameter(
                "radii must be positive, finite and strictly increasing".into(),
            ));
        }
        if t[0] != 0.0 || t.windows(2).any(|w| !(w[0] < w[1])) || t.iter().any(|v| !v.is_finite()) {
            return Err(CmpError::Parameter(
                "times must start at 0 and strictly increase".into(),
            ));
        }
        if values.len() != r.len() || values.iter().any(|row| row.len() != t.len()) {
            return Err(CmpError::Parameter("value table does not match the grid".into()));
        }
        for (i, row) in values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(v.is_finite() && v > 0.0) {
                    return Err(bad(r[i], t[j], "values must be positive and finite"));
                }
                if j > 0 && !(v < row[j - 1]) {
                    return Err(bad(r[i], t[j], "not strictly decreasing in t"));
                }
                if i > 0 && !(v > values[i - 1][j]) {
                    return Err(bad(r[i], t[j], "not strictly increasing in r"));
                }
            }
        }
        let n = t.len();
        let dt = t[n - 1] - t[n - 2];
        let tail_ratio = values
            .iter()
            .map(|row| (row[n - 1] / row[n - 2]).powf(1.0 / dt))
            .fold(0.0, f64::max);
        Ok(SampledKL {
            r,
            t,
            values,
            tail_ratio,
        })
    }

    pub fn radii(&self) -> &[f64] {
        &self.r
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn tail_ratio(&self) -> f64 {
        self.tail_ratio
    }

    fn row_at(&self, i: usize, t: f64) -> f64 {
        let row = &self.values[i];
        let n = self.t.len();
        if t >= self.t[n - 1] {
            return row[n - 1] * self.tail_ratio.powf(t - self.t[n - 1]);
        }
        let hi = self.t.partition_point(|&s| s <= t);
        let j = hi - 1;
        if t == self.t[j] {
            return row[j];
        }
        let w = (t - self.t[j]) / (self.t[j + 1] - self.t[j]);
        row[j] + (row[j + 1] - row[j]) * w
    }

    pub fn value(&self, r: f64, t: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let n = self.r.len();
        if r <= self.r[0] {
            return self.row_at(0, t) * r / self.r[0];
        }
        if r >= self.r[n - 1] {
            return self.row_at(n - 1, t) * r / self.r[n - 1];
        }
        let hi = self.r.partition_point(|&s| s <= r);
        let i = hi - 1;
        let lo_v = self.row_at(i, t);
        if r == self.r[i] {
            return lo_v;
        }
        let hi_v = self.row_at(i + 1, t);
        lo_v + (hi_v - lo_v) * (r - self.r[i]) / (self.r[i + 1] - self.r[i])
    }
}

/// [`kl_decompose_on`] over the default validation grid merged with the
/// function's natural grid.
pub fn kl_decompose(beta: &KLFn, theta: f64) -> Result<(KInfFn, KInfFn), CmpError> {
    kl_decompose_on(beta, theta, &ValidationGrid::default().merged(&beta.natural_grid()))
}

/// Finds `(gamma1, gamma2)` with `beta(r, t) <= gamma2(theta^t * gamma1(r))`
/// on every grid point.
///
/// A separable input with the same `theta` is returned as stored. Otherwise
/// `gamma1(r) = beta(r, 0) + r` and `gamma2` is the running-maximum upper
/// envelope of the point cloud `(theta^t * gamma1(r_i), beta(r_{i+1}, t))`,
/// which also covers radii between grid points, made
/// strictly increasing by adding `GRID_SLACK * s`.
pub fn kl_decompose_on(beta: &KLFn, theta: f64, grid: &ValidationGrid) -> Result<(KInfFn, KInfFn), CmpError> {
    check_theta(theta)?;
    if let KLFn::Separable {
        gamma2,
        theta: stored,
        gamma1,
    } = beta
    {
        if (stored - theta).abs() <= 1e-15 {
            return Ok((gamma1.clone(), gamma2.clone()));
        }
    }

    let gamma1 = KInfFn::new(Expr::sum(beta.at_time_zero().into_expr(), Expr::Identity))?;
    // Each radius is paired with the value at the next one, so monotonicity
    // in `r` extends domination to every radius inside the grid range.
    let radii: Vec<f64> = grid.r.iter().copied().filter(|&r| r > 0.0).collect();
    let mut cloud: Vec<(f64, f64)> = Vec::with_capacity(radii.len() * grid.t.len());
    for (i, &r) in radii.iter().enumerate() {
        let upper = radii.get(i + 1).copied().unwrap_or(r);
        let g1 = gamma1.value(r);
        for &t in &grid.t {
            cloud.push((theta.powf(t) * g1, beta.value(upper, t)));
        }
    }
    cloud.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    for (s, v) in cloud {
        if !(s > 0.0) {
            continue;
        }
        let last = points.last_mut().expect("nonempty");
        if s == last[0] {
            last[1] = last[1].max(v);
        } else {
            let running = last[1].max(v);
            points.push([s, running]);
        }
    }
    if points.len() < 2 {
        points.push([1.0, 0.0]);
    }
    let envelope = Expr::table(points);
    let gamma2 = KInfFn::new(Expr::sum(envelope, Expr::linear(GRID_SLACK)))?;

    for &r in &grid.r {
        let g1 = gamma1.value(r);
        for &t in &grid.t {
            let b = beta.value(r, t);
            let bound = gamma2.value(theta.powf(t) * g1);
            let excess = b - bound;
            if excess > GRID_SLACK * b.max(1.0) {
                return Err(CmpError::Decomposition { r, t, excess });
            }
        }
    }
    Ok((gamma1, gamma2))
}
