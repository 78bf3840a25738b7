//! Comparison functions: class K-infinity, nonnegative, and class KL.
//!
//! [`KInfFn`] and [`NonnegFn`] wrap an [`Expr`] whose structural shape has
//! been checked at construction, so every value of these types satisfies its
//! class invariants by construction. [`KLFn`] is either separable,
//! `beta(r, t) = gamma2(theta^t * gamma1(r))`, sampled on a grid, or a
//! positive combination of those.

mod expr;
mod kl;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expr::{Expr, Shape, MAX_DOUBLINGS};
pub use kl::{kl_decompose, kl_decompose_on, KLFn, SampledKL, ValidationGrid, WeightedTerm};

/// Slack used when a numeric construction is certified on a grid.
pub const GRID_SLACK: f64 = 1e-9;
/// Default decomposition parameter.
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmpError {
    #[error("negative argument {0} outside the domain [0, inf)")]
    Domain(f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("not a K-infinity function: {0}")]
    NotKInf(String),
    #[error("invalid table at point {index}: {reason}")]
    Table { index: usize, reason: String },
    #[error("bracket did not reach {y} within the doubling cap; function is not surjective")]
    NonSurjective { y: f64 },
    #[error("KL decomposition fails to dominate at r = {r}, t = {t} (excess {excess:e})")]
    Decomposition { r: f64, t: f64, excess: f64 },
    #[error("KL invariant violated at r = {r}, t = {t}: {reason}")]
    KlInvariant { r: f64, t: f64, reason: String },
}

/// Pointwise combination modes for [`combine`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    Sum,
    Product,
    Min,
}

/// A class K-infinity function: zero at zero, strictly increasing, unbounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Expr", into = "Expr")]
pub struct KInfFn(Expr);

impl KInfFn {
    pub fn new(expr: Expr) -> Result<Self, CmpError> {
        let shape = expr.shape()?;
        if !shape.is_kinf() {
            return Err(CmpError::NotKInf(format!("{shape:?}")));
        }
        Ok(KInfFn(expr))
    }

    pub fn identity() -> Self {
        KInfFn(Expr::Identity)
    }

    pub fn power(p: f64) -> Result<Self, CmpError> {
        Self::new(Expr::power(p))
    }

    pub fn linear(c: f64) -> Result<Self, CmpError> {
        Self::new(Expr::linear(c))
    }

    /// Piecewise linear K-infinity function through `(r, value)` points.
    /// A leading `(0, 0)` is inserted when missing.
    pub fn table(mut points: Vec<[f64; 2]>) -> Result<Self, CmpError> {
        if points.first().map_or(true, |p| p[0] != 0.0) {
            points.insert(0, [0.0, 0.0]);
        }
        Self::new(Expr::table(points))
    }

    pub fn expr(&self) -> &Expr {
        &self.0
    }

    pub fn into_expr(self) -> Expr {
        self.0
    }

    pub fn eval(&self, r: f64) -> Result<f64, CmpError> {
        if !(r >= 0.0) {
            return Err(CmpError::Domain(r));
        }
        Ok(self.0.eval(r))
    }

    /// Unchecked evaluation for `r >= 0`.
    #[inline]
    pub fn value(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0, "negative argument {r}");
        self.0.eval(r)
    }

    pub fn invert(&self, y: f64) -> Result<f64, CmpError> {
        self.0.invert(y)
    }

    /// `self ∘ inner`
    pub fn compose(&self, inner: &KInfFn) -> KInfFn {
        compose(self, inner)
    }

    pub fn inverse(&self) -> KInfFn {
        KInfFn(Expr::inverse(self.0.clone()))
    }

    pub fn scale(&self, c: f64) -> Result<KInfFn, CmpError> {
        if !(c.is_finite() && c > 0.0) {
            return Err(CmpError::Parameter(format!("scale must be positive, got {c}")));
        }
        Ok(KInfFn(Expr::scale(c, self.0.clone())))
    }

    pub fn add(&self, other: &KInfFn) -> KInfFn {
        KInfFn(Expr::sum(self.0.clone(), other.0.clone()))
    }

    pub fn mul(&self, other: &KInfFn) -> KInfFn {
        KInfFn(Expr::product(self.0.clone(), other.0.clone()))
    }

    pub fn as_nonneg(&self) -> NonnegFn {
        NonnegFn {
            expr: self.0.clone(),
            shape: Shape {
                zero_at_zero: true,
                positive: true,
                strictly_increasing: true,
                unbounded: true,
            },
        }
    }
}

impl TryFrom<Expr> for KInfFn {
    type Error = CmpError;

    fn try_from(expr: Expr) -> Result<Self, Self::Error> {
        KInfFn::new(expr)
    }
}

impl From<KInfFn> for Expr {
    fn from(f: KInfFn) -> Expr {
        f.0
    }
}

impl fmt::Display for KInfFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serde_json::to_string(&self.0).map_err(|_| fmt::Error)?)
    }
}

/// A nonnegative function on `[0, inf)`, without the strict-increase
/// guarantee. Used for control penalties and generalized energy densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Expr", into = "Expr")]
pub struct NonnegFn {
    expr: Expr,
    shape: Shape,
}

impl NonnegFn {
    pub fn new(expr: Expr) -> Result<Self, CmpError> {
        let shape = expr.shape()?;
        Ok(NonnegFn { expr, shape })
    }

    pub fn zero() -> Self {
        NonnegFn {
            expr: Expr::Zero,
            shape: Expr::Zero.shape().expect("zero is valid"),
        }
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn is_positive_definite(&self) -> bool {
        self.shape.is_positive_definite()
    }

    pub fn is_kinf(&self) -> bool {
        self.shape.is_kinf()
    }

    /// The function as a K-infinity function, when it is one.
    pub fn as_kinf(&self) -> Option<KInfFn> {
        self.is_kinf().then(|| KInfFn(self.expr.clone()))
    }

    pub fn eval(&self, r: f64) -> Result<f64, CmpError> {
        if !(r >= 0.0) {
            return Err(CmpError::Domain(r));
        }
        Ok(self.expr.eval(r))
    }

    #[inline]
    pub fn value(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0, "negative argument {r}");
        self.expr.eval(r)
    }
}

impl TryFrom<Expr> for NonnegFn {
    type Error = CmpError;

    fn try_from(expr: Expr) -> Result<Self, Self::Error> {
        NonnegFn::new(expr)
    }
}

impl From<NonnegFn> for Expr {
    fn from(f: NonnegFn) -> Expr {
        f.expr
    }
}

impl From<KInfFn> for NonnegFn {
    fn from(f: KInfFn) -> Self {
        f.as_nonneg()
    }
}

/// `outer ∘ inner`
pub fn compose(outer: &KInfFn, inner: &KInfFn) -> KInfFn {
    match (&outer.0, &inner.0) {
        (Expr::Identity, _) => inner.clone(),
        (_, Expr::Identity) => outer.clone(),
        _ => KInfFn(Expr::compose(outer.0.clone(), inner.0.clone())),
    }
}

/// Pointwise `c1*f (+|*|min) c2*g`.
pub fn combine(f: &KInfFn, g: &KInfFn, mode: CombineMode, c1: f64, c2: f64) -> Result<KInfFn, CmpError> {
    for c in [c1, c2] {
        if !(c.is_finite() && c > 0.0) {
            return Err(CmpError::Parameter(format!("coefficients must be positive, got {c}")));
        }
    }
    let a = Expr::scale(c1, f.0.clone());
    let b = Expr::scale(c2, g.0.clone());
    let expr = match mode {
        CombineMode::Sum => Expr::sum(a, b),
        CombineMode::Product => Expr::product(a, b),
        CombineMode::Min => Expr::min(a, b),
    };
    KInfFn::new(expr)
}

/// Returns `(alpha(2a), alpha(2b))`, whose sum bounds `alpha(a + b)`.
pub fn weak_triangle_split(alpha: &KInfFn, a: f64, b: f64) -> Result<(f64, f64), CmpError> {
    Ok((alpha.eval(2.0 * a)?, alpha.eval(2.0 * b)?))
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Checks the K-infinity invariants of `f` numerically on a grid: zero at
/// zero, strict increase between consecutive grid points, and growth past
/// `target` on a doubling probe.
pub fn check_kinf_on_grid(f: &KInfFn, grid: &[f64], target: f64) -> Result<(), String> {
    let f0 = f.value(0.0);
    if f0.abs() > 1e-12 {
        return Err(format!("f(0) = {f0}"));
    }
    let mut prev: Option<(f64, f64)> = None;
    for &r in grid {
        let v = f.value(r);
        if !v.is_finite() {
            return Err(format!("f({r}) = {v}"));
        }
        if let Some((pr, pv)) = prev {
            if r > pr && v <= pv {
                return Err(format!("not increasing between {pr} and {r}: {pv} >= {v}"));
            }
        }
        prev = Some((r, v));
    }
    let mut r = 1.0;
    for _ in 0..MAX_DOUBLINGS {
        if f.value(r) > target {
            return Ok(());
        }
        r *= 2.0;
    }
    Err(format!("did not exceed {target} on the doubling probe"))
}
