//! Expression trees over a fixed set of monotone primitives.
//!
//! Every primitive maps `[0, inf)` into `[0, inf)` and is nondecreasing, so
//! the structural properties a comparison function needs (zero at zero,
//! strict increase, unboundedness) can be decided by a bottom-up pass over
//! the tree instead of by sampling.

use serde::{Deserialize, Serialize};

use super::CmpError;

/// Doublings of the upper bracket end before an inversion gives up.
pub const MAX_DOUBLINGS: usize = 200;
/// Halvings of the lower bracket end before an inversion returns zero.
const MAX_HALVINGS: usize = 1100;
const MAX_BISECTIONS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Expr {
    Identity,
    /// Constant zero. Admissible in nonnegative functions only.
    Zero,
    Power {
        p: f64,
    },
    Linear {
        c: f64,
    },
    Scale {
        c: f64,
        inner: Box<Expr>,
    },
    Sum {
        left: Box<Expr>,
        right: Box<Expr>,
    },
    Product {
        left: Box<Expr>,
        right: Box<Expr>,
    },
    Min {
        left: Box<Expr>,
        right: Box<Expr>,
    },
    Max {
        left: Box<Expr>,
        right: Box<Expr>,
    },
    Compose {
        outer: Box<Expr>,
        inner: Box<Expr>,
    },
    Inverse {
        of: Box<Expr>,
    },
    /// Piecewise linear interpolant through `(r, value)` pairs. The first
    /// abscissa is zero; beyond the last point the final segment is
    /// extended linearly.
    Table {
        points: Vec<[f64; 2]>,
    },
}

/// Structural properties of a tree, derived bottom-up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub zero_at_zero: bool,
    /// `f(r) > 0` for every `r > 0`.
    pub positive: bool,
    pub strictly_increasing: bool,
    pub unbounded: bool,
}

impl Shape {
    const KINF: Shape = Shape {
        zero_at_zero: true,
        positive: true,
        strictly_increasing: true,
        unbounded: true,
    };

    pub fn is_kinf(&self) -> bool {
        self.zero_at_zero && self.strictly_increasing && self.unbounded
    }

    pub fn is_positive_definite(&self) -> bool {
        self.zero_at_zero && self.positive
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), CmpError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CmpError::Parameter(format!(
            "{name} must be finite and positive, got {v}"
        )))
    }
}

fn table_shape(points: &[[f64; 2]]) -> Result<Shape, CmpError> {
    if points.len() < 2 {
        return Err(CmpError::Table {
            index: 0,
            reason: "at least two points are required".into(),
        });
    }
    if points[0][0] != 0.0 {
        return Err(CmpError::Table {
            index: 0,
            reason: "first abscissa must be 0".into(),
        });
    }
    let mut strict = true;
    for (i, p) in points.iter().enumerate() {
        if !p[0].is_finite() || !p[1].is_finite() || p[1] < 0.0 {
            return Err(CmpError::Table {
                index: i,
                reason: "points must be finite with nonnegative values".into(),
            });
        }
        if i > 0 {
            let prev = points[i - 1];
            if p[0] <= prev[0] {
                return Err(CmpError::Table {
                    index: i,
                    reason: "abscissae must be strictly increasing".into(),
                });
            }
            if p[1] < prev[1] {
                return Err(CmpError::Table {
                    index: i,
                    reason: "values must be nondecreasing".into(),
                });
            }
            if p[1] == prev[1] {
                strict = false;
            }
        }
    }
    let n = points.len();
    let last_slope = points[n - 1][1] - points[n - 2][1];
    Ok(Shape {
        zero_at_zero: points[0][1] == 0.0,
        positive: points[1][1] > 0.0,
        strictly_increasing: strict,
        unbounded: last_slope > 0.0,
    })
}

fn table_eval(points: &[[f64; 2]], r: f64) -> f64 {
    let n = points.len();
    // index of the first abscissa strictly greater than r
    let hi = points.partition_point(|p| p[0] <= r);
    let seg = if hi == 0 {
        0
    } else if hi >= n {
        n - 2
    } else {
        hi - 1
    };
    let [x0, y0] = points[seg];
    let [x1, y1] = points[seg + 1];
    if r == x0 {
        return y0;
    }
    let v = y0 + (y1 - y0) * (r - x0) / (x1 - x0);
    v.max(0.0)
}

fn table_invert(points: &[[f64; 2]], y: f64) -> f64 {
    let n = points.len();
    let hi = points.partition_point(|p| p[1] < y);
    let seg = if hi == 0 {
        0
    } else if hi >= n {
        n - 2
    } else {
        hi - 1
    };
    let [x0, y0] = points[seg];
    let [x1, y1] = points[seg + 1];
    if y == y1 {
        return x1;
    }
    x0 + (x1 - x0) * (y - y0) / (y1 - y0)
}

impl Expr {
    pub fn identity() -> Self {
        Expr::Identity
    }

    pub fn power(p: f64) -> Self {
        Expr::Power { p }
    }

    pub fn linear(c: f64) -> Self {
        Expr::Linear { c }
    }

    pub fn scale(c: f64, inner: Expr) -> Self {
        if c == 1.0 {
            inner
        } else {
            Expr::Scale {
                c,
                inner: Box::new(inner),
            }
        }
    }

    pub fn sum(left: Expr, right: Expr) -> Self {
        Expr::Sum {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn product(left: Expr, right: Expr) -> Self {
        Expr::Product {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn min(left: Expr, right: Expr) -> Self {
        Expr::Min {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn max(left: Expr, right: Expr) -> Self {
        Expr::Max {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn compose(outer: Expr, inner: Expr) -> Self {
        Expr::Compose {
            outer: Box::new(outer),
            inner: Box::new(inner),
        }
    }

    pub fn inverse(of: Expr) -> Self {
        match of {
            Expr::Inverse { of } => *of,
            other => Expr::Inverse { of: Box::new(other) },
        }
    }

    pub fn table(points: Vec<[f64; 2]>) -> Self {
        Expr::Table { points }
    }

    /// Checks primitive parameters and derives the structural shape.
    pub fn shape(&self) -> Result<Shape, CmpError> {
        Ok(match self {
            Expr::Identity => Shape::KINF,
            Expr::Zero => Shape {
                zero_at_zero: true,
                positive: false,
                strictly_increasing: false,
                unbounded: false,
            },
            Expr::Power { p } => {
                check_positive("power exponent", *p)?;
                Shape::KINF
            }
            Expr::Linear { c } => {
                check_positive("linear coefficient", *c)?;
                Shape::KINF
            }
            Expr::Scale { c, inner } => {
                check_positive("scale coefficient", *c)?;
                inner.shape()?
            }
            Expr::Sum { left, right } => {
                let (a, b) = (left.shape()?, right.shape()?);
                Shape {
                    zero_at_zero: a.zero_at_zero && b.zero_at_zero,
                    positive: a.positive || b.positive,
                    strictly_increasing: a.strictly_increasing || b.strictly_increasing,
                    unbounded: a.unbounded || b.unbounded,
                }
            }
            Expr::Product { left, right } => {
                let (a, b) = (left.shape()?, right.shape()?);
                Shape {
                    zero_at_zero: a.zero_at_zero || b.zero_at_zero,
                    positive: a.positive && b.positive,
                    strictly_increasing: a.positive && b.positive && (a.strictly_increasing || b.strictly_increasing),
                    unbounded: (a.unbounded && b.positive) || (b.unbounded && a.positive),
                }
            }
            Expr::Min { left, right } => {
                let (a, b) = (left.shape()?, right.shape()?);
                Shape {
                    zero_at_zero: a.zero_at_zero || b.zero_at_zero,
                    positive: a.positive && b.positive,
                    strictly_increasing: a.strictly_increasing && b.strictly_increasing,
                    unbounded: a.unbounded && b.unbounded,
                }
            }
            Expr::Max { left, right } => {
                let (a, b) = (left.shape()?, right.shape()?);
                Shape {
                    zero_at_zero: a.zero_at_zero && b.zero_at_zero,
                    positive: a.positive || b.positive,
                    strictly_increasing: a.strictly_increasing && b.strictly_increasing,
                    unbounded: a.unbounded || b.unbounded,
                }
            }
            Expr::Compose { outer, inner } => {
                let (o, i) = (outer.shape()?, inner.shape()?);
                Shape {
                    zero_at_zero: o.zero_at_zero && i.zero_at_zero,
                    positive: o.positive && i.positive,
                    strictly_increasing: o.strictly_increasing && i.strictly_increasing,
                    unbounded: o.unbounded && i.unbounded,
                }
            }
            Expr::Inverse { of } => {
                if !of.shape()?.is_kinf() {
                    return Err(CmpError::NotKInf("inverse-of requires a K-infinity operand".into()));
                }
                Shape::KINF
            }
            Expr::Table { points } => table_shape(points)?,
        })
    }

    /// Evaluates the tree at `r >= 0`. A numeric inversion that fails to
    /// bracket its target evaluates to `+inf`.
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Expr::Identity => r,
            Expr::Zero => 0.0,
            Expr::Power { p } => r.powf(*p),
            Expr::Linear { c } => c * r,
            Expr::Scale { c, inner } => c * inner.eval(r),
            Expr::Sum { left, right } => left.eval(r) + right.eval(r),
            Expr::Product { left, right } => {
                let a = left.eval(r);
                if a == 0.0 {
                    0.0
                } else {
                    a * right.eval(r)
                }
            }
            Expr::Min { left, right } => left.eval(r).min(right.eval(r)),
            Expr::Max { left, right } => left.eval(r).max(right.eval(r)),
            Expr::Compose { outer, inner } => outer.eval(inner.eval(r)),
            Expr::Inverse { of } => of.invert(r).unwrap_or(f64::INFINITY),
            Expr::Table { points } => table_eval(points, r),
        }
    }

    /// Solves `f(r) = y` for a K-infinity tree. Analytically invertible
    /// nodes are inverted structurally; everything else falls back to
    /// bracket expansion plus bisection.
    pub fn invert(&self, y: f64) -> Result<f64, CmpError> {
        if !(y >= 0.0) {
            return Err(CmpError::Domain(y));
        }
        if y == 0.0 {
            return Ok(0.0);
        }
        if y.is_infinite() {
            return Ok(f64::INFINITY);
        }
        match self {
            Expr::Identity => Ok(y),
            Expr::Power { p } => Ok(y.powf(1.0 / p)),
            Expr::Linear { c } => Ok(y / c),
            Expr::Scale { c, inner } => inner.invert(y / c),
            Expr::Compose { outer, inner } => inner.invert(outer.invert(y)?),
            Expr::Inverse { of } => Ok(of.eval(y)),
            Expr::Min { left, right } if self.children_kinf() => Ok(left.invert(y)?.max(right.invert(y)?)),
            Expr::Max { left, right } if self.children_kinf() => Ok(left.invert(y)?.min(right.invert(y)?)),
            Expr::Table { points } if table_shape(points).is_ok_and(|s| s.is_kinf()) => Ok(table_invert(points, y)),
            _ => self.bisect(y),
        }
    }

    fn children_kinf(&self) -> bool {
        match self {
            Expr::Min { left, right } | Expr::Max { left, right } => {
                left.shape().is_ok_and(|s| s.is_kinf()) && right.shape().is_ok_and(|s| s.is_kinf())
            }
            _ => false,
        }
    }

    fn bisect(&self, y: f64) -> Result<f64, CmpError> {
        let (mut lo, mut hi);
        if self.eval(1.0) < y {
            hi = 1.0;
            let mut doublings = 0;
            while self.eval(hi) < y {
                if doublings == MAX_DOUBLINGS {
                    return Err(CmpError::NonSurjective { y });
                }
                hi *= 2.0;
                doublings += 1;
            }
            lo = hi / 2.0;
        } else {
            lo = 1.0;
            let mut halvings = 0;
            while self.eval(lo) >= y {
                if halvings == MAX_HALVINGS || lo == 0.0 {
                    return Ok(0.0);
                }
                lo /= 2.0;
                halvings += 1;
            }
            hi = 2.0 * lo;
        }
        // invariant: f(lo) < y <= f(hi)
        for _ in 0..MAX_BISECTIONS {
            let mid = lo + 0.5 * (hi - lo);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.eval(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (flo, fhi) = (self.eval(lo), self.eval(hi));
        Ok(if (y - flo).abs() < (fhi - y).abs() { lo } else { hi })
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            Expr::Identity | Expr::Zero | Expr::Power { .. } | Expr::Linear { .. } | Expr::Table { .. } => 1,
            Expr::Scale { inner, .. } => 1 + inner.size(),
            Expr::Inverse { of } => 1 + of.size(),
            Expr::Sum { left, right }
            | Expr::Product { left, right }
            | Expr::Min { left, right }
            | Expr::Max { left, right } => 1 + left.size() + right.size(),
            Expr::Compose { outer, inner } => 1 + outer.size() + inner.size(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Identity | Expr::Zero | Expr::Power { .. } | Expr::Linear { .. } | Expr::Table { .. } => 1,
            Expr::Scale { inner, .. } => 1 + inner.depth(),
            Expr::Inverse { of } => 1 + of.depth(),
            Expr::Sum { left, right }
            | Expr::Product { left, right }
            | Expr::Min { left, right }
            | Expr::Max { left, right } => 1 + left.depth().max(right.depth()),
            Expr::Compose { outer, inner } => 1 + outer.depth().max(inner.depth()),
        }
    }
}
