//! Verification reports and CSV formatting.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

/// Formats a number with 17 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Which inequality a check row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inequality {
    /// `sigma(phi(n)) <= beta(sigma(x), n)`
    State,
    /// `rho(u(n)) <= beta_u(sigma(x), n)`
    Control,
    /// `sum_{k<n} eta(rho(u(k))) <= gamma(sigma(x))`
    Energy,
    /// `J_n(x, u) <= alpha_bar(sigma(x))`
    Cost,
    /// `phi(n)` stays in the certified domain.
    Invariance,
    /// Declared bound on an interaction term or stage cost.
    Interaction,
    /// Cost accumulated over steps with `sigma >= R_sigma`.
    TransientCost,
    /// Number of steps with `sigma >= R_sigma`.
    TransientSteps,
    /// Cost accumulated over steps with `sigma < R_sigma`.
    SteadyCost,
    /// Tail condition of a stitched control.
    Tail,
}

impl Inequality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Inequality::State => "state",
            Inequality::Control => "control",
            Inequality::Energy => "energy",
            Inequality::Cost => "cost",
            Inequality::Invariance => "invariance",
            Inequality::Interaction => "interaction",
            Inequality::TransientCost => "transient_cost",
            Inequality::TransientSteps => "transient_steps",
            Inequality::SteadyCost => "steady_cost",
            Inequality::Tail => "tail",
        }
    }
}

/// One evaluated inequality `lhs <= rhs`; `margin = lhs - rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub sample: usize,
    pub inequality: Inequality,
    pub n: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub slack: f64,
    pub samples: usize,
    pub rows: Vec<CheckRow>,
}

impl VerificationReport {
    pub fn new(slack: f64, samples: usize) -> Self {
        VerificationReport {
            slack,
            samples,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, sample: usize, inequality: Inequality, n: usize, lhs: f64, rhs: f64) {
        let margin = if lhs == rhs { 0.0 } else { lhs - rhs };
        self.rows.push(CheckRow {
            sample,
            inequality,
            n,
            lhs,
            rhs,
            margin,
        });
    }

    pub fn extend(&mut self, other: VerificationReport) {
        self.samples = self.samples.max(other.samples);
        self.rows.extend(other.rows);
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|row| row.margin <= self.slack)
    }

    /// True when no inequality was evaluated at all.
    pub fn is_vacuous(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn worst_margin(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.margin).reduce(f64::max)
    }

    pub fn worst_margin_for(&self, inequality: Inequality) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.inequality == inequality)
            .map(|r| r.margin)
            .reduce(f64::max)
    }

    /// Worst margin per `(sample, inequality)`.
    pub fn worst_per_sample(&self) -> BTreeMap<(usize, Inequality), f64> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            out.entry((r.sample, r.inequality))
                .and_modify(|m: &mut f64| *m = m.max(r.margin))
                .or_insert(r.margin);
        }
        out
    }

    pub fn violations(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(move |r| r.margin > self.slack)
    }

    pub fn first_violation(&self) -> Option<&CheckRow> {
        self.violations().next()
    }

    /// Writes `(sample, inequality, n, lhs, rhs, margin)` rows as CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample", "inequality", "n", "lhs", "rhs", "margin"])?;
        for r in &self.rows {
            w.write_record([
                r.sample.to_string(),
                r.inequality.as_str().to_string(),
                r.n.to_string(),
                fmt_num(r.lhs),
                fmt_num(r.rhs),
                fmt_num(r.margin),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
