//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::certificates::{CertificateData, DEFAULT_SLACK};
use crate::cmpfn::{Expr, KInfFn, NonnegFn};
use crate::converse::ConverseConfig;
use crate::oracle::{Discretizer, FiniteSystem, ViOptions};
use crate::synthesis::{SynthesisParams, TransientData};
use crate::system::{BuiltinSystem, MeasureTerm, StageCostSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    /// A built-in case with its policy and certificate.
    Builtin {
        name: String,
    },
    /// A real-vector system without a default certificate.
    Vector {
        system: BuiltinSystem,
    },
    /// The move-left chain case.
    Chain {
        n: usize,
    },
    Finite {
        system: FiniteSystem,
    },
    Discretize {
        discretizer: Discretizer,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// The policy supplied with the built-in case, or the value-iteration
    /// greedy policy on finite systems.
    #[default]
    Default,
    /// The zero input.
    Zero,
    /// `u = -k . x` on real-vector systems.
    LinearFeedback { k: Vec<f64> },
    /// One input per state on finite systems.
    Table { inputs: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSpec {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
    /// Draw measures log-uniformly with the run seed instead of sweeping.
    pub random: bool,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            count: 32,
            lo: 1e-2,
            hi: 1e2,
            random: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSpec {
    pub stage_cost: StageCostSpec,
    pub vi: ViOptions,
    pub margin: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            stage_cost: StageCostSpec {
                q: KInfFn::identity(),
                r: NonnegFn::new(Expr::identity()).expect("identity is nonnegative"),
                s: None,
            },
            vi: ViOptions::default(),
            margin: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InteractionConfig {
    /// A measure term with its declared coefficients.
    Declared {
        term: MeasureTerm,
        c1: f64,
        c2: f64,
        #[serde(default)]
        c3: f64,
        #[serde(default)]
        alpha: Option<KInfFn>,
        #[serde(default)]
        transient: Option<TransientData>,
    },
    /// `alpha3(alpha1(sigma) + alpha2(rho))` with `alpha3` built to fit.
    Additive { alpha1: KInfFn, alpha2: KInfFn },
}

/// Where `converse` gets its UCC certificate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UccSource {
    /// The `certificate` entry, which must be of kind `ucc`.
    Given,
    /// Synthesized from the UBgEC or UVC certificate.
    Synthesize,
    /// Value iteration; finite systems only.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    /// Replaces the case certificate.
    #[serde(default)]
    pub certificate: Option<CertificateData>,
    /// Restricts the domain to `sigma <= sigma_max`.
    #[serde(default)]
    pub sigma_max: Option<f64>,
    #[serde(default)]
    pub synthesis: SynthesisParams,
    #[serde(default)]
    pub interaction: Option<InteractionConfig>,
    /// Replaces the synthesized total cost bound before certification.
    #[serde(default)]
    pub alpha_bar_override: Option<KInfFn>,
    #[serde(default)]
    pub samples: SampleSpec,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_slack")]
    pub slack: f64,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub converse: ConverseConfig,
    #[serde(default)]
    pub ucc_source: Option<UccSource>,
    /// Output directory when `--out` is absent.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_horizon() -> usize {
    256
}

fn default_slack() -> f64 {
    DEFAULT_SLACK
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| format!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        let s = &self.samples;
        if !(s.lo > 0.0 && s.hi >= s.lo && s.hi.is_finite()) {
            return Err(format!("samples need 0 < lo <= hi, got {} and {}", s.lo, s.hi));
        }
        if !(self.slack >= 0.0 && self.slack.is_finite()) {
            return Err(format!("slack must be nonnegative, got {}", self.slack));
        }
        if !(self.synthesis.theta > 0.0 && self.synthesis.theta < 1.0) {
            return Err(format!("theta must lie in (0, 1), got {}", self.synthesis.theta));
        }
        if let Some(r) = self.sigma_max {
            if !(r > 0.0) {
                return Err(format!("sigma_max must be positive, got {r}"));
            }
        }
        if let SystemSpec::Chain { n } = self.system {
            if !(1..=10).contains(&n) {
                return Err(format!("chain length must lie in 1..=10, got {n}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"system": {"kind": "builtin", "name": "scalar_linear"}}"#).unwrap();
        assert_eq!(cfg.horizon, 256);
        assert_eq!(cfg.samples.count, 32);
        assert_eq!(cfg.policy, PolicySpec::Default);
        assert_eq!(cfg.converse.m_max, 16);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(ExperimentConfig::from_json(r#"{"system": {"kind": "chain", "n": 40}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"system": {"kind": "chain", "n": 4}, "samples": {"lo": 0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"system": {"kind": "nope"}}"#).is_err());
    }
}
