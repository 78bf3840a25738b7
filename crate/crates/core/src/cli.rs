//! Batch front end. One JSON config per run; flags select the subcommand,
//! config path, output directory and sample seed.
//!
//! Exit codes: 0 pass, 1 verification failure, 2 precondition or config
//! error, 3 internal or numeric error.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::Serialize;
use thiserror::Error;

use crate::cases;
use crate::certificates::{
    uvc_to_ubgec, CertError, Certificate, CertificateData, Domain, PolicyOracle, UbgecCert, UccCert,
};
use crate::cmpfn::CmpError;
use crate::config::{ExperimentConfig, InteractionConfig, PolicySpec, SystemSpec, UccSource};
use crate::converse::{converse_pipeline, ConverseError};
use crate::oracle::{extract_ucc, policy_cost, value_iterate, FiniteSystem, OracleError, ValueTable};
use crate::report::VerificationReport;
use crate::synthesis::{
    additive_interaction, admit_interaction, certify_ucc, synthesize, transient_split_bound, ucc_certificate,
    verify_transient_split, InteractionSpec, PairSampler, SynthError, SynthesisResult,
};
use crate::system::{BuiltinSystem, ControlSystem, Interaction, StageCost};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "STAGECRAFT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "stagecraft",
    version,
    about = "Stage cost synthesis and controllability certificates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to the config's `out_dir` or `./out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for random sample generation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build a stage cost and total cost bound, then certify them.
    Synthesize,
    /// Verify the configured certificate on samples.
    Verify,
    /// Build a UBgEC certificate from a UCC certificate.
    Converse,
    /// Value iteration on a finite system.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Precondition(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<CmpError> for CliError {
    fn from(e: CmpError) -> Self {
        match e {
            CmpError::Parameter(_) | CmpError::NotKInf(_) | CmpError::Table { .. } => CliError::Config(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<CertError> for CliError {
    fn from(e: CertError) -> Self {
        match e {
            CertError::Cmp(c) => c.into(),
            CertError::Sim(_) => CliError::Internal(e.to_string()),
            _ => CliError::Precondition(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::InvalidSystem(_) => CliError::Config(e.to_string()),
            OracleError::Cert(c) => c.into(),
            OracleError::Cmp(c) => c.into(),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Internal(format!("writing CSV: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(format!("I/O: {e}"))
    }
}

/// Synthesis errors that are sampled-check failures count as a failed
/// verification rather than an error.
fn synth_outcome(e: SynthError) -> Result<Outcome, CliError> {
    match e {
        SynthError::ChoiceRejected { .. } | SynthError::InteractionRejected { .. } => {
            eprintln!("rejected: {e}");
            Ok(Outcome::Fail)
        }
        SynthError::Cmp(c) => Err(c.into()),
        SynthError::Cert(c) => Err(c.into()),
        SynthError::NonContraction { .. } => Err(CliError::Internal(e.to_string())),
        _ => Err(CliError::Precondition(e.to_string())),
    }
}

fn converse_outcome(e: ConverseError) -> Result<Outcome, CliError> {
    match e {
        ConverseError::InStep { step, source } => converse_outcome(*source).map_err(|e| match e {
            CliError::Precondition(m) => CliError::Precondition(format!("step {step}: {m}")),
            CliError::Config(m) => CliError::Config(format!("step {step}: {m}")),
            CliError::Internal(m) => CliError::Internal(format!("step {step}: {m}")),
        }),
        ConverseError::Precondition(m) => Err(CliError::Precondition(m)),
        ConverseError::NoReturn { .. } => {
            eprintln!("rejected: {e}");
            Ok(Outcome::Fail)
        }
        ConverseError::Cert(c) => Err(c.into()),
        ConverseError::Cmp(c) => Err(c.into()),
        _ => Err(CliError::Internal(e.to_string())),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    match run(&cli) {
        Ok(Outcome::Pass) => 0,
        Ok(Outcome::Fail) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let cfg = ExperimentConfig::load(path).map_err(CliError::Config)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    let ctx = Run {
        cfg: &cfg,
        out: &out,
        seed: cli.seed,
    };
    match &cfg.system {
        SystemSpec::Builtin { name } => {
            let case = cases::builtin(name).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown built-in system '{name}'; known: {:?} and chain",
                    cases::BUILTIN_NAMES
                ))
            })?;
            let cert = match case.uvc {
                Some(uvc) => Certificate::Uvc(uvc),
                None => Certificate::Ubgec(case.ubgec),
            };
            ctx.vector(cli.command, case.system, Some(cert))
        }
        SystemSpec::Vector { system } => ctx.vector(cli.command, Arc::new(system.clone()), None),
        SystemSpec::Chain { n } => {
            let case = cases::chain(*n);
            ctx.finite(cli.command, case.system, Some(Certificate::Ubgec(case.ubgec)))
        }
        SystemSpec::Finite { system } => ctx.finite(cli.command, Arc::new(system.clone()), None),
        SystemSpec::Discretize { discretizer } => {
            ctx.finite(cli.command, Arc::new(FiniteSystem::discretize(discretizer)?), None)
        }
    }
}

/// A resolved system with its certificate, policy and samples.
struct Setup<S: ControlSystem> {
    sys: Arc<S>,
    cert: Option<Certificate<S>>,
    samples: Vec<S::State>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    seed: u64,
}

impl Run<'_> {
    fn vector(
        &self,
        cmd: Command,
        sys: Arc<BuiltinSystem>,
        case_cert: Option<Certificate<BuiltinSystem>>,
    ) -> Result<Outcome, CliError> {
        let cfg = self.cfg;
        let policy = match &cfg.policy {
            PolicySpec::Default => match &case_cert {
                Some(c) => c.policy().clone(),
                None => PolicyOracle::constant("zero", vec![0.0]),
            },
            PolicySpec::Zero => PolicyOracle::constant("zero", vec![0.0]),
            PolicySpec::LinearFeedback { k } => {
                let dim = sys.probe_state(1.0).map_or(0, |x| x.len());
                if k.len() != dim {
                    return Err(CliError::Config(format!(
                        "feedback gain needs {dim} entries, got {}",
                        k.len()
                    )));
                }
                let k = k.clone();
                PolicyOracle::feedback("linear feedback", Arc::clone(&sys), move |x: &Vec<f64>| {
                    vec![-k.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()]
                })
            }
            PolicySpec::Table { .. } => return Err(CliError::Config("table policies need a finite system".into())),
        };
        let domain = match cfg.sigma_max {
            Some(r) => Domain::SigmaAtMost(r),
            None => case_cert.as_ref().map_or(Domain::All, |c| c.domain().clone()),
        };
        let cert = resolve_cert(cfg, case_cert, domain.clone(), policy);
        let s = &cfg.samples;
        let samples = if s.random {
            let mut rng = StdRng::seed_from_u64(self.seed);
            cases::random_samples(&sys, s.count, s.lo, s.hi, &mut rng)
        } else {
            cases::sweep_samples(&sys, s.count, s.lo, s.hi)
        };
        let samples = samples.into_iter().filter(|x| domain.contains(&*sys, x)).collect();
        let setup = Setup { sys, cert, samples };
        match cmd {
            Command::Synthesize => self.synthesize(&setup),
            Command::Verify => self.verify(&setup),
            Command::Converse => self.converse(&setup, None),
            Command::Oracle => Err(CliError::Config("the oracle subcommand needs a finite system".into())),
        }
    }

    fn finite(
        &self,
        cmd: Command,
        sys: Arc<FiniteSystem>,
        case_cert: Option<Certificate<FiniteSystem>>,
    ) -> Result<Outcome, CliError> {
        let cfg = self.cfg;
        let ell: StageCost<FiniteSystem> = cfg.oracle.stage_cost.clone().into();
        let needs_oracle = cmd == Command::Oracle
            || (cmd == Command::Converse
                && cfg.ucc_source.unwrap_or(UccSource::Oracle) == UccSource::Oracle
                && cfg.certificate.is_none())
            || (cfg.policy == PolicySpec::Default && case_cert.is_none());
        let oracle = if needs_oracle {
            let vt = value_iterate(&sys, &ell, cfg.oracle.vi)?;
            let ucc = extract_ucc(&vt, &sys, &ell, cfg.oracle.margin)?;
            Some((vt, ucc))
        } else {
            None
        };
        if cmd == Command::Oracle {
            let (vt, ucc) = oracle.expect("computed above");
            return self.oracle(&sys, &ell, &vt, &ucc);
        }
        let policy = match &cfg.policy {
            PolicySpec::Default => match (&case_cert, &oracle) {
                (Some(c), _) => c.policy().clone(),
                (None, Some((_, ucc))) => ucc.policy.clone(),
                (None, None) => unreachable!("oracle runs when no policy is available"),
            },
            PolicySpec::Zero => {
                let u = sys
                    .zero_input()
                    .ok_or_else(|| CliError::Config("the system has no input with rho = 0".into()))?;
                PolicyOracle::constant("zero", u)
            }
            PolicySpec::Table { inputs } => {
                if inputs.len() != sys.n_states() || inputs.iter().any(|&u| u >= sys.n_inputs()) {
                    return Err(CliError::Config("policy table needs one valid input per state".into()));
                }
                let inputs = inputs.clone();
                PolicyOracle::feedback("table", Arc::clone(&sys), move |x: &usize| inputs[*x])
            }
            PolicySpec::LinearFeedback { .. } => {
                return Err(CliError::Config("linear feedback needs a real-vector system".into()))
            }
        };
        let domain = match (cfg.sigma_max, &oracle) {
            (Some(r), _) => Domain::SigmaAtMost(r),
            (None, Some((_, ucc))) if case_cert.is_none() => ucc.domain.clone(),
            _ => case_cert.as_ref().map_or(Domain::All, |c| c.domain().clone()),
        };
        let cert = resolve_cert(cfg, case_cert, domain.clone(), policy);
        let samples = (0..sys.n_states()).filter(|x| domain.contains(&*sys, x)).collect();
        let setup = Setup { sys, cert, samples };
        match cmd {
            Command::Synthesize => self.synthesize(&setup),
            Command::Verify => self.verify(&setup),
            Command::Converse => self.converse(&setup, oracle.map(|(_, u)| u)),
            Command::Oracle => unreachable!("handled above"),
        }
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let f = BufWriter::new(File::create(self.out.join(name))?);
        serde_json::to_writer_pretty(f, value).map_err(|e| CliError::Internal(format!("writing {name}: {e}")))
    }

    fn write_report(&self, name: &str, rep: &VerificationReport) -> Result<(), CliError> {
        rep.write_csv(BufWriter::new(File::create(self.out.join(name))?))?;
        Ok(())
    }

    fn summarize(&self, what: &str, rep: &VerificationReport) -> Outcome {
        if rep.is_vacuous() {
            eprintln!("warning: {what}: no samples, vacuous pass");
            return Outcome::Pass;
        }
        let worst = rep.worst_margin().unwrap_or(0.0);
        if rep.passed() {
            println!("{what}: pass ({} checks, worst margin {worst:e})", rep.rows.len());
            Outcome::Pass
        } else {
            let row = rep.first_violation().expect("failed report has a violation");
            println!(
                "{what}: FAIL (sample {}, n = {}, {}: {:e} > {:e})",
                row.sample,
                row.n,
                row.inequality.as_str(),
                row.lhs,
                row.rhs
            );
            Outcome::Fail
        }
    }

    fn synthesize<S: ControlSystem + 'static>(&self, st: &Setup<S>) -> Result<Outcome, CliError> {
        let cfg = self.cfg;
        let cert = ubgec_of(st.cert.as_ref(), cfg.synthesis.theta)?;
        let base = match synthesize(&cert, &cfg.synthesis) {
            Ok(r) => r,
            Err(e) => return synth_outcome(e),
        };
        let mut result = base.clone();
        let mut transient_report = None;
        if let Some(ic) = &cfg.interaction {
            let spec = interaction_spec(ic, &base, &cert)?;
            let pairs = PairSampler::default().pairs(&*st.sys, &cert, &st.samples)?;
            let outcome = if spec.transient.is_some() {
                let mut grid = cfg.synthesis.grid.clone();
                grid.extend(st.samples.iter().map(|x| st.sys.sigma(x)));
                transient_split_bound(&spec, &base, &cert, &*st.sys, &pairs, &grid).and_then(|split| {
                    let rep = verify_transient_split(&split, &cert, &*st.sys, &st.samples, cfg.horizon, cfg.slack)?;
                    transient_report = Some(rep);
                    Ok(split.result)
                })
            } else {
                admit_interaction(&spec, &base, &cert, &*st.sys, &pairs)
            };
            result = match outcome {
                Ok(r) => r,
                Err(e) => return synth_outcome(e),
            };
        }
        if let Some(ab) = &cfg.alpha_bar_override {
            result.alpha_bar = ab.clone();
        }
        self.write_json("synthesis.json", &result.record())?;
        let rep = certify_ucc(&result, &cert, &*st.sys, &st.samples, cfg.horizon, cfg.slack)?;
        self.write_report("certify_ucc.csv", &rep)?;
        let mut outcome = self.summarize("certify_ucc", &rep);
        if let Some(t) = transient_report {
            self.write_report("transient_split.csv", &t)?;
            if self.summarize("transient_split", &t) == Outcome::Fail {
                outcome = Outcome::Fail;
            }
        }
        Ok(outcome)
    }

    fn verify<S: ControlSystem + 'static>(&self, st: &Setup<S>) -> Result<Outcome, CliError> {
        let cert = st
            .cert
            .as_ref()
            .ok_or_else(|| CliError::Precondition("no certificate to verify".into()))?;
        let rep = cert.verify(&*st.sys, &st.samples, self.cfg.horizon, self.cfg.slack)?;
        self.write_report("verify.csv", &rep)?;
        Ok(self.summarize(&format!("verify {}", cert.kind()), &rep))
    }

    fn converse<S: ControlSystem + 'static>(
        &self,
        st: &Setup<S>,
        oracle_ucc: Option<UccCert<S>>,
    ) -> Result<Outcome, CliError> {
        let cfg = self.cfg;
        let source = cfg.ucc_source.unwrap_or(match (&st.cert, &oracle_ucc) {
            (Some(Certificate::Ucc(_)), _) => UccSource::Given,
            (_, Some(_)) => UccSource::Oracle,
            _ => UccSource::Synthesize,
        });
        let ucc = match source {
            UccSource::Given => match &st.cert {
                Some(Certificate::Ucc(c)) => c.clone(),
                _ => {
                    return Err(CliError::Config(
                        "ucc_source 'given' needs a certificate of kind ucc".into(),
                    ))
                }
            },
            UccSource::Oracle => {
                oracle_ucc.ok_or_else(|| CliError::Config("the oracle source needs a finite system".into()))?
            }
            UccSource::Synthesize => {
                let cert = ubgec_of(st.cert.as_ref(), cfg.synthesis.theta)?;
                let result: SynthesisResult<S> = match synthesize(&cert, &cfg.synthesis) {
                    Ok(r) => r,
                    Err(e) => return synth_outcome(e),
                };
                ucc_certificate(&result, &cert)
            }
        };
        let result = match converse_pipeline(&ucc, Arc::clone(&st.sys), &st.samples, &cfg.converse) {
            Ok(r) => r,
            Err(e) => return converse_outcome(e),
        };
        self.write_json("converse.json", &result.record())?;
        result.write_beta_csv(BufWriter::new(File::create(self.out.join("beta.csv"))?))?;
        result.write_schedule_csv(BufWriter::new(File::create(self.out.join("schedule.csv"))?))?;
        self.write_report("claims.csv", &result.claims)?;
        let rep = result
            .cert
            .verify(&*st.sys, &st.samples, cfg.converse.horizon, cfg.converse.slack)?;
        self.write_report("verify.csv", &rep)?;
        let claims = self.summarize("converse claims", &result.claims);
        let verified = self.summarize("verify ubgec", &rep);
        Ok(if claims == Outcome::Pass && verified == Outcome::Pass {
            Outcome::Pass
        } else {
            Outcome::Fail
        })
    }

    fn oracle(
        &self,
        sys: &Arc<FiniteSystem>,
        ell: &StageCost<FiniteSystem>,
        vt: &ValueTable,
        ucc: &UccCert<FiniteSystem>,
    ) -> Result<Outcome, CliError> {
        vt.write_csv(sys, BufWriter::new(File::create(self.out.join("value_table.csv"))?))?;
        let data = Certificate::Ucc(ucc.clone())
            .data()
            .ok_or_else(|| CliError::Internal("stage cost is not serializable".into()))?;
        self.write_json("ucc.json", &data)?;
        let states: Vec<usize> = (0..sys.n_states()).filter(|&x| vt.is_finite(x)).collect();
        let rep = ucc.verify(&**sys, &states, self.cfg.horizon, self.cfg.slack)?;
        self.write_report("verify.csv", &rep)?;
        let tol = 10.0 * self.cfg.oracle.vi.vi_tol;
        let mut fidelity = Outcome::Pass;
        for &x in &states {
            let j = policy_cost(sys, ell, &vt.policy, x);
            if !((j - vt.v[x]).abs() <= tol * vt.v[x].max(1.0)) {
                println!(
                    "oracle fidelity: FAIL at state {x}: greedy cost {j:e}, value {:e}",
                    vt.v[x]
                );
                fidelity = Outcome::Fail;
            }
        }
        println!(
            "value iteration: {} sweeps, residual {:e}, {} of {} states finite",
            vt.iterations,
            vt.residual,
            states.len(),
            sys.n_states()
        );
        let verified = self.summarize("verify ucc", &rep);
        Ok(if fidelity == Outcome::Pass && verified == Outcome::Pass {
            Outcome::Pass
        } else {
            Outcome::Fail
        })
    }
}

fn resolve_cert<S: ControlSystem + 'static>(
    cfg: &ExperimentConfig,
    case_cert: Option<Certificate<S>>,
    domain: Domain<S>,
    policy: PolicyOracle<S>,
) -> Option<Certificate<S>> {
    let data: Option<CertificateData> = match &cfg.certificate {
        Some(d) => Some(d.clone()),
        None => case_cert.as_ref().and_then(|c| c.data()),
    };
    data.map(|d| Certificate::from_data(d, domain, policy))
}

fn ubgec_of<S: ControlSystem>(cert: Option<&Certificate<S>>, theta: f64) -> Result<UbgecCert<S>, CliError> {
    match cert {
        Some(Certificate::Ubgec(c)) => Ok(c.clone()),
        Some(Certificate::Uvc(c)) => Ok(uvc_to_ubgec(c, theta)?),
        Some(c) => Err(CliError::Precondition(format!(
            "synthesis needs a ubgec or uvc certificate, got {}",
            c.kind()
        ))),
        None => Err(CliError::Precondition(
            "synthesis needs a ubgec or uvc certificate".into(),
        )),
    }
}

fn interaction_spec<S: ControlSystem>(
    ic: &InteractionConfig,
    base: &SynthesisResult<S>,
    cert: &UbgecCert<S>,
) -> Result<InteractionSpec<S>, CliError> {
    Ok(match ic {
        InteractionConfig::Declared {
            term,
            c1,
            c2,
            c3,
            alpha,
            transient,
        } => {
            let spec = InteractionSpec::new(Interaction::Measure(term.clone()), *c1, *c2, *c3, alpha.clone());
            match transient {
                Some(t) => spec.with_transient(t.clone()),
                None => spec,
            }
        }
        InteractionConfig::Additive { alpha1, alpha2 } => {
            let eta = cert
                .eta
                .as_kinf()
                .ok_or_else(|| CliError::Precondition("additive interaction needs eta of class K-infinity".into()))?;
            additive_interaction(alpha1, alpha2, &base.provenance.gamma2, &eta)
        }
    })
}
