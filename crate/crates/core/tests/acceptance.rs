//! Acceptance suite. Runs every criterion, prints one line each and exits
//! nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use stagecraft::cases::{self, Case};
use stagecraft::certificates::{uvc_to_ubgec, DEFAULT_SLACK};
use stagecraft::cmpfn::{kl_decompose, log_grid, Expr, KInfFn, KLFn, NonnegFn, ValidationGrid};
use stagecraft::converse::{self, converse_pipeline, ConverseConfig};
use stagecraft::oracle::{extract_ucc, policy_cost, value_iterate, FiniteSystem, ViOptions};
use stagecraft::report::Inequality;
use stagecraft::synthesis::{
    additive_interaction, admit_interaction, build_alpha3, certify_ucc, synthesize, transient_split_bound,
    ucc_certificate, verify_transient_split, InteractionSpec, PairSampler, SynthError, SynthesisParams, TransientData,
};
use stagecraft::system::{rollout, ControlSystem, Interaction, MeasureTerm, StageCost};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    check(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn unit_cost() -> StageCost<FiniteSystem> {
    StageCost::new(KInfFn::identity(), NonnegFn::new(Expr::identity()).unwrap())
}

fn cmpfn_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    let grid = log_grid(1e-4, 1e4, 64);
    let (mut accepted, mut unrepresentable, mut worst) = (0, 0, 0.0f64);
    while accepted < 1000 {
        let depth = rng.gen_range(1..=6);
        let expr = common::kinf_tree(&mut rng, depth);
        check(expr.depth() <= 6, || format!("depth {} > 6", expr.depth()))?;
        let f = KInfFn::new(expr.clone()).map_err(|e| format!("tree rejected: {e}: {expr:?}"))?;
        if !common::representable(&f, &grid) {
            unrepresentable += 1;
            continue;
        }
        stagecraft::cmpfn::check_kinf_on_grid(&f, &grid, 1e6).map_err(|e| format!("{e}: {expr:?}"))?;
        for &r in &grid {
            let back = f.invert(f.value(r)).map_err(|e| e.to_string())?;
            let err = (back - r).abs() / r;
            worst = worst.max(err);
            check(err <= 1e-8, || format!("round trip {r} -> {back} for {expr:?}"))?;
        }
        accepted += 1;
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!(
        "1000 trees, worst round trip {worst:.1e}, {unrepresentable} skipped as out of double range, {:.2?}",
        start.elapsed()
    ))
}

fn kl_domination() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(2);
    let mut betas: Vec<KLFn> = (0..50).map(|_| common::random_separable(&mut rng)).collect();
    betas.extend((0..20).map(|_| common::random_sampled(&mut rng)));
    let mut checks = 0usize;
    for (k, beta) in betas.iter().enumerate() {
        let theta = rng.gen_range(0.2..0.9);
        let (g1, g2) = kl_decompose(beta, theta).map_err(|e| format!("beta {k}: {e}"))?;
        let mut grid = ValidationGrid::default();
        let natural = beta.natural_grid();
        grid.r.extend(natural.r);
        grid.t.extend(natural.t);
        for &r in &grid.r {
            let inner = g1.value(r);
            for &t in &grid.t {
                let lhs = beta.value(r, t);
                let rhs = g2.value(theta.powf(t) * inner);
                check(lhs <= rhs + 1e-9, || {
                    format!("beta {k} at r = {r}, t = {t}: {lhs} > {rhs}")
                })?;
                checks += 1;
            }
        }
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!(
        "50 separable + 20 sampled, {checks} cells, {:.2?}",
        start.elapsed()
    ))
}

fn uvc_to_ubgec_replay() -> Outcome {
    let case = cases::scalar_linear();
    let uvc = case.uvc.as_ref().expect("scalar linear has a UVC certificate");
    let theta = 0.5;
    let cert = uvc_to_ubgec(uvc, theta).map_err(|e| e.to_string())?;
    // beta_u = r 2^-t decomposes at theta = 1/2 as gamma1 = gamma2 = id
    let (g1, g2) = kl_decompose(&uvc.beta_u, theta).map_err(|e| e.to_string())?;
    for r in log_grid(1e-3, 1e3, 16) {
        check((cert.eta.value(r) - g2.invert(r).unwrap()).abs() <= 1e-12 * r, || {
            format!("eta({r})")
        })?;
        check(
            (cert.gamma.value(r) - g1.value(r) / (1.0 - theta)).abs() <= 1e-12 * r,
            || format!("gamma({r})"),
        )?;
    }
    let samples = cases::builtin_samples(&case.system, 32);
    let mut worst = f64::NEG_INFINITY;
    for x in &samples {
        let u = cert.policy.controls(&*case.system, x, 64).map_err(|e| e.to_string())?;
        let bound = cert.gamma.value(case.system.sigma(x));
        let mut energy = 0.0;
        for n in 0..64 {
            energy += cert.eta.value(case.system.rho(&u[n]));
            let margin = bound - energy;
            worst = worst.max(-margin);
            check(margin >= 0.0, || format!("energy {energy} > {bound} at n = {n}"))?;
        }
    }
    Ok(format!("32 samples, N <= 64, min margin {:.3e}", -worst))
}

fn synthesize_case<S: ControlSystem + 'static>(case: &Case<S>) -> Result<usize, String> {
    let params = SynthesisParams {
        theta: case.theta,
        ..Default::default()
    };
    let result = synthesize(&case.ubgec, &params).map_err(|e| format!("{}: {e}", case.name))?;
    let rep = certify_ucc(&result, &case.ubgec, &*case.system, &case.samples, 256, DEFAULT_SLACK)
        .map_err(|e| format!("{}: {e}", case.name))?;
    check(rep.passed() && !rep.is_vacuous(), || {
        format!("{}: {:?}", case.name, rep.first_violation())
    })?;
    Ok(case.samples.len())
}

fn synthesis_replay() -> Outcome {
    let mut counts = Vec::new();
    for name in cases::BUILTIN_NAMES {
        counts.push(format!("{name} {}", synthesize_case(&cases::builtin(name).unwrap())?));
    }
    counts.push(format!("chain {}", synthesize_case(&cases::chain(10))?));
    Ok(format!("N <= 256, samples per system: {}", counts.join(", ")))
}

/// Smallest `k` with `sigma <= k gamma2^{-1}(sigma)` on a grid.
fn product_weight(gamma2: &KInfFn) -> f64 {
    log_grid(1e-3, 1e3, 49)
        .into_iter()
        .map(|s| s / gamma2.invert(s).unwrap())
        .fold(0.0, f64::max)
        * (1.0 + 1e-6)
}

fn interaction_case<S: ControlSystem + 'static>(case: &Case<S>) -> Result<(), String> {
    let name = case.name;
    let params = SynthesisParams {
        theta: case.theta,
        ..Default::default()
    };
    let base = synthesize(&case.ubgec, &params).map_err(|e| format!("{name}: {e}"))?;
    let pairs = PairSampler::default()
        .pairs(&*case.system, &case.ubgec, &case.samples)
        .map_err(|e| e.to_string())?;
    let id = KInfFn::identity();
    let certify = |result| -> Result<(), String> {
        let rep = certify_ucc(&result, &case.ubgec, &*case.system, &case.samples, 256, DEFAULT_SLACK)
            .map_err(|e| e.to_string())?;
        check(rep.passed(), || format!("{name}: {:?}", rep.first_violation()))
    };

    // s = sigma rho <= gamma2^{-1}(sigma) (k rho)
    let k = product_weight(&base.provenance.gamma2);
    let product = Interaction::Measure(MeasureTerm::Product {
        state: id.clone(),
        input: id.clone(),
    });
    let spec = InteractionSpec::new(product, 0.0, 0.0, 1.0, Some(KInfFn::linear(k).unwrap()));
    let res = admit_interaction(&spec, &base, &case.ubgec, &*case.system, &pairs)
        .map_err(|e| format!("{name} product: {e}"))?;
    check(res.alpha_bar.value(1.0) > base.alpha_bar.value(1.0), || {
        format!("{name}: bound not enlarged")
    })?;
    certify(res)?;

    // s = alpha3(alpha1(sigma) + alpha2(rho))
    let eta = case.ubgec.eta.as_kinf().ok_or("eta is not K-infinity")?;
    let a1 = KInfFn::power(2.0).unwrap();
    let spec = additive_interaction(&a1, &id, &base.provenance.gamma2, &eta);
    let res = admit_interaction(&spec, &base, &case.ubgec, &*case.system, &pairs)
        .map_err(|e| format!("{name} additive: {e}"))?;
    certify(res)?;
    // the built term is alpha3 itself
    let a3 = build_alpha3(&a1, &id, &base.provenance.gamma2, &eta);
    for (s, r) in [(0.5, 0.1), (2.0, 3.0)] {
        let direct = a3.value(a1.value(s) + r);
        let term = MeasureTerm::Additive {
            outer: a3.clone(),
            state: a1.clone(),
            input: id.clone(),
        };
        check((term.value(s, r) - direct).abs() <= 1e-12 * direct.max(1.0), || {
            "alpha3 mismatch".into()
        })?;
    }

    // ten times the declared product bound is rejected
    let loud = Interaction::Measure(MeasureTerm::Product {
        state: KInfFn::linear(10.0 * k).unwrap(),
        input: id.clone(),
    });
    let spec = InteractionSpec::new(loud, 0.0, 0.0, 1.0, Some(KInfFn::linear(k).unwrap()));
    match admit_interaction(&spec, &base, &case.ubgec, &*case.system, &pairs) {
        Err(SynthError::InteractionRejected { .. }) => Ok(()),
        Err(e) => Err(format!("{name}: adversarial term failed with {e}")),
        Ok(_) => Err(format!("{name}: adversarial term was admitted")),
    }
}

fn interaction_replay() -> Outcome {
    for name in cases::BUILTIN_NAMES {
        interaction_case(&cases::builtin(name).unwrap())?;
    }
    interaction_case(&cases::chain(10))?;
    Ok("sigma rho and alpha3(alpha1 + alpha2) certified, 10x term rejected, on all four systems".into())
}

fn transient_replay() -> Outcome {
    let case = cases::scalar_linear();
    let sys = &*case.system;
    let base = synthesize(&case.ubgec, &SynthesisParams::default()).map_err(|e| e.to_string())?;
    // zero below R_sigma = 1, cubic above: no global bound of the small-region form
    let s = Interaction::custom("cubic above 1", |x: &Vec<f64>, _u: &Vec<f64>| {
        let a = x[0].abs();
        if a >= 1.0 {
            a.powi(3)
        } else {
            0.0
        }
    });
    let alpha_x = KInfFn::identity().add(&KInfFn::power(3.0).unwrap());
    let spec = InteractionSpec::new(s, 1.0, 1.0, 0.0, None).with_transient(TransientData {
        r_sigma: 1.0,
        alpha_x,
        alpha_u: KInfFn::identity(),
    });
    let pairs = PairSampler::default()
        .pairs(sys, &case.ubgec, &case.samples)
        .map_err(|e| e.to_string())?;
    let mut grid = log_grid(1e-3, 1e3, 64);
    grid.extend(case.samples.iter().map(|x| sys.sigma(x)));
    let split = transient_split_bound(&spec, &base, &case.ubgec, sys, &pairs, &grid).map_err(|e| e.to_string())?;
    let rep =
        certify_ucc(&split.result, &case.ubgec, sys, &case.samples, 256, DEFAULT_SLACK).map_err(|e| e.to_string())?;
    check(rep.passed(), || format!("certify_ucc: {:?}", rep.first_violation()))?;
    let rep = verify_transient_split(&split, &case.ubgec, sys, &case.samples, 256, DEFAULT_SLACK)
        .map_err(|e| e.to_string())?;
    check(rep.passed(), || format!("transient split: {:?}", rep.first_violation()))?;

    // independent replay of both transient claims
    for x in &case.samples {
        let r = sys.sigma(x);
        let u = case.ubgec.policy.controls(sys, x, 256).map_err(|e| e.to_string())?;
        let traj = rollout(sys, x, &u, 256).map_err(|e| e.to_string())?;
        let (mut cost, mut steps) = (0.0, 0usize);
        for (xn, un) in traj.states.iter().zip(&traj.inputs) {
            if sys.sigma(xn) >= 1.0 {
                cost += split.result.ell.eval(sys, xn, un);
                steps += 1;
            }
        }
        let n = split.n_of(r).map_err(|e| e.to_string())?;
        let a1 = split.alpha1(r).map_err(|e| e.to_string())?;
        check(steps <= n, || format!("|I1| = {steps} > N({r}) = {n}"))?;
        check(cost <= a1 * (1.0 + DEFAULT_SLACK) + DEFAULT_SLACK, || {
            format!("I1 cost {cost} > {a1} at {r}")
        })?;
    }
    Ok(format!(
        "R_sigma = 1, {} samples, N(100) = {}",
        case.samples.len(),
        split.n_of(100.0).map_err(|e| e.to_string())?
    ))
}

fn converse_round_trip() -> Outcome {
    let start = Instant::now();
    let cfg = ConverseConfig::default();

    let sys = FiniteSystem::chain(10);
    let ell = unit_cost();
    let vt = value_iterate(&sys, &ell, ViOptions::default()).map_err(|e| e.to_string())?;
    let ucc = extract_ucc(&vt, &sys, &ell, 1.0).map_err(|e| e.to_string())?;
    let sys = Arc::new(sys);
    let states: Vec<usize> = (0..10).collect();
    let out = converse_pipeline(&ucc, Arc::clone(&sys), &states, &cfg).map_err(|e| format!("chain: {e}"))?;
    check(out.claims.passed(), || {
        format!("chain claims: {:?}", out.claims.first_violation())
    })?;
    let rep = out
        .cert
        .verify(&*sys, &states, cfg.horizon, DEFAULT_SLACK)
        .map_err(|e| e.to_string())?;
    check(rep.passed(), || format!("chain UBgEC: {:?}", rep.first_violation()))?;
    check(rep.rows.iter().any(|r| r.inequality == Inequality::Energy), || {
        "no energy rows".into()
    })?;
    check(out.cert.eta == ell.r && out.cert.eta.is_kinf(), || {
        "eta differs from r".into()
    })?;
    check(out.cert.gamma == converse::alpha_hat(&ucc), || {
        "gamma differs from alpha_hat".into()
    })?;

    let case = cases::scalar_linear();
    let result = synthesize(&case.ubgec, &SynthesisParams::default()).map_err(|e| e.to_string())?;
    let samples = cases::builtin_samples(&case.system, 16);
    let rep =
        certify_ucc(&result, &case.ubgec, &*case.system, &samples, 256, DEFAULT_SLACK).map_err(|e| e.to_string())?;
    check(rep.passed(), || format!("certify: {:?}", rep.first_violation()))?;
    let ucc = ucc_certificate(&result, &case.ubgec);
    let out = converse_pipeline(&ucc, Arc::clone(&case.system), &samples, &cfg).map_err(|e| format!("linear: {e}"))?;
    check(out.claims.passed(), || {
        format!("linear claims: {:?}", out.claims.first_violation())
    })?;
    let rep = out
        .cert
        .verify(&*case.system, &samples, cfg.horizon, DEFAULT_SLACK)
        .map_err(|e| e.to_string())?;
    check(rep.passed(), || format!("linear UBgEC: {:?}", rep.first_violation()))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "chain 10 states and scalar linear 16 samples, horizon {}, {:.2?}",
        cfg.horizon,
        start.elapsed()
    ))
}

fn oracle_fidelity() -> Outcome {
    let mut rng = StdRng::seed_from_u64(8);
    let ell = unit_cost();
    let opts = ViOptions::default();
    let tol = 10.0 * opts.vi_tol;
    let mut states = 0;
    let mut systems: Vec<FiniteSystem> = (0..200).map(|_| common::random_finite(&mut rng)).collect();
    systems.push(FiniteSystem::chain(5));
    let same = |a: f64, b: f64| (a.is_infinite() && b.is_infinite()) || (a - b).abs() <= tol;
    for (k, sys) in systems.iter().enumerate() {
        let vt = value_iterate(sys, &ell, opts).map_err(|e| format!("system {k}: {e}"))?;
        let exact = common::brute_force_values(sys, &ell);
        for x in 0..sys.n_states() {
            let greedy = policy_cost(sys, &ell, &vt.policy, x);
            let independent = common::stationary_cost(sys, &ell, &vt.policy, x);
            let eight = common::lookahead(sys, &ell, x, 8, &vt.v);
            check(same(greedy, vt.v[x]) && same(independent, vt.v[x]), || {
                format!("system {k} state {x}: greedy {greedy}, value {}", vt.v[x])
            })?;
            check(same(exact[x], vt.v[x]), || {
                format!("system {k} state {x}: exhaustive {}, value {}", exact[x], vt.v[x])
            })?;
            check(same(eight, vt.v[x]), || {
                format!("system {k} state {x}: 8-step {eight}, value {}", vt.v[x])
            })?;
            states += 1;
        }
    }
    Ok(format!(
        "{} systems, {states} states, tolerance {tol:.0e}",
        systems.len()
    ))
}

fn formula_spot_checks() -> Outcome {
    let sys_policy = stagecraft::certificates::PolicyOracle::constant("zero", vec![0.0]);
    let ucc = stagecraft::certificates::UccCert::<stagecraft::system::BuiltinSystem> {
        ell: StageCost::new(KInfFn::identity(), NonnegFn::new(Expr::identity()).unwrap()),
        alpha_bar: KInfFn::linear(2.0).unwrap(),
        domain: stagecraft::certificates::Domain::All,
        policy: sys_policy,
        invariant: true,
    };
    // by hand: gamma_sigma = 2r, gamma_sigma^{-1}(0.1) = 0.05, 2 / 0.05 - 1 = 39
    let hand_n = ((2.0 / (0.1 / 2.0)) - 1.0f64).ceil().max(1.0) as u64;
    let n = converse::step2_n_tilde(&ucc, 1.0, 0.1, 1e9).map_err(|e| e.to_string())?;
    check(n == 39 && hand_n == 39, || format!("N = {n}, expected 39"))?;
    // by hand: alpha_tilde = 2r + 2 (2r) = 6r; min{1/6, (1/2) 2 / 6, 1} = 1/6
    let hand_eps = (1.0f64 / 6.0).min(0.5 * 2.0 / 6.0).min(1.0);
    let sched = converse::step3_schedule(&ucc, 1.0, &ConverseConfig::default()).map_err(|e| e.to_string())?;
    check((sched.eps_tilde[0] - hand_eps).abs() <= 1e-15, || {
        format!("eps_tilde_1 = {}", sched.eps_tilde[0])
    })?;
    Ok(format!("N = {n}, eps_tilde_1 = {:.17}", sched.eps_tilde[0]))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 cmpfn algebra", cmpfn_algebra),
        ("2 KL decomposition domination", kl_domination),
        ("3 UVC to UBgEC energy replay", uvc_to_ubgec_replay),
        ("4 synthesized cost bound", synthesis_replay),
        ("5 interaction terms", interaction_replay),
        ("6 transient split", transient_replay),
        ("7 converse round trip", converse_round_trip),
        ("8 oracle fidelity", oracle_fidelity),
        ("9 step 2/3 formulas", formula_spot_checks),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
