#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::Rng;

use stagecraft::cmpfn::{log_grid, Expr, KInfFn, KLFn, SampledKL};
use stagecraft::oracle::FiniteSystem;
use stagecraft::system::{ControlSystem, StageCost};

/// Random K-infinity tree of depth at most `depth`.
pub fn kinf_tree(rng: &mut StdRng, depth: usize) -> Expr {
    if depth <= 1 || rng.gen_bool(0.25) {
        return kinf_leaf(rng);
    }
    let d = depth - 1;
    match rng.gen_range(0..7) {
        0 => Expr::scale(rng.gen_range(0.1..10.0), kinf_tree(rng, d)),
        1 => Expr::sum(kinf_tree(rng, d), kinf_tree(rng, d)),
        2 => Expr::product(kinf_tree(rng, d), kinf_tree(rng, d)),
        3 => Expr::min(kinf_tree(rng, d), kinf_tree(rng, d)),
        4 => Expr::max(kinf_tree(rng, d), kinf_tree(rng, d)),
        5 => Expr::compose(kinf_tree(rng, d), kinf_tree(rng, d)),
        _ => Expr::inverse(kinf_tree(rng, d)),
    }
}

pub fn kinf_leaf(rng: &mut StdRng) -> Expr {
    match rng.gen_range(0..4) {
        0 => Expr::identity(),
        1 => Expr::power(rng.gen_range(0.5..2.0)),
        2 => Expr::linear(rng.gen_range(0.1..10.0)),
        _ => {
            let n = rng.gen_range(1..6);
            let mut pts = vec![[0.0, 0.0]];
            let (mut x, mut y) = (0.0, 0.0);
            for _ in 0..n {
                x += rng.gen_range(0.05..3.0);
                y += rng.gen_range(0.05..3.0);
                pts.push([x, y]);
            }
            Expr::table(pts)
        }
    }
}

/// Values are finite and positive on the grid, and large at its end, so
/// the tree is usable in double precision there.
pub fn representable(f: &KInfFn, grid: &[f64]) -> bool {
    grid.iter().all(|&r| {
        let v = f.value(r);
        v.is_finite() && v > 1e-300 && v < 1e300
    })
}

/// `c r theta^t`-like separable bound with random K-infinity parts.
pub fn random_separable(rng: &mut StdRng) -> KLFn {
    loop {
        let g2 = KInfFn::new(kinf_tree(rng, 2)).expect("generator yields K-infinity");
        let g1 = KInfFn::new(kinf_tree(rng, 2)).expect("generator yields K-infinity");
        let theta = rng.gen_range(0.2..0.95);
        let grid = log_grid(1e-4, 1e4, 16);
        if representable(&g1, &grid) && representable(&g2.compose(&g1), &grid) {
            return KLFn::separable(g2, theta, g1).expect("valid theta");
        }
    }
}

/// Table `a_i b_j (1 + c a_i b_j)` with `a` increasing and `b` decreasing.
pub fn random_sampled(rng: &mut StdRng) -> KLFn {
    let nr = rng.gen_range(4..12);
    let nt = rng.gen_range(4..24);
    let radii = log_grid(1e-3, 1e3, nr);
    let times: Vec<f64> = (0..nt).map(|j| (j * rng.gen_range(1..3)) as f64).collect();
    let mut times = times;
    times.dedup();
    for j in 1..times.len() {
        if times[j] <= times[j - 1] {
            times[j] = times[j - 1] + 1.0;
        }
    }
    let a: Vec<f64> = radii.iter().map(|r| r * rng.gen_range(0.5..2.0)).collect();
    let mut a_sorted = a.clone();
    for i in 1..a_sorted.len() {
        a_sorted[i] = a_sorted[i].max(a_sorted[i - 1] * 1.01);
    }
    let ratio: f64 = rng.gen_range(0.3..0.95);
    let c = rng.gen_range(0.0..0.1);
    let values = a_sorted
        .iter()
        .map(|&ai| {
            times
                .iter()
                .map(|&t| {
                    let b = ratio.powf(t);
                    ai * b * (1.0 + c * ai * b)
                })
                .collect()
        })
        .collect();
    KLFn::Sampled(SampledKL::new(radii, times, values).expect("monotone table"))
}

/// Random deterministic system with `n <= 5` states and `m <= 3` inputs;
/// state 0 has `sigma = 0`.
pub fn random_finite(rng: &mut StdRng) -> FiniteSystem {
    let n = rng.gen_range(2..=5);
    let m = rng.gen_range(1..=3);
    let transitions = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0..n)).collect()).collect();
    let sigma = (0..n)
        .map(|i| {
            if i == 0 || rng.gen_bool(0.1) {
                0.0
            } else {
                rng.gen_range(0.1..3.0)
            }
        })
        .collect();
    let rho = (0..m)
        .map(|_| {
            if rng.gen_bool(0.3) {
                0.0
            } else {
                rng.gen_range(0.1..2.0)
            }
        })
        .collect();
    FiniteSystem::new(transitions, sigma, rho).expect("valid random system")
}

/// Cost of a stationary policy from `x`, by explicit cycle detection.
pub fn stationary_cost(sys: &FiniteSystem, ell: &StageCost<FiniteSystem>, policy: &[usize], x: usize) -> f64 {
    let mut visited = vec![None; sys.n_states()];
    let (mut x, mut acc) = (x, 0.0);
    loop {
        if let Some(before) = visited[x] {
            return if acc > before { f64::INFINITY } else { acc };
        }
        visited[x] = Some(acc);
        let u = policy[x];
        acc += ell.eval(sys, &x, &u);
        x = sys.step(&x, &u);
    }
}

/// Optimal infinite-horizon cost by enumerating every stationary policy.
pub fn brute_force_values(sys: &FiniteSystem, ell: &StageCost<FiniteSystem>) -> Vec<f64> {
    let (n, m) = (sys.n_states(), sys.n_inputs());
    let mut best = vec![f64::INFINITY; n];
    let mut policy = vec![0usize; n];
    loop {
        for x in 0..n {
            best[x] = best[x].min(stationary_cost(sys, ell, &policy, x));
        }
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            policy[k] += 1;
            if policy[k] < m {
                break;
            }
            policy[k] = 0;
            k += 1;
        }
    }
}

/// `min over u_0..u_{h-1} of [J_h + tail(x_h)]` by exhaustive search.
pub fn lookahead(sys: &FiniteSystem, ell: &StageCost<FiniteSystem>, x: usize, h: usize, tail: &[f64]) -> f64 {
    if h == 0 {
        return tail[x];
    }
    (0..sys.n_inputs())
        .map(|u| ell.eval(sys, &x, &u) + lookahead(sys, ell, sys.step(&x, &u), h - 1, tail))
        .fold(f64::INFINITY, f64::min)
}
