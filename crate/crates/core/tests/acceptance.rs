//! Acceptance suite on the reference model and its variants. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any criterion fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use pdmp_impulse::controlled::{
    check_intervention_markov, check_joint_law, check_projection, estimate_cost_j,
    simulate_controlled,
};
use pdmp_impulse::dynamics::{
    cumulative_intensity, hit_time, sample_sojourn, simulate_uncontrolled, tail_horizon, TAIL_TOL,
};
use pdmp_impulse::model::{AtomDoc, ModelDocument};
use pdmp_impulse::operators::{op_j, op_k, Branch, InterventionValue};
use pdmp_impulse::stats::{
    binomial_z, ks_critical_one_sample, ks_one_sample, open_uniform, replicate_rng, MeanEstimate,
};
use pdmp_impulse::valuefn::{
    compute_h, h_residual, sandwich_check, solve, FunctionStore, Grid, GridSpec, PolicyTable,
    SolveConfig, DEFAULT_H_TOL,
};
use pdmp_impulse::{PdmpModel, StatePoint};
use rand::Rng;

/// Master seed for every Monte Carlo criterion.
const SEED: u64 = 2026;
const MC_REPLICATES: usize = 100_000;
const PAIRED_REPLICATES: usize = 10_000;
const EPS: f64 = 0.01;
const FINE_EPS: f64 = 1e-4;
const N_MAX: usize = 3;

/// Seed for one cell of one criterion; distinct cells never share a stream
/// family, whatever the master seed.
fn cell_seed(criterion: u64, cell: u64) -> u64 {
    SEED.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (criterion << 32 | cell)
}

fn pt(mode: usize, z: f64) -> StatePoint {
    StatePoint::new(mode, &[z])
}

fn start_points() -> [StatePoint; 2] {
    [pt(0, 2.0), pt(1, 4.0)]
}

fn variant(edit: impl FnOnce(&mut ModelDocument)) -> PdmpModel {
    let mut doc = ModelDocument::reference();
    edit(&mut doc);
    PdmpModel::from_document(doc).unwrap()
}

fn config(eps: f64, density: usize) -> SolveConfig {
    SolveConfig::new(
        eps,
        N_MAX,
        GridSpec::new(density).with_points(start_points()),
    )
}

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

struct Context {
    m: PdmpModel,
    table: PolicyTable,
    horizon: f64,
}

fn fixed_point(ctx: &Context) -> Outcome {
    let grid = ctx.table.grid.clone();
    let h = compute_h(&ctx.m, &grid, DEFAULT_H_TOL).unwrap();
    let sup = h.values.iter().cloned().fold(0.0, f64::max);
    let res = h_residual(&ctx.m, &h).unwrap();
    let limit = 1e-6 * (1.0 + sup);
    Outcome::new(
        res <= limit,
        format!(
            "sup |Kh - h| = {res:.3e} <= {limit:.3e} over {} nodes",
            grid.len()
        ),
    )
}

fn h_cross_oracle(ctx: &Context) -> Outcome {
    let points = [pt(0, 2.0), pt(1, 4.0), pt(0, 8.0)];
    let mut worst: f64 = 0.0;
    for (p, x) in points.iter().enumerate() {
        let costs: Vec<f64> = (0..MC_REPLICATES as u64)
            .map(|i| {
                let mut rng = replicate_rng(cell_seed(2, p as u64), i);
                simulate_uncontrolled(&ctx.m, x, ctx.horizon, &mut rng)
                    .unwrap()
                    .discounted_running_cost
            })
            .collect();
        let est = MeanEstimate::from_samples(&costs);
        worst = worst.max(est.z_score(ctx.table.value_at(0, x).unwrap()));
    }
    Outcome::new(
        worst < 3.0,
        format!("max |mean - h|/SE = {worst:.3} at 3 start points"),
    )
}

fn sandwich(ctx: &Context) -> Outcome {
    let fine = solve(&ctx.m, &config(FINE_EPS, ctx.table.grid.spec.density)).unwrap();
    let rows = sandwich_check(&ctx.table, &fine, 1e-3).unwrap();
    let detail: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "k={}: [{:.2e}, {:.2e}] <= {:.4}",
                r.k, r.min_diff, r.max_diff, r.upper_limit
            )
        })
        .collect();
    Outcome::new(rows.iter().all(|r| r.passed), detail.join("; "))
}

fn strategy_cost(ctx: &Context) -> Outcome {
    let mut passed = true;
    let mut detail = Vec::new();
    for (p, x) in start_points().iter().enumerate() {
        for n0 in 0..=N_MAX {
            let seed = cell_seed(4, 10 * p as u64 + n0 as u64);
            let est = estimate_cost_j(&ctx.m, &ctx.table, x, n0, MC_REPLICATES, seed, ctx.horizon)
                .unwrap();
            let v = ctx.table.value_at(n0, x).unwrap();
            let z = est.total.z_score(v);
            let covered = est.ci95.0 <= v && v <= est.ci95.1;
            passed &= covered && z < 3.0;
            detail.push(format!(
                "{x} N0={n0}: z={z:.2}{}",
                if covered { "" } else { " (CI miss)" }
            ));
        }
    }
    Outcome::new(passed, detail.join("; "))
}

fn strictness(ctx: &Context) -> Outcome {
    let nodes = ctx.table.grid.nodes();
    let mut bad = 0;
    let mut j_wins = 0;
    for s in &ctx.table.stages {
        for (i, x) in nodes.iter().enumerate() {
            if s.branch[i] == Branch::JWins {
                j_wins += 1;
                if s.r[i] >= hit_time(&ctx.m, x).unwrap() {
                    bad += 1;
                }
            }
        }
    }
    Outcome::new(
        bad == 0,
        format!("{bad} J-wins nodes with r = t* out of {j_wins} J-wins node-levels"),
    )
}

fn survival_law(ctx: &Context) -> Outcome {
    let m = &ctx.m;
    let mut passed = true;
    let mut detail = Vec::new();
    for (p, x) in start_points().iter().enumerate() {
        let ts = hit_time(m, x).unwrap();
        let samples: Vec<(f64, bool)> = (0..MC_REPLICATES as u64)
            .map(|i| {
                let mut rng = replicate_rng(cell_seed(6, p as u64), i);
                let s = sample_sojourn(m, x, open_uniform(&mut rng)).unwrap();
                (s.time, s.boundary_hit)
            })
            .collect();
        let continuous = |t: f64| 1.0 - (-cumulative_intensity(m, x, t).unwrap()).exp();
        // P(S <= t) and P(S < t); the atom at t* separates the two.
        let cdf = |t: f64| {
            if t >= ts {
                1.0
            } else if t <= 0.0 {
                0.0
            } else {
                continuous(t)
            }
        };
        let cdf_left = |t: f64| {
            if t > ts {
                1.0
            } else if t <= 0.0 {
                0.0
            } else {
                continuous(t)
            }
        };
        let times: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let ks = ks_one_sample(&times, cdf, cdf_left);
        let crit = ks_critical_one_sample(MC_REPLICATES);
        let atom = (-cumulative_intensity(m, x, ts).unwrap()).exp();
        let hits = samples.iter().filter(|s| s.1).count();
        let z = binomial_z(hits, MC_REPLICATES, atom);
        passed &= ks < crit && z < 3.0;
        detail.push(format!("{x}: KS {ks:.5} < {crit:.5}, boundary z={z:.2}"));
    }
    Outcome::new(passed, detail.join("; "))
}

fn joint_law(ctx: &Context) -> Outcome {
    let mut passed = true;
    let mut detail = Vec::new();
    for (p, x) in start_points().iter().enumerate() {
        for n0 in 1..=2 {
            let seed = cell_seed(7, 10 * p as u64 + n0 as u64);
            let r = check_joint_law(&ctx.m, &ctx.table, x, n0, MC_REPLICATES, seed).unwrap();
            passed &= r.passed(3.0);
            detail.push(format!("{x} N0={n0}: max z={:.2}", r.max_z));
        }
    }
    // A kernel with two atoms makes the post-jump split non-trivial.
    let m2 = variant(|d| {
        d.kernel.as_mut().unwrap()[0].atoms = vec![
            AtomDoc {
                mode: 1,
                zeta: vec!["5".into()],
                prob: 0.3,
            },
            AtomDoc {
                mode: 0,
                zeta: vec!["9".into()],
                prob: 0.7,
            },
        ]
    });
    let t2 = solve(&m2, &config(EPS, 40)).unwrap();
    for n0 in 1..=2 {
        let r = check_joint_law(
            &m2,
            &t2,
            &pt(0, 2.0),
            n0,
            MC_REPLICATES,
            cell_seed(7, 100 + n0 as u64),
        )
        .unwrap();
        passed &= r.passed(3.0);
        detail.push(format!("two-atom kernel N0={n0}: max z={:.2}", r.max_z));
    }
    Outcome::new(passed, detail.join("; "))
}

fn monotonicity(ctx: &Context) -> Outcome {
    let m = &ctx.m;
    let grid = Arc::new(Grid::build(m, &GridSpec::new(20)).unwrap());
    let mut rng = replicate_rng(cell_seed(8, 0), 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let beta = rng.gen_range(0.0..2.0);
        let base: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(0.0..10.0)).collect();
        let bumped: Vec<f64> = base.iter().map(|w| w + beta * rng.gen::<f64>()).collect();
        let w = FunctionStore::new(grid.clone(), base).unwrap();
        let w2 = FunctionStore::new(grid.clone(), bumped).unwrap();
        let mw = InterventionValue::new(m, &w).unwrap();
        let mw2 = InterventionValue::new(m, &w2).unwrap();
        let x = pt(rng.gen_range(0..2), rng.gen_range(0.05..9.95));
        let ts = hit_time(m, &x).unwrap();
        let t = rng.gen_range(0.0..ts);
        let (k1, k2) = (op_k(m, &w, &x).unwrap(), op_k(m, &w2, &x).unwrap());
        let (j1, j2) = (
            op_j(m, &mw, &w, &x, t).unwrap(),
            op_j(m, &mw2, &w2, &x, t).unwrap(),
        );
        for (a, b) in [(k1, k2), (j1, j2)] {
            // a ≤ b ≤ a + β, so both excesses below are ≤ 0.
            worst = worst.max(a - b).max(b - a - beta);
        }
    }
    Outcome::new(
        worst <= 1e-8,
        format!("largest sandwich violation {worst:.3e} over 100 pairs"),
    )
}

fn trivial_model(_: &Context) -> Outcome {
    let m = variant(|d| d.costs.as_mut().unwrap().running.modes = vec!["0".into(), "0".into()]);
    let t = solve(&m, &config(EPS, 20)).unwrap();
    let mut passed = t.h.iter().all(|&v| v == 0.0)
        && t.stages
            .iter()
            .all(|s| s.value.iter().all(|&v| v == 0.0) && s.j_wins() == 0);
    let horizon = tail_horizon(&m, TAIL_TOL);
    let mut paths = 0;
    for (p, x) in start_points().iter().enumerate() {
        for i in 0..1_000 {
            let mut rng = replicate_rng(cell_seed(9, p as u64), i);
            let path = simulate_controlled(&m, &t, x, N_MAX, horizon, &mut rng).unwrap();
            passed &= path.tau.is_empty() && path.total_cost() == 0.0;
            paths += 1;
        }
    }
    Outcome::new(
        passed,
        format!("h, V_1..V_3 identically 0, no J-wins nodes; {paths} paths with no interventions and zero cost"),
    )
}

fn projection(ctx: &Context) -> Outcome {
    let mut passed = true;
    let mut detail = Vec::new();
    for (p, x) in start_points().iter().enumerate() {
        let r = check_projection(
            &ctx.m,
            &ctx.table,
            x,
            MC_REPLICATES,
            cell_seed(10, p as u64),
        )
        .unwrap();
        passed &= r.passed(3.0);
        detail.push(format!(
            "{x}: KS {:.5} < {:.5}, max z={:.2}",
            r.ks_stat, r.ks_critical, r.max_z
        ));
    }
    Outcome::new(passed, detail.join("; "))
}

fn markov(ctx: &Context) -> Outcome {
    let mut passed = true;
    let mut detail = Vec::new();
    // The third point jumps naturally first and may intervene afterwards.
    let points = [pt(0, 2.0), pt(1, 4.0), pt(1, 0.525)];
    for (p, x) in points.iter().enumerate() {
        for i in 1..=2 {
            let seed = cell_seed(11, 10 * p as u64 + i as u64);
            let r = check_intervention_markov(&ctx.m, &ctx.table, x, 2, i, PAIRED_REPLICATES, seed)
                .unwrap();
            passed &= r.passed();
            for c in &r.comparisons {
                detail.push(format!(
                    "{x} i={i} {}: n={} KS {:.4} < {:.4}",
                    c.label, c.n, c.stat, c.critical
                ));
            }
        }
    }
    Outcome::new(passed, detail.join("; "))
}

fn main() {
    let m = PdmpModel::reference();
    let setup = Instant::now();
    let table = solve(&m, &config(EPS, pdmp_impulse::valuefn::DEFAULT_DENSITY)).unwrap();
    let horizon = tail_horizon(&m, TAIL_TOL);
    println!("solved reference model in {:.1?}", setup.elapsed());
    let ctx = Context { m, table, horizon };

    type Criterion = (&'static str, u64, fn(&Context) -> Outcome);
    let criteria: [Criterion; 11] = [
        ("fixed point h = Kh", 60, fixed_point),
        ("h cross-oracle", 120, h_cross_oracle),
        ("sandwich surrogate", 300, sandwich),
        ("strategy-cost identity", 600, strategy_cost),
        ("strict r < t* on J-wins nodes", 60, strictness),
        ("survival law", 120, survival_law),
        ("joint first-transition law", 120, joint_law),
        ("operator monotonicity", 60, monotonicity),
        ("trivial-model suite", 60, trivial_model),
        ("projection property", 120, projection),
        ("intervention-time Markov check", 120, markov),
    ];
    let mut failures = 0;
    for (n, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run(&ctx);
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*limit);
        let passed = outcome.passed && in_time;
        if !passed {
            failures += 1;
        }
        println!(
            "{} [{:>2}] {name}: {} ({:.1?}{})",
            if passed { "PASS" } else { "FAIL" },
            n + 1,
            outcome.detail,
            elapsed,
            if in_time {
                String::new()
            } else {
                format!(", limit {limit} s")
            }
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
