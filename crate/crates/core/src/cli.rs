//! Command-line front end: `validate`, `compute-value`, `simulate`, `report`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::controlled::{check_joint_law, estimate_cost_j, sample_costs, simulate_controlled};
use crate::dynamics::{tail_horizon, TAIL_TOL};
use crate::error::{Error, Result};
use crate::model::{load_model_file, validate_model, PdmpModel, StatePoint};
use crate::operators::{inf_j, j_profile, Branch, InterventionValue, SearchOptions};
use crate::stats::replicate_rng;
use crate::valuefn::{
    sandwich_check, solve, GridSpec, PolicyTable, SolveConfig, DEFAULT_DENSITY, DEFAULT_H_TOL,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

pub const VALUE_FILE: &str = "value.pdmpval";
const SANDWICH_FACTOR: f64 = 100.0;
const SANDWICH_TOL: f64 = 1e-3;
const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Parser)]
#[command(
    name = "pdmp",
    version,
    about = "Impulse control of piecewise deterministic Markov processes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a model file against the standing assumptions.
    Validate(ValidateArgs),
    /// Compute h, V_1..V_N and the policy fields; write a `.pdmpval` artifact.
    ComputeValue(ComputeArgs),
    /// Estimate strategy costs by Monte Carlo and compare with V_N0.
    Simulate(SimulateArgs),
    /// Write plot-ready CSV bundles from a computed artifact.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Sample points per axis and mode.
    #[arg(long, default_value_t = 50)]
    pub grid: usize,
}

#[derive(Debug, Args)]
pub struct ComputeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
    #[arg(long, default_value_t = 3)]
    pub nmax: usize,
    #[arg(long, default_value_t = DEFAULT_DENSITY)]
    pub grid: usize,
    /// Start points `label:z1,z2,...` added to the grid as nodes.
    #[arg(long)]
    pub x0: Vec<String>,
    /// Also solve with ε/100 and check the sandwich bounds.
    #[arg(long)]
    pub sandwich: bool,
    #[arg(long, default_value_t = DEFAULT_H_TOL)]
    pub h_tol: f64,
    #[arg(long, default_value_t = SearchOptions::default().n_t)]
    pub n_t: usize,
    #[arg(long, default_value_t = SearchOptions::default().delta_rel)]
    pub delta_rel: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Artifact to use; defaults to `<out>/value.pdmpval`.
    #[arg(long)]
    pub value: Option<PathBuf>,
    #[arg(long, required = true)]
    pub x0: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub n0: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub replicates: usize,
    /// Simulation horizon; defaults to the tail-truncation rule.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Also check the first-transition law at each start point.
    #[arg(long)]
    pub law: bool,
    /// Write this many trajectories per row as JSON lines.
    #[arg(long, default_value_t = 0)]
    pub dump: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub value: Option<PathBuf>,
    /// Start points for J profiles and cost histograms.
    #[arg(long)]
    pub x0: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub n0: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub replicates: usize,
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Parse { .. } | Error::Unsupported(_) | Error::Validation { .. } | Error::Json(_) => {
            EXIT_VALIDATION
        }
        Error::ModelMismatch { .. } => EXIT_MISMATCH,
        Error::Domain(_)
        | Error::KernelCoverage(_)
        | Error::PolicyCoverage(_)
        | Error::Numerical(_)
        | Error::Resource(_)
        | Error::Explosion(_) => EXIT_NUMERICAL,
    }
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Validate(a) => cmd_validate(&a),
        Command::ComputeValue(a) => cmd_compute_value(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `label:z1,z2,...`; the label is a mode label or index.
pub fn parse_point(m: &PdmpModel, spec: &str) -> Result<StatePoint> {
    let bad = |msg: &str| Error::parse("x0", format!("{spec:?}: {msg}"));
    let (label, coords) = spec
        .split_once(':')
        .ok_or_else(|| bad("expected label:z"))?;
    let mode = m
        .mode_by_label(label)
        .or_else(|| {
            label
                .parse()
                .ok()
                .filter(|&i: &usize| i < m.n_modes())
                .map(crate::ModeId)
        })
        .ok_or_else(|| bad("unknown mode"))?;
    let zeta = coords
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|_| bad("bad coordinate")))
        .collect::<Result<Vec<_>>>()?;
    if zeta.len() != m.dim {
        return Err(bad("wrong number of coordinates"));
    }
    let x = StatePoint::new(mode.0, &zeta);
    if !m.is_interior(&x) {
        return Err(Error::Domain(format!("{x} is not an interior state")));
    }
    Ok(x)
}

fn format_point(m: &PdmpModel, x: &StatePoint) -> String {
    let zeta: Vec<String> = x.zeta.iter().map(f64::to_string).collect();
    format!("{}:{}", m.modes[x.mode.0].label, zeta.join(" "))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn load_table(m: &PdmpModel, common: &CommonArgs, value: &Option<PathBuf>) -> Result<PolicyTable> {
    let path = value.clone().unwrap_or_else(|| common.out.join(VALUE_FILE));
    let table = PolicyTable::load(path)?;
    table.check_model(m)?;
    Ok(table)
}

pub fn cmd_validate(a: &ValidateArgs) -> Result<i32> {
    let m = load_model_file(&a.common.model)?;
    let report = validate_model(&m, a.grid, a.common.seed);
    write_json(&a.common.out, "validation_report.json", &report)?;
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(if report.passed() {
        EXIT_OK
    } else {
        EXIT_VALIDATION
    })
}

pub fn cmd_compute_value(a: &ComputeArgs) -> Result<i32> {
    let m = load_model_file(&a.common.model)?;
    let report = validate_model(&m, 50, a.common.seed);
    if !report.passed() {
        write_json(&a.common.out, "validation_report.json", &report)?;
        report.into_result()?;
    }
    let points =
        a.x0.iter()
            .map(|s| parse_point(&m, s))
            .collect::<Result<Vec<_>>>()?;
    let mut cfg = SolveConfig::new(a.eps, a.nmax, GridSpec::new(a.grid).with_points(points));
    cfg.h_tol = a.h_tol;
    cfg.search = SearchOptions {
        n_t: a.n_t,
        delta_rel: a.delta_rel,
    };
    let table = solve(&m, &cfg)?;
    fs::create_dir_all(&a.common.out)?;
    table.save(a.common.out.join(VALUE_FILE))?;

    let mut f = create(&a.common.out, "summary.csv")?;
    writeln!(f, "k,sup_v,min_v,j_wins_nodes")?;
    println!(
        "{:>3} {:>14} {:>14} {:>8}",
        "k", "sup V_k", "min V_k", "J-wins"
    );
    for (k, sup, min, j) in table.summary() {
        writeln!(f, "{k},{sup},{min},{j}")?;
        println!("{k:>3} {sup:>14.8} {min:>14.8} {j:>8}");
    }
    f.flush()?;

    if a.sandwich {
        let mut fine_cfg = cfg.clone();
        fine_cfg.eps = a.eps / SANDWICH_FACTOR;
        let fine = solve(&m, &fine_cfg)?;
        let rows = sandwich_check(&table, &fine, SANDWICH_TOL)?;
        let mut f = create(&a.common.out, "sandwich.csv")?;
        writeln!(f, "k,min_diff,max_diff,upper_limit,passed")?;
        for r in &rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.k, r.min_diff, r.max_diff, r.upper_limit, r.passed
            )?;
        }
        f.flush()?;
        let passed = rows.iter().all(|r| r.passed);
        println!(
            "{} sandwich eps={} vs eps={}",
            if passed { "PASS" } else { "FAIL" },
            a.eps,
            fine_cfg.eps
        );
        if !passed {
            return Ok(EXIT_NUMERICAL);
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let m = load_model_file(&a.common.model)?;
    let table = load_table(&m, &a.common, &a.value)?;
    let points =
        a.x0.iter()
            .map(|s| parse_point(&m, s))
            .collect::<Result<Vec<_>>>()?;
    if a.replicates == 0 {
        return Err(Error::Domain("replicates must be at least 1".into()));
    }
    let horizon = a.horizon.unwrap_or_else(|| tail_horizon(&m, TAIL_TOL));
    let out = &a.common.out;
    let mut report = create(out, "cost_report.csv")?;
    writeln!(report, "x0,N0,eps,replicates,mean,se,ci_lo,ci_hi,V_N0,z")?;
    let mut counts = create(out, "intervention_counts.csv")?;
    writeln!(counts, "x0,N0,interventions,paths")?;
    let mut dump = if a.dump > 0 {
        Some(create(out, "trajectories.jsonl")?)
    } else {
        None
    };
    let mut laws = Vec::new();
    for x in &points {
        let label = format_point(&m, x);
        for &n0 in &a.n0 {
            let est = estimate_cost_j(&m, &table, x, n0, a.replicates, a.common.seed, horizon)?;
            let v = table.value_at(n0, x)?;
            let z = est.total.z_score(v);
            writeln!(
                report,
                "{label},{n0},{},{},{},{},{},{},{v},{z}",
                table.header.eps,
                a.replicates,
                est.total.mean,
                est.total.std_error,
                est.ci95.0,
                est.ci95.1
            )?;
            println!(
                "{label} N0={n0}: mean {:.6} ± {:.6} (95% CI [{:.6}, {:.6}]), V = {v:.6}, z = {z:.3}",
                est.total.mean,
                1.96 * est.total.std_error,
                est.ci95.0,
                est.ci95.1
            );
            for (i, c) in est.histogram.iter().enumerate() {
                writeln!(counts, "{label},{n0},{i},{c}")?;
            }
            if let Some(f) = dump.as_mut() {
                for i in 0..a.dump.min(a.replicates) as u64 {
                    let p = simulate_controlled(
                        &m,
                        &table,
                        x,
                        n0,
                        horizon,
                        &mut replicate_rng(a.common.seed, i),
                    )?;
                    serde_json::to_writer(&mut *f, &p)?;
                    writeln!(f)?;
                }
            }
            if a.law {
                let r = check_joint_law(&m, &table, x, n0, a.replicates, a.common.seed)?;
                println!(
                    "{} first-transition law {label} N0={n0}: max z {:.3}, KS {:.5} (critical {:.5})",
                    if r.passed(3.0) { "PASS" } else { "FAIL" },
                    r.max_z,
                    r.ks_stat,
                    r.ks_critical
                );
                laws.push(r);
            }
        }
    }
    report.flush()?;
    counts.flush()?;
    if let Some(mut f) = dump {
        f.flush()?;
    }
    if a.law {
        write_json(out, "law_report.json", &laws)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let m = load_model_file(&a.common.model)?;
    let table = load_table(&m, &a.common, &a.value)?;
    let out = &a.common.out;
    let grid = &table.grid;
    let nodes = grid.nodes();
    let coord_header: Vec<String> = (0..m.dim).map(|i| format!("z{i}")).collect();
    let coord_header = coord_header.join(",");
    let coords = |x: &StatePoint| {
        x.zeta
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    };

    let mut f = create(out, "vk_curves.csv")?;
    writeln!(f, "k,mode,{coord_header},value")?;
    for k in 0..=table.n_max() {
        let values = if k == 0 {
            &table.h
        } else {
            &table.stages[k - 1].value
        };
        for (i, x) in nodes.iter().enumerate().filter(|(i, _)| grid.is_base(*i)) {
            writeln!(
                f,
                "{k},{},{},{}",
                m.modes[x.mode.0].label,
                coords(x),
                values[i]
            )?;
        }
    }
    f.flush()?;

    let mut f = create(out, "policy.csv")?;
    writeln!(f, "k,mode,{coord_header},branch,r,t_star,y")?;
    for s in &table.stages {
        for (i, x) in nodes.iter().enumerate() {
            let ts = crate::dynamics::hit_time(&m, x)?;
            let y = s.y[i].map(|j| j.to_string()).unwrap_or_default();
            let branch = match s.branch[i] {
                Branch::KWins => "K",
                Branch::JWins => "J",
            };
            writeln!(
                f,
                "{},{},{},{branch},{},{ts},{y}",
                s.k,
                m.modes[x.mode.0].label,
                coords(x),
                s.r[i]
            )?;
        }
    }
    f.flush()?;

    // J profiles at the requested points and at the first J-wins node of each level.
    let mut profiles = create(out, "j_profiles.csv")?;
    writeln!(profiles, "k,x,file,inf_j,r_eps,j_at_r,eps,within_eps")?;
    let requested =
        a.x0.iter()
            .map(|s| parse_point(&m, s))
            .collect::<Result<Vec<_>>>()?;
    let eps = table.header.eps;
    for s in &table.stages {
        let prev = table.value_store(s.k - 1)?;
        let mw = InterventionValue::new(&m, &prev)?;
        let mut targets = requested.clone();
        if let Some(i) = s.branch.iter().position(|b| *b == Branch::JWins) {
            targets.push(nodes[i].clone());
        }
        for (n, x) in targets.iter().enumerate() {
            let name = format!("j_profile_k{}_{n}.csv", s.k);
            let profile = j_profile(&m, &mw, &prev, x, table.header.search.n_t)?;
            let mut pf = create(out, &name)?;
            profile.write_csv(&mut pf)?;
            pf.flush()?;
            let inf = inf_j(&m, &mw, &prev, x, eps, &table.header.search)?;
            let within = inf.value_at_r < inf.inf_value + eps;
            writeln!(
                profiles,
                "{},{},{name},{},{},{},{eps},{within}",
                s.k,
                format_point(&m, x),
                inf.inf_value,
                inf.r_eps,
                inf.value_at_r
            )?;
        }
    }
    profiles.flush()?;

    if !requested.is_empty() {
        let horizon = tail_horizon(&m, TAIL_TOL);
        let mut f = create(out, "cost_histogram.csv")?;
        writeln!(f, "x0,N0,bin_lo,bin_hi,count")?;
        for x in &requested {
            for &n0 in &a.n0 {
                let costs = sample_costs(&m, &table, x, n0, a.replicates, a.common.seed, horizon)?;
                let totals: Vec<f64> = costs.iter().map(|c| c.0 + c.1).collect();
                let hi = totals.iter().cloned().fold(0.0f64, f64::max);
                let width = if hi > 0.0 {
                    hi / HISTOGRAM_BINS as f64
                } else {
                    1.0
                };
                let mut bins = vec![0usize; HISTOGRAM_BINS];
                for c in &totals {
                    bins[((c / width) as usize).min(HISTOGRAM_BINS - 1)] += 1;
                }
                for (b, count) in bins.iter().enumerate() {
                    let lo = b as f64 * width;
                    writeln!(
                        f,
                        "{},{n0},{lo},{},{count}",
                        format_point(&m, x),
                        lo + width
                    )?;
                }
            }
        }
        f.flush()?;
    }
    println!("report written to {}", out.display());
    Ok(EXIT_OK)
}
