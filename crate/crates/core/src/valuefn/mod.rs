//! The no-impulse cost `h`, the ε-approximate value functions `V_k` and the
//! policy fields `(branch, r_ε^k, y_ε^k)` on a grid, plus a grid-free
//! recursive evaluator for small `k`.

mod exact;
mod policy;
mod store;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use exact::{eval_vk_exact, ExactOptions, K_EXACT};
pub use policy::{
    ArtifactHeader, Decision, Policy, PolicyTable, Stage, ARTIFACT_FORMAT, ARTIFACT_VERSION,
};
pub use store::{FunctionStore, Grid, GridSpec, Stencil, DEFAULT_DENSITY};

use crate::dynamics::{advance, hit_time};
use crate::error::{Error, Result};
use crate::model::PdmpModel;
use crate::operators::{inf_j, op_k, Branch, InterventionValue, SearchOptions};

pub const DEFAULT_H_TOL: f64 = 1e-8;
pub const H_MAX_ITER: usize = 10_000;

/// Fixed point of `h = Kh` on the grid nodes, iterated from `h ≡ 0`.
pub fn compute_h(m: &PdmpModel, grid: &Arc<Grid>, tol: f64) -> Result<FunctionStore> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let nodes = grid.nodes();
    let mut h = FunctionStore::zeros(grid.clone());
    let mut last_change = f64::NAN;
    let mut rate = f64::NAN;
    for _ in 0..H_MAX_ITER {
        let next: Vec<f64> = nodes
            .par_iter()
            .map(|x| op_k(m, &h, x))
            .collect::<Result<_>>()?;
        let change = next
            .iter()
            .zip(&h.values)
            .fold(0.0f64, |d, (a, b)| d.max((a - b).abs()));
        let sup = h.values.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        rate = change / last_change;
        last_change = change;
        h = FunctionStore::new(grid.clone(), next)?;
        if change <= tol * (1.0 + sup) {
            return Ok(h);
        }
    }
    Err(Error::Numerical(format!(
        "h iteration did not converge in {H_MAX_ITER} steps (last change {last_change:e}, contraction estimate {rate:.6})"
    )))
}

/// `max_i |Kh(x_i) − h(x_i)|` over the grid nodes.
pub fn h_residual(m: &PdmpModel, h: &FunctionStore) -> Result<f64> {
    let nodes = h.grid.nodes();
    let kh: Vec<f64> = nodes
        .par_iter()
        .map(|x| op_k(m, h, x))
        .collect::<Result<_>>()?;
    Ok(kh
        .iter()
        .zip(&h.values)
        .fold(0.0f64, |d, (a, b)| d.max((a - b).abs())))
}

struct NodeResult {
    branch: Branch,
    r: f64,
    y: Option<usize>,
    value: f64,
    k_value: f64,
    inf_value: f64,
}

/// Runs `V_k = 𝓛_ε V_{k−1}` for `k = 1..=n_max` starting from `V_0 = h`.
pub fn value_iterate(
    m: &PdmpModel,
    h: &FunctionStore,
    n_max: usize,
    eps: f64,
    search: &SearchOptions,
) -> Result<Vec<Stage>> {
    if n_max == 0 {
        return Err(Error::Domain("N_max must be at least 1".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("ε must be positive, got {eps}")));
    }
    let grid = h.grid.clone();
    let nodes = grid.nodes();
    let mut prev = h.clone();
    let mut stages = Vec::with_capacity(n_max);
    for k in 1..=n_max {
        let mw = InterventionValue::new(m, &prev)?;
        let results: Vec<NodeResult> = nodes
            .par_iter()
            .map(|x| {
                let k_value = op_k(m, &prev, x)?;
                let inf = inf_j(m, &mw, &prev, x, eps, search)?;
                Ok(if k_value < inf.inf_value {
                    NodeResult {
                        branch: Branch::KWins,
                        r: hit_time(m, x)?,
                        y: None,
                        value: k_value,
                        k_value,
                        inf_value: inf.inf_value,
                    }
                } else {
                    let (_, y) = mw.argmin(&advance(m, x, inf.r_eps))?;
                    NodeResult {
                        branch: Branch::JWins,
                        r: inf.r_eps,
                        y: Some(y),
                        value: inf.value_at_r,
                        k_value,
                        inf_value: inf.inf_value,
                    }
                })
            })
            .collect::<Result<_>>()?;
        let stage = Stage {
            k,
            branch: results.iter().map(|r| r.branch).collect(),
            r: results.iter().map(|r| r.r).collect(),
            y: results.iter().map(|r| r.y).collect(),
            value: results.iter().map(|r| r.value).collect(),
            k_value: results.iter().map(|r| r.k_value).collect(),
            inf_value: results.iter().map(|r| r.inf_value).collect(),
            control_prev: mw.values().to_vec(),
        };
        prev = FunctionStore::new(grid.clone(), stage.value.clone())?;
        stages.push(stage);
    }
    Ok(stages)
}

/// Full pipeline settings for [`solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub eps: f64,
    pub n_max: usize,
    pub grid: GridSpec,
    pub search: SearchOptions,
    pub h_tol: f64,
}

impl SolveConfig {
    pub fn new(eps: f64, n_max: usize, grid: GridSpec) -> Self {
        SolveConfig {
            eps,
            n_max,
            grid,
            search: SearchOptions::default(),
            h_tol: DEFAULT_H_TOL,
        }
    }
}

/// Builds the grid, computes `h`, and runs value iteration.
pub fn solve(m: &PdmpModel, cfg: &SolveConfig) -> Result<PolicyTable> {
    let grid = Arc::new(Grid::build(m, &cfg.grid)?);
    let h = compute_h(m, &grid, cfg.h_tol)?;
    let stages = value_iterate(m, &h, cfg.n_max, cfg.eps, &cfg.search)?;
    Ok(PolicyTable {
        header: ArtifactHeader {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            model_hash: m.hash().to_string(),
            eps: cfg.eps,
            n_max: cfg.n_max,
            grid: cfg.grid.clone(),
            search: cfg.search,
            h_tol: cfg.h_tol,
        },
        grid,
        h: h.values,
        stages,
    })
}

/// Per-level extremes of `V_k^ε − V_k^{ε'}` over common nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichRow {
    pub k: usize,
    pub min_diff: f64,
    pub max_diff: f64,
    pub upper_limit: f64,
    pub passed: bool,
}

/// Compares a coarse-ε table with a fine-ε table on the same grid: each
/// level must satisfy `−tol ≤ V_k^ε − V_k^{ε'} ≤ kε + tol` at every node.
pub fn sandwich_check(
    coarse: &PolicyTable,
    fine: &PolicyTable,
    tol: f64,
) -> Result<Vec<SandwichRow>> {
    if coarse.grid != fine.grid {
        return Err(Error::Domain(
            "tables were computed on different grids".into(),
        ));
    }
    let eps = coarse.header.eps;
    Ok(coarse
        .stages
        .iter()
        .zip(&fine.stages)
        .map(|(a, b)| {
            let (lo, hi) = a
                .value
                .iter()
                .zip(&b.value)
                .map(|(x, y)| x - y)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
                    (lo.min(d), hi.max(d))
                });
            let upper_limit = a.k as f64 * eps + tol;
            SandwichRow {
                k: a.k,
                min_diff: lo,
                max_diff: hi,
                upper_limit,
                passed: lo >= -tol && hi <= upper_limit,
            }
        })
        .collect())
}
