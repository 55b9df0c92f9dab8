//! Policy tables produced by value iteration, their queries, and the
//! `.pdmpval` artifact format.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::store::{FunctionStore, Grid, GridSpec};
use crate::dynamics::{advance, hit_time};
use crate::error::{Error, Result};
use crate::model::{PdmpModel, StatePoint};
use crate::operators::{op_m, Branch, SearchOptions};

pub const ARTIFACT_FORMAT: &str = "pdmpval";
pub const ARTIFACT_VERSION: u32 = 1;

/// Per-node results for one budget level `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub k: usize,
    pub branch: Vec<Branch>,
    /// `r_ε^k` at each node; equals `t*` on K-wins nodes.
    pub r: Vec<f64>,
    /// Restart index into the control set, recorded on J-wins nodes.
    pub y: Vec<Option<usize>>,
    /// `V_k` at each node.
    pub value: Vec<f64>,
    pub k_value: Vec<f64>,
    pub inf_value: Vec<f64>,
    /// `V_{k−1}` at the control points, used to choose restart points.
    pub control_prev: Vec<f64>,
}

impl Stage {
    pub fn j_wins(&self) -> usize {
        self.branch.iter().filter(|b| **b == Branch::JWins).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format: String,
    pub version: u32,
    pub model_hash: String,
    pub eps: f64,
    pub n_max: usize,
    pub grid: GridSpec,
    pub search: SearchOptions,
    pub h_tol: f64,
}

/// Value functions `V_0 = h, V_1, …, V_{N_max}` with their policy fields.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub header: ArtifactHeader,
    pub grid: Arc<Grid>,
    pub h: Vec<f64>,
    pub stages: Vec<Stage>,
}

/// What the strategy does from a post-jump point with a given budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Planned intervention time, `+∞` when no intervention is possible.
    pub r: f64,
    pub y: Option<usize>,
    /// `None` when the budget is exhausted.
    pub branch: Option<Branch>,
}

impl Decision {
    pub const NONE: Decision = Decision {
        r: f64::INFINITY,
        y: None,
        branch: None,
    };
}

/// A source of `(r_ε^N, y_ε^N)` decisions.
pub trait Policy: Sync {
    fn n_max(&self) -> usize;
    fn decide(&self, m: &PdmpModel, x: &StatePoint, budget: usize) -> Result<Decision>;
}

#[derive(Serialize)]
struct ArtifactRef<'a> {
    header: &'a ArtifactHeader,
    grid: &'a Grid,
    h: &'a [f64],
    stages: &'a [Stage],
}

#[derive(Deserialize)]
struct ArtifactOwned {
    header: ArtifactHeader,
    grid: Grid,
    h: Vec<f64>,
    stages: Vec<Stage>,
}

impl PolicyTable {
    pub fn n_max(&self) -> usize {
        self.stages.len()
    }

    /// `V_k` as an evaluable store; `k = 0` gives `h`.
    pub fn value_store(&self, k: usize) -> Result<FunctionStore> {
        let values = match k {
            0 => self.h.clone(),
            k if k <= self.stages.len() => self.stages[k - 1].value.clone(),
            _ => return Err(Error::PolicyCoverage(format!("budget level {k}"))),
        };
        FunctionStore::new(self.grid.clone(), values)
    }

    /// `V_k` at a grid node, or interpolated between nodes.
    pub fn value_at(&self, k: usize, x: &StatePoint) -> Result<f64> {
        self.value_store(k)?.interpolate(x)
    }

    pub fn check_model(&self, m: &PdmpModel) -> Result<()> {
        if self.header.model_hash == m.hash() {
            Ok(())
        } else {
            Err(Error::ModelMismatch {
                expected: self.header.model_hash.clone(),
                found: m.hash().to_string(),
            })
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&ArtifactRef {
            header: &self.header,
            grid: &self.grid,
            h: &self.h,
            stages: &self.stages,
        })?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let a: ArtifactOwned = serde_json::from_slice(bytes)?;
        if a.header.format != ARTIFACT_FORMAT || a.header.version != ARTIFACT_VERSION {
            return Err(Error::parse(
                "header",
                format!(
                    "unsupported artifact {} v{}",
                    a.header.format, a.header.version
                ),
            ));
        }
        let n = a.grid.len();
        if a.h.len() != n
            || a.stages
                .iter()
                .any(|s| s.value.len() != n || s.r.len() != n)
        {
            return Err(Error::parse("stages", "node arrays do not match the grid"));
        }
        Ok(PolicyTable {
            header: a.header,
            grid: Arc::new(a.grid),
            h: a.h,
            stages: a.stages,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    /// Per-level summary rows: `(k, sup V_k, min V_k, J-wins node count)`.
    pub fn summary(&self) -> Vec<(usize, f64, f64, usize)> {
        let row = |k: usize, v: &[f64], j: usize| {
            let sup = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let inf = v.iter().cloned().fold(f64::INFINITY, f64::min);
            (k, sup, inf, j)
        };
        std::iter::once(row(0, &self.h, 0))
            .chain(self.stages.iter().map(|s| row(s.k, &s.value, s.j_wins())))
            .collect()
    }

    /// `(r_ε^N(x), y_ε^N(x), branch)`. At grid nodes the stored fields are
    /// returned; elsewhere the branch comes from the nearest node and `r` is
    /// interpolated among neighbouring nodes on the same branch.
    pub fn query(&self, m: &PdmpModel, x: &StatePoint, budget: usize) -> Result<Decision> {
        if budget == 0 {
            return Ok(Decision::NONE);
        }
        let stage = self
            .stages
            .get(budget - 1)
            .ok_or_else(|| Error::PolicyCoverage(format!("budget {budget} exceeds table depth")))?;
        if let Some(i) = self.grid.find(x) {
            return Ok(Decision {
                r: stage.r[i],
                y: stage.y[i],
                branch: Some(stage.branch[i]),
            });
        }
        let t_star = hit_time(m, x)?;
        let stencil = self.grid.stencil(x)?;
        let nearest = self.grid.nearest(x)?;
        let branch = stage.branch[nearest];
        if branch == Branch::KWins {
            return Ok(Decision {
                r: t_star,
                y: None,
                branch: Some(branch),
            });
        }
        let (mut num, mut den) = (0.0, 0.0);
        for &(i, w) in stencil
            .iter()
            .filter(|(i, w)| *w > 0.0 && stage.branch[*i] == branch)
        {
            num += w * stage.r[i];
            den += w;
        }
        let r = if den > 0.0 {
            num / den
        } else {
            stage.r[nearest]
        };
        let r = r.clamp(0.0, t_star);
        let (_, y) = op_m(m, &stage.control_prev, &advance(m, x, r))?;
        Ok(Decision {
            r,
            y: Some(y),
            branch: Some(branch),
        })
    }
}

impl Policy for PolicyTable {
    fn n_max(&self) -> usize {
        self.stages.len()
    }

    fn decide(&self, m: &PdmpModel, x: &StatePoint, budget: usize) -> Result<Decision> {
        self.query(m, x, budget)
    }
}
