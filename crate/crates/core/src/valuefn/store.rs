//! Tensor grids over each mode and multilinear function stores on them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::model::{Coords, ModeId, PdmpModel, StatePoint};
use crate::operators::Evaluable;

/// Default number of cell-centre nodes per axis per mode.
pub const DEFAULT_DENSITY: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cell-centre nodes per axis per mode.
    pub density: usize,
    /// Points inserted as exact nodes in addition to the control set and the
    /// fixed kernel atoms.
    pub extra_points: Vec<StatePoint>,
}

impl GridSpec {
    pub fn new(density: usize) -> Self {
        GridSpec {
            density,
            extra_points: Vec::new(),
        }
    }

    pub fn with_points(mut self, points: impl IntoIterator<Item = StatePoint>) -> Self {
        self.extra_points.extend(points);
        self
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::new(DEFAULT_DENSITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeGrid {
    /// Sorted node coordinates along each axis.
    pub axes: Vec<Vec<f64>>,
    /// Whether each axis coordinate is a cell centre (as opposed to inserted).
    pub base: Vec<Vec<bool>>,
    pub offset: usize,
    pub len: usize,
}

/// Per-mode tensor grids; node `i` of mode `m` has global index
/// `offset_m + Σ k_a · stride_a` with axis 0 varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub spec: GridSpec,
    pub modes: Vec<ModeGrid>,
    pub lower: Vec<Coords>,
    pub upper: Vec<Coords>,
}

/// Interpolation weights: `(node, weight)` pairs.
pub type Stencil = SmallVec<[(usize, f64); 8]>;

impl Grid {
    pub fn build(m: &PdmpModel, spec: &GridSpec) -> Result<Grid> {
        if spec.density == 0 {
            return Err(Error::Domain("grid density must be positive".into()));
        }
        let mut inserted: Vec<StatePoint> = m.control_set.clone();
        inserted.extend(m.fixed_atoms());
        for p in &spec.extra_points {
            if !m.is_interior(p) {
                return Err(Error::Domain(format!(
                    "grid point {p} is not an interior state"
                )));
            }
            inserted.push(p.clone());
        }
        let mut modes = Vec::with_capacity(m.n_modes());
        let mut offset = 0;
        for (mi, mode) in m.modes.iter().enumerate() {
            let r = &mode.region;
            let mut axes = Vec::with_capacity(m.dim);
            let mut base = Vec::with_capacity(m.dim);
            for a in 0..m.dim {
                let mut coords: Vec<(f64, bool)> = (0..spec.density)
                    .map(|k| {
                        let frac = (k as f64 + 0.5) / spec.density as f64;
                        (r.lower[a] + frac * (r.upper[a] - r.lower[a]), true)
                    })
                    .collect();
                for p in inserted.iter().filter(|p| p.mode.0 == mi) {
                    coords.push((p.zeta[a], false));
                }
                coords.sort_by(|x, y| x.0.total_cmp(&y.0).then(y.1.cmp(&x.1)));
                coords.dedup_by(|later, first| later.0 == first.0);
                axes.push(coords.iter().map(|c| c.0).collect::<Vec<_>>());
                base.push(coords.iter().map(|c| c.1).collect::<Vec<_>>());
            }
            let len = axes.iter().map(Vec::len).product();
            modes.push(ModeGrid {
                axes,
                base,
                offset,
                len,
            });
            offset += len;
        }
        Ok(Grid {
            spec: spec.clone(),
            modes,
            lower: m.modes.iter().map(|s| s.region.lower.clone()).collect(),
            upper: m.modes.iter().map(|s| s.region.upper.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.modes.iter().map(|g| g.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn split(&self, i: usize) -> (usize, SmallVec<[usize; 4]>) {
        let mi = self.modes.partition_point(|g| g.offset + g.len <= i);
        let g = &self.modes[mi];
        let mut rem = i - g.offset;
        let idx = g
            .axes
            .iter()
            .map(|ax| {
                let k = rem % ax.len();
                rem /= ax.len();
                k
            })
            .collect();
        (mi, idx)
    }

    pub fn node(&self, i: usize) -> StatePoint {
        let (mi, idx) = self.split(i);
        let g = &self.modes[mi];
        StatePoint {
            mode: ModeId(mi),
            zeta: idx.iter().enumerate().map(|(a, &k)| g.axes[a][k]).collect(),
        }
    }

    pub fn nodes(&self) -> Vec<StatePoint> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// True for nodes built only from cell-centre coordinates.
    pub fn is_base(&self, i: usize) -> bool {
        let (mi, idx) = self.split(i);
        idx.iter()
            .enumerate()
            .all(|(a, &k)| self.modes[mi].base[a][k])
    }

    fn flat(&self, mi: usize, idx: &[usize]) -> usize {
        let g = &self.modes[mi];
        let mut stride = 1;
        let mut i = g.offset;
        for (a, &k) in idx.iter().enumerate() {
            i += k * stride;
            stride *= g.axes[a].len();
        }
        i
    }

    fn covered(&self, x: &StatePoint) -> Result<&ModeGrid> {
        let ok = x.mode.0 < self.modes.len()
            && x.zeta.len() == self.lower[x.mode.0].len()
            && x.zeta
                .iter()
                .enumerate()
                .all(|(a, z)| self.lower[x.mode.0][a] <= *z && *z <= self.upper[x.mode.0][a]);
        if ok {
            Ok(&self.modes[x.mode.0])
        } else {
            Err(Error::PolicyCoverage(x.to_string()))
        }
    }

    /// Index of the node equal to `x`, if any.
    pub fn find(&self, x: &StatePoint) -> Option<usize> {
        let g = self.covered(x).ok()?;
        let mut idx = SmallVec::<[usize; 4]>::new();
        for (a, z) in x.zeta.iter().enumerate() {
            let ax = &g.axes[a];
            let k = ax.partition_point(|c| c < z);
            if k == ax.len() || ax[k] != *z {
                return None;
            }
            idx.push(k);
        }
        Some(self.flat(x.mode.0, &idx))
    }

    /// Multilinear weights at `x`. Between the outermost nodes and `∂E` the
    /// weights extrapolate linearly from the two outermost nodes.
    pub fn stencil(&self, x: &StatePoint) -> Result<Stencil> {
        let g = self.covered(x)?;
        let mut per_axis: SmallVec<[[(usize, f64); 2]; 4]> = SmallVec::new();
        for (a, &z) in x.zeta.iter().enumerate() {
            let ax = &g.axes[a];
            if ax.len() == 1 {
                per_axis.push([(0, 1.0), (0, 0.0)]);
                continue;
            }
            let k = ax.partition_point(|&c| c <= z).clamp(1, ax.len() - 1);
            let t = (z - ax[k - 1]) / (ax[k] - ax[k - 1]);
            per_axis.push([(k - 1, 1.0 - t), (k, t)]);
        }
        let corners = 1usize << per_axis.len();
        let mut out = Stencil::new();
        let mut idx: SmallVec<[usize; 4]> = SmallVec::from_elem(0, per_axis.len());
        for c in 0..corners {
            let mut w = 1.0;
            for (a, pair) in per_axis.iter().enumerate() {
                let (k, wa) = pair[(c >> a) & 1];
                idx[a] = k;
                w *= wa;
            }
            if w != 0.0 {
                out.push((self.flat(x.mode.0, &idx), w));
            }
        }
        Ok(out)
    }

    /// Node whose interpolation weight at `x` is largest.
    pub fn nearest(&self, x: &StatePoint) -> Result<usize> {
        if let Some(i) = self.find(x) {
            return Ok(i);
        }
        let s = self.stencil(x)?;
        Ok(s.iter()
            .copied()
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (i, w)| {
                if w > best.1 {
                    (i, w)
                } else {
                    best
                }
            })
            .0)
    }
}

/// Node values on a shared grid, evaluated by multilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionStore {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
    bound: f64,
}

impl FunctionStore {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Domain(format!(
                "expected {} node values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value {} at node {}",
                values[i],
                grid.node(i)
            )));
        }
        let bound = values.iter().fold(0.0f64, |b, v| b.max(v.abs()));
        Ok(FunctionStore {
            grid,
            values,
            bound,
        })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        FunctionStore {
            grid,
            values: vec![0.0; n],
            bound: 0.0,
        }
    }

    pub fn interpolate(&self, x: &StatePoint) -> Result<f64> {
        if let Some(i) = self.grid.find(x) {
            return Ok(self.values[i]);
        }
        Ok(self
            .grid
            .stencil(x)?
            .iter()
            .map(|&(i, w)| w * self.values[i])
            .sum())
    }
}

impl Evaluable for FunctionStore {
    fn eval(&self, x: &StatePoint) -> Result<f64> {
        self.interpolate(x)
    }
    fn bound(&self) -> f64 {
        self.bound
    }
}
