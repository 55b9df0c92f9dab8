//! Declarative PDMP impulse-control problems: the JSON document schema, the
//! resolved [`PdmpModel`], and sampled validation of the model assumptions.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smallvec::SmallVec;

use crate::dynamics;
use crate::error::{Error, Result};
use crate::expr::Expr;

/// Euclidean coordinates of a state. Inline storage for d ≤ 4.
pub type Coords = SmallVec<[f64; 4]>;

/// The reference two-mode model shipped with the crate.
pub const REFERENCE_MODEL_JSON: &str = include_str!("../models/rm1.json");

/// Tolerance on the per-entry sum of kernel probabilities.
pub const KERNEL_PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeId(pub usize);

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A point `(m, ζ)` of the state space (or of its closure).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePoint {
    pub mode: ModeId,
    pub zeta: Coords,
}

impl StatePoint {
    pub fn new(mode: usize, zeta: &[f64]) -> Self {
        StatePoint {
            mode: ModeId(mode),
            zeta: Coords::from_slice(zeta),
        }
    }
}

impl fmt::Display for StatePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, [", self.mode)?;
        for (i, z) in self.zeta.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{z}")?;
        }
        write!(f, "])")
    }
}

/// Open box `E_m = Π (lower_i, upper_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lower: Coords,
    pub upper: Coords,
}

impl Region {
    pub fn contains(&self, zeta: &[f64]) -> bool {
        zeta.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(z, (lo, hi))| lo < z && z < hi)
    }

    pub fn contains_closure(&self, zeta: &[f64]) -> bool {
        zeta.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(z, (lo, hi))| lo <= z && z <= hi)
    }

    pub fn on_boundary(&self, zeta: &[f64]) -> bool {
        self.contains_closure(zeta) && !self.contains(zeta)
    }
}

/// Closed-form flow laws, one per mode.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowLaw {
    /// `Φ(ζ,t) = ζ + v t`.
    ConstantDrift { velocity: Coords },
    /// Each coordinate moves toward `target` at speed `rate`, stopping there.
    LinearToTarget { rate: f64, target: Coords },
    /// `Φ(ζ,t) = a + (ζ − a) e^{−rate·t}`.
    ExponentialToTarget { rate: f64, target: Coords },
}

#[derive(Debug, Clone)]
pub struct Atom {
    pub mode: ModeId,
    pub zeta: Vec<Expr>,
    pub prob: f64,
}

#[derive(Debug, Clone)]
pub struct KernelEntry {
    pub mode: ModeId,
    pub when: Option<Expr>,
    pub atoms: Vec<Atom>,
}

impl KernelEntry {
    fn matches(&self, pre: &StatePoint) -> bool {
        self.mode == pre.mode
            && self
                .when
                .as_ref()
                .is_none_or(|w| w.eval(&pre.zeta, 0.0) != 0.0)
    }

    /// Position of every atom for the given pre-jump point.
    pub fn place_atoms(&self, pre: &StatePoint) -> impl Iterator<Item = (StatePoint, f64)> + '_ {
        let zeta = pre.zeta.clone();
        self.atoms.iter().map(move |a| {
            let pos: Coords = a.zeta.iter().map(|e| e.eval(&zeta, 0.0)).collect();
            (
                StatePoint {
                    mode: a.mode,
                    zeta: pos,
                },
                a.prob,
            )
        })
    }

    /// True when every atom position is independent of the pre-jump point.
    pub fn has_fixed_atoms(&self) -> bool {
        self.atoms
            .iter()
            .all(|a| a.zeta.iter().all(|e| e.as_constant().is_some()))
    }
}

#[derive(Debug, Clone)]
pub struct ModeSpec {
    pub label: String,
    pub region: Region,
}

/// A fully resolved, immutable PDMP impulse-control problem.
#[derive(Debug, Clone)]
pub struct PdmpModel {
    pub dim: usize,
    pub modes: Vec<ModeSpec>,
    pub flows: Vec<FlowLaw>,
    pub intensity: Vec<Expr>,
    pub intensity_bound: f64,
    pub kernel: Vec<KernelEntry>,
    pub running_cost: Vec<Expr>,
    pub running_bound: f64,
    /// `intervention[mode][j]`: cost of moving from a point of `mode` to control point `j`.
    pub intervention: Vec<Vec<Expr>>,
    pub cost_lower: f64,
    pub cost_upper: f64,
    pub control_set: Vec<StatePoint>,
    pub discount: f64,
    pub t_star_bound: f64,
    document: ModelDocument,
    hash: String,
}

impl PdmpModel {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn region(&self, mode: ModeId) -> &Region {
        &self.modes[mode.0].region
    }

    pub fn is_interior(&self, x: &StatePoint) -> bool {
        x.mode.0 < self.modes.len()
            && x.zeta.len() == self.dim
            && self.region(x.mode).contains(&x.zeta)
    }

    #[inline]
    pub fn jump_rate(&self, x: &StatePoint) -> f64 {
        self.intensity[x.mode.0].eval(&x.zeta, 0.0)
    }

    #[inline]
    pub fn running(&self, x: &StatePoint) -> f64 {
        self.running_cost[x.mode.0].eval(&x.zeta, 0.0)
    }

    #[inline]
    pub fn intervention_cost(&self, x: &StatePoint, control: usize) -> f64 {
        self.intervention[x.mode.0][control].eval(&x.zeta, 0.0)
    }

    pub fn constant_jump_rate(&self, mode: ModeId) -> Option<f64> {
        self.intensity[mode.0].as_constant()
    }

    pub fn constant_running(&self, mode: ModeId) -> Option<f64> {
        self.running_cost[mode.0].as_constant()
    }

    /// First kernel entry whose mode and predicate match `pre`.
    pub fn kernel_entry(&self, pre: &StatePoint) -> Result<&KernelEntry> {
        Ok(&self.kernel[self.kernel_entry_index(pre)?])
    }

    pub fn kernel_entry_index(&self, pre: &StatePoint) -> Result<usize> {
        self.kernel
            .iter()
            .position(|e| e.matches(pre))
            .ok_or_else(|| Error::KernelCoverage(pre.to_string()))
    }

    /// Kernel atoms whose location does not depend on the pre-jump point.
    pub fn fixed_atoms(&self) -> Vec<StatePoint> {
        let mut out = Vec::new();
        for entry in self.kernel.iter().filter(|e| e.has_fixed_atoms()) {
            for atom in &entry.atoms {
                out.push(StatePoint {
                    mode: atom.mode,
                    zeta: atom.zeta.iter().map(|e| e.as_constant().unwrap()).collect(),
                });
            }
        }
        out
    }

    pub fn mode_by_label(&self, label: &str) -> Option<ModeId> {
        self.modes.iter().position(|m| m.label == label).map(ModeId)
    }

    /// Hex SHA-256 of the canonical JSON form of the model document.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn document(&self) -> &ModelDocument {
        &self.document
    }
}

// ---------------------------------------------------------------------------
// Document schema
// ---------------------------------------------------------------------------

/// Either a literal number or an expression string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExprDoc {
    Number(f64),
    Text(String),
}

impl ExprDoc {
    fn compile(&self, dim: usize, field: &str) -> Result<Expr> {
        match self {
            ExprDoc::Number(v) => Ok(Expr::constant(*v)),
            ExprDoc::Text(s) => Expr::parse(s, dim).map_err(|m| Error::parse(field, m)),
        }
    }
}

impl From<&str> for ExprDoc {
    fn from(s: &str) -> Self {
        ExprDoc::Text(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowParamsDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDoc {
    pub family: String,
    pub modes: Vec<FlowParamsDoc>,
}

/// A bounded scalar field given by one expression per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDoc {
    pub bound: f64,
    pub modes: Vec<ExprDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomDoc {
    pub mode: usize,
    pub zeta: Vec<ExprDoc>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelEntryDoc {
    pub mode: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
    pub atoms: Vec<AtomDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionDoc {
    pub lower: f64,
    pub upper: f64,
    /// `table[mode][j]`, an expression in the pre-intervention position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Vec<ExprDoc>>>,
    /// Shorthand for a table with the same entry everywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<ExprDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsDoc {
    pub running: FieldDoc,
    pub intervention: InterventionDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointDoc {
    pub mode: usize,
    pub zeta: Vec<f64>,
}

/// Top-level model document. Required keys are checked in [`PdmpModel::from_document`]
/// so that a missing key yields a targeted message.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<ModeDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<FieldDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Vec<KernelEntryDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<CostsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_set: Option<Vec<PointDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discount: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_star_bound: Option<f64>,
}

impl ModelDocument {
    pub fn from_json(source: &str) -> Result<Self> {
        serde_json::from_str(source).map_err(|e| Error::parse("document", e.to_string()))
    }

    pub fn reference() -> Self {
        Self::from_json(REFERENCE_MODEL_JSON).expect("reference model parses")
    }
}

fn required<'a, T>(value: &'a Option<T>, field: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::parse(field, format!("{field} required")))
}

/// Parses and resolves a model document.
pub fn load_model(source: &str) -> Result<PdmpModel> {
    PdmpModel::from_document(ModelDocument::from_json(source)?)
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<PdmpModel> {
    load_model(&std::fs::read_to_string(path)?)
}

impl PdmpModel {
    pub fn reference() -> Self {
        load_model(REFERENCE_MODEL_JSON).expect("reference model resolves")
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        let modes_doc = required(&doc.modes, "modes")?;
        let flow_doc = required(&doc.flow, "flow")?;
        let intensity_doc = required(&doc.intensity, "intensity")?;
        let kernel_doc = required(&doc.kernel, "kernel")?;
        let costs_doc = required(&doc.costs, "costs")?;
        let control_doc = required(&doc.control_set, "control_set")?;
        let discount = *required(&doc.discount, "discount")?;
        let t_star_bound = *required(&doc.t_star_bound, "t_star_bound")?;

        if modes_doc.is_empty() {
            return Err(Error::parse("modes", "at least one mode required"));
        }
        let dim = modes_doc[0].lower.len();
        if dim == 0 {
            return Err(Error::parse("modes[0].lower", "dimension must be positive"));
        }
        let mut modes = Vec::with_capacity(modes_doc.len());
        for (i, m) in modes_doc.iter().enumerate() {
            if m.lower.len() != dim || m.upper.len() != dim {
                return Err(Error::parse(
                    format!("modes[{i}]"),
                    format!("bounds must have dimension {dim}"),
                ));
            }
            if m.lower.iter().zip(&m.upper).any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::parse(
                    format!("modes[{i}]"),
                    "lower < upper required",
                ));
            }
            modes.push(ModeSpec {
                label: m.label.clone().unwrap_or_else(|| i.to_string()),
                region: Region {
                    lower: Coords::from_slice(&m.lower),
                    upper: Coords::from_slice(&m.upper),
                },
            });
        }
        let n_modes = modes.len();

        let flows = resolve_flow(flow_doc, n_modes, dim)?;
        let intensity = resolve_field(intensity_doc, n_modes, dim, "intensity")?;
        let running_cost = resolve_field(&costs_doc.running, n_modes, dim, "costs.running")?;

        let mut control_set = Vec::with_capacity(control_doc.len());
        for (j, p) in control_doc.iter().enumerate() {
            check_point(p, n_modes, dim, &format!("control_set[{j}]"))?;
            control_set.push(StatePoint::new(p.mode, &p.zeta));
        }
        if control_set.is_empty() {
            return Err(Error::parse("control_set", "control set must be non-empty"));
        }
        let intervention =
            resolve_intervention(&costs_doc.intervention, n_modes, control_set.len(), dim)?;

        let mut kernel = Vec::with_capacity(kernel_doc.len());
        for (k, entry) in kernel_doc.iter().enumerate() {
            let field = format!("kernel[{k}]");
            if entry.mode >= n_modes {
                return Err(Error::parse(&field, format!("unknown mode {}", entry.mode)));
            }
            if entry.atoms.is_empty() {
                return Err(Error::validation("kernel", format!("{field} has no atoms")));
            }
            let when = entry
                .when
                .as_deref()
                .map(|w| Expr::parse(w, dim).map_err(|m| Error::parse(format!("{field}.when"), m)))
                .transpose()?;
            let mut atoms = Vec::with_capacity(entry.atoms.len());
            let mut total = 0.0;
            for (a, atom) in entry.atoms.iter().enumerate() {
                let afield = format!("{field}.atoms[{a}]");
                if atom.mode >= n_modes {
                    return Err(Error::parse(&afield, format!("unknown mode {}", atom.mode)));
                }
                if atom.zeta.len() != dim {
                    return Err(Error::parse(
                        &afield,
                        format!("zeta must have dimension {dim}"),
                    ));
                }
                if !(atom.prob >= 0.0) {
                    return Err(Error::validation(
                        "kernel",
                        format!("{afield} has negative probability {}", atom.prob),
                    ));
                }
                total += atom.prob;
                atoms.push(Atom {
                    mode: ModeId(atom.mode),
                    zeta: atom
                        .zeta
                        .iter()
                        .map(|e| e.compile(dim, &afield))
                        .collect::<Result<_>>()?,
                    prob: atom.prob,
                });
            }
            if (total - 1.0).abs() > KERNEL_PROB_TOL {
                return Err(Error::validation(
                    "kernel",
                    format!("{field} probabilities sum to {total}, expected 1"),
                ));
            }
            kernel.push(KernelEntry {
                mode: ModeId(entry.mode),
                when,
                atoms,
            });
        }

        if !(discount > 0.0) {
            return Err(Error::validation("discount", "discount must be positive"));
        }
        if !(t_star_bound > 0.0) {
            return Err(Error::validation(
                "t_star_bound",
                "t_star_bound must be positive",
            ));
        }

        let canonical = serde_json::to_string(&doc)?;
        let hash = hex::encode(Sha256::digest(canonical.as_bytes()));

        Ok(PdmpModel {
            dim,
            modes,
            flows,
            intensity,
            intensity_bound: intensity_doc.bound,
            kernel,
            running_cost,
            running_bound: costs_doc.running.bound,
            intervention,
            cost_lower: costs_doc.intervention.lower,
            cost_upper: costs_doc.intervention.upper,
            control_set,
            discount,
            t_star_bound,
            document: doc,
            hash,
        })
    }
}

fn check_point(p: &PointDoc, n_modes: usize, dim: usize, field: &str) -> Result<()> {
    if p.mode >= n_modes {
        return Err(Error::parse(field, format!("unknown mode {}", p.mode)));
    }
    if p.zeta.len() != dim {
        return Err(Error::parse(
            field,
            format!("zeta must have dimension {dim}"),
        ));
    }
    Ok(())
}

fn resolve_flow(doc: &FlowDoc, n_modes: usize, dim: usize) -> Result<Vec<FlowLaw>> {
    if doc.modes.len() != n_modes {
        return Err(Error::parse(
            "flow.modes",
            format!("expected {n_modes} entries, found {}", doc.modes.len()),
        ));
    }
    let vector = |v: &Option<Vec<f64>>, field: String| -> Result<Coords> {
        let v = v
            .as_ref()
            .ok_or_else(|| Error::parse(&field, "missing vector parameter"))?;
        if v.len() != dim {
            return Err(Error::parse(&field, format!("expected dimension {dim}")));
        }
        Ok(Coords::from_slice(v))
    };
    let rate = |r: Option<f64>, field: String| -> Result<f64> {
        match r {
            Some(r) if r > 0.0 => Ok(r),
            Some(_) => Err(Error::parse(field, "rate must be positive")),
            None => Err(Error::parse(field, "rate required")),
        }
    };
    doc.modes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let f = |name: &str| format!("flow.modes[{i}].{name}");
            match doc.family.as_str() {
                "constant-drift" => Ok(FlowLaw::ConstantDrift {
                    velocity: vector(&p.velocity, f("velocity"))?,
                }),
                "linear-decay-to-target" => Ok(FlowLaw::LinearToTarget {
                    rate: rate(p.rate, f("rate"))?,
                    target: vector(&p.target, f("target"))?,
                }),
                "exponential-decay-to-target" => Ok(FlowLaw::ExponentialToTarget {
                    rate: rate(p.rate, f("rate"))?,
                    target: vector(&p.target, f("target"))?,
                }),
                other => Err(Error::Unsupported(format!("flow family `{other}`"))),
            }
        })
        .collect()
}

fn resolve_field(doc: &FieldDoc, n_modes: usize, dim: usize, field: &str) -> Result<Vec<Expr>> {
    if doc.modes.len() != n_modes {
        return Err(Error::parse(
            format!("{field}.modes"),
            format!("expected {n_modes} entries, found {}", doc.modes.len()),
        ));
    }
    if !(doc.bound >= 0.0) {
        return Err(Error::parse(
            format!("{field}.bound"),
            "bound must be nonnegative",
        ));
    }
    doc.modes
        .iter()
        .enumerate()
        .map(|(i, e)| e.compile(dim, &format!("{field}.modes[{i}]")))
        .collect()
}

fn resolve_intervention(
    doc: &InterventionDoc,
    n_modes: usize,
    n_controls: usize,
    dim: usize,
) -> Result<Vec<Vec<Expr>>> {
    let field = "costs.intervention";
    match (&doc.table, &doc.expr) {
        (Some(table), None) => {
            if table.len() != n_modes || table.iter().any(|row| row.len() != n_controls) {
                return Err(Error::parse(
                    format!("{field}.table"),
                    format!("expected {n_modes} rows of {n_controls} entries"),
                ));
            }
            table
                .iter()
                .enumerate()
                .map(|(m, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, e)| e.compile(dim, &format!("{field}.table[{m}][{j}]")))
                        .collect()
                })
                .collect()
        }
        (None, Some(expr)) => {
            let e = expr.compile(dim, &format!("{field}.expr"))?;
            Ok(vec![vec![e; n_controls]; n_modes])
        }
        _ => Err(Error::parse(
            field,
            "exactly one of `table` or `expr` required",
        )),
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
}

/// Finite-difference estimates of local Lipschitz constants. Reported only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimates {
    pub intensity_along_flow: f64,
    pub intervention_cost_along_flow: f64,
    pub exit_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub model_hash: String,
    pub sampled_points: usize,
    pub checks: Vec<CheckResult>,
    pub observed_cost_min: f64,
    pub observed_cost_max: f64,
    pub max_exit_time: f64,
    pub lipschitz: LipschitzEstimates,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// The first failed check as an error, if any.
    pub fn into_result(self) -> Result<ValidationReport> {
        match self.checks.iter().find(|c| !c.passed) {
            Some(c) => Err(Error::validation(
                &c.name,
                match &c.witness {
                    Some(w) => format!("{} (witness {w})", c.detail),
                    None => c.detail.clone(),
                },
            )),
            None => Ok(self),
        }
    }
}

/// Number of uniformly drawn sample points added to the validation grid.
pub const VALIDATION_RANDOM_SAMPLES: usize = 10_000;

struct Check {
    name: &'static str,
    failure: Option<(String, String)>,
    detail: String,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Check {
            name,
            failure: None,
            detail: String::new(),
        }
    }

    fn fail(&mut self, message: impl Into<String>, witness: impl fmt::Display) {
        if self.failure.is_none() {
            self.failure = Some((message.into(), witness.to_string()));
        }
    }

    fn finish(self) -> CheckResult {
        match self.failure {
            Some((msg, witness)) => CheckResult {
                name: self.name.to_string(),
                passed: false,
                detail: msg,
                witness: Some(witness),
            },
            None => CheckResult {
                name: self.name.to_string(),
                passed: true,
                detail: self.detail,
                witness: None,
            },
        }
    }
}

fn sample_points(m: &PdmpModel, density: usize, seed: u64) -> Vec<StatePoint> {
    let mut pts = Vec::new();
    for (mi, mode) in m.modes.iter().enumerate() {
        let r = &mode.region;
        let total = density.pow(m.dim as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut zeta = Coords::with_capacity(m.dim);
            for i in 0..m.dim {
                let k = rem % density;
                rem /= density;
                let frac = (k as f64 + 0.5) / density as f64;
                zeta.push(r.lower[i] + frac * (r.upper[i] - r.lower[i]));
            }
            pts.push(StatePoint {
                mode: ModeId(mi),
                zeta,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..VALIDATION_RANDOM_SAMPLES {
        let mi = rng.gen_range(0..m.n_modes());
        let r = &m.modes[mi].region;
        let zeta: Coords = (0..m.dim)
            .map(|i| {
                let u: f64 = rng.gen();
                let z = r.lower[i] + u * (r.upper[i] - r.lower[i]);
                if r.lower[i] < z && z < r.upper[i] {
                    z
                } else {
                    0.5 * (r.lower[i] + r.upper[i])
                }
            })
            .collect();
        pts.push(StatePoint {
            mode: ModeId(mi),
            zeta,
        });
    }
    pts
}

/// Checks the model assumptions on a grid of `grid_density` points per axis
/// per mode plus [`VALIDATION_RANDOM_SAMPLES`] seeded random points.
pub fn validate_model(m: &PdmpModel, grid_density: usize, rng_seed: u64) -> ValidationReport {
    let samples = sample_points(m, grid_density.max(1), rng_seed);

    // Exit times and the boundary points reached by the flow.
    let mut exit_check = Check::new("t* bounded");
    let mut max_exit: f64 = 0.0;
    let mut boundary_points = Vec::with_capacity(samples.len());
    for x in &samples {
        let ts = dynamics::hit_time(m, x).unwrap_or(f64::INFINITY);
        if !(ts > 0.0 && ts.is_finite()) {
            exit_check.fail(format!("exit time {ts} is not finite and positive"), x);
            continue;
        }
        if ts > m.t_star_bound {
            exit_check.fail(
                format!("exit time {ts} exceeds declared bound {}", m.t_star_bound),
                x,
            );
        }
        max_exit = max_exit.max(ts);
        if let Ok(b) = dynamics::flow_at(m, x, ts) {
            boundary_points.push(b.point);
        }
    }
    exit_check.detail = format!("max t* = {max_exit}, bound {}", m.t_star_bound);

    let mut control_check = Check::new("control set in E");
    for (j, y) in m.control_set.iter().enumerate() {
        if !m.is_interior(y) {
            control_check.fail(
                format!("control point {j} is not in the open state space"),
                y,
            );
        }
    }
    control_check.detail = format!("{} control points", m.control_set.len());

    // Kernel support at interior and boundary pre-jump points.
    let mut coverage = Check::new("kernel coverage");
    let mut interior = Check::new("atom in E");
    let mut distinct = Check::new("atom differs from pre-jump point");
    for pre in samples.iter().chain(&boundary_points) {
        let entry = match m.kernel_entry(pre) {
            Ok(e) => e,
            Err(_) => {
                coverage.fail("no kernel entry for pre-jump point", pre);
                continue;
            }
        };
        for (atom, _) in entry.place_atoms(pre) {
            if atom.mode.0 >= m.n_modes() {
                interior.fail("atom has unknown mode", &atom);
                continue;
            }
            let region = m.region(atom.mode);
            if !region.contains(&atom.zeta) {
                if region.on_boundary(&atom.zeta) {
                    interior.fail("atom on ∂E", &atom);
                } else {
                    interior.fail("atom outside E", &atom);
                }
            }
            if atom == *pre {
                distinct.fail("atom equals the pre-jump point", &atom);
            }
        }
    }
    coverage.detail = format!("{} pre-jump points", samples.len() + boundary_points.len());
    interior.detail = "all atoms strictly interior".into();
    distinct.detail = "Q(x, {x}) = 0 on samples".into();

    let mut rate_check = Check::new("intensity bounds");
    let mut running_check = Check::new("running cost bounds");
    for x in samples.iter().chain(&boundary_points) {
        let l = m.jump_rate(x);
        if !(l >= 0.0 && l <= m.intensity_bound) {
            rate_check.fail(format!("λ = {l} outside [0, {}]", m.intensity_bound), x);
        }
        let f = m.running(x);
        if !(f >= 0.0 && f <= m.running_bound) {
            running_check.fail(format!("f = {f} outside [0, {}]", m.running_bound), x);
        }
    }
    rate_check.detail = format!("0 ≤ λ ≤ {}", m.intensity_bound);
    running_check.detail = format!("0 ≤ f ≤ {}", m.running_bound);

    // Intervention cost bounds and the triangle property.
    let mut c0_check = Check::new("c0 > 0");
    let mut upper_check = Check::new("c ≤ Cc");
    let mut triangle = Check::new("triangle inequality");
    let mut c_min = f64::INFINITY;
    let mut c_max = f64::NEG_INFINITY;
    if !(m.cost_lower > 0.0) {
        c0_check.fail(
            format!("c0 > 0 violated: declared lower bound {}", m.cost_lower),
            "declaration",
        );
    }
    let u = m.control_set.len();
    let cost_points = samples.iter().chain(&boundary_points).chain(&m.control_set);
    for x in cost_points {
        for j in 0..u {
            let c = m.intervention_cost(x, j);
            c_min = c_min.min(c);
            c_max = c_max.max(c);
            if !(c > 0.0) || c < m.cost_lower {
                c0_check.fail(
                    format!(
                        "c0 > 0 violated: c = {c}, declared lower bound {}",
                        m.cost_lower
                    ),
                    format!("x = {x}, y = {}", m.control_set[j]),
                );
            }
            if !(c <= m.cost_upper) {
                upper_check.fail(
                    format!("c = {c} exceeds declared bound {}", m.cost_upper),
                    format!("x = {x}, y = {}", m.control_set[j]),
                );
            }
        }
        for (j, y) in m.control_set.iter().enumerate() {
            for k in 0..u {
                if m.intervention_cost(x, j) + m.intervention_cost(y, k) < m.intervention_cost(x, k)
                {
                    triangle.fail(
                        "c(x,y) + c(y,z) < c(x,z)",
                        format!("x = {x}, y = {y}, z = {}", m.control_set[k]),
                    );
                }
            }
        }
    }
    c0_check.detail = format!("observed min c = {c_min}");
    upper_check.detail = format!("observed max c = {c_max}");
    triangle.detail = "holds on all samples".into();

    let lipschitz = lipschitz_estimates(m, &samples, grid_density.max(1));

    ValidationReport {
        model_hash: m.hash().to_string(),
        sampled_points: samples.len(),
        checks: vec![
            exit_check.finish(),
            control_check.finish(),
            coverage.finish(),
            interior.finish(),
            distinct.finish(),
            rate_check.finish(),
            running_check.finish(),
            c0_check.finish(),
            upper_check.finish(),
            triangle.finish(),
        ],
        observed_cost_min: c_min,
        observed_cost_max: c_max,
        max_exit_time: max_exit,
        lipschitz,
    }
}

fn lipschitz_estimates(
    m: &PdmpModel,
    samples: &[StatePoint],
    density: usize,
) -> LipschitzEstimates {
    let mut est = LipschitzEstimates::default();
    let grid_len = density.pow(m.dim as u32) * m.n_modes();
    for x in samples.iter().take(grid_len) {
        let Ok(ts) = dynamics::hit_time(m, x) else {
            continue;
        };
        if !ts.is_finite() {
            continue;
        }
        let h = 1e-6 * ts;
        for k in 0..8 {
            let s = ts * k as f64 / 8.0;
            let (Ok(a), Ok(b)) = (dynamics::flow_at(m, x, s), dynamics::flow_at(m, x, s + h))
            else {
                continue;
            };
            let dl = (m.jump_rate(&b.point) - m.jump_rate(&a.point)).abs() / h;
            est.intensity_along_flow = est.intensity_along_flow.max(dl);
            for j in 0..m.control_set.len() {
                let dc =
                    (m.intervention_cost(&b.point, j) - m.intervention_cost(&a.point, j)).abs() / h;
                est.intervention_cost_along_flow = est.intervention_cost_along_flow.max(dc);
            }
        }
    }
    // Neighbouring grid points along the first axis.
    for pair in samples[..grid_len].windows(2) {
        let (x, y) = (&pair[0], &pair[1]);
        if x.mode != y.mode {
            continue;
        }
        let dist: f64 = x
            .zeta
            .iter()
            .zip(&y.zeta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist == 0.0 {
            continue;
        }
        if let (Ok(a), Ok(b)) = (dynamics::hit_time(m, x), dynamics::hit_time(m, y)) {
            if a.is_finite() && b.is_finite() {
                est.exit_time = est.exit_time.max((a - b).abs() / dist);
            }
        }
    }
    est
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_reference_model() {
        let m = PdmpModel::reference();
        assert_eq!(m.n_modes(), 2);
        assert_eq!(m.control_set.len(), 2);
        assert_eq!(m.discount, 0.5);
        assert_eq!(m.dim, 1);
        assert_eq!(m.constant_jump_rate(ModeId(1)), Some(1.0));
        assert_eq!(m.mode_by_label("2"), Some(ModeId(1)));
        assert_eq!(m.fixed_atoms().len(), 2);
    }

    #[test]
    fn missing_discount_is_named() {
        let mut doc = ModelDocument::reference();
        doc.discount = None;
        let err = PdmpModel::from_document(doc).unwrap_err();
        assert!(err.to_string().contains("discount required"), "{err}");
    }

    #[test]
    fn kernel_probability_sum_is_checked() {
        let mut doc = ModelDocument::reference();
        doc.kernel.as_mut().unwrap()[0].atoms[0].prob = 0.9;
        match PdmpModel::from_document(doc).unwrap_err() {
            Error::Validation { check, .. } => assert_eq!(check, "kernel"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_flow_family_is_unsupported() {
        let mut doc = ModelDocument::reference();
        doc.flow.as_mut().unwrap().family = "runge-kutta".into();
        assert!(matches!(
            PdmpModel::from_document(doc),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = REFERENCE_MODEL_JSON.replacen("\"discount\"", "\"discont\": 1, \"discount\"", 1);
        assert!(matches!(load_model(&src), Err(Error::Parse { .. })));
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = PdmpModel::reference();
        let compact: serde_json::Value = serde_json::from_str(REFERENCE_MODEL_JSON).unwrap();
        let b = load_model(&compact.to_string()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut doc = ModelDocument::reference();
        doc.discount = Some(0.4);
        assert_ne!(a.hash(), PdmpModel::from_document(doc).unwrap().hash());
    }

    #[test]
    fn reference_model_validates() {
        let m = PdmpModel::reference();
        let report = validate_model(&m, 50, 1);
        assert!(report.passed(), "{report:#?}");
        assert_eq!(report.observed_cost_min, 1.0);
        assert_eq!(report.observed_cost_max, 1.0);
        assert!(report.max_exit_time <= 10.0);
    }

    #[test]
    fn atom_on_boundary_fails() {
        let mut doc = ModelDocument::reference();
        doc.kernel.as_mut().unwrap()[0].atoms[0].zeta = vec!["10".into()];
        let m = PdmpModel::from_document(doc).unwrap();
        let report = validate_model(&m, 20, 1);
        let c = report.check("atom in E").unwrap();
        assert!(!c.passed);
        assert_eq!(c.detail, "atom on ∂E");
        assert!(c.witness.as_deref().unwrap().contains("10"));
        assert!(report.into_result().is_err());
    }

    #[test]
    fn zero_cost_entry_fails() {
        let mut doc = ModelDocument::reference();
        doc.costs
            .as_mut()
            .unwrap()
            .intervention
            .table
            .as_mut()
            .unwrap()[1][0] = "0".into();
        let m = PdmpModel::from_document(doc).unwrap();
        let report = validate_model(&m, 20, 1);
        let c = report.check("c0 > 0").unwrap();
        assert!(!c.passed);
        assert!(c.detail.contains("c0 > 0 violated"));
    }

    #[test]
    fn unbounded_exit_time_fails() {
        let mut doc = ModelDocument::reference();
        doc.flow.as_mut().unwrap().modes[1].velocity = Some(vec![0.0]);
        let m = PdmpModel::from_document(doc).unwrap();
        assert!(
            !validate_model(&m, 10, 1)
                .check("t* bounded")
                .unwrap()
                .passed
        );
    }

    #[test]
    fn triangle_violation_is_caught() {
        let mut doc = ModelDocument::reference();
        let ic = &mut doc.costs.as_mut().unwrap().intervention;
        // c(x, y0) = 1, c(y0, y1) = 1, c(x, y1) = 3 > 2 for mode-1 points.
        ic.upper = 3.0;
        ic.table = Some(vec![
            vec!["1".into(), "3".into()],
            vec!["1".into(), "1".into()],
        ]);
        // Make the hop y0 -> y1 cheap by moving y0 to mode 2.
        doc.control_set.as_mut().unwrap()[0].mode = 1;
        let m = PdmpModel::from_document(doc).unwrap();
        assert!(
            !validate_model(&m, 10, 1)
                .check("triangle inequality")
                .unwrap()
                .passed
        );
    }
}
