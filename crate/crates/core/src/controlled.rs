//! The augmented process `(m, ζ, N, θ) ∪ {Δ}` that executes an ε-optimal
//! strategy: simulation, Monte Carlo cost estimation, and distributional
//! checks of its first transition and of its intervention times.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    advance, discounted_running, finite_hit_time, sample_post_jump_indexed,
    sample_sojourn_truncated, IntensityPath, MAX_JUMPS,
};
use crate::error::{Error, Result};
use crate::model::{PdmpModel, StatePoint};
use crate::numerics::{integrate_plain, QUAD_REL_TOL};
use crate::stats::{
    binomial_z, ks_critical_one_sample, ks_critical_two_sample, ks_one_sample, ks_two_sample,
    open_uniform, replicate_rng, two_proportion_z, MeanEstimate,
};
use crate::valuefn::{Decision, Policy};

/// Offset applied to the master seed for the paired fresh simulations of
/// [`check_intervention_markov`].
const PAIRED_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AugmentedState {
    Cemetery,
    Live {
        point: StatePoint,
        budget: usize,
        clock: f64,
    },
}

impl AugmentedState {
    pub fn start(point: StatePoint, budget: usize) -> Self {
        AugmentedState::Live {
            point,
            budget,
            clock: 0.0,
        }
    }

    pub fn point(&self) -> Option<&StatePoint> {
        match self {
            AugmentedState::Live { point, .. } => Some(point),
            AugmentedState::Cemetery => None,
        }
    }

    pub fn budget(&self) -> usize {
        match self {
            AugmentedState::Live { budget, .. } => *budget,
            AugmentedState::Cemetery => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JumpKind {
    Natural,
    Intervention,
}

/// The four cases of the augmented jump kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transition {
    /// Budget exhausted: plain kernel, budget stays 0.
    NoBudget,
    /// Jump strictly before the planned intervention time.
    BeforeThreshold,
    /// Planned time coincides with the boundary: plain kernel.
    ThresholdAtBoundary,
    /// Planned time reached before the boundary: move to the restart point.
    Intervention,
}

impl Transition {
    pub fn kind(self) -> JumpKind {
        match self {
            Transition::Intervention => JumpKind::Intervention,
            _ => JumpKind::Natural,
        }
    }
}

/// `t̃* = t*(x) ∧ r_ε^N(x)`.
pub fn aug_hit_time(m: &PdmpModel, policy: &dyn Policy, s: &AugmentedState) -> Result<f64> {
    match s {
        AugmentedState::Cemetery => Err(Error::Domain("hit time of the cemetery state".into())),
        AugmentedState::Live { point, budget, .. } => {
            let d = policy.decide(m, point, *budget)?;
            Ok(finite_hit_time(m, point)?.min(d.r))
        }
    }
}

/// `Φ̃(s, t) = (m, Φ_m(ζ,t), N, θ+t)`; the cemetery is fixed.
pub fn aug_flow(
    m: &PdmpModel,
    policy: &dyn Policy,
    s: &AugmentedState,
    t: f64,
) -> Result<AugmentedState> {
    match s {
        AugmentedState::Cemetery => Ok(AugmentedState::Cemetery),
        AugmentedState::Live {
            point,
            budget,
            clock,
        } => {
            let limit = aug_hit_time(m, policy, s)?;
            if !(t >= 0.0) || t > limit {
                return Err(Error::Domain(format!(
                    "time {t} outside [0, {limit}] for the augmented flow"
                )));
            }
            Ok(AugmentedState::Live {
                point: advance(m, point, t),
                budget: *budget,
                clock: clock + t,
            })
        }
    }
}

/// One transition of the augmented process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub sojourn: f64,
    /// The sojourn ended at `t̃*` rather than by a spontaneous jump.
    pub boundary_hit: bool,
    pub pre_jump: StatePoint,
    pub post: AugmentedState,
    pub case: Transition,
    pub decision: Decision,
    /// Kernel `(entry, atom)` drawn on natural jumps.
    pub atom: Option<(usize, usize)>,
    /// Undiscounted intervention cost `c(pre, y)`; zero for natural jumps.
    pub intervention_cost: f64,
}

/// Samples the next sojourn and post-jump state from a live state at the
/// start of a segment. `r` and `y` are read at the segment start point.
pub fn aug_step(
    m: &PdmpModel,
    policy: &dyn Policy,
    s: &AugmentedState,
    rng: &mut impl Rng,
) -> Result<StepRecord> {
    let AugmentedState::Live {
        point: x, budget, ..
    } = s
    else {
        return Err(Error::Domain("cannot step from the cemetery state".into()));
    };
    let budget = *budget;
    let decision = policy.decide(m, x, budget)?;
    let t_star = finite_hit_time(m, x)?;
    let cap = t_star.min(decision.r);
    let sj = sample_sojourn_truncated(m, x, cap, open_uniform(rng));
    let pre = advance(m, x, sj.time);
    let case = if budget == 0 {
        Transition::NoBudget
    } else if !sj.boundary_hit || decision.r > t_star {
        Transition::BeforeThreshold
    } else if decision.r == t_star {
        Transition::ThresholdAtBoundary
    } else {
        Transition::Intervention
    };
    if case == Transition::Intervention {
        let j = decision
            .y
            .ok_or_else(|| Error::PolicyCoverage(format!("no restart point recorded at {x}")))?;
        let cost = m.intervention_cost(&pre, j);
        return Ok(StepRecord {
            sojourn: sj.time,
            boundary_hit: sj.boundary_hit,
            pre_jump: pre,
            post: AugmentedState::start(m.control_set[j].clone(), budget - 1),
            case,
            decision,
            atom: None,
            intervention_cost: cost,
        });
    }
    let draw = sample_post_jump_indexed(m, &pre, rng.gen())?;
    Ok(StepRecord {
        sojourn: sj.time,
        boundary_hit: sj.boundary_hit,
        pre_jump: pre,
        post: AugmentedState::start(draw.point, budget.saturating_sub(1)),
        case,
        decision,
        atom: Some((draw.entry, draw.atom)),
        intervention_cost: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlledEvent {
    pub time: f64,
    pub sojourn: f64,
    pub pre_jump: StatePoint,
    pub post: AugmentedState,
    pub kind: JumpKind,
    pub case: Transition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlledTrajectory {
    pub start: AugmentedState,
    pub events: Vec<ControlledEvent>,
    /// Intervention times `τ̃_i`, in order.
    pub tau: Vec<f64>,
    /// Restart points `R̃_i`, in order.
    pub restarts: Vec<StatePoint>,
    pub horizon: f64,
    pub running_cost: f64,
    pub intervention_cost: f64,
}

impl ControlledTrajectory {
    pub fn total_cost(&self) -> f64 {
        self.running_cost + self.intervention_cost
    }

    /// `τ̃_i` (1-based), `+∞` when fewer than `i` interventions occurred.
    pub fn tau(&self, i: usize) -> f64 {
        i.checked_sub(1)
            .and_then(|k| self.tau.get(k))
            .copied()
            .unwrap_or(f64::INFINITY)
    }

    /// `R̃_i` (1-based), `None` standing for the cemetery.
    pub fn restart(&self, i: usize) -> Option<&StatePoint> {
        i.checked_sub(1).and_then(|k| self.restarts.get(k))
    }
}

/// Runs the strategy from `(x0, n0, 0)`. Running cost is integrated exactly
/// per segment; the path stops at `horizon` once the budget is spent, so
/// intervention costs are never truncated.
pub fn simulate_controlled(
    m: &PdmpModel,
    policy: &dyn Policy,
    x0: &StatePoint,
    n0: usize,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<ControlledTrajectory> {
    if n0 > policy.n_max() {
        return Err(Error::PolicyCoverage(format!(
            "budget {n0} exceeds policy depth {}",
            policy.n_max()
        )));
    }
    if !m.is_interior(x0) {
        return Err(Error::Domain(format!("{x0} is not an interior state")));
    }
    let start = AugmentedState::start(x0.clone(), n0);
    let mut state = start.clone();
    let mut t = 0.0;
    let mut events = Vec::new();
    let mut tau = Vec::new();
    let mut restarts = Vec::new();
    let mut running = crate::stats::CompensatedSum::default();
    let mut intervention = crate::stats::CompensatedSum::default();
    loop {
        let budget = state.budget();
        if budget == 0 && t >= horizon {
            break;
        }
        if events.len() >= MAX_JUMPS {
            return Err(Error::Explosion(MAX_JUMPS));
        }
        let x = state.point().expect("live state").clone();
        let step = aug_step(m, policy, &state, rng)?;
        if budget == 0 && t + step.sojourn >= horizon {
            running.add(discounted_running(m, &x, t, horizon - t));
            break;
        }
        running.add(discounted_running(m, &x, t, step.sojourn));
        t += step.sojourn;
        if step.case == Transition::Intervention {
            intervention.add((-m.discount * t).exp() * step.intervention_cost);
            tau.push(t);
            restarts.push(step.post.point().expect("restart is live").clone());
        }
        events.push(ControlledEvent {
            time: t,
            sojourn: step.sojourn,
            pre_jump: step.pre_jump,
            post: step.post.clone(),
            kind: step.case.kind(),
            case: step.case,
        });
        state = step.post;
    }
    Ok(ControlledTrajectory {
        start,
        events,
        tau,
        restarts,
        horizon,
        running_cost: running.value(),
        intervention_cost: intervention.value(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub x0: StatePoint,
    pub n0: usize,
    pub replicates: usize,
    pub seed: u64,
    pub total: MeanEstimate,
    pub ci95: (f64, f64),
    pub running: MeanEstimate,
    pub intervention: MeanEstimate,
    /// `histogram[i]` counts paths with exactly `i` interventions.
    pub histogram: Vec<usize>,
}

/// Per-replicate `(running cost, intervention cost, interventions)`, in
/// replicate order.
pub fn sample_costs(
    m: &PdmpModel,
    policy: &dyn Policy,
    x0: &StatePoint,
    n0: usize,
    replicates: usize,
    seed: u64,
    horizon: f64,
) -> Result<Vec<(f64, f64, usize)>> {
    (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let p = simulate_controlled(m, policy, x0, n0, horizon, &mut replicate_rng(seed, i))?;
            Ok((p.running_cost, p.intervention_cost, p.tau.len()))
        })
        .collect()
}

/// Monte Carlo estimate of the strategy cost from `(x0, n0, 0)` over
/// independent per-replicate streams.
pub fn estimate_cost_j(
    m: &PdmpModel,
    policy: &dyn Policy,
    x0: &StatePoint,
    n0: usize,
    replicates: usize,
    seed: u64,
    horizon: f64,
) -> Result<CostEstimate> {
    let paths = sample_costs(m, policy, x0, n0, replicates, seed, horizon)?;
    let run: Vec<f64> = paths.iter().map(|p| p.0).collect();
    let int: Vec<f64> = paths.iter().map(|p| p.1).collect();
    let tot: Vec<f64> = paths.iter().map(|p| p.0 + p.1).collect();
    let mut histogram = vec![0; n0 + 1];
    for p in &paths {
        histogram[p.2] += 1;
    }
    let total = MeanEstimate::from_samples(&tot);
    Ok(CostEstimate {
        x0: x0.clone(),
        n0,
        replicates,
        seed,
        ci95: total.ci95(),
        total,
        running: MeanEstimate::from_samples(&run),
        intervention: MeanEstimate::from_samples(&int),
        histogram,
    })
}

/// One cell of a first-transition law comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawCell {
    pub label: String,
    pub expected: f64,
    pub observed: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawReport {
    pub replicates: usize,
    pub cells: Vec<LawCell>,
    pub max_z: f64,
    /// KS distance of the first sojourn against its analytic CDF.
    pub ks_stat: f64,
    pub ks_critical: f64,
    /// Interventions whose restart differed from the recorded restart point.
    pub restart_mismatches: usize,
}

impl LawReport {
    pub fn passed(&self, z_limit: f64) -> bool {
        self.max_z < z_limit && self.ks_stat < self.ks_critical && self.restart_mismatches == 0
    }

    pub fn frequency(&self, label: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.label == label)
            .map(|c| c.observed)
    }
}

type CellKey = (Transition, Option<(usize, usize)>);

fn cell_label(key: &CellKey) -> String {
    match key.1 {
        Some((e, a)) => format!("{:?} atom {e}.{a}", key.0),
        None => format!("{:?}", key.0),
    }
}

/// Analytic probabilities of each `(case, atom)` cell of the first
/// transition from `(x0, n0, 0)`.
fn first_transition_law(
    m: &PdmpModel,
    x0: &StatePoint,
    n0: usize,
    d: &Decision,
) -> Result<BTreeMap<CellKey, f64>> {
    let t_star = finite_hit_time(m, x0)?;
    let cap = t_star.min(d.r);
    let path = IntensityPath::new(m, x0);
    let mut law = BTreeMap::new();
    let early = if n0 == 0 {
        Transition::NoBudget
    } else {
        Transition::BeforeThreshold
    };
    // Spontaneous jumps on [0, cap): density λ e^{−Λ}, split by drawn atom.
    for (e, entry) in m.kernel.iter().enumerate() {
        for a in 0..entry.atoms.len() {
            let p = integrate_plain(
                |s| {
                    let y = advance(m, x0, s);
                    match m.kernel_entry_index(&y) {
                        Ok(i) if i == e => {
                            let prob = entry.atoms[a].prob;
                            m.jump_rate(&y) * (-path.at(s)).exp() * prob
                        }
                        _ => 0.0,
                    }
                },
                0.0,
                cap,
                QUAD_REL_TOL,
            );
            if p > 0.0 {
                *law.entry((early, Some((e, a)))).or_insert(0.0) += p;
            }
        }
    }
    let mass = (-path.at(cap)).exp();
    let end_case = if n0 == 0 {
        Transition::NoBudget
    } else if d.r > t_star {
        Transition::BeforeThreshold
    } else if d.r == t_star {
        Transition::ThresholdAtBoundary
    } else {
        Transition::Intervention
    };
    if end_case == Transition::Intervention {
        law.insert((end_case, None), mass);
    } else {
        let pre = advance(m, x0, cap);
        let e = m.kernel_entry_index(&pre)?;
        for (a, (_, p)) in m.kernel[e].place_atoms(&pre).enumerate() {
            if p > 0.0 {
                *law.entry((end_case, Some((e, a)))).or_insert(0.0) += mass * p;
            }
        }
    }
    Ok(law)
}

/// Compares the empirical first transition from `(x0, n0, 0)` with its
/// analytic law: case/atom cell probabilities, the sojourn CDF, and the
/// restart point on interventions.
pub fn check_joint_law(
    m: &PdmpModel,
    policy: &dyn Policy,
    x0: &StatePoint,
    n0: usize,
    replicates: usize,
    seed: u64,
) -> Result<LawReport> {
    let start = AugmentedState::start(x0.clone(), n0);
    let d = policy.decide(m, x0, n0)?;
    let steps: Vec<StepRecord> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| aug_step(m, policy, &start, &mut replicate_rng(seed, i)))
        .collect::<Result<_>>()?;
    let law = first_transition_law(m, x0, n0, &d)?;
    let mut counts: BTreeMap<CellKey, usize> = law.keys().map(|k| (*k, 0)).collect();
    let mut restart_mismatches = 0;
    for s in &steps {
        *counts.entry((s.case, s.atom)).or_insert(0) += 1;
        if s.case == Transition::Intervention {
            let expected = d.y.map(|j| &m.control_set[j]);
            if s.post.point() != expected {
                restart_mismatches += 1;
            }
        }
    }
    // Cases with probability zero still appear, so that observing them fails.
    for case in [
        Transition::NoBudget,
        Transition::BeforeThreshold,
        Transition::ThresholdAtBoundary,
        Transition::Intervention,
    ] {
        if !counts.keys().any(|k| k.0 == case) {
            counts.insert((case, None), 0);
        }
    }
    let cells: Vec<LawCell> = counts
        .iter()
        .map(|(key, &k)| {
            let expected = law.get(key).copied().unwrap_or(0.0);
            LawCell {
                label: cell_label(key),
                expected,
                observed: k as f64 / replicates as f64,
                z: binomial_z(k, replicates, expected),
            }
        })
        .collect();
    let max_z = cells.iter().fold(0.0f64, |z, c| z.max(c.z));

    let t_star = finite_hit_time(m, x0)?;
    let cap = t_star.min(d.r);
    let path = IntensityPath::new(m, x0);
    let cdf = |t: f64| {
        if t >= cap {
            1.0
        } else if t < 0.0 {
            0.0
        } else {
            1.0 - (-path.at(t)).exp()
        }
    };
    let cdf_left = |t: f64| {
        if t > cap {
            1.0
        } else if t <= 0.0 {
            0.0
        } else {
            1.0 - (-path.at(t)).exp()
        }
    };
    let sojourns: Vec<f64> = steps.iter().map(|s| s.sojourn).collect();
    Ok(LawReport {
        replicates,
        cells,
        max_z,
        ks_stat: ks_one_sample(&sojourns, cdf, cdf_left),
        ks_critical: ks_critical_one_sample(replicates),
        restart_mismatches,
    })
}

/// Two-sample comparison for one class of first transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsComparison {
    pub label: String,
    pub n: usize,
    pub stat: f64,
    pub critical: f64,
}

impl KsComparison {
    pub fn passed(&self) -> bool {
        self.n == 0 || self.stat < self.critical
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub index: usize,
    pub comparisons: Vec<KsComparison>,
}

impl MarkovReport {
    pub fn passed(&self) -> bool {
        self.comparisons.iter().all(KsComparison::passed)
    }
}

/// Checks that, after the first jump, the remaining intervention times
/// behave like those of a fresh run started from the post-jump state with
/// one less unit of budget. Each path from `(x0, n0, 0)` is paired with a
/// fresh run from its own `Z̃₁` on an independent stream, and `τ̃_i` is
/// compared with `S̃₁` plus the fresh run's corresponding intervention time
/// by a two-sample KS test, separately for natural and intervention first
/// jumps.
pub fn check_intervention_markov(
    m: &PdmpModel,
    policy: &dyn Policy,
    x0: &StatePoint,
    n0: usize,
    index: usize,
    replicates: usize,
    seed: u64,
) -> Result<MarkovReport> {
    if n0 == 0 || index == 0 {
        return Err(Error::Domain(
            "need a positive budget and intervention index".into(),
        ));
    }
    let paired_seed = seed.wrapping_add(PAIRED_SEED_OFFSET);
    let pairs: Vec<(JumpKind, f64, f64)> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let a = simulate_controlled(m, policy, x0, n0, 0.0, &mut replicate_rng(seed, i))?;
            let first = &a.events[0];
            let z1 = first.post.point().expect("live post-jump state");
            let b = simulate_controlled(
                m,
                policy,
                z1,
                n0 - 1,
                0.0,
                &mut replicate_rng(paired_seed, i),
            )?;
            // Shifting the fresh run by S̃₁ repeats the path's own additions,
            // so equal times compare equal in floating point.
            let fresh = match first.kind {
                JumpKind::Natural => b.tau(index),
                JumpKind::Intervention if index == 1 => 0.0,
                JumpKind::Intervention => b.tau(index - 1),
            };
            Ok((first.kind, a.tau(index), first.sojourn + fresh))
        })
        .collect::<Result<_>>()?;
    let comparisons = [JumpKind::Natural, JumpKind::Intervention]
        .into_iter()
        .map(|kind| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pairs
                .iter()
                .filter(|p| p.0 == kind)
                .map(|p| (p.1, p.2))
                .unzip();
            let n = xs.len();
            KsComparison {
                label: format!("{kind:?} first jump"),
                n,
                stat: if n == 0 { 0.0 } else { ks_two_sample(&xs, &ys) },
                critical: if n == 0 {
                    f64::INFINITY
                } else {
                    ks_critical_two_sample(n, n)
                },
            }
        })
        .collect();
    Ok(MarkovReport { index, comparisons })
}

/// Projection check: with no budget, the augmented first transition must
/// have the law of the plain process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub replicates: usize,
    pub ks_stat: f64,
    pub ks_critical: f64,
    pub cells: Vec<LawCell>,
    pub max_z: f64,
}

impl ProjectionReport {
    pub fn passed(&self, z_limit: f64) -> bool {
        self.ks_stat < self.ks_critical && self.max_z < z_limit
    }
}

/// Compares first transitions of the augmented process started with zero
/// budget against the plain process, on independent streams.
pub fn check_projection(
    m: &PdmpModel,
    policy: &dyn Policy,
    x0: &StatePoint,
    replicates: usize,
    seed: u64,
) -> Result<ProjectionReport> {
    let start = AugmentedState::start(x0.clone(), 0);
    let aug: Vec<(f64, bool, (usize, usize))> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let s = aug_step(m, policy, &start, &mut replicate_rng(seed, i))?;
            Ok((s.sojourn, s.boundary_hit, s.atom.expect("natural jump")))
        })
        .collect::<Result<_>>()?;
    let plain_seed = seed.wrapping_add(PAIRED_SEED_OFFSET);
    let plain: Vec<(f64, bool, (usize, usize))> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(plain_seed, i);
            let sj = crate::dynamics::sample_sojourn(m, x0, open_uniform(&mut rng))?;
            let pre = advance(m, x0, sj.time);
            let d = sample_post_jump_indexed(m, &pre, rng.gen())?;
            Ok((sj.time, sj.boundary_hit, (d.entry, d.atom)))
        })
        .collect::<Result<_>>()?;
    let mut keys: BTreeMap<(bool, (usize, usize)), (usize, usize)> = BTreeMap::new();
    for s in &aug {
        keys.entry((s.1, s.2)).or_default().0 += 1;
    }
    for s in &plain {
        keys.entry((s.1, s.2)).or_default().1 += 1;
    }
    let cells: Vec<LawCell> = keys
        .iter()
        .map(|(k, &(a, b))| LawCell {
            label: format!(
                "{} atom {}.{}",
                if k.0 { "boundary" } else { "spontaneous" },
                k.1 .0,
                k.1 .1
            ),
            expected: b as f64 / replicates as f64,
            observed: a as f64 / replicates as f64,
            z: two_proportion_z(a, replicates, b, replicates),
        })
        .collect();
    let max_z = cells.iter().fold(0.0f64, |z, c| z.max(c.z));
    let xs: Vec<f64> = aug.iter().map(|s| s.0).collect();
    let ys: Vec<f64> = plain.iter().map(|s| s.0).collect();
    Ok(ProjectionReport {
        replicates,
        ks_stat: ks_two_sample(&xs, &ys),
        ks_critical: ks_critical_two_sample(replicates, replicates),
        cells,
        max_z,
    })
}
