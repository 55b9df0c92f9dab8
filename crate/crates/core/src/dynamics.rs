//! Flow evaluation, exit times, cumulative intensity, jump sampling and
//! uncontrolled trajectory simulation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Coords, FlowLaw, PdmpModel, Region, StatePoint};
use crate::numerics::{integrate_plain, QUAD_REL_TOL};
use crate::stats::open_uniform;

/// Jumps allowed before a path is declared explosive.
pub const MAX_JUMPS: usize = 1_000_000;
/// Absolute tolerance of the intensity inversion in [`sample_sojourn`].
pub const SOJOURN_ROOT_TOL: f64 = 1e-12;
/// Default discarded-tail tolerance for infinite-horizon integrals.
pub const TAIL_TOL: f64 = 1e-6;
const EXIT_SLACK: f64 = 1e-12;

impl FlowLaw {
    /// `Φ_m(ζ, t)` in closed form.
    pub fn advance(&self, zeta: &[f64], t: f64) -> Coords {
        match self {
            FlowLaw::ConstantDrift { velocity } => {
                zeta.iter().zip(velocity).map(|(z, v)| z + v * t).collect()
            }
            FlowLaw::LinearToTarget { rate, target } => zeta
                .iter()
                .zip(target)
                .map(|(z, a)| {
                    let gap = z - a;
                    let left = (gap.abs() - rate * t).max(0.0);
                    a + gap.signum() * left
                })
                .collect(),
            FlowLaw::ExponentialToTarget { rate, target } => {
                let decay = (-rate * t).exp();
                zeta.iter()
                    .zip(target)
                    .map(|(z, a)| a + (z - a) * decay)
                    .collect()
            }
        }
    }

    /// First time the flow started at `zeta` reaches the boundary of `region`
    /// (`+∞` if it never does).
    pub fn exit_time(&self, zeta: &[f64], region: &Region) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..zeta.len() {
            let (z, lo, hi) = (zeta[i], region.lower[i], region.upper[i]);
            let t = match self {
                FlowLaw::ConstantDrift { velocity } => {
                    let v = velocity[i];
                    if v < 0.0 {
                        (z - lo) / -v
                    } else if v > 0.0 {
                        (hi - z) / v
                    } else {
                        f64::INFINITY
                    }
                }
                FlowLaw::LinearToTarget { rate, target } => {
                    let a = target[i];
                    if z > a && lo >= a {
                        (z - lo) / rate
                    } else if z < a && hi <= a {
                        (hi - z) / rate
                    } else {
                        f64::INFINITY
                    }
                }
                FlowLaw::ExponentialToTarget { rate, target } => {
                    let a = target[i];
                    if z > a && lo > a {
                        ((z - a) / (lo - a)).ln() / rate
                    } else if z < a && hi < a {
                        ((a - z) / (a - hi)).ln() / rate
                    } else {
                        f64::INFINITY
                    }
                }
            };
            best = best.min(t);
        }
        best
    }
}

/// A flow image, flagged when it sits on `∂E`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPoint {
    pub point: StatePoint,
    pub on_boundary: bool,
}

fn require_interior(m: &PdmpModel, x: &StatePoint) -> Result<()> {
    if m.is_interior(x) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{x} is not an interior state")))
    }
}

/// `t*(x)`, exact for the closed-form flow families.
pub fn hit_time(m: &PdmpModel, x: &StatePoint) -> Result<f64> {
    require_interior(m, x)?;
    Ok(m.flows[x.mode.0].exit_time(&x.zeta, m.region(x.mode)))
}

/// Like [`hit_time`] but errors on an infinite exit time.
pub fn finite_hit_time(m: &PdmpModel, x: &StatePoint) -> Result<f64> {
    let t = hit_time(m, x)?;
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Domain(format!(
            "flow from {x} never reaches the boundary"
        )))
    }
}

/// Flow image without range checks; `t` is assumed to be in `[0, t*(x)]`.
#[inline]
pub fn advance(m: &PdmpModel, x: &StatePoint, t: f64) -> StatePoint {
    StatePoint {
        mode: x.mode,
        zeta: m.flows[x.mode.0].advance(&x.zeta, t),
    }
}

/// `Φ(x, t)` for `0 ≤ t ≤ t*(x)`; at `t = t*(x)` the point is flagged as boundary.
pub fn flow_at(m: &PdmpModel, x: &StatePoint, t: f64) -> Result<FlowPoint> {
    let ts = hit_time(m, x)?;
    if !(t >= 0.0) || t > ts * (1.0 + EXIT_SLACK) {
        return Err(Error::Domain(format!(
            "time {t} outside [0, t*] = [0, {ts}] for {x}"
        )));
    }
    Ok(FlowPoint {
        point: advance(m, x, t.min(ts)),
        on_boundary: t >= ts,
    })
}

/// Cumulative intensity along the flow from a fixed start point.
///
/// Constant rates are integrated in closed form; otherwise adaptive
/// quadrature is used.
#[derive(Debug, Clone, Copy)]
pub struct IntensityPath<'a> {
    m: &'a PdmpModel,
    x: &'a StatePoint,
    rate: Option<f64>,
}

impl<'a> IntensityPath<'a> {
    pub fn new(m: &'a PdmpModel, x: &'a StatePoint) -> Self {
        IntensityPath {
            m,
            x,
            rate: m.constant_jump_rate(x.mode),
        }
    }

    pub fn constant_rate(&self) -> Option<f64> {
        self.rate
    }

    #[inline]
    pub fn rate_at(&self, s: f64) -> f64 {
        match self.rate {
            Some(r) => r,
            None => self.m.jump_rate(&advance(self.m, self.x, s)),
        }
    }

    /// `Λ(x, s)`.
    pub fn at(&self, s: f64) -> f64 {
        self.from(0.0, 0.0, s)
    }

    /// `Λ(x, s)` given the known value `lambda0 = Λ(x, s0)`.
    pub fn from(&self, s0: f64, lambda0: f64, s: f64) -> f64 {
        match self.rate {
            Some(r) => r * s,
            None => lambda0 + integrate_plain(|u| self.rate_at(u), s0, s, QUAD_REL_TOL),
        }
    }
}

/// `Λ(x, t)` for `0 ≤ t ≤ t*(x)`.
pub fn cumulative_intensity(m: &PdmpModel, x: &StatePoint, t: f64) -> Result<f64> {
    let ts = hit_time(m, x)?;
    if !(t >= 0.0) || t > ts * (1.0 + EXIT_SLACK) {
        return Err(Error::Domain(format!(
            "time {t} outside [0, t*] = [0, {ts}] for {x}"
        )));
    }
    Ok(IntensityPath::new(m, x).at(t.min(ts)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sojourn {
    pub time: f64,
    /// The sojourn ended at the truncation time rather than by a spontaneous jump.
    pub boundary_hit: bool,
}

/// Inverse-CDF sample of the first jump time from `x` given `u ∈ (0, 1]`.
pub fn sample_sojourn(m: &PdmpModel, x: &StatePoint, u: f64) -> Result<Sojourn> {
    let ts = finite_hit_time(m, x)?;
    Ok(sample_sojourn_truncated(m, x, ts, u))
}

/// Inverse-CDF sample of a sojourn whose survival function is
/// `e^{−Λ(x,t)} 1{t < cap}`; the atom at `cap` has mass `e^{−Λ(x,cap)}`.
pub fn sample_sojourn_truncated(m: &PdmpModel, x: &StatePoint, cap: f64, u: f64) -> Sojourn {
    let path = IntensityPath::new(m, x);
    if u <= (-path.at(cap)).exp() {
        return Sojourn {
            time: cap,
            boundary_hit: true,
        };
    }
    let target = -u.ln();
    let time = match path.constant_rate() {
        Some(r) => (target / r).min(cap),
        None => invert_intensity(&path, target, cap),
    };
    Sojourn {
        time,
        boundary_hit: false,
    }
}

// Safeguarded Newton on Λ(s) = target over [0, cap]; falls back to bisection
// wherever the rate vanishes or the Newton step leaves the bracket.
fn invert_intensity(path: &IntensityPath<'_>, target: f64, cap: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, cap);
    let mut s = 0.5 * cap;
    for _ in 0..200 {
        let g = path.at(s) - target;
        if g > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        if hi - lo <= SOJOURN_ROOT_TOL {
            break;
        }
        let rate = path.rate_at(s);
        let newton = if rate > 0.0 { s - g / rate } else { f64::NAN };
        s = if newton > lo && newton < hi {
            if (newton - s).abs() <= SOJOURN_ROOT_TOL {
                return newton;
            }
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    0.5 * (lo + hi)
}

/// Draws the post-jump location from `Q(pre, ·)` with `u ∈ [0, 1)`.
pub fn sample_post_jump(m: &PdmpModel, pre: &StatePoint, u: f64) -> Result<StatePoint> {
    Ok(sample_post_jump_indexed(m, pre, u)?.point)
}

/// A drawn kernel atom with its `(entry, atom)` position in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomDraw {
    pub entry: usize,
    pub atom: usize,
    pub point: StatePoint,
}

/// [`sample_post_jump`], also reporting which atom was drawn.
pub fn sample_post_jump_indexed(m: &PdmpModel, pre: &StatePoint, u: f64) -> Result<AtomDraw> {
    let entry = m.kernel_entry_index(pre)?;
    let mut cum = 0.0;
    let mut last = None;
    for (a, (point, p)) in m.kernel[entry].place_atoms(pre).enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        let draw = AtomDraw {
            entry,
            atom: a,
            point,
        };
        if u < cum {
            return Ok(draw);
        }
        last = Some(draw);
    }
    last.ok_or_else(|| Error::KernelCoverage(pre.to_string()))
}

/// `∫₀^s e^{−α(t0+r)} f(Φ(x,r)) dr`: the discounted running cost of a flow
/// segment that starts at absolute time `t0`.
pub fn discounted_running(m: &PdmpModel, x: &StatePoint, t0: f64, s: f64) -> f64 {
    let a = m.discount;
    let scale = (-a * t0).exp();
    match m.constant_running(x.mode) {
        Some(f) => f * scale * (-(-a * s).exp_m1()) / a,
        None => {
            scale
                * integrate_plain(
                    |r| (-a * r).exp() * m.running(&advance(m, x, r)),
                    0.0,
                    s,
                    QUAD_REL_TOL,
                )
        }
    }
}

/// Horizon `H` with discarded tail `C_f e^{−αH}/α ≤ tol`.
pub fn tail_horizon(m: &PdmpModel, tol: f64) -> f64 {
    let a = m.discount;
    ((m.running_bound / (a * tol)).ln() / a).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub sojourn: f64,
    pub pre_jump: StatePoint,
    pub post_jump: StatePoint,
    pub boundary_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub start: StatePoint,
    pub events: Vec<JumpEvent>,
    pub horizon: f64,
    pub discounted_running_cost: f64,
}

/// Simulates the uncontrolled process from `x0` up to `horizon`.
pub fn simulate_uncontrolled(
    m: &PdmpModel,
    x0: &StatePoint,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<PathRecord> {
    require_interior(m, x0)?;
    let mut events = Vec::new();
    let mut x = x0.clone();
    let mut t = 0.0;
    let mut cost = crate::stats::CompensatedSum::default();
    while t < horizon {
        if events.len() >= MAX_JUMPS {
            return Err(Error::Explosion(MAX_JUMPS));
        }
        let sj = sample_sojourn(m, &x, open_uniform(rng))?;
        if t + sj.time >= horizon {
            cost.add(discounted_running(m, &x, t, horizon - t));
            break;
        }
        cost.add(discounted_running(m, &x, t, sj.time));
        let pre = advance(m, &x, sj.time);
        let post = sample_post_jump(m, &pre, rng.gen())?;
        t += sj.time;
        events.push(JumpEvent {
            time: t,
            sojourn: sj.time,
            pre_jump: pre,
            post_jump: post.clone(),
            boundary_hit: sj.boundary_hit,
        });
        x = post;
    }
    Ok(PathRecord {
        start: x0.clone(),
        events,
        horizon,
        discounted_running_cost: cost.value(),
    })
}
