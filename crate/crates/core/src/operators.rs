//! The one-step dynamic-programming operators `F`, `J`, `K`, `M`, `L` and `𝓛`
//! evaluated against arbitrary bounded functions on the state space.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{advance, hit_time, IntensityPath};
use crate::error::{Error, Result};
use crate::model::{PdmpModel, StatePoint};
use crate::numerics::{bisect_predicate, golden_section, integrate, QUAD_REL_TOL};

/// A bounded real function on `Ē`.
pub trait Evaluable: Sync {
    fn eval(&self, x: &StatePoint) -> Result<f64>;
    /// Declared sup-norm bound.
    fn bound(&self) -> f64;
}

impl<T: Evaluable + ?Sized> Evaluable for &T {
    fn eval(&self, x: &StatePoint) -> Result<f64> {
        (**self).eval(x)
    }
    fn bound(&self) -> f64 {
        (**self).bound()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant(pub f64);

impl Evaluable for Constant {
    fn eval(&self, _: &StatePoint) -> Result<f64> {
        Ok(self.0)
    }
    fn bound(&self) -> f64 {
        self.0.abs()
    }
}

/// Wraps a closure with a declared bound.
pub struct FnEvaluable<F> {
    f: F,
    bound: f64,
}

pub fn from_fn<F>(bound: f64, f: F) -> FnEvaluable<F>
where
    F: Fn(&StatePoint) -> f64 + Sync,
{
    FnEvaluable { f, bound }
}

impl<F: Fn(&StatePoint) -> f64 + Sync> Evaluable for FnEvaluable<F> {
    fn eval(&self, x: &StatePoint) -> Result<f64> {
        Ok((self.f)(x))
    }
    fn bound(&self) -> f64 {
        self.bound
    }
}

/// `Mφ(x) = min_j c(x, y_j) + φ_j`. Ties go to the lowest index; `+∞`
/// entries never win unless every entry is infinite.
pub fn op_m(m: &PdmpModel, phi: &[f64], x: &StatePoint) -> Result<(f64, usize)> {
    if m.control_set.is_empty() {
        return Err(Error::validation("control set", "control set is empty"));
    }
    if phi.len() != m.control_set.len() {
        return Err(Error::Domain(format!(
            "expected {} control values, got {}",
            m.control_set.len(),
            phi.len()
        )));
    }
    let mut best = (f64::INFINITY, 0);
    for (j, p) in phi.iter().enumerate() {
        let v = m.intervention_cost(x, j) + p;
        if v < best.0 {
            best = (v, j);
        }
    }
    Ok(best)
}

/// `Mw` as an evaluable function, with `w` sampled once on the control set.
pub struct InterventionValue<'a> {
    m: &'a PdmpModel,
    phi: Vec<f64>,
    bound: f64,
}

impl<'a> InterventionValue<'a> {
    pub fn new(m: &'a PdmpModel, w: &dyn Evaluable) -> Result<Self> {
        let phi = m
            .control_set
            .iter()
            .map(|y| w.eval(y))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_values(m, phi, w.bound()))
    }

    pub fn from_values(m: &'a PdmpModel, phi: Vec<f64>, w_bound: f64) -> Self {
        InterventionValue {
            m,
            phi,
            bound: m.cost_upper + w_bound,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.phi
    }

    pub fn argmin(&self, x: &StatePoint) -> Result<(f64, usize)> {
        op_m(self.m, &self.phi, x)
    }
}

impl Evaluable for InterventionValue<'_> {
    fn eval(&self, x: &StatePoint) -> Result<f64> {
        Ok(self.argmin(x)?.0)
    }
    fn bound(&self) -> f64 {
        self.bound
    }
}

/// `Qw(pre) = Σ p_a w(a)` over the kernel atoms at `pre`.
pub fn op_qw(m: &PdmpModel, w: &dyn Evaluable, pre: &StatePoint) -> Result<f64> {
    let mut total = 0.0;
    for (atom, p) in m.kernel_entry(pre)?.place_atoms(pre) {
        if p > 0.0 {
            total += p * w.eval(&atom)?;
        }
    }
    Ok(total)
}

/// Integrals along the flow from a fixed start point of
/// `e^{−αs−Λ(x,s)} [f + λ·Qw](Φ(x,s))`, computed piecewise so that a whole
/// time grid can be swept with one pass.
struct FlowIntegrals<'a> {
    m: &'a PdmpModel,
    x: &'a StatePoint,
    w: Option<&'a dyn Evaluable>,
    path: IntensityPath<'a>,
    t_star: f64,
}

impl<'a> FlowIntegrals<'a> {
    fn new(m: &'a PdmpModel, x: &'a StatePoint, w: Option<&'a dyn Evaluable>) -> Result<Self> {
        let t_star = hit_time(m, x)?;
        Ok(FlowIntegrals {
            m,
            x,
            w,
            path: IntensityPath::new(m, x),
            t_star,
        })
    }

    fn horizon(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("negative time {t}")));
        }
        let end = t.min(self.t_star);
        if end.is_finite() {
            Ok(end)
        } else {
            Err(Error::Domain(format!("unbounded horizon from {}", self.x)))
        }
    }

    fn integrand(&self, s: f64, lambda_s: f64) -> Result<f64> {
        let y = advance(self.m, self.x, s);
        let mut g = self.m.running(&y);
        if let Some(w) = self.w {
            let rate = self.m.jump_rate(&y);
            if rate != 0.0 {
                g += rate * op_qw(self.m, w, &y)?;
            }
        }
        Ok((-self.m.discount * s - lambda_s).exp() * g)
    }

    /// `(∫_a^b g, Λ(x,b))` given `la = Λ(x,a)`.
    fn piece(&self, a: f64, la: f64, b: f64) -> Result<(f64, f64)> {
        let value = integrate(
            |s| self.integrand(s, self.path.from(a, la, s)),
            a,
            b,
            QUAD_REL_TOL,
        )?;
        Ok((value, self.path.from(a, la, b)))
    }

    /// `e^{−αt−Λ} v(Φ(x,t))`.
    fn terminal(&self, t: f64, lambda_t: f64, v: &dyn Evaluable) -> Result<f64> {
        let weight = (-self.m.discount * t - lambda_t).exp();
        if weight == 0.0 {
            return Ok(0.0);
        }
        Ok(weight * v.eval(&advance(self.m, self.x, t))?)
    }

    fn terminal_qw(&self, t: f64, lambda_t: f64) -> Result<f64> {
        let weight = (-self.m.discount * t - lambda_t).exp();
        match self.w {
            Some(w) if weight != 0.0 => Ok(weight * op_qw(self.m, w, &advance(self.m, self.x, t))?),
            _ => Ok(0.0),
        }
    }
}

/// `F(x,t) = ∫₀^{t∧t*} e^{−αs−Λ(x,s)} f(Φ(x,s)) ds`; `t = +∞` is allowed.
pub fn op_f(m: &PdmpModel, x: &StatePoint, t: f64) -> Result<f64> {
    let fi = FlowIntegrals::new(m, x, None)?;
    let end = fi.horizon(t)?;
    Ok(fi.piece(0.0, 0.0, end)?.0)
}

/// `Kw(x)`: expected cost of waiting for the next jump, then paying `w`.
pub fn op_k(m: &PdmpModel, w: &dyn Evaluable, x: &StatePoint) -> Result<f64> {
    let fi = FlowIntegrals::new(m, x, Some(w))?;
    let end = fi.horizon(f64::INFINITY)?;
    let (integral, lambda) = fi.piece(0.0, 0.0, end)?;
    Ok(integral + fi.terminal_qw(end, lambda)?)
}

/// `J(v,w)(x,t)`: cost of planning to stop at time `t` and pay `v` there,
/// paying `w` if a natural jump comes first.
pub fn op_j(
    m: &PdmpModel,
    v: &dyn Evaluable,
    w: &dyn Evaluable,
    x: &StatePoint,
    t: f64,
) -> Result<f64> {
    let fi = FlowIntegrals::new(m, x, Some(w))?;
    let end = fi.horizon(t)?;
    let (integral, lambda) = fi.piece(0.0, 0.0, end)?;
    Ok(integral + fi.terminal(end, lambda, v)?)
}

/// `J(v,w)(x,·)` sampled on a uniform grid over `[0, t*(x)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JProfile {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `(∫₀^{t_i} g, Λ(x,t_i))` at each grid time, used to restart integration.
    #[serde(skip)]
    anchors: Vec<(f64, f64)>,
}

impl JProfile {
    /// Writes `t,J` rows with a header.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "t,J")?;
        for (t, j) in self.times.iter().zip(&self.values) {
            writeln!(out, "{t},{j}")?;
        }
        Ok(())
    }
}

/// Evaluates `J(v,w)(x,t)` on `n_t` uniform intervals of `[0, t*(x)]`.
pub fn j_profile(
    m: &PdmpModel,
    v: &dyn Evaluable,
    w: &dyn Evaluable,
    x: &StatePoint,
    n_t: usize,
) -> Result<JProfile> {
    let fi = FlowIntegrals::new(m, x, Some(w))?;
    let end = fi.horizon(f64::INFINITY)?;
    sweep(&fi, v, end, n_t.max(1))
}

fn sweep(fi: &FlowIntegrals<'_>, v: &dyn Evaluable, end: f64, n_t: usize) -> Result<JProfile> {
    let mut times = Vec::with_capacity(n_t + 1);
    let mut values = Vec::with_capacity(n_t + 1);
    let mut anchors = Vec::with_capacity(n_t + 1);
    let (mut acc, mut lambda, mut prev) = (0.0, 0.0, 0.0);
    for i in 0..=n_t {
        let t = if i == n_t {
            end
        } else {
            end * i as f64 / n_t as f64
        };
        if i > 0 {
            let (piece, l) = fi.piece(prev, lambda, t)?;
            acc += piece;
            lambda = l;
        }
        times.push(t);
        values.push(acc + fi.terminal(t, lambda, v)?);
        anchors.push((acc, lambda));
        prev = t;
    }
    Ok(JProfile {
        times,
        values,
        anchors,
    })
}

/// `J` at `t` using grid time `i ≤ t` as the integration anchor.
fn j_from_anchor(
    fi: &FlowIntegrals<'_>,
    p: &JProfile,
    i: usize,
    v: &dyn Evaluable,
    t: f64,
) -> Result<f64> {
    let (acc, lambda) = p.anchors[i];
    let (piece, l) = fi.piece(p.times[i], lambda, t)?;
    Ok(acc + piece + fi.terminal(t, l, v)?)
}

/// Resolution of the search for `inf_t J`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Number of uniform intervals over `[0, t*(x)]`.
    pub n_t: usize,
    /// Time tolerance of the refinements, relative to `t*(x)`.
    pub delta_rel: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            n_t: 512,
            delta_rel: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfJResult {
    pub inf_value: f64,
    /// Earliest time at which `J` comes within `ε` of its infimum.
    pub r_eps: f64,
    /// `J(v,w)(x, r_eps)`.
    pub value_at_r: f64,
    /// Time at which the infimum was located.
    pub argmin_time: f64,
    /// True when refinement did not improve on the best grid value.
    pub attained_on_grid: bool,
}

/// Approximates `inf_t J(v,w)(x,t)` and the ε-threshold time
/// `inf{s ≥ 0 : J(v,w)(x,s) < inf + ε}`.
pub fn inf_j(
    m: &PdmpModel,
    v: &dyn Evaluable,
    w: &dyn Evaluable,
    x: &StatePoint,
    eps: f64,
    opts: &SearchOptions,
) -> Result<InfJResult> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("ε must be positive, got {eps}")));
    }
    let fi = FlowIntegrals::new(m, x, Some(w))?;
    let end = fi.horizon(f64::INFINITY)?;
    let p = sweep(&fi, v, end, opts.n_t.max(1))?;
    inf_from_profile(&fi, &p, v, eps, opts)
}

fn inf_from_profile(
    fi: &FlowIntegrals<'_>,
    p: &JProfile,
    v: &dyn Evaluable,
    eps: f64,
    opts: &SearchOptions,
) -> Result<InfJResult> {
    let n = p.times.len() - 1;
    let end = p.times[n];
    let tol = opts.delta_rel * end;

    let mut best = 0;
    for i in 1..=n {
        if p.values[i] < p.values[best] {
            best = i;
        }
    }
    let mut inf_value = p.values[best];
    let mut argmin_time = p.times[best];
    let mut attained_on_grid = true;
    if n > 0 && end > 0.0 {
        let lo = best.saturating_sub(1);
        let hi = (best + 1).min(n);
        let (t, j) = golden_section(
            |t| j_from_anchor(fi, p, lo, v, t),
            p.times[lo],
            p.times[hi],
            tol,
        )?;
        if j < inf_value {
            inf_value = j;
            argmin_time = t;
            attained_on_grid = false;
        }
    }

    let threshold = inf_value + eps;
    let first_grid = p.values.iter().position(|&j| j < threshold);
    let (candidate, candidate_value) = match first_grid {
        Some(i) if attained_on_grid || p.times[i] <= argmin_time => (p.times[i], p.values[i]),
        _ => (argmin_time, inf_value),
    };
    if candidate == 0.0 {
        return Ok(InfJResult {
            inf_value,
            r_eps: 0.0,
            value_at_r: candidate_value,
            argmin_time,
            attained_on_grid,
        });
    }
    // Every grid time before the candidate fails the threshold; refine the
    // crossing inside the last failing cell.
    let anchor = p.times.partition_point(|&t| t < candidate) - 1;
    let passes = |s: f64| j_from_anchor(fi, p, anchor, v, s).map(|j| j < threshold);
    let mut r = bisect_predicate(passes, p.times[anchor], candidate, tol)?;
    if r >= end {
        r = bisect_predicate(passes, p.times[anchor], end, 0.0)?;
    }
    let value_at_r = if r == candidate {
        candidate_value
    } else {
        j_from_anchor(fi, p, anchor, v, r)?
    };
    Ok(InfJResult {
        inf_value,
        r_eps: r,
        value_at_r,
        argmin_time,
        attained_on_grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// Waiting for the next natural jump is strictly better.
    KWins,
    /// Intervening at the ε-threshold time is at least as good.
    JWins,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LResult {
    pub value: f64,
    pub branch: Branch,
    pub k_value: f64,
    pub detail: InfJResult,
}

/// ε-approximate `𝓛w(x) = min(inf_t J(Mw,w)(x,t), Kw(x))`, returning the
/// value at the ε-threshold time when intervention wins.
pub fn op_lscript(
    m: &PdmpModel,
    w: &dyn Evaluable,
    x: &StatePoint,
    eps: f64,
    opts: &SearchOptions,
) -> Result<LResult> {
    let mw = InterventionValue::new(m, w)?;
    let k_value = op_k(m, w, x)?;
    let detail = inf_j(m, &mw, w, x, eps, opts)?;
    Ok(if k_value < detail.inf_value {
        LResult {
            value: k_value,
            branch: Branch::KWins,
            k_value,
            detail,
        }
    } else {
        LResult {
            value: detail.value_at_r,
            branch: Branch::JWins,
            k_value,
            detail,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::sample_sojourn;
    use crate::model::ModelDocument;
    use crate::stats::{open_uniform, replicate_rng, MeanEstimate};
    use proptest::prelude::*;
    use rand::Rng;

    fn rm1() -> PdmpModel {
        PdmpModel::reference()
    }

    fn pt(mode: usize, z: f64) -> StatePoint {
        StatePoint::new(mode, &[z])
    }

    fn variant(edit: impl FnOnce(&mut ModelDocument)) -> PdmpModel {
        let mut doc = ModelDocument::reference();
        edit(&mut doc);
        PdmpModel::from_document(doc).unwrap()
    }

    fn zero_running() -> PdmpModel {
        variant(|d| d.costs.as_mut().unwrap().running.modes = vec!["0".into(), "0".into()])
    }

    /// No-impulse cost of the reference model, solved by hand: with
    /// `a = h(1,5)` and `b = h(2,5)` the fixed-point equations are linear.
    fn exact_h() -> impl Fn(&StatePoint) -> f64 + Sync + Copy {
        let h1 = |z: f64, b: f64| (1.0 - (-z).exp()) * (1.0 + 0.5 * b) + (-z).exp() * b;
        let h2 =
            |z: f64, a: f64| (1.0 - (-0.75 * z).exp()) * (5.0 + a) / 1.5 + (-0.75 * z).exp() * a;
        // a = p + q b, b = r + s a
        let (p, q) = (h1(5.0, 0.0), h1(5.0, 1.0) - h1(5.0, 0.0));
        let (r, s) = (h2(5.0, 0.0), h2(5.0, 1.0) - h2(5.0, 0.0));
        let a = (p + q * r) / (1.0 - q * s);
        let b = r + s * a;
        move |x: &StatePoint| {
            let z = x.zeta[0];
            if x.mode.0 == 0 {
                h1(z, b)
            } else {
                h2(z, a)
            }
        }
    }

    #[test]
    fn hand_solved_h_is_a_fixed_point_of_k() {
        let m = rm1();
        let h = exact_h();
        let w = from_fn(20.0, h);
        for x in [pt(0, 2.0), pt(0, 5.0), pt(1, 4.0), pt(1, 9.9)] {
            assert!((op_k(&m, &w, &x).unwrap() - h(&x)).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn f_examples() {
        let m = rm1();
        let v = op_f(&m, &pt(0, 2.0), f64::INFINITY).unwrap();
        assert!((v - (1.0 - (-2.0f64).exp())).abs() < 1e-12);
        let v = op_f(&m, &pt(1, 4.0), 1.0).unwrap();
        assert!((v - 5.0 * (1.0 - (-1.5f64).exp()) / 1.5).abs() < 1e-12);
        assert_eq!(op_f(&m, &pt(1, 4.0), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn qw_examples() {
        let m = rm1();
        assert_eq!(op_qw(&m, &Constant(1.0), &pt(0, 3.0)).unwrap(), 1.0);
        let mode2 = from_fn(1.0, |x| if x.mode.0 == 1 { 1.0 } else { 0.0 });
        assert_eq!(op_qw(&m, &mode2, &pt(0, 7.0)).unwrap(), 1.0);
        let position = from_fn(10.0, |x| x.zeta[0]);
        assert_eq!(op_qw(&m, &position, &pt(1, 0.0)).unwrap(), 5.0);
    }

    #[test]
    fn m_examples() {
        let m = rm1();
        let x = pt(0, 4.0);
        assert_eq!(op_m(&m, &[0.0, 0.0], &x).unwrap(), (1.0, 0));
        let (v, j) = op_m(&m, &[0.2, 0.1], &x).unwrap();
        assert!((v - 1.1).abs() < 1e-15 && j == 1);
        let (v, j) = op_m(&m, &[f64::INFINITY, 0.3], &x).unwrap();
        assert!((v - 1.3).abs() < 1e-15 && j == 1);
        assert!(op_m(&m, &[0.0], &x).is_err());
    }

    #[test]
    fn k_of_zero_is_running_cost() {
        let m = rm1();
        let x = pt(0, 2.0);
        let k0 = op_k(&m, &Constant(0.0), &x).unwrap();
        assert!((k0 - op_f(&m, &x, f64::INFINITY).unwrap()).abs() < 1e-14);
        assert!((k0 - 0.864_664_716_763_387_3).abs() < 1e-12);
        assert_eq!(op_k(&zero_running(), &Constant(0.0), &x).unwrap(), 0.0);
    }

    #[test]
    fn k_of_constant_matches_discounted_jump_time() {
        let m = rm1();
        let c = 2.5;
        for x in [pt(0, 2.0), pt(1, 4.0)] {
            let k0 = op_k(&m, &Constant(0.0), &x).unwrap();
            let kc = op_k(&m, &Constant(c), &x).unwrap();
            let mut rng = replicate_rng(17, 0);
            let draws: Vec<f64> = (0..100_000)
                .map(|_| {
                    (-m.discount * sample_sojourn(&m, &x, open_uniform(&mut rng)).unwrap().time)
                        .exp()
                })
                .collect();
            let est = MeanEstimate::from_samples(&draws);
            assert!(
                ((kc - k0) / c - est.mean).abs() < 3.0 * est.std_error,
                "{x}"
            );
        }
    }

    #[test]
    fn j_trivial_cases() {
        let m = rm1();
        let x = pt(1, 4.0);
        let v = from_fn(10.0, |y| 1.0 + y.zeta[0]);
        assert_eq!(op_j(&m, &v, &Constant(3.0), &x, 0.0).unwrap(), 5.0);
        for t in [0.3, 1.0, 2.0, 7.0] {
            let j = op_j(&m, &Constant(0.0), &Constant(0.0), &x, t).unwrap();
            assert!((j - op_f(&m, &x, t).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn j_matches_pathwise_expectation() {
        let m = rm1();
        let h = exact_h();
        let w = from_fn(20.0, h);
        let v = InterventionValue::new(&m, &w).unwrap();
        let x = pt(0, 2.0);
        let t = 1.0;
        let exact = op_j(&m, &v, &w, &x, t).unwrap();
        // Running cost to t∧S, then w at the natural jump or v at time t.
        let mut rng = replicate_rng(23, 0);
        let a = m.discount;
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let s = sample_sojourn(&m, &x, open_uniform(&mut rng)).unwrap();
                let stop = s.time.min(t);
                let running = (1.0 - (-a * stop).exp()) / a;
                if !s.boundary_hit && s.time < t {
                    let z =
                        crate::dynamics::sample_post_jump(&m, &advance(&m, &x, s.time), rng.gen())
                            .unwrap();
                    running + (-a * s.time).exp() * h(&z)
                } else {
                    running + (-a * t).exp() * v.eval(&advance(&m, &x, t)).unwrap()
                }
            })
            .collect();
        let est = MeanEstimate::from_samples(&draws);
        assert!(est.z_score(exact) < 3.0, "J = {exact}, MC = {est:?}");
    }

    #[test]
    fn inf_j_of_zero_problem() {
        let m = zero_running();
        let r = inf_j(
            &m,
            &Constant(0.0),
            &Constant(0.0),
            &pt(0, 2.0),
            0.01,
            &SearchOptions::default(),
        )
        .unwrap();
        assert_eq!(r.inf_value, 0.0);
        assert_eq!(r.r_eps, 0.0);
    }

    #[test]
    fn increasing_j_stops_immediately() {
        let m = rm1();
        // v rises along the flow much faster than discounting removes it.
        let v = from_fn(60.0, |y| 60.0 - 100.0 * y.zeta[0]);
        let x = pt(0, 0.5);
        let p = j_profile(&m, &v, &Constant(0.0), &x, 64).unwrap();
        assert!(p.values.windows(2).all(|j| j[1] > j[0]));
        let r = inf_j(&m, &v, &Constant(0.0), &x, 0.01, &SearchOptions::default()).unwrap();
        assert_eq!(r.r_eps, 0.0);
        assert_eq!(r.value_at_r, 10.0);
    }

    #[test]
    fn inf_j_matches_dense_grid() {
        let m = rm1();
        let w = from_fn(20.0, exact_h());
        let v = InterventionValue::new(&m, &w).unwrap();
        for x in [pt(0, 2.0), pt(1, 4.0), pt(0, 9.5)] {
            let r = inf_j(&m, &v, &w, &x, 0.01, &SearchOptions::default()).unwrap();
            let dense = j_profile(&m, &v, &w, &x, 100_000).unwrap();
            let dense_min = dense.values.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!((r.inf_value - dense_min).abs() < 1e-4, "{x}");
            assert!(r.inf_value <= dense_min + 1e-12);
            let jr = op_j(&m, &v, &w, &x, r.r_eps).unwrap();
            assert!((jr - r.value_at_r).abs() < 1e-10);
            assert!(jr < r.inf_value + 0.01);
            // No earlier dense time is ε-good.
            let first = dense
                .values
                .iter()
                .position(|&j| j < r.inf_value + 0.01)
                .unwrap();
            assert!(dense.times[first] + 1e-4 * hit_time(&m, &x).unwrap() >= r.r_eps);
        }
    }

    #[test]
    fn lscript_of_zero_problem_waits() {
        let m = zero_running();
        let l = op_lscript(
            &m,
            &Constant(0.0),
            &pt(0, 2.0),
            0.01,
            &SearchOptions::default(),
        )
        .unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.branch, Branch::KWins);
        // J(M0,0)(x,t) = e^{−(α+λ)t}·c decreases to its value at t* = 2.
        assert!((l.detail.inf_value - (-2.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn lscript_matches_fine_oracle() {
        let m = rm1();
        let w = from_fn(20.0, exact_h());
        let fine = SearchOptions {
            n_t: 20_000,
            delta_rel: 1e-9,
        };
        for x in [pt(0, 2.0), pt(1, 4.0), pt(1, 9.0)] {
            let l = op_lscript(&m, &w, &x, 0.01, &SearchOptions::default()).unwrap();
            let o = op_lscript(&m, &w, &x, 1e-7, &fine).unwrap();
            assert!(
                l.value >= o.value - 1e-4 && l.value <= o.value + 0.01 + 1e-4,
                "{x}"
            );
            let again = op_lscript(&m, &w, &x, 0.01, &SearchOptions::default()).unwrap();
            assert_eq!(l, again);
        }
    }

    #[test]
    fn k_is_j_with_boundary_kernel_value() {
        let m = rm1();
        let w = from_fn(20.0, exact_h());
        for x in [pt(0, 2.0), pt(1, 4.0), pt(1, 0.5)] {
            let qw_hat = from_fn(20.0, |y: &StatePoint| op_qw(&m, &w, y).unwrap());
            let ts = hit_time(&m, &x).unwrap();
            let j = op_j(&m, &qw_hat, &w, &x, ts).unwrap();
            assert!((j - op_k(&m, &w, &x).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn j_increments_are_lipschitz_in_time() {
        let m = rm1();
        let w = from_fn(20.0, exact_h());
        let v = InterventionValue::new(&m, &w).unwrap();
        let x = pt(0, 8.0);
        let coarse = j_profile(&m, &v, &w, &x, 256).unwrap();
        let fine = j_profile(&m, &v, &w, &x, 1024).unwrap();
        let slope = |p: &JProfile| {
            p.values
                .windows(2)
                .zip(p.times.windows(2))
                .map(|(j, t)| (j[1] - j[0]).abs() / (t[1] - t[0]))
                .fold(0.0, f64::max)
        };
        let c = slope(&coarse);
        assert!(slope(&fine) <= 1.05 * c + 1e-9);
        let max_step = fine
            .values
            .windows(2)
            .map(|j| (j[1] - j[0]).abs())
            .fold(0.0, f64::max);
        assert!(max_step <= 1.05 * c * 8.0 / 1024.0);
    }

    #[test]
    fn profile_csv_has_header() {
        let m = rm1();
        let p = j_profile(&m, &Constant(1.0), &Constant(0.0), &pt(0, 2.0), 4).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,J\n0,1\n"));
        assert_eq!(text.lines().count(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn operators_are_monotone(
            a in 0.0f64..5.0, b in 0.0f64..5.0, k in 0.1f64..3.0,
            beta in 0.0f64..2.0, g0 in 0.0f64..1.0, g1 in 0.0f64..1.0,
            mode in 0usize..2, z in 0.05f64..9.95, tf in 0.0f64..1.2,
        ) {
            let m = rm1();
            let w = from_fn(a + b + 1.0, move |y: &StatePoint| {
                let base = if y.mode.0 == 0 { a } else { b };
                base + (k * y.zeta[0]).sin().abs()
            });
            let w2 = from_fn(a + b + 1.0 + beta, move |y: &StatePoint| {
                let base = if y.mode.0 == 0 { a } else { b };
                let g = if y.mode.0 == 0 { g0 } else { g1 };
                base + (k * y.zeta[0]).sin().abs() + beta * g * (0.5 + 0.5 * (y.zeta[0]).cos())
            });
            let x = pt(mode, z);
            let (k1, k2) = (op_k(&m, &w, &x).unwrap(), op_k(&m, &w2, &x).unwrap());
            prop_assert!(k1 <= k2 + 1e-8 && k2 <= k1 + beta + 1e-8);
            let (v1, v2) = (InterventionValue::new(&m, &w).unwrap(), InterventionValue::new(&m, &w2).unwrap());
            let t = tf * hit_time(&m, &x).unwrap();
            let j1 = op_j(&m, &v1, &w, &x, t).unwrap();
            let j2 = op_j(&m, &v2, &w2, &x, t).unwrap();
            prop_assert!(j1 <= j2 + 1e-8 && j2 <= j1 + beta + 1e-8);
        }

        #[test]
        fn j_is_constant_after_exit(mode in 0usize..2, z in 0.05f64..9.95, extra in 0.0f64..50.0) {
            let m = rm1();
            let w = from_fn(20.0, exact_h());
            let v = InterventionValue::new(&m, &w).unwrap();
            let x = pt(mode, z);
            let ts = hit_time(&m, &x).unwrap();
            let at = op_j(&m, &v, &w, &x, ts).unwrap();
            prop_assert_eq!(at, op_j(&m, &v, &w, &x, ts + extra).unwrap());
            prop_assert_eq!(at, op_j(&m, &v, &w, &x, f64::INFINITY).unwrap());
        }
    }
}
