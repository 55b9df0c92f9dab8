//! Adaptive Gauss–Kronrod quadrature, golden-section search and bisection.
//!
//! All routines accept fallible closures so that errors raised while
//! evaluating an integrand (kernel coverage, recursion budgets) propagate.

// 15-point Kronrod nodes on [0, 1) (symmetric), with the 7-point Gauss
// weights attached to the odd-indexed nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Default relative tolerance for every integral in the crate.
pub const QUAD_REL_TOL: f64 = 1e-10;
/// Absolute floor under the relative tolerance.
pub const QUAD_ABS_TOL: f64 = 1e-13;
const MAX_PANELS: usize = 2000;

fn gk15<E>(f: &mut impl FnMut(f64) -> Result<f64, E>, a: f64, b: f64) -> Result<(f64, f64), E> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx)? + f(c + dx)?;
        kronrod += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    Ok((kronrod * h, ((kronrod - gauss) * h).abs()))
}

/// Globally adaptive G7–K15 integration of `f` over `[a, b]`.
///
/// Panels with the largest error estimate are bisected until the summed
/// estimate falls below `max(QUAD_ABS_TOL, rel_tol·|I|)` or the panel budget
/// is spent; in the latter case the best estimate is returned.
pub fn integrate<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    a: f64,
    b: f64,
    rel_tol: f64,
) -> Result<f64, E> {
    if !(b > a) {
        return Ok(0.0);
    }
    let (v, e) = gk15(&mut f, a, b)?;
    let mut panels = vec![(a, b, v, e)];
    let mut total = v;
    let mut err = e;
    while err > QUAD_ABS_TOL.max(rel_tol * total.abs()) && panels.len() < MAX_PANELS {
        let (idx, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (pa, pb, pv, pe) = panels.swap_remove(idx);
        let mid = 0.5 * (pa + pb);
        if !(mid > pa && mid < pb) {
            // Panel at floating-point resolution; keep it and stop refining.
            panels.push((pa, pb, pv, 0.0));
            err -= pe;
            continue;
        }
        let (lv, le) = gk15(&mut f, pa, mid)?;
        let (rv, re) = gk15(&mut f, mid, pb)?;
        total += lv + rv - pv;
        err += le + re - pe;
        panels.push((pa, mid, lv, le));
        panels.push((mid, pb, rv, re));
    }
    // Re-sum to shed the drift accumulated by incremental updates.
    Ok(panels.iter().map(|p| p.2).sum())
}

/// Infallible convenience wrapper around [`integrate`].
pub fn integrate_plain(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    integrate::<std::convert::Infallible>(|x| Ok(f(x)), a, b, rel_tol)
        .unwrap_or_else(|e| match e {})
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for a minimum of `f` on `[a, b]`; stops when the
/// bracket is narrower than `tol`. Returns the best abscissa seen and its value.
pub fn golden_section<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> Result<(f64, f64), E> {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a) > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
        if !(c < d) {
            break;
        }
    }
    Ok(if fc <= fd { (c, fc) } else { (d, fd) })
}

/// Bisection on a predicate that is false at `lo` and true at `hi`.
/// Returns the final `hi`, always a point where the predicate holds.
pub fn bisect_predicate<E>(
    mut pred: impl FnMut(f64) -> Result<bool, E>,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> Result<f64, E> {
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if !(mid > lo && mid < hi) {
            break;
        }
        if pred(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_smooth_functions() {
        let v = integrate_plain(|x| (-x).exp(), 0.0, 2.0, 1e-12);
        assert!((v - (1.0 - (-2.0f64).exp())).abs() < 1e-14);
        let v = integrate_plain(|x| x.sin(), 0.0, std::f64::consts::PI, 1e-12);
        assert!((v - 2.0).abs() < 1e-13);
    }

    #[test]
    fn integrates_kinks() {
        let v = integrate_plain(|x| (x - 0.3).abs(), 0.0, 1.0, 1e-10);
        assert!((v - (0.045 + 0.245)).abs() < 1e-10);
    }

    #[test]
    fn empty_interval_is_zero() {
        assert_eq!(integrate_plain(|_| 1.0, 1.0, 1.0, 1e-10), 0.0);
        assert_eq!(integrate_plain(|_| 1.0, 2.0, 1.0, 1e-10), 0.0);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, fx) =
            golden_section::<()>(|x| Ok((x - 0.7) * (x - 0.7) + 1.0), 0.0, 2.0, 1e-9).unwrap();
        assert!((x - 0.7).abs() < 1e-7);
        assert!((fx - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bisection_keeps_true_endpoint() {
        let r = bisect_predicate::<()>(|x| Ok(x >= 0.25), 0.0, 1.0, 1e-12).unwrap();
        assert!(r >= 0.25 && r - 0.25 < 1e-12);
    }
}
