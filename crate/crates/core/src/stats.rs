//! Per-replicate random streams and the summary statistics used to compare
//! simulations against analytic values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Asymptotic Kolmogorov–Smirnov coefficient at the 1% level,
/// `sqrt(-ln(0.005) / 2)`.
pub const KS_COEFF_1PCT: f64 = 1.627_607_889_053_57;

/// Counter-based stream for replicate `index` under `seed`.
///
/// Streams are independent of evaluation order, so parallel and serial
/// runs draw identical numbers for every replicate.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform draw on `(0, 1]`, safe to pass to `ln`.
pub fn open_uniform(rng: &mut impl rand::Rng) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub std_error: f64,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanEstimate {
                n,
                mean: f64::NAN,
                std_dev: f64::NAN,
                std_error: f64::NAN,
            };
        }
        let mut s = CompensatedSum::default();
        xs.iter().for_each(|&x| s.add(x));
        let mean = s.value() / n as f64;
        let mut ss = CompensatedSum::default();
        xs.iter().for_each(|&x| ss.add((x - mean) * (x - mean)));
        let var = if n > 1 {
            ss.value() / (n - 1) as f64
        } else {
            0.0
        };
        let std_dev = var.sqrt();
        MeanEstimate {
            n,
            mean,
            std_dev,
            std_error: std_dev / (n as f64).sqrt(),
        }
    }

    /// Normal-approximation 95% interval.
    pub fn ci95(&self) -> (f64, f64) {
        let half = 1.959_963_984_540_054 * self.std_error;
        (self.mean - half, self.mean + half)
    }

    /// `|mean − target| / SE`; zero when both the spread and the gap vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        standardized(self.mean - target, self.std_error)
    }
}

/// `diff / se`, treating an exact match with zero spread as zero deviation.
pub fn standardized(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se > 0.0 {
        diff.abs() / se
    } else {
        f64::INFINITY
    }
}

/// Standardized deviation of an observed frequency `k/n` from probability `p`.
pub fn binomial_z(k: usize, n: usize, p: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let phat = k as f64 / n as f64;
    standardized(phat - p, (p * (1.0 - p) / n as f64).sqrt())
}

/// Two-proportion z statistic with pooled variance.
pub fn two_proportion_z(k1: usize, n1: usize, k2: usize, n2: usize) -> f64 {
    let p1 = k1 as f64 / n1 as f64;
    let p2 = k2 as f64 / n2 as f64;
    let pooled = (k1 + k2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    standardized(p1 - p2, se)
}

/// One-sample KS distance between `samples` and a CDF that may carry atoms.
///
/// `cdf(t)` must return `P(X ≤ t)` and `cdf_left(t)` must return `P(X < t)`.
pub fn ks_one_sample(
    samples: &[f64],
    cdf: impl Fn(f64) -> f64,
    cdf_left: impl Fn(f64) -> f64,
) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < xs.len() {
        let x = xs[i];
        let mut j = i;
        while j < xs.len() && xs[j] == x {
            j += 1;
        }
        let below = i as f64 / n;
        let upto = j as f64 / n;
        d = d
            .max((upto - cdf(x)).abs())
            .max((below - cdf_left(x)).abs());
        i = j;
    }
    d
}

/// Two-sample KS distance; ties and infinite values are handled by
/// stepping both empirical CDFs across each distinct value together.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xa.len() || j < xb.len() {
        let next = match (xa.get(i), xb.get(j)) {
            (Some(x), Some(y)) => {
                if x.total_cmp(y).is_le() {
                    *x
                } else {
                    *y
                }
            }
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => unreachable!(),
        };
        while i < xa.len() && xa[i].total_cmp(&next).is_eq() {
            i += 1;
        }
        while j < xb.len() && xb[j].total_cmp(&next).is_eq() {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

pub fn ks_critical_one_sample(n: usize) -> f64 {
    KS_COEFF_1PCT / (n as f64).sqrt()
}

pub fn ks_critical_two_sample(n: usize, m: usize) -> f64 {
    KS_COEFF_1PCT * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}
