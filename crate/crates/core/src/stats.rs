//! Statistical helpers: summaries, goodness-of-fit tests, tail fits.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::quadrature::pairwise_sum;

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0, n: 0 }
    }

    /// |a - b| in units of the combined standard error.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        let s = (self.stderr.powi(2) + other.stderr.powi(2)).sqrt();
        let d = (self.value - other.value).abs();
        if s == 0.0 {
            if d == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            d / s
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (n - 1) as f64
}

pub fn mean_estimate(xs: &[f64]) -> Estimate {
    Estimate {
        value: mean(xs),
        stderr: (variance(xs) / xs.len().max(1) as f64).sqrt(),
        n: xs.len(),
    }
}

/// Ratio estimator mean(num)/mean(den) with delta-method standard error.
pub fn ratio_estimate(num: &[f64], den: &[f64]) -> Estimate {
    let n = num.len();
    let mn = mean(num);
    let md = mean(den);
    let r = mn / md;
    let resid: Vec<f64> = num.iter().zip(den).map(|(a, b)| a - r * b).collect();
    let se = (variance(&resid) / n as f64).sqrt() / md.abs();
    Estimate { value: r, stderr: se, n }
}

/// Effective sample size of a set of importance weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s = pairwise_sum(weights);
    let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
    s * s / pairwise_sum(&sq)
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Result of a goodness-of-fit test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov-Smirnov test against a continuous CDF.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> TestResult {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    TestResult {
        statistic: d,
        p_value: kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d),
    }
}

/// KS test against N(mean, variance).
pub fn ks_normal(samples: &[f64], mean: f64, variance: f64) -> TestResult {
    let normal = Normal::new(mean, variance.sqrt()).expect("positive variance");
    ks_test(samples, |x| normal.cdf(x))
}

/// Chi-square goodness of fit; bins with expected count below 5 are merged
/// into their neighbour.
pub fn chi_square_gof(observed: &[f64], expected: &[f64]) -> TestResult {
    let mut obs = Vec::new();
    let mut exp = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (o, e) in observed.iter().zip(expected) {
        o_acc += o;
        e_acc += e;
        if e_acc >= 5.0 {
            obs.push(o_acc);
            exp.push(e_acc);
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 {
        if let (Some(lo), Some(le)) = (obs.last_mut(), exp.last_mut()) {
            *lo += o_acc;
            *le += e_acc;
        } else {
            obs.push(o_acc);
            exp.push(e_acc);
        }
    }
    let stat: f64 = obs.iter().zip(&exp).map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = (obs.len().max(2) - 1) as f64;
    let chi = ChiSquared::new(dof).expect("positive dof");
    TestResult { statistic: stat, p_value: 1.0 - chi.cdf(stat) }
}

/// Chi-square test that integer samples >= 1 follow Geometric(p) on {1, 2, ...}.
pub fn geometric_gof(gaps: &[usize], p: f64) -> TestResult {
    let n = gaps.len() as f64;
    let kmax = gaps.iter().copied().max().unwrap_or(1).max(2);
    let mut observed = vec![0.0; kmax + 1];
    for &g in gaps {
        observed[g.min(kmax)] += 1.0;
    }
    let mut expected = vec![0.0; kmax + 1];
    for (k, e) in expected.iter_mut().enumerate().take(kmax).skip(1) {
        *e = n * p * (1.0 - p).powi(k as i32 - 1);
    }
    expected[kmax] = n * (1.0 - p).powi(kmax as i32 - 1);
    chi_square_gof(&observed[1..], &expected[1..])
}

/// Jarque-Bera normality test.
pub fn jarque_bera(xs: &[f64]) -> TestResult {
    let n = xs.len() as f64;
    let m = mean(xs);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in xs {
        let d = x - m;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 == 0.0 {
        return TestResult { statistic: 0.0, p_value: 1.0 };
    }
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    let stat = n / 6.0 * (skew * skew + 0.25 * (kurt - 3.0).powi(2));
    let chi = ChiSquared::new(2.0).expect("dof");
    TestResult { statistic: stat, p_value: 1.0 - chi.cdf(stat) }
}

/// Weighted least-squares straight line `y = slope * x + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
    pub cov_slope_intercept: f64,
    /// Residuals divided by the per-point standard errors.
    pub standardized_residuals: Vec<f64>,
    pub residuals: Vec<f64>,
    pub r_squared: f64,
}

/// Fit with per-point standard errors `sigma` (use 1.0 everywhere for OLS).
pub fn weighted_line_fit(x: &[f64], y: &[f64], sigma: &[f64]) -> LineFit {
    let w: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * x * x).sum();
    let sxy: f64 = w.iter().zip(x).zip(y).map(|((w, x), y)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(x, y)| y - slope * x - intercept).collect();
    let standardized_residuals = residuals.iter().zip(sigma).map(|(r, s)| r / s).collect();
    let ybar = sy / sw;
    let ss_tot: f64 = w.iter().zip(y).map(|(w, y)| w * (y - ybar).powi(2)).sum();
    let ss_res: f64 = w.iter().zip(&residuals).map(|(w, r)| w * r * r).sum();
    LineFit {
        slope,
        intercept,
        slope_stderr: (sw / det).sqrt(),
        intercept_stderr: (sxx / det).sqrt(),
        cov_slope_intercept: -sx / det,
        standardized_residuals,
        residuals,
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
    }
}

/// Empirical log-survival curve on `points` thresholds spread between two
/// sample quantiles.
pub fn log_survival(samples: &[f64], q_lo: f64, q_hi: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    let lo = xs[((n as f64 * q_lo) as usize).min(n - 1)];
    let hi = xs[((n as f64 * q_hi) as usize).min(n - 1)];
    let mut t = Vec::with_capacity(points);
    let mut ls = Vec::with_capacity(points);
    for k in 0..points {
        let thr = lo + (hi - lo) * k as f64 / (points.max(2) - 1) as f64;
        let above = n - xs.partition_point(|&x| x <= thr);
        if above > 0 {
            t.push(thr);
            ls.push((above as f64 / n as f64).ln());
        }
    }
    (t, ls)
}

/// Exponential-tail fit: slope of the log-survival curve on the upper tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    /// Decay rate (minus the slope); positive for a decaying tail.
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Coefficient of t^2 in a quadratic fit of the same curve.
    pub curvature: f64,
    pub range: (f64, f64),
}

pub fn exponential_tail_fit(samples: &[f64], q_lo: f64, q_hi: f64) -> TailFit {
    let (t, ls) = log_survival(samples, q_lo, q_hi, 40);
    let ones = vec![1.0; t.len()];
    let line = weighted_line_fit(&t, &ls, &ones);
    TailFit {
        rate: -line.slope,
        intercept: line.intercept,
        r_squared: line.r_squared,
        curvature: quadratic_coefficient(&t, &ls),
        range: (*t.first().unwrap_or(&0.0), *t.last().unwrap_or(&0.0)),
    }
}

/// Leading coefficient of an ordinary least-squares quadratic fit.
pub fn quadratic_coefficient(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = |p: i32| x.iter().map(|v| v.powi(p)).sum::<f64>() / n;
    let my = |p: i32| x.iter().zip(y).map(|(v, w)| v.powi(p) * w).sum::<f64>() / n;
    let a = [[m(4), m(3), m(2)], [m(3), m(2), m(1)], [m(2), m(1), 1.0]];
    let b = [my(2), my(1), my(0)];
    let det3 = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det3(a);
    let mut a0 = a;
    for r in 0..3 {
        a0[r][0] = b[r];
    }
    det3(a0) / d
}

/// Non-parametric bootstrap of a statistic over i.i.d. records.
pub fn bootstrap<T, R: Rng>(records: &[T], replicates: usize, rng: &mut R, stat: impl Fn(&[&T]) -> f64) -> Vec<f64> {
    let n = records.len();
    let mut out = Vec::with_capacity(replicates);
    let mut buf: Vec<&T> = Vec::with_capacity(n);
    for _ in 0..replicates {
        buf.clear();
        for _ in 0..n {
            buf.push(&records[rng.random_range(0..n)]);
        }
        out.push(stat(&buf));
    }
    out
}

/// Empirical quantile (nearest rank on a sorted copy).
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((v.len() as f64 - 1.0) * q).round() as usize;
    v[idx.min(v.len() - 1)]
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}
