//! Distribution helpers and small descriptive statistics.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use crate::scalar::Scalar;

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Upper-tail probability of a chi-square variate.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df).map_or(f64::NAN, |d| d.sf(x))
}

/// Quantile of Student's t.
pub fn t_quantile(p: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).map_or(f64::NAN, |d| d.inverse_cdf(p))
}

/// Two-sided p-value for a t statistic.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).map_or(f64::NAN, |d| (2.0 * d.sf(t.abs())).min(1.0))
}

/// Blom plotting-position scores `Φ⁻¹((i − 3/8)/(n + 1/4))`, `i = 1..n`.
pub fn blom_scores(n: usize) -> Vec<f64> {
    let nf = n as f64;
    (1..=n)
        .map(|i| normal_quantile((i as f64 - 0.375) / (nf + 0.25)))
        .collect()
}

pub fn mean<T: Scalar>(x: &[T]) -> T {
    x.iter().copied().sum::<T>() / T::from_usize_lossy(x.len())
}

pub fn weighted_mean<T: Scalar>(x: &[T], w: &[T]) -> T {
    let sw: T = w.iter().copied().sum();
    x.iter().zip(w).fold(T::zero(), |a, (&v, &wi)| a + v * wi) / sw
}

/// Sample standard deviation (divisor `n − 1`).
pub fn sample_sd<T: Scalar>(x: &[T]) -> T {
    let m = mean(x);
    let ss = x.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m));
    (ss / T::from_usize_lossy(x.len().saturating_sub(1).max(1))).sqrt()
}

/// Weighted Pearson correlation: weighted means removed, the same weights
/// applied to both second moments and the cross-moment. Returns NaN when
/// either variable has zero weighted variance.
pub fn weighted_correlation<T: Scalar>(x: &[T], y: &[T], w: &[T]) -> T {
    let mx = weighted_mean(x, w);
    let my = weighted_mean(y, w);
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += w[i] * dx * dy;
        sxx += w[i] * dx * dx;
        syy += w[i] * dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return T::nan();
    }
    sxy / (sxx * syy).sqrt()
}

pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> T {
    let w = vec![T::one(); x.len()];
    weighted_correlation(x, y, &w)
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

pub fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

/// Linear-interpolation quantile (type 7).
pub fn quantile(x: &[f64], q: f64) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// One-sample Kolmogorov–Smirnov statistic against Uniform(0, 1).
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| {
            let u = u.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - u).max(u - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value `sqrt(−ln(α/2)/2) / sqrt(n)`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Gaussian kernel density estimate on `grid` with Silverman's bandwidth.
pub fn gaussian_kde(data: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = data.len() as f64;
    let sd = sample_sd(data);
    let iqr = quantile(data, 0.75) - quantile(data, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = (0.9 * spread * n.powf(-0.2)).max(f64::MIN_POSITIVE);
    let c = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&g| {
            c * data
                .iter()
                .map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect()
}

/// Empirical CDF of `data` evaluated at `grid`.
pub fn ecdf(data: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut s = data.to_vec();
    s.sort_by(f64::total_cmp);
    grid.iter()
        .map(|&g| s.partition_point(|&v| v <= g) as f64 / s.len() as f64)
        .collect()
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_values() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!((chi2_sf(3.841458820694124, 1.0) - 0.05).abs() < 1e-9);
        assert!((t_quantile(0.975, 10.0) - 2.228138851986274).abs() < 1e-8);
        assert!((t_two_sided_p(2.228138851986274, 10.0) - 0.05).abs() < 1e-8);
    }

    #[test]
    fn blom_is_antisymmetric() {
        let b = blom_scores(7);
        for i in 0..7 {
            assert!((b[i] + b[6 - i]).abs() < 1e-12);
        }
        assert!(b[3].abs() < 1e-12);
    }

    #[test]
    fn weighted_correlation_reduces_to_pearson() {
        let x = [1.0f64, 2.0, 4.0, 7.0];
        let y = [0.5, 1.0, 1.0, 3.0];
        let r = pearson(&x, &y);
        let rw = weighted_correlation(&x, &y, &[2.0, 2.0, 2.0, 2.0]);
        assert!((r - rw).abs() < 1e-14);
        assert!(weighted_correlation(&x, &[1.0; 4], &[1.0; 4]).is_nan());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 25.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ks_of_evenly_spaced_points() {
        let u: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&u) - 0.005).abs() < 1e-12);
        assert!((ks_critical(500, 0.01) - 0.072_79).abs() < 1e-4);
    }

    #[test]
    fn quantiles_and_ecdf() {
        assert_eq!(median(&[3.0, 1.0, 2.0, 4.0]), 2.5);
        assert_eq!(ecdf(&[1.0, 2.0, 3.0, 4.0], &[0.0, 2.0, 10.0]), vec![0.0, 0.5, 1.0]);
        let d = gaussian_kde(&[0.0, 0.1, -0.1, 0.05], &linspace(-3.0, 3.0, 601));
        let area: f64 = d.iter().sum::<f64>() * 0.01;
        assert!((area - 1.0).abs() < 1e-3);
    }
}
