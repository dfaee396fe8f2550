//! Cross-site heterogeneity: Cochran's Q, the inverse-variance weighted
//! Shapiro–Francia statistic with a simulated null, and effect–covariate
//! correlations.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvidenceBase, MacroField};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::site_effects::EffectEstimate;
use crate::stats::{blom_scores, chi2_sf, t_two_sided_p, weighted_correlation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CochranQ {
    pub q: f64,
    pub df: usize,
    pub p_value: f64,
    pub weighted_mean: f64,
}

/// Cochran's Q for effects `tau` with standard errors `se`.
pub fn cochran_q_raw<T: Scalar>(tau: &[T], se: &[T]) -> Result<(T, T)> {
    if tau.len() < 2 || tau.len() != se.len() {
        return Err(Error::insufficient("Cochran Q needs at least 2 estimates"));
    }
    if se.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
        return Err(Error::invalid("standard errors must be positive"));
    }
    let w: Vec<T> = se.iter().map(|&s| T::one() / (s * s)).collect();
    let sw: T = w.iter().copied().sum();
    let mean = tau.iter().zip(&w).fold(T::zero(), |a, (&t, &wi)| a + wi * t) / sw;
    let q = tau
        .iter()
        .zip(&w)
        .fold(T::zero(), |a, (&t, &wi)| a + wi * (t - mean) * (t - mean));
    Ok((q, mean))
}

pub fn cochran_q(estimates: &[EffectEstimate]) -> Result<CochranQ> {
    let tau: Vec<f64> = estimates.iter().map(|e| e.tau).collect();
    let se: Vec<f64> = estimates.iter().map(|e| e.se).collect();
    let (q, mean) = cochran_q_raw(&tau, &se)?;
    let df = tau.len() - 1;
    Ok(CochranQ {
        q,
        df,
        p_value: chi2_sf(q, df as f64),
        weighted_mean: mean,
    })
}

/// DerSimonian–Laird between-site variance.
pub fn dersimonian_laird<T: Scalar>(tau: &[T], se: &[T]) -> Result<T> {
    let (q, _) = cochran_q_raw(tau, se)?;
    let w: Vec<T> = se.iter().map(|&s| T::one() / (s * s)).collect();
    let s1: T = w.iter().copied().sum();
    let s2: T = w.iter().map(|&v| v * v).sum();
    let df = T::from_usize_lossy(tau.len() - 1);
    Ok(((q - df) / (s1 - s2 / s1)).max(T::zero()))
}

/// Squared weighted correlation between the sorted effects and Blom scores.
/// Each effect keeps its own weight after sorting.
pub fn wsf_statistic<T: Scalar>(tau: &[T], weights: &[T]) -> T {
    let n = tau.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| tau[a].partial_cmp(&tau[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let x: Vec<T> = idx.iter().map(|&i| tau[i]).collect();
    let w: Vec<T> = idx.iter().map(|&i| weights[i]).collect();
    let m: Vec<T> = blom_scores(n).into_iter().map(T::lit).collect();
    let r = weighted_correlation(&x, &m, &w);
    r * r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WsfTest {
    pub statistic: f64,
    pub p_value: f64,
    pub mc_reps: usize,
    pub seed: u64,
    /// Between-site variance used in the simulated null.
    pub null_tau2: f64,
}

pub const MIN_MC_REPS: usize = 100;

/// wSF test. Null replicates draw `τ_i ~ N(τ̄_w, se_i² + τ²)` with `τ²` the
/// DerSimonian–Laird estimate; the p-value is the share of replicates whose
/// statistic is at most the observed one. Replicate `r` uses stream `r` of
/// `seed`, so the result does not depend on thread scheduling.
pub fn wsf_test(estimates: &[EffectEstimate], mc_reps: usize, seed: u64) -> Result<WsfTest> {
    if estimates.len() < 5 {
        return Err(Error::insufficient("wSF test needs at least 5 estimates"));
    }
    if mc_reps < MIN_MC_REPS {
        return Err(Error::invalid(format!(
            "mc_reps = {mc_reps} below minimum {MIN_MC_REPS}"
        )));
    }
    let tau: Vec<f64> = estimates.iter().map(|e| e.tau).collect();
    let se: Vec<f64> = estimates.iter().map(|e| e.se).collect();
    let (_, mean) = cochran_q_raw(&tau, &se)?;
    let tau2 = dersimonian_laird(&tau, &se)?;
    let w: Vec<f64> = se.iter().map(|s| 1.0 / (s * s)).collect();
    let observed = wsf_statistic(&tau, &w);
    let sd: Vec<f64> = se.iter().map(|s| (s * s + tau2).sqrt()).collect();
    let below = (0..mc_reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r);
            let sim: Vec<f64> = sd
                .iter()
                .map(|s| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mean + s * z
                })
                .collect();
            usize::from(wsf_statistic(&sim, &w) <= observed)
        })
        .sum::<usize>();
    Ok(WsfTest {
        statistic: observed,
        p_value: below as f64 / mc_reps as f64,
        mc_reps,
        seed,
        null_tau2: tau2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub outcome: String,
    pub n_effects: usize,
    pub q_stat: f64,
    pub q_df: usize,
    pub q_pvalue: f64,
    pub wsf_stat: f64,
    pub wsf_pvalue: f64,
    pub weighted_mean: f64,
    pub mc_reps: usize,
    pub seed: u64,
}

pub fn heterogeneity_report(
    outcome: &str,
    estimates: &[EffectEstimate],
    mc_reps: usize,
    seed: u64,
) -> Result<HeterogeneityReport> {
    let q = cochran_q(estimates)?;
    let w = wsf_test(estimates, mc_reps, seed)?;
    Ok(HeterogeneityReport {
        outcome: outcome.to_string(),
        n_effects: estimates.len(),
        q_stat: q.q,
        q_df: q.df,
        q_pvalue: q.p_value,
        wsf_stat: w.statistic,
        wsf_pvalue: w.p_value,
        weighted_mean: q.weighted_mean,
        mc_reps,
        seed,
    })
}

type RowFormat = (&'static str, fn(&HeterogeneityReport) -> String);

/// Plain-text table with one column per report.
pub fn format_table(reports: &[HeterogeneityReport]) -> String {
    let mut out = format!("{:<24}", "");
    for r in reports {
        out += &format!("{:>16}", r.outcome);
    }
    out.push('\n');
    let rows: [RowFormat; 6] = [
        ("Q-test statistic", |r| format!("{:.2}", r.q_stat)),
        ("Q-test p-value", |r| format!("{:.4}", r.q_pvalue)),
        ("wSF-test statistic", |r| format!("{:.4}", r.wsf_stat)),
        ("wSF-test p-value", |r| format!("{:.4}", r.wsf_pvalue)),
        ("N*", |r| r.n_effects.to_string()),
        ("df", |r| r.q_df.to_string()),
    ];
    for (label, f) in rows {
        out += &format!("{label:<24}");
        for r in reports {
            out += &format!("{:>16}", f(r));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation with a two-sided p-value from `t = r√(n−2)/√(1−r²)`.
pub fn pearson_test(x: &[f64], y: &[f64]) -> Result<Correlation> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(Error::insufficient("correlation needs at least 3 paired values"));
    }
    let r = crate::stats::pearson(x, y);
    if r.is_nan() {
        return Err(Error::invalid("zero variance in correlation input"));
    }
    let r = r.clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        t_two_sided_p(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Ok(Correlation { r, p_value: p, n })
}

/// Correlation between site effects and a macro covariate.
pub fn effect_covariate_correlation(
    estimates: &[EffectEstimate],
    eb: &EvidenceBase,
    field: MacroField,
) -> Result<Correlation> {
    let mut x = Vec::with_capacity(estimates.len());
    let mut y = Vec::with_capacity(estimates.len());
    for e in estimates {
        let v = eb
            .site(&e.site)
            .and_then(|s| s.macro_.get(field))
            .ok_or_else(|| {
                Error::invalid(format!("{} missing for site {}", field.name(), e.site))
            })?;
        x.push(v);
        y.push(e.tau);
    }
    pearson_test(&x, &y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Outcome, SiteKey};

    fn est(tau: f64, se: f64) -> EffectEstimate {
        EffectEstimate {
            site: SiteKey::new("S", 0),
            outcome: Outcome::MoreKids,
            tau,
            se,
            n: None,
            covariate_set: String::new(),
        }
    }

    #[test]
    fn q_hand_computation() {
        let q = cochran_q(&[est(0.0, 0.1), est(0.2, 0.1)]).unwrap();
        assert!((q.weighted_mean - 0.1).abs() < 1e-15);
        assert!((q.q - 2.0).abs() < 1e-12);
        let q = cochran_q(&[est(0.3, 0.1), est(0.3, 0.1), est(0.3, 0.1)]).unwrap();
        assert_eq!(q.q, 0.0);
        assert_eq!(q.p_value, 1.0);
        assert!(cochran_q(&[est(0.3, 0.1)]).is_err());
    }

    #[test]
    fn wsf_of_blom_scores_is_one() {
        let b = blom_scores(9);
        let s = wsf_statistic(&b, &[1.0; 9]);
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn wsf_rejects_few_reps() {
        let e: Vec<_> = (0..6).map(|i| est(i as f64, 1.0)).collect();
        assert!(wsf_test(&e, 99, 1).is_err());
        let a = wsf_test(&e, 200, 5).unwrap();
        let b = wsf_test(&e, 200, 5).unwrap();
        assert_eq!(a.p_value.to_bits(), b.p_value.to_bits());
    }

    #[test]
    fn correlation_of_exact_line() {
        let c = pearson_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12);
        assert_eq!(c.p_value, 0.0);
        assert!(pearson_test(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }
}
