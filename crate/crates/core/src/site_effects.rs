//! Per-site reduced-form effects of the treatment indicator.
//!
//! Each site is a linear probability model of the outcome on an intercept,
//! the treatment indicator, mother's age, own-education indicators (levels
//! 2–4, level 1 base) and spouse-education indicators (levels 2–4 plus a
//! missing level). The effect is the treatment coefficient with an HC1
//! standard error by default.
//!
//! Records are sorted into a canonical order before the design is built, so
//! every sum runs in the same sequence regardless of input order and results
//! are bit-identical under permutation of the records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvidenceBase, MicroRecord, Outcome, SiteData, SiteKey};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::ols::{CovarianceKind, OlsFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub site: SiteKey,
    pub outcome: Outcome,
    pub tau: f64,
    pub se: f64,
    /// `None` for estimates read from summary files.
    pub n: Option<usize>,
    pub covariate_set: String,
}

impl EffectEstimate {
    pub fn weight(&self) -> f64 {
        1.0 / (self.se * self.se)
    }

    pub fn z(&self) -> f64 {
        self.tau / self.se
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiteEffectOptions {
    pub covariance: CovarianceKind,
    pub use_weights: bool,
    /// Minimum number of records with a non-missing outcome.
    pub min_records: usize,
}

impl Default for SiteEffectOptions {
    fn default() -> Self {
        Self {
            covariance: CovarianceKind::Hc1,
            use_weights: false,
            min_records: 50,
        }
    }
}

pub const SITE_COVARIATE_SET: &str = "age+educ_own+educ_spouse";

pub const SITE_TERMS: [&str; 10] = [
    "intercept",
    "treated",
    "age",
    "educ_own_2",
    "educ_own_3",
    "educ_own_4",
    "educ_spouse_2",
    "educ_spouse_3",
    "educ_spouse_4",
    "educ_spouse_missing",
];

#[derive(Debug, Clone)]
pub struct SiteEffectFit {
    pub estimate: EffectEstimate,
    /// Design terms dropped as collinear.
    pub aliased_terms: Vec<&'static str>,
    pub n_params: usize,
}

fn canonical_key(r: &MicroRecord, y: f64) -> (u8, u16, u8, u8, u64, u64) {
    (
        u8::from(r.treated),
        r.age,
        r.educ_own.level(),
        r.educ_spouse.map_or(0, |e| e.level()),
        y.to_bits(),
        r.sampling_weight.to_bits(),
    )
}

fn design_row(r: &MicroRecord) -> [f64; 10] {
    let own = r.educ_own.level();
    let sp = r.educ_spouse.map(|e| e.level());
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    [
        1.0,
        ind(r.treated),
        f64::from(r.age),
        ind(own == 2),
        ind(own == 3),
        ind(own == 4),
        ind(sp == Some(2)),
        ind(sp == Some(3)),
        ind(sp == Some(4)),
        ind(sp.is_none()),
    ]
}

pub fn estimate_site_effect(site: &SiteData, outcome: Outcome) -> Result<EffectEstimate> {
    estimate_site_effect_with(site, outcome, &SiteEffectOptions::default()).map(|f| f.estimate)
}

pub fn estimate_site_effect_with(
    site: &SiteData,
    outcome: Outcome,
    opts: &SiteEffectOptions,
) -> Result<SiteEffectFit> {
    let mut rows: Vec<(&MicroRecord, f64)> = site
        .records
        .iter()
        .filter_map(|r| r.outcome(outcome).map(|y| (r, y)))
        .collect();
    if rows.len() < opts.min_records.max(SITE_TERMS.len() + 1) {
        return Err(Error::insufficient(format!(
            "site {}: {} records with {outcome} observed (minimum {})",
            site.key,
            rows.len(),
            opts.min_records
        )));
    }
    let treated = rows.iter().filter(|(r, _)| r.treated).count();
    if treated == 0 || treated == rows.len() {
        return Err(Error::insufficient(format!(
            "site {}: only one treatment arm",
            site.key
        )));
    }
    rows.sort_by_key(|a| canonical_key(a.0, a.1));

    let n = rows.len();
    let mut data = Vec::with_capacity(n * SITE_TERMS.len());
    for (r, _) in &rows {
        data.extend_from_slice(&design_row(r));
    }
    let x = DenseMatrix::from_row_major(n, SITE_TERMS.len(), data)?;
    let y: Vec<f64> = rows.iter().map(|(_, y)| *y).collect();
    let w: Option<Vec<f64>> = opts
        .use_weights
        .then(|| rows.iter().map(|(r, _)| r.sampling_weight).collect());

    let fit = OlsFit::fit(&x, &y, w.as_deref())?;
    let pos = fit.kept.iter().position(|&j| j == 1).ok_or_else(|| {
        Error::RankDeficient(format!("site {}: treatment column aliased", site.key))
    })?;
    let se = fit.std_errors(&x, opts.covariance)[pos];
    Ok(SiteEffectFit {
        estimate: EffectEstimate {
            site: site.key.clone(),
            outcome,
            tau: fit.coefficients[pos],
            se,
            n: Some(n),
            covariate_set: SITE_COVARIATE_SET.into(),
        },
        aliased_terms: fit.aliased.iter().map(|&j| SITE_TERMS[j]).collect(),
        n_params: fit.rank(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSite {
    pub site: SiteKey,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct EstimateAll {
    /// In evidence-base (sorted key) order.
    pub estimates: Vec<EffectEstimate>,
    pub skipped: Vec<SkippedSite>,
    /// `(site, term)` pairs dropped as aliased.
    pub aliased: Vec<(SiteKey, &'static str)>,
}

pub fn estimate_all(eb: &EvidenceBase, outcome: Outcome) -> EstimateAll {
    estimate_all_with(eb, outcome, &SiteEffectOptions::default())
}

pub fn estimate_all_with(eb: &EvidenceBase, outcome: Outcome, opts: &SiteEffectOptions) -> EstimateAll {
    let fits: Vec<_> = eb
        .sites()
        .par_iter()
        .map(|s| (s.key.clone(), estimate_site_effect_with(s, outcome, opts)))
        .collect();
    let mut out = EstimateAll::default();
    for (site, r) in fits {
        match r {
            Ok(f) => {
                out.aliased
                    .extend(f.aliased_terms.iter().map(|&t| (site.clone(), t)));
                out.estimates.push(f.estimate);
            }
            Err(e) => out.skipped.push(SkippedSite {
                site,
                reason: e.to_string(),
            }),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunnelBound {
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelSummary {
    pub n: usize,
    pub weighted_mean: f64,
    pub points: Vec<(f64, f64)>,
    pub bounds: Vec<FunnelBound>,
    /// Share with `|tau|/se > 1.96`.
    pub frac_significant_5: f64,
    /// Share with `|tau|/se > 1.645`.
    pub frac_significant_10: f64,
    /// Share lying outside `weighted_mean ± 1.96 se`.
    pub frac_outside_funnel: f64,
}

pub const Z_05: f64 = 1.959_963_984_540_054;
pub const Z_10: f64 = 1.644_853_626_951_472_2;

/// Funnel-plot data with bounds on a 101-point grid from 0 to the largest SE.
pub fn funnel_summary(estimates: &[EffectEstimate]) -> Result<FunnelSummary> {
    if estimates.len() < 2 {
        return Err(Error::insufficient("funnel summary needs at least 2 estimates"));
    }
    let sw: f64 = estimates.iter().map(EffectEstimate::weight).sum();
    let mean = estimates.iter().map(|e| e.weight() * e.tau).sum::<f64>() / sw;
    let n = estimates.len() as f64;
    let frac = |pred: &dyn Fn(&EffectEstimate) -> bool| {
        estimates.iter().filter(|e| pred(e)).count() as f64 / n
    };
    let max_se = estimates.iter().map(|e| e.se).fold(0.0, f64::max);
    let bounds = crate::stats::linspace(0.0, max_se, 101)
        .into_iter()
        .map(|se| FunnelBound {
            se,
            lower: mean - Z_05 * se,
            upper: mean + Z_05 * se,
        })
        .collect();
    Ok(FunnelSummary {
        n: estimates.len(),
        weighted_mean: mean,
        points: estimates.iter().map(|e| (e.tau, e.se)).collect(),
        bounds,
        frac_significant_5: frac(&|e| e.z().abs() > Z_05),
        frac_significant_10: frac(&|e| e.z().abs() > Z_10),
        frac_outside_funnel: frac(&|e| ((e.tau - mean) / e.se).abs() > Z_05),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Education, MacroCovariates, MaritalStatus};

    fn rec(treated: bool, y: bool, age: u16, own: u8, spouse: Option<u8>) -> MicroRecord {
        MicroRecord {
            outcome_more_kids: y,
            outcome_econ_active: None,
            treated,
            age,
            educ_own: Education::new(own).unwrap(),
            educ_spouse: spouse.and_then(Education::new),
            age_first_birth: 18,
            marital_status: MaritalStatus::Married,
            oldest_child_age: 5,
            sampling_weight: 1.0,
            continuous_outcome: None,
        }
    }

    fn site(records: Vec<MicroRecord>) -> SiteData {
        SiteData {
            key: SiteKey::new("X", 2000),
            macro_: MacroCovariates::default(),
            records,
        }
    }

    fn varied(n: usize, y: impl Fn(usize, bool) -> bool) -> Vec<MicroRecord> {
        (0..n)
            .map(|i| {
                let t = i % 2 == 0;
                let sp = match i % 5 {
                    4 => None,
                    k => Some(k as u8 + 1),
                };
                rec(t, y(i, t), 21 + (i % 15) as u16, (i % 4) as u8 + 1, sp)
            })
            .collect()
    }

    #[test]
    fn outcome_equal_to_treatment() {
        let s = site(varied(200, |_, t| t));
        let e = estimate_site_effect(&s, Outcome::MoreKids).unwrap();
        assert!((e.tau - 1.0).abs() < 1e-12);
        assert!(e.se < 1e-12);
    }

    #[test]
    fn permutation_is_bit_identical() {
        let recs = varied(300, |i, t| (i * 7 + usize::from(t)) % 3 == 0);
        let a = estimate_site_effect(&site(recs.clone()), Outcome::MoreKids).unwrap();
        let mut rev = recs;
        rev.reverse();
        rev.swap(3, 100);
        let b = estimate_site_effect(&site(rev), Outcome::MoreKids).unwrap();
        assert_eq!(a.tau.to_bits(), b.tau.to_bits());
        assert_eq!(a.se.to_bits(), b.se.to_bits());
    }

    #[test]
    fn single_arm_and_missing_outcome_errors() {
        let one_arm: Vec<_> = varied(100, |_, _| true)
            .into_iter()
            .map(|mut r| {
                r.treated = true;
                r
            })
            .collect();
        assert!(estimate_site_effect(&site(one_arm), Outcome::MoreKids).is_err());
        let s = site(varied(100, |_, t| t));
        assert!(estimate_site_effect(&s, Outcome::EconActive).is_err());
    }

    #[test]
    fn aliased_spouse_levels_are_reported() {
        let recs: Vec<_> = varied(200, |i, _| i % 3 == 0)
            .into_iter()
            .map(|mut r| {
                r.educ_spouse = None;
                r
            })
            .collect();
        let fit = estimate_site_effect_with(&site(recs), Outcome::MoreKids, &Default::default()).unwrap();
        assert!(fit.aliased_terms.contains(&"educ_spouse_missing"));
        assert!(fit.aliased_terms.contains(&"educ_spouse_2"));
    }

    #[test]
    fn funnel_of_identical_estimates() {
        let e = EffectEstimate {
            site: SiteKey::new("A", 1),
            outcome: Outcome::MoreKids,
            tau: 0.03,
            se: 0.01,
            n: None,
            covariate_set: "x".into(),
        };
        let f = funnel_summary(&[e.clone(), e]).unwrap();
        assert!((f.weighted_mean - 0.03).abs() < 1e-15);
        assert_eq!(f.frac_significant_5, 1.0);
        assert_eq!(f.frac_outside_funnel, 0.0);
        assert_eq!(f.bounds.len(), 101);
    }
}
