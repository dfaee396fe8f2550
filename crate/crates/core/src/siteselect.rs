//! Ranking candidate experiment sites by how well they are expected to
//! extrapolate.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvidenceBase, Outcome, SiteKey};
use crate::error::{Error, Result};
use crate::evf::{profile_value, DiffVar, DyadBuilder, DyadOptions, SiteProfile};
use crate::extrapolate::{MomentCache, SurfaceOptions};
use crate::linalg::{DenseMatrix, GramCholesky};
use crate::ols::OlsFit;
use crate::scalar::Scalar;
use crate::series::{CovariateSet, SeriesSchema};
use crate::site_effects::EffectEstimate;

/// Default covariates for the composite index and Mahalanobis distance.
pub const MACRO_VARS: [DiffVar; 4] = [DiffVar::LogGdp, DiffVar::SexRatio, DiffVar::Lfp, DiffVar::Tfr];

/// Ridge multiplier on `trace(Σ)/p`, applied only when Σ is singular.
pub const RIDGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooMeanError {
    pub site: SiteKey,
    pub mean_error: f64,
    pub mean_abs_error: f64,
    pub n_targets: usize,
}

/// For each candidate reference, the mean micro-adjusted prediction error
/// over all other sites as targets.
pub fn loo_mean_error(
    eb: &EvidenceBase,
    outcome: Outcome,
    estimates: &[EffectEstimate],
    opts: &DyadOptions,
) -> Result<Vec<LooMeanError>> {
    if eb.len() < 3 {
        return Err(Error::insufficient("site ranking needs at least 3 sites"));
    }
    let opts = DyadOptions {
        vars: Vec::new(),
        ..opts.clone()
    };
    let b = DyadBuilder::new(eb, outcome, estimates, &opts)?;
    let rows: Vec<Option<LooMeanError>> = (0..b.len())
        .into_par_iter()
        .map(|r| {
            let z: Vec<f64> = (0..b.len())
                .filter(|&t| t != r)
                .filter_map(|t| b.dyad(r, t).ok())
                .map(|d| d.zeta)
                .collect();
            (!z.is_empty()).then(|| LooMeanError {
                site: b.keys[r].clone(),
                mean_error: z.iter().sum::<f64>() / z.len() as f64,
                mean_abs_error: z.iter().map(|v| v.abs()).sum::<f64>() / z.len() as f64,
                n_targets: z.len(),
            })
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Site profiles with every variable in `vars` present.
fn site_matrix(eb: &EvidenceBase, vars: &[DiffVar]) -> (Vec<SiteKey>, Vec<Vec<f64>>, Vec<String>) {
    let mut keys = Vec::new();
    let mut rows = Vec::new();
    let mut diag = Vec::new();
    for s in eb.sites() {
        let p = SiteProfile::from_site(s);
        let v: Option<Vec<f64>> = vars.iter().map(|&k| profile_value(k, &p)).collect();
        match v {
            Some(v) => {
                keys.push(s.key.clone());
                rows.push(v);
            }
            None => diag.push(format!("site {}: missing covariate, excluded", s.key)),
        }
    }
    (keys, rows, diag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeRow {
    pub site: SiteKey,
    pub index: f64,
    /// Ordinal rank / n; ties keep site order.
    pub percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composite {
    pub vars: Vec<DiffVar>,
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub rows: Vec<CompositeRow>,
    pub diagnostics: Vec<String>,
}

/// Ordinal percentiles `rank/n` (1-based), ties broken by position.
pub fn percentiles<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let n = T::from_usize_lossy(x.len());
    let mut out = vec![T::zero(); x.len()];
    for (r, &i) in order.iter().enumerate() {
        out[i] = T::from_usize_lossy(r + 1) / n;
    }
    out
}

/// Composite covariate index weighted by inverse-variance meta-regression
/// coefficients of site effects on `vars`.
pub fn composite_percentile(
    eb: &EvidenceBase,
    outcome: Outcome,
    estimates: &[EffectEstimate],
    vars: &[DiffVar],
) -> Result<Composite> {
    let (keys, rows, mut diagnostics) = site_matrix(eb, vars);
    let est: BTreeMap<&SiteKey, &EffectEstimate> = estimates
        .iter()
        .filter(|e| e.outcome == outcome)
        .map(|e| (&e.site, e))
        .collect();
    let mut use_keys = Vec::new();
    let mut design = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    for (k, r) in keys.iter().zip(&rows) {
        match est.get(k) {
            Some(e) => {
                use_keys.push(k.clone());
                design.push(std::iter::once(1.0).chain(r.iter().copied()).collect::<Vec<_>>());
                y.push(e.tau);
                w.push(e.weight());
            }
            None => diagnostics.push(format!("site {k}: no effect estimate, excluded")),
        }
    }
    if use_keys.len() < vars.len() + 2 {
        return Err(Error::insufficient("too few sites for the composite meta-regression"));
    }
    let x = DenseMatrix::from_rows(&design)?;
    let fit = OlsFit::fit(&x, &y, Some(&w))?;
    if !fit.aliased.is_empty() {
        return Err(Error::RankDeficient(format!(
            "composite meta-regression: aliased columns {:?}",
            fit.aliased
        )));
    }
    let weights = fit.coefficients[1..].to_vec();
    let index: Vec<f64> = design
        .iter()
        .map(|r| r[1..].iter().zip(&weights).map(|(a, b)| a * b).sum())
        .collect();
    let pct = percentiles(&index);
    Ok(Composite {
        vars: vars.to_vec(),
        intercept: fit.coefficients[0],
        weights,
        rows: use_keys
            .into_iter()
            .zip(index.into_iter().zip(pct))
            .map(|(site, (index, percentile))| CompositeRow { site, index, percentile })
            .collect(),
        diagnostics,
    })
}

/// Cholesky factor of the sample covariance of `rows`, ridged by
/// `ε·trace/p·I` only when singular. Returns the ridge used.
pub fn covariance_factor<T: Scalar>(rows: &[Vec<T>], regularize: bool) -> Result<(GramCholesky<T>, Option<T>)> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n < 2 || p == 0 {
        return Err(Error::insufficient("covariance needs at least 2 sites and 1 covariate"));
    }
    let nn = T::from_usize_lossy(n);
    let mean: Vec<T> = (0..p)
        .map(|j| rows.iter().map(|r| r[j]).fold(T::zero(), |a, v| a + v) / nn)
        .collect();
    let mut s: DenseMatrix<T> = DenseMatrix::zeros(p, p);
    for r in rows {
        for a in 0..p {
            for b in 0..p {
                s[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    let denom = T::from_usize_lossy(n - 1);
    let s = s.map(|v: T| v / denom);
    if let Ok(f) = GramCholesky::strict(&s) {
        return Ok((f, None));
    }
    if !regularize {
        return Err(Error::RankDeficient("covariate covariance is singular".into()));
    }
    let trace = (0..p).map(|j| s[(j, j)]).fold(T::zero(), |a, v| a + v);
    let ridge = T::lit(RIDGE_EPS) * trace / T::from_usize_lossy(p);
    let mut sr = s.clone();
    for j in 0..p {
        sr[(j, j)] += ridge;
    }
    let f = GramCholesky::factor_with_tol(&sr, T::zero());
    if !f.aliased().is_empty() || !(ridge > T::zero()) {
        return Err(Error::RankDeficient("covariate covariance is singular after ridge".into()));
    }
    Ok((f, Some(ridge)))
}

pub fn mahalanobis<T: Scalar>(f: &GramCholesky<T>, a: &[T], b: &[T]) -> T {
    let d: Vec<T> = a.iter().zip(b).map(|(x, y)| *x - *y).collect();
    f.quad_form_inv(&d).max(T::zero()).sqrt()
}

/// Mean Mahalanobis distance from each row to every other row.
pub fn mean_mahalanobis<T: Scalar>(rows: &[Vec<T>], regularize: bool) -> Result<(Vec<T>, Option<T>)> {
    let (f, ridge) = covariance_factor(rows, regularize)?;
    let n = rows.len();
    let m = T::from_usize_lossy(n - 1);
    let out = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .fold(T::zero(), |a, j| a + mahalanobis(&f, &rows[i], &rows[j]))
                / m
        })
        .collect();
    Ok((out, ridge))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisRow {
    pub site: SiteKey,
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisRank {
    pub vars: Vec<DiffVar>,
    pub rows: Vec<MahalanobisRow>,
    pub ridge: Option<f64>,
    pub diagnostics: Vec<String>,
}

/// Mean Mahalanobis distance of each site's covariates to all others.
/// Needs no effect estimates.
pub fn mahalanobis_rank(eb: &EvidenceBase, vars: &[DiffVar], regularize: bool) -> Result<MahalanobisRank> {
    let (keys, rows, mut diagnostics) = site_matrix(eb, vars);
    let (d, ridge) = mean_mahalanobis(&rows, regularize)?;
    if let Some(r) = ridge {
        diagnostics.push(format!("covariance singular; ridge {r:e} added"));
    }
    Ok(MahalanobisRank {
        vars: vars.to_vec(),
        rows: keys
            .into_iter()
            .zip(d)
            .map(|(site, mean_distance)| MahalanobisRow { site, mean_distance })
            .collect(),
        ridge,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MinError,
    MaxDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecondSiteOptions {
    pub covariate_set: CovariateSet,
    pub schema: SeriesSchema,
    pub surface: SurfaceOptions,
    pub vars: Vec<DiffVar>,
    pub regularize: bool,
}

impl Default for SecondSiteOptions {
    fn default() -> Self {
        Self {
            covariate_set: CovariateSet::Micro,
            schema: SeriesSchema::default(),
            surface: SurfaceOptions::default(),
            vars: MACRO_VARS.to_vec(),
            regularize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondSite {
    pub site: SiteKey,
    /// Mean |error| over the remaining targets with the surface fit on
    /// `{first, site}`.
    pub mean_abs_error: f64,
    /// The same targets predicted from the first site alone.
    pub single_site_mean_abs_error: f64,
    pub n_targets: usize,
    /// Mahalanobis distance from the first site; NaN when covariates are
    /// missing.
    pub distance_from_base: f64,
}

/// Rank second-site candidates given a first site.
pub fn greedy_second_site(
    eb: &EvidenceBase,
    outcome: Outcome,
    estimates: &[EffectEstimate],
    first: &SiteKey,
    objective: Objective,
    opts: &SecondSiteOptions,
) -> Result<Vec<SecondSite>> {
    let fi = eb
        .index_of(first)
        .ok_or_else(|| Error::invalid(format!("first site {first} not in the evidence base")))?;
    let cache = MomentCache::for_set(eb, outcome, &opts.schema, opts.covariate_set, &opts.surface)?;
    if cache.get(fi).is_none() {
        return Err(Error::invalid(format!("first site {first} has no usable micro data")));
    }
    let est: BTreeMap<&SiteKey, f64> = estimates
        .iter()
        .filter(|e| e.outcome == outcome)
        .map(|e| (&e.site, e.tau))
        .collect();
    let single = cache.fit(&[fi])?;

    let (mkeys, mrows, _) = site_matrix(eb, &opts.vars);
    let dist: BTreeMap<&SiteKey, f64> = match covariance_factor(&mrows, opts.regularize) {
        Ok((f, _)) => match mkeys.iter().position(|k| k == first) {
            Some(p0) => mkeys
                .iter()
                .zip(&mrows)
                .map(|(k, r)| (k, mahalanobis(&f, &mrows[p0], r)))
                .collect(),
            None => BTreeMap::new(),
        },
        Err(_) => BTreeMap::new(),
    };

    let avail = cache.available();
    let rows: Vec<Result<SecondSite>> = avail
        .par_iter()
        .filter(|&&c| c != fi)
        .map(|&c| {
            let s = cache.fit(&[fi, c])?;
            let (mut e2, mut e1) = (Vec::new(), Vec::new());
            for &t in &avail {
                if t == fi || t == c {
                    continue;
                }
                let tm = cache.get(t).expect("available");
                if let Some(&act) = est.get(&tm.key) {
                    e2.push((s.effect_at(&tm.xbar) - act).abs());
                    e1.push((single.effect_at(&tm.xbar) - act).abs());
                }
            }
            let n = e2.len();
            let key = cache.get(c).expect("available").key.clone();
            Ok(SecondSite {
                distance_from_base: dist.get(&key).copied().unwrap_or(f64::NAN),
                site: key,
                mean_abs_error: e2.iter().sum::<f64>() / n as f64,
                single_site_mean_abs_error: e1.iter().sum::<f64>() / n as f64,
                n_targets: n,
            })
        })
        .collect();
    let mut rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    match objective {
        Objective::MinError => rows.sort_by(|a, b| a.mean_abs_error.total_cmp(&b.mean_abs_error)),
        Objective::MaxDistance => rows.sort_by(|a, b| b.distance_from_base.total_cmp(&a.distance_from_base)),
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRanking {
    pub site: SiteKey,
    pub loo_mean_error: Option<f64>,
    pub loo_mean_abs_error: Option<f64>,
    pub composite_index: Option<f64>,
    pub composite_percentile: Option<f64>,
    pub mean_mahalanobis: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub rows: Vec<SiteRanking>,
    pub composite_weights: Vec<(DiffVar, f64)>,
    pub diagnostics: Vec<String>,
}

/// All three single-site criteria, one row per site in evidence-base order.
pub fn rank_sites(
    eb: &EvidenceBase,
    outcome: Outcome,
    estimates: &[EffectEstimate],
    dyads: &DyadOptions,
    vars: &[DiffVar],
    regularize: bool,
) -> Result<Rankings> {
    let loo = loo_mean_error(eb, outcome, estimates, dyads)?;
    let mut diagnostics = Vec::new();
    let comp = match composite_percentile(eb, outcome, estimates, vars) {
        Ok(c) => Some(c),
        Err(e) => {
            diagnostics.push(format!("composite: {e}"));
            None
        }
    };
    let maha = mahalanobis_rank(eb, vars, regularize)?;
    diagnostics.extend(maha.diagnostics.iter().cloned());
    let loo_m: BTreeMap<&SiteKey, &LooMeanError> = loo.iter().map(|r| (&r.site, r)).collect();
    let comp_m: BTreeMap<&SiteKey, &CompositeRow> = comp
        .as_ref()
        .map(|c| c.rows.iter().map(|r| (&r.site, r)).collect())
        .unwrap_or_default();
    let maha_m: BTreeMap<&SiteKey, f64> = maha.rows.iter().map(|r| (&r.site, r.mean_distance)).collect();
    let rows = eb
        .sites()
        .iter()
        .map(|s| {
            let k = &s.key;
            SiteRanking {
                site: k.clone(),
                loo_mean_error: loo_m.get(k).map(|r| r.mean_error),
                loo_mean_abs_error: loo_m.get(k).map(|r| r.mean_abs_error),
                composite_index: comp_m.get(k).map(|r| r.index),
                composite_percentile: comp_m.get(k).map(|r| r.percentile),
                mean_mahalanobis: maha_m.get(k).copied(),
            }
        })
        .collect();
    if let Some(c) = &comp {
        diagnostics.extend(c.diagnostics.iter().cloned());
    }
    Ok(Rankings {
        rows,
        composite_weights: comp
            .map(|c| c.vars.into_iter().zip(c.weights).collect())
            .unwrap_or_default(),
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_covariance_gives_euclidean() {
        // Orthogonal, equal-variance columns: sample covariance is c·I.
        let rows = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let (f, ridge) = covariance_factor(&rows, false).unwrap();
        assert!(ridge.is_none());
        let c: f64 = 4.0 / 3.0 / 2.0;
        let d = mahalanobis(&f, &rows[0], &rows[2]);
        assert!((d - 2f64.sqrt() / c.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn percentiles_are_a_permutation() {
        let p = percentiles(&[0.3, -1.0, 0.3, 2.0]);
        assert_eq!(p, vec![0.5, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn singular_without_ridge_errors() {
        let rows = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        assert!(matches!(covariance_factor(&rows, false), Err(Error::RankDeficient(_))));
        let (_, ridge) = covariance_factor(&rows, true).unwrap();
        assert!(ridge.is_some());
    }
}
