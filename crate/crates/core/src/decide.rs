//! Experiment-or-extrapolate decisions from prediction intervals.
//!
//! The interval for a target is `τ̂₁ ± t_{α/2,df} · sqrt(σ_ζ² + σ₁²)`. Total
//! variance `σ_ζ² + σ₁²` is modelled from leave-one-out residuals: a series
//! regression of `log ζ̂_c²` on site covariates, selected by LASSO and Cp,
//! retransformed with Duan's smearing factor. `σ₁²` comes from a bootstrap
//! over reference sites and `σ_ζ² = max(0, total − median_c σ₁²(c))`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvidenceBase, Outcome, SiteKey};
use crate::error::{Error, Result};
use crate::extrapolate::{fit_moments, target_xbar, ArmMoments, MomentCache, SurfaceOptions};
use crate::rng::stream_rng;
use crate::series::{build_series, CovariateSet, SeriesSchema};
use crate::site_effects::{estimate_all, EffectEstimate};
use crate::stats::{median, normal_quantile, t_quantile};

pub const RESIDUAL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub sigma_zeta2: f64,
    pub sigma_12: f64,
    pub alpha: f64,
    /// Infinite for the normal quantile.
    pub df: f64,
    pub quantile: f64,
}

impl PredictionInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// `point ± q · sqrt(σ_ζ² + σ₁²)` with `q` the upper `α/2` quantile of
/// Student's t (normal when `df` is infinite).
pub fn prediction_interval(point: f64, sigma_zeta2: f64, sigma_12: f64, alpha: f64, df: f64) -> Result<PredictionInterval> {
    if !(sigma_zeta2 >= 0.0 && sigma_12 >= 0.0) {
        return Err(Error::invalid("variance components must be nonnegative"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    if !(df >= 1.0) {
        return Err(Error::invalid(format!("degrees of freedom {df} below 1")));
    }
    let q = if df.is_infinite() {
        normal_quantile(1.0 - alpha / 2.0)
    } else {
        t_quantile(1.0 - alpha / 2.0, df)
    };
    let half = q * (sigma_zeta2 + sigma_12).sqrt();
    Ok(PredictionInterval {
        point,
        lower: point - half,
        upper: point + half,
        sigma_zeta2,
        sigma_12,
        alpha,
        df,
        quantile: q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Experiment,
    Extrapolate,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Experiment => "experiment",
            Verdict::Extrapolate => "extrapolate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub threshold: f64,
    pub verdict: Verdict,
    pub interval: PredictionInterval,
}

impl Decision {
    pub fn new(threshold: f64, interval: PredictionInterval) -> Self {
        let verdict = if interval.contains(threshold) {
            Verdict::Experiment
        } else {
            Verdict::Extrapolate
        };
        Self {
            threshold,
            verdict,
            interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResidual {
    pub site: SiteKey,
    pub predicted: f64,
    pub actual: f64,
    pub se: f64,
    pub zeta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResiduals {
    pub covariate_set: CovariateSet,
    pub rows: Vec<LooResidual>,
    pub diagnostics: Vec<String>,
}

/// Leave-one-out residuals over `refs`: each site predicted from the others.
pub fn loo_residuals_cached(
    cache: &MomentCache,
    refs: &[usize],
    est: &BTreeMap<SiteKey, EffectEstimate>,
) -> (Vec<(usize, LooResidual)>, Vec<String>) {
    let out: Vec<std::result::Result<(usize, LooResidual), String>> = refs
        .par_iter()
        .filter_map(|&c| {
            let m = cache.get(c)?;
            let e = est.get(&m.key)?;
            let others: Vec<usize> = refs.iter().copied().filter(|&i| i != c).collect();
            Some(
                cache
                    .fit(&others)
                    .map(|s| {
                        let predicted = s.effect_at(&m.xbar);
                        (
                            c,
                            LooResidual {
                                site: m.key.clone(),
                                predicted,
                                actual: e.tau,
                                se: e.se,
                                zeta: predicted - e.tau,
                            },
                        )
                    })
                    .map_err(|err| format!("site {}: {err}", m.key)),
            )
        })
        .collect();
    let mut rows = Vec::new();
    let mut diag = Vec::new();
    for r in out {
        match r {
            Ok(v) => rows.push(v),
            Err(m) => diag.push(m),
        }
    }
    (rows, diag)
}

pub fn loo_residuals(
    eb: &EvidenceBase,
    outcome: Outcome,
    estimates: &[EffectEstimate],
    set: CovariateSet,
    schema: &SeriesSchema,
    surface: &SurfaceOptions,
) -> Result<LooResiduals> {
    if eb.len() < 3 {
        return Err(Error::insufficient("leave-one-out residuals need at least 3 sites"));
    }
    let cache = MomentCache::for_set(eb, outcome, schema, set, surface)?;
    let est = estimate_map(estimates, outcome);
    let (rows, mut diagnostics) = loo_residuals_cached(&cache, &cache.available(), &est);
    diagnostics.extend(cache.diagnostics.iter().map(|(k, m)| format!("site {k}: {m}")));
    Ok(LooResiduals {
        covariate_set: set,
        rows: rows.into_iter().map(|(_, r)| r).collect(),
        diagnostics,
    })
}

fn estimate_map(estimates: &[EffectEstimate], outcome: Outcome) -> BTreeMap<SiteKey, EffectEstimate> {
    estimates
        .iter()
        .filter(|e| e.outcome == outcome)
        .map(|e| (e.site.clone(), e.clone()))
        .collect()
}

/// Log-squared-residual regression predicting total variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceModel {
    pub names: Vec<String>,
    pub selected: Vec<String>,
    selected_idx: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Mean of `exp(log ζ² − fitted)`.
    pub smearing: f64,
    pub n: usize,
    /// Set when the intercept-only fallback was forced, with the reason.
    pub fallback: Option<String>,
}

impl VarianceModel {
    /// Intercept plus selected covariates.
    pub fn n_params(&self) -> usize {
        1 + self.selected.len()
    }

    pub fn is_intercept_only(&self) -> bool {
        self.selected.is_empty()
    }

    fn linear(&self, z: &[f64]) -> f64 {
        self.intercept
            + self
                .selected_idx
                .iter()
                .zip(&self.coefficients)
                .map(|(&j, b)| b * z[j])
                .sum::<f64>()
    }

    /// Predicted total variance at covariates `z`.
    pub fn predict(&self, z: &[f64]) -> f64 {
        self.linear(z).exp() * self.smearing
    }

    fn intercept_only(names: Vec<String>, y: &[f64], reason: Option<String>) -> Self {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let smearing = y.iter().map(|v| (v - mean).exp()).sum::<f64>() / y.len() as f64;
        Self {
            names,
            selected: Vec::new(),
            selected_idx: Vec::new(),
            coefficients: Vec::new(),
            intercept: mean,
            smearing,
            n: y.len(),
            fallback: reason,
        }
    }

    /// Fit on site covariate rows `z` and residuals `zeta`.
    pub fn fit(z: &[Vec<f64>], zeta: &[f64], names: &[String], floor: f64, opts: &SurfaceOptions) -> Result<Self> {
        if z.len() != zeta.len() || z.is_empty() {
            return Err(Error::invalid("variance model needs one covariate row per residual"));
        }
        let p = names.len();
        let y: Vec<f64> = zeta.iter().map(|v| (v.abs().max(floor)).powi(2).ln()).collect();
        if p == 0 {
            return Ok(Self::intercept_only(Vec::new(), &y, None));
        }
        let flat: Vec<f64> = z.iter().flat_map(|r| r.iter().copied()).collect();
        let m = ArmMoments::from_rows(&flat, &y, None, p);
        let names_arc = Arc::new(names.to_vec());
        let fit = match fit_moments(&m, &names_arc, CovariateSet::Both, opts) {
            Ok(f) if f.aliased.is_empty() => f,
            Ok(f) => {
                let reason = format!("rank-deficient variance regression (aliased {:?})", f.aliased);
                return Ok(Self::intercept_only(names.to_vec(), &y, Some(reason)));
            }
            Err(e) => return Ok(Self::intercept_only(names.to_vec(), &y, Some(e.to_string()))),
        };
        let mut model = Self {
            names: names.to_vec(),
            selected: fit.selected.iter().map(|&j| names[j].clone()).collect(),
            selected_idx: fit.selected.clone(),
            coefficients: fit.coefficients.clone(),
            intercept: fit.intercept,
            smearing: 1.0,
            n: y.len(),
            fallback: None,
        };
        model.smearing = z
            .iter()
            .zip(&y)
            .map(|(r, v)| (v - model.linear(r)).exp())
            .sum::<f64>()
            / y.len() as f64;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecideOptions {
    /// Covariate set for the extrapolation surfaces.
    pub covariate_set: CovariateSet,
    /// Covariate set for the variance model; defaults to `covariate_set`.
    pub variance_set: Option<CovariateSet>,
    /// Series order of the variance model.
    pub variance_order: usize,
    pub schema: SeriesSchema,
    pub surface: SurfaceOptions,
    pub alpha: f64,
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub residual_floor: f64,
}

impl Default for DecideOptions {
    fn default() -> Self {
        Self {
            covariate_set: CovariateSet::Both,
            variance_set: None,
            variance_order: 1,
            schema: SeriesSchema::default(),
            surface: SurfaceOptions::default(),
            alpha: 0.05,
            bootstrap_reps: 200,
            seed: 0,
            residual_floor: RESIDUAL_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionReport {
    pub target: SiteKey,
    pub outcome: Outcome,
    pub c_star: f64,
    pub decision: Decision,
    pub total_variance: f64,
    /// Bootstrap `σ₁²` at the target.
    pub sigma_12_target: f64,
    /// Median bootstrap `σ₁²` across leave-one-out sites.
    pub sigma_12_median: f64,
    pub covariate_set: CovariateSet,
    pub variance_set: CovariateSet,
    pub n_reference: usize,
    pub reference_sites: Vec<SiteKey>,
    pub bootstrap_reps: usize,
    pub bootstrap_ok: usize,
    pub seed: u64,
    pub variance_model: VarianceModel,
    pub loo_residuals: Vec<LooResidual>,
    pub support_warnings: Vec<String>,
    pub diagnostics: Vec<String>,
}

pub fn decide(eb: &EvidenceBase, outcome: Outcome, target: &SiteKey, c_star: f64, opts: &DecideOptions) -> Result<DecisionReport> {
    let est = estimate_all(eb, outcome);
    decide_with_estimates(eb, outcome, &est.estimates, target, c_star, opts)
}

pub fn decide_with_estimates(
    eb: &EvidenceBase,
    outcome: Outcome,
    estimates: &[EffectEstimate],
    target: &SiteKey,
    c_star: f64,
    opts: &DecideOptions,
) -> Result<DecisionReport> {
    let cache = MomentCache::for_set(eb, outcome, &opts.schema, opts.covariate_set, &opts.surface)?;
    decide_cached(eb, &cache, estimates, target, c_star, opts)
}

/// As [`decide_with_estimates`] with a prebuilt moment cache for
/// `opts.covariate_set`. Sites absent from the cache are not references.
pub fn decide_cached(
    eb: &EvidenceBase,
    cache: &MomentCache,
    estimates: &[EffectEstimate],
    target: &SiteKey,
    c_star: f64,
    opts: &DecideOptions,
) -> Result<DecisionReport> {
    if !c_star.is_finite() {
        return Err(Error::invalid("threshold c* must be finite"));
    }
    let outcome = cache.outcome;
    let tsite = eb
        .site(target)
        .ok_or_else(|| Error::invalid(format!("target {target} not in the evidence base")))?;
    let ti = eb.index_of(target);
    let refs: Vec<usize> = cache.available().into_iter().filter(|&i| Some(i) != ti).collect();
    if refs.len() < 3 {
        return Err(Error::insufficient(format!(
            "decision needs at least 3 reference sites, got {}",
            refs.len()
        )));
    }
    let mut diagnostics: Vec<String> = Vec::new();
    let xbar_t = target_xbar(&cache.spec, tsite)?;
    let surfaces = cache.fit(&refs)?;
    let point = surfaces.effect_at(&xbar_t);

    let est = estimate_map(estimates, outcome);
    let (loo, d) = loo_residuals_cached(cache, &refs, &est);
    diagnostics.extend(d);
    if loo.len() < 3 {
        return Err(Error::insufficient("fewer than 3 leave-one-out residuals"));
    }

    // Variance-model covariates.
    let vset = opts.variance_set.unwrap_or(opts.covariate_set);
    let vspec = build_series(&opts.schema, opts.variance_order, vset)?;
    let names = vspec.covariate_names();
    let z_t = target_xbar(&vspec, tsite)?;
    let mut z = Vec::new();
    let mut zeta = Vec::new();
    let mut loo_idx = Vec::new();
    for (c, r) in &loo {
        match target_xbar(&vspec, &eb.sites()[*c]) {
            Ok(row) => {
                z.push(row);
                zeta.push(r.zeta);
                loo_idx.push(*c);
            }
            Err(e) => diagnostics.push(format!("site {}: {e}", r.site)),
        }
    }
    let model = VarianceModel::fit(&z, &zeta, names, opts.residual_floor, &opts.surface)?;
    if let Some(reason) = &model.fallback {
        diagnostics.push(format!("variance model fell back to intercept only: {reason}"));
    }
    let total = model.predict(&z_t);

    // Bootstrap over reference sites; each replicate predicts the target and
    // every leave-one-out site.
    let eval_points: Vec<&[f64]> = std::iter::once(xbar_t.as_slice())
        .chain(loo_idx.iter().map(|&c| cache.get(c).expect("available").xbar.as_slice()))
        .collect();
    let (vars, n_ok) = bootstrap_variances(cache, &refs, &eval_points, opts.bootstrap_reps, opts.seed)?;
    if n_ok < opts.bootstrap_reps {
        diagnostics.push(format!(
            "{} of {} bootstrap replicates failed",
            opts.bootstrap_reps - n_ok,
            opts.bootstrap_reps
        ));
    }
    let sigma_12_target = vars[0];
    let per_site = &vars[1..];
    let sigma_12_median = if per_site.is_empty() { sigma_12_target } else { median(per_site) };
    let sigma_zeta2 = (total - sigma_12_median).max(0.0);

    let df = (zeta.len() as f64 - model.n_params() as f64).max(1.0);
    let interval = prediction_interval(point, sigma_zeta2, sigma_12_target, opts.alpha, df)?;
    diagnostics.extend(cache.diagnostics.iter().map(|(k, m)| format!("site {k}: {m}")));
    Ok(DecisionReport {
        target: target.clone(),
        outcome,
        c_star,
        decision: Decision::new(c_star, interval),
        total_variance: total,
        sigma_12_target,
        sigma_12_median,
        covariate_set: opts.covariate_set,
        variance_set: vset,
        n_reference: refs.len(),
        reference_sites: refs.iter().map(|&i| eb.sites()[i].key.clone()).collect(),
        bootstrap_reps: opts.bootstrap_reps,
        bootstrap_ok: n_ok,
        seed: opts.seed,
        variance_model: model,
        loo_residuals: loo.into_iter().map(|(_, r)| r).collect(),
        support_warnings: surfaces.support_warnings(&xbar_t),
        diagnostics,
    })
}

/// Bootstrap variance of the extrapolated effect at each of `points`,
/// resampling `refs` with replacement. Replicate `b` draws from stream `b`
/// of `seed`; failed refits are skipped. Returns the variances and the
/// number of successful replicates.
pub fn bootstrap_variances(
    cache: &MomentCache,
    refs: &[usize],
    points: &[&[f64]],
    reps: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    if refs.is_empty() {
        return Err(Error::insufficient("bootstrap needs reference sites"));
    }
    let draws: Vec<Option<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let draw: Vec<usize> = (0..refs.len()).map(|_| refs[rng.random_range(0..refs.len())]).collect();
            cache
                .fit(&draw)
                .ok()
                .map(|s| points.iter().map(|x| s.effect_at(x)).collect())
        })
        .collect();
    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    if ok.len() < 2 {
        return Err(Error::insufficient("fewer than 2 successful bootstrap replicates"));
    }
    let m = ok.len() as f64;
    let vars = (0..points.len())
        .map(|k| {
            let mean = ok.iter().map(|r| r[k]).sum::<f64>() / m;
            ok.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (m - 1.0)
        })
        .collect();
    Ok((vars, ok.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooInterval {
    pub site: SiteKey,
    pub interval: PredictionInterval,
    pub actual: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooIntervals {
    pub rows: Vec<LooInterval>,
    pub sigma_12_median: f64,
    pub bootstrap_ok: usize,
    pub diagnostics: Vec<String>,
}

impl LooIntervals {
    pub fn coverage(&self) -> f64 {
        self.rows.iter().filter(|r| r.covered).count() as f64 / self.rows.len() as f64
    }

    pub fn mean_width(&self) -> f64 {
        self.rows.iter().map(|r| r.interval.width()).sum::<f64>() / self.rows.len() as f64
    }
}

/// Leave-one-out prediction intervals for every site with an estimate.
///
/// Residuals are computed once; site `c`'s variance model is fit on the
/// other sites' residuals, and one bootstrap over all sites supplies
/// `σ₁²(c)` at each site.
pub fn loo_intervals(
    eb: &EvidenceBase,
    cache: &MomentCache,
    estimates: &[EffectEstimate],
    opts: &DecideOptions,
) -> Result<LooIntervals> {
    let est = estimate_map(estimates, cache.outcome);
    let refs: Vec<usize> = cache
        .available()
        .into_iter()
        .filter(|&i| est.contains_key(&cache.get(i).expect("available").key))
        .collect();
    if refs.len() < 4 {
        return Err(Error::insufficient("leave-one-out intervals need at least 4 sites"));
    }
    let (loo, mut diagnostics) = loo_residuals_cached(cache, &refs, &est);
    let vset = opts.variance_set.unwrap_or(opts.covariate_set);
    let vspec = build_series(&opts.schema, opts.variance_order, vset)?;
    let names = vspec.covariate_names();
    let mut rows_z = Vec::new();
    let mut kept = Vec::new();
    for (c, r) in loo {
        match target_xbar(&vspec, &eb.sites()[c]) {
            Ok(z) => {
                rows_z.push(z);
                kept.push((c, r));
            }
            Err(e) => diagnostics.push(format!("site {}: {e}", r.site)),
        }
    }
    let points: Vec<&[f64]> = kept
        .iter()
        .map(|(c, _)| cache.get(*c).expect("available").xbar.as_slice())
        .collect();
    let (s12, n_ok) = bootstrap_variances(cache, &refs, &points, opts.bootstrap_reps, opts.seed)?;
    let s12_median = median(&s12);
    let out: Vec<Result<LooInterval>> = (0..kept.len())
        .into_par_iter()
        .map(|i| {
            let z: Vec<Vec<f64>> = (0..kept.len()).filter(|&j| j != i).map(|j| rows_z[j].clone()).collect();
            let zeta: Vec<f64> = (0..kept.len()).filter(|&j| j != i).map(|j| kept[j].1.zeta).collect();
            let model = VarianceModel::fit(&z, &zeta, names, opts.residual_floor, &opts.surface)?;
            let total = model.predict(&rows_z[i]);
            let df = (zeta.len() as f64 - model.n_params() as f64).max(1.0);
            let r = &kept[i].1;
            let interval = prediction_interval(r.predicted, (total - s12_median).max(0.0), s12[i], opts.alpha, df)?;
            Ok(LooInterval {
                site: r.site.clone(),
                covered: interval.contains(r.actual),
                actual: r.actual,
                interval,
            })
        })
        .collect();
    Ok(LooIntervals {
        rows: out.into_iter().collect::<Result<_>>()?,
        sigma_12_median: s12_median,
        bootstrap_ok: n_ok,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic_interval() {
        let pi = prediction_interval(0.04, 0.0009, 0.0001, 0.05, f64::INFINITY).unwrap();
        assert!((pi.lower - (0.04 - 1.959963984540054 * 0.001f64.sqrt())).abs() < 1e-12);
        assert!((pi.lower - -0.0220).abs() < 5e-5);
        assert!((pi.upper - 0.1020).abs() < 5e-5);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let pi = prediction_interval(0.3, 0.0, 0.0, 0.05, 10.0).unwrap();
        assert_eq!((pi.lower, pi.upper), (0.3, 0.3));
    }

    #[test]
    fn verdict_follows_threshold() {
        let pi = prediction_interval(0.0, 0.01, 0.0, 0.05, 20.0).unwrap();
        assert_eq!(Decision::new(10.0, pi.clone()).verdict, Verdict::Extrapolate);
        assert_eq!(Decision::new(0.0, pi).verdict, Verdict::Experiment);
    }

    #[test]
    fn equal_magnitude_residuals_predict_r_squared() {
        let r: f64 = 0.03;
        let zeta = [r, -r, r, -r, r];
        let model = VarianceModel::fit(&vec![vec![]; 5], &zeta, &[], RESIDUAL_FLOOR, &SurfaceOptions::default()).unwrap();
        assert!(model.is_intercept_only());
        assert!((model.predict(&[]) - r * r).abs() <= 4.0 * f64::EPSILON * r * r);
    }

    #[test]
    fn invalid_arguments_rejected() {
        assert!(prediction_interval(0.0, -1.0, 0.0, 0.05, 5.0).is_err());
        assert!(prediction_interval(0.0, 1.0, 0.0, 1.0, 5.0).is_err());
        assert!(prediction_interval(0.0, 1.0, 0.0, 0.05, 0.5).is_err());
    }
}
