//! Reference→target dyads, prediction errors and the external validity
//! function.
//!
//! A dyad pairs a reference site `r` with a target site `t`. Its prediction
//! error is `ζ = τ̂₁(r → t) − τ̂_t`, where `τ̂₁` extrapolates the reference's
//! micro surfaces to the target's micro distribution (or is simply `τ̂_r`
//! without micro adjustment). The control-mean error `ζ_y0` is the predicted
//! minus the actual target control mean.
//!
//! Covariate differences are `target − reference` divided by the standard
//! deviation of that difference over the dyads in the set. Distance is the
//! haversine distance between site centroids (symmetric, not signed), and
//! distance squared is the square of standardized distance.
//!
//! Standard errors of dyadic regressions allow correlation between any two
//! dyads sharing a site:
//!
//! ```text
//! M = Σ_g S_g S_gᵀ − Σ_{a<b} S_{ab} S_{abᵀ},   V = n/(n−k) · B M B
//! ```
//!
//! with `S_g` the summed scores of dyads containing site `g`, `S_{ab}` the
//! summed scores of the dyads `a→b` and `b→a`, and `B` the inverse
//! weighted Gram matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvidenceBase, MacroField, Outcome, SiteData, SiteKey};
use crate::error::{Error, Result};
use crate::extrapolate::{MomentCache, SurfaceOptions, Surfaces};
use crate::linalg::{sandwich, DenseMatrix};
use crate::ols::{CovarianceKind, OlsFit};
use crate::scalar::Scalar;
use crate::series::{CovariateSet, SeriesSchema};
use crate::site_effects::{estimate_all, EffectEstimate};
use crate::stats::{ecdf, gaussian_kde, linspace, normal_cdf, quantile, sample_sd};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Great-circle distance in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Dyad regressors, in the order of the multivariate prediction-error table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffVar {
    EducOwn,
    EducSpouse,
    Age,
    Year,
    #[serde(rename = "log_gdp_pc")]
    LogGdp,
    #[serde(rename = "sex_ratio_imbalance")]
    SexRatio,
    #[serde(rename = "lfp_women")]
    Lfp,
    Tfr,
    #[serde(rename = "distance_km")]
    Distance,
    DistanceSq,
}

impl DiffVar {
    pub const ALL: [DiffVar; 10] = [
        DiffVar::EducOwn,
        DiffVar::EducSpouse,
        DiffVar::Age,
        DiffVar::Year,
        DiffVar::LogGdp,
        DiffVar::SexRatio,
        DiffVar::Lfp,
        DiffVar::Tfr,
        DiffVar::Distance,
        DiffVar::DistanceSq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiffVar::EducOwn => "educ_own",
            DiffVar::EducSpouse => "educ_spouse",
            DiffVar::Age => "age",
            DiffVar::Year => "year",
            DiffVar::LogGdp => "log_gdp_pc",
            DiffVar::SexRatio => "sex_ratio_imbalance",
            DiffVar::Lfp => "lfp_women",
            DiffVar::Tfr => "tfr",
            DiffVar::Distance => "distance_km",
            DiffVar::DistanceSq => "distance_sq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::UnknownCovariate(s.to_string()))
    }

    /// Signed differences change sign when reference and target swap.
    pub fn is_antisymmetric(self) -> bool {
        !matches!(self, DiffVar::Distance | DiffVar::DistanceSq)
    }
}

impl fmt::Display for DiffVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Site-level quantities entering dyad differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub key: SiteKey,
    pub educ_own: Option<f64>,
    pub educ_spouse: Option<f64>,
    pub age: Option<f64>,
    pub log_gdp: Option<f64>,
    pub sex_ratio: Option<f64>,
    pub lfp: Option<f64>,
    pub tfr: Option<f64>,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
}

impl SiteProfile {
    pub fn from_site(s: &SiteData) -> Self {
        let m = &s.macro_;
        Self {
            key: s.key.clone(),
            educ_own: s.micro_mean(|r| Some(f64::from(r.educ_own.level()))),
            educ_spouse: s.micro_mean(|r| r.educ_spouse.map(|e| f64::from(e.level()))),
            age: s.micro_mean(|r| Some(f64::from(r.age))),
            log_gdp: m.get(MacroField::LogGdpPc),
            sex_ratio: m.get(MacroField::SexRatioImbalance),
            lfp: m.get(MacroField::LfpWomen),
            tfr: m.get(MacroField::Tfr),
            latitude: m.latitude,
            longitude: m.longitude,
        }
    }

    pub fn distance_km(&self, other: &SiteProfile) -> Option<f64> {
        Some(haversine_km(
            self.latitude?,
            self.longitude?,
            other.latitude?,
            other.longitude?,
        ))
    }
}

/// Site-level value of a non-distance regressor.
pub fn profile_value(var: DiffVar, p: &SiteProfile) -> Option<f64> {
    match var {
        DiffVar::EducOwn => p.educ_own,
        DiffVar::EducSpouse => p.educ_spouse,
        DiffVar::Age => p.age,
        DiffVar::Year => Some(f64::from(p.key.year)),
        DiffVar::LogGdp => p.log_gdp,
        DiffVar::SexRatio => p.sex_ratio,
        DiffVar::Lfp => p.lfp,
        DiffVar::Tfr => p.tfr,
        DiffVar::Distance | DiffVar::DistanceSq => None,
    }
}

/// Unstandardized difference `target − reference` (distance for the two
/// distance variables).
pub fn raw_diff(var: DiffVar, r: &SiteProfile, t: &SiteProfile) -> Option<f64> {
    let d = |a: Option<f64>, b: Option<f64>| Some(b? - a?);
    match var {
        DiffVar::EducOwn => d(r.educ_own, t.educ_own),
        DiffVar::EducSpouse => d(r.educ_spouse, t.educ_spouse),
        DiffVar::Age => d(r.age, t.age),
        DiffVar::Year => Some(f64::from(t.key.year - r.key.year)),
        DiffVar::LogGdp => d(r.log_gdp, t.log_gdp),
        DiffVar::SexRatio => d(r.sex_ratio, t.sex_ratio),
        DiffVar::Lfp => d(r.lfp, t.lfp),
        DiffVar::Tfr => d(r.tfr, t.tfr),
        DiffVar::Distance | DiffVar::DistanceSq => r.distance_km(t),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dyad {
    pub reference: SiteKey,
    pub target: SiteKey,
    pub reference_index: usize,
    pub target_index: usize,
    /// Extrapolated effect `τ̂₁(r → t)`.
    pub tau_hat: f64,
    pub tau_target: f64,
    pub se_target: f64,
    pub zeta: f64,
    pub y0_hat: f64,
    pub y0_target: f64,
    pub zeta_y0: f64,
    pub raw: Vec<f64>,
    /// Standardized differences, aligned with [`DyadSet::vars`].
    pub diffs: Vec<f64>,
}

impl Dyad {
    pub fn weight(&self) -> f64 {
        1.0 / (self.se_target * self.se_target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadSet {
    pub vars: Vec<DiffVar>,
    /// Scale dividing each raw difference.
    pub scales: Vec<f64>,
    pub dyads: Vec<Dyad>,
    pub n_sites: usize,
    pub diagnostics: Vec<String>,
}

impl DyadSet {
    pub fn len(&self) -> usize {
        self.dyads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dyads.is_empty()
    }

    pub fn var_index(&self, var: DiffVar) -> Result<usize> {
        self.vars
            .iter()
            .position(|&v| v == var)
            .ok_or_else(|| Error::UnknownCovariate(var.name().to_string()))
    }

    /// SDs of the raw differences over these dyads (distance variables use
    /// the SD of distance).
    pub fn difference_sds(&self) -> Vec<f64> {
        (0..self.vars.len())
            .map(|k| {
                let x: Vec<f64> = self.dyads.iter().map(|d| d.raw[k]).collect();
                if x.len() < 2 {
                    return 1.0;
                }
                let sd = sample_sd(&x);
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// Recompute standardized differences with `scales`.
    pub fn standardize_with(&mut self, scales: &[f64]) {
        self.scales = scales.to_vec();
        for d in &mut self.dyads {
            d.diffs = standardized(&self.vars, &d.raw, scales);
        }
    }
}

pub fn standardized(vars: &[DiffVar], raw: &[f64], scales: &[f64]) -> Vec<f64> {
    vars.iter()
        .enumerate()
        .map(|(k, v)| {
            let z = raw[k] / scales[k];
            if *v == DiffVar::DistanceSq {
                z * z
            } else {
                z
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DyadOptions {
    pub micro_adjustment: bool,
    /// Covariate set used to adjust a single reference to a target.
    pub adjustment_set: CovariateSet,
    pub include_self: bool,
    /// Keep only one direction per unordered pair (lower index as
    /// reference).
    pub unordered: bool,
    pub vars: Vec<DiffVar>,
    /// Fixed difference scales; computed from the dyad set when absent.
    pub scales: Option<Vec<f64>>,
    pub references: Option<BTreeSet<SiteKey>>,
    pub targets: Option<BTreeSet<SiteKey>>,
    pub surface: SurfaceOptions,
    pub schema: SeriesSchema,
}

impl Default for DyadOptions {
    fn default() -> Self {
        Self {
            micro_adjustment: true,
            adjustment_set: CovariateSet::Micro,
            include_self: false,
            unordered: false,
            vars: DiffVar::ALL.to_vec(),
            scales: None,
            references: None,
            targets: None,
            surface: SurfaceOptions::default(),
            schema: SeriesSchema::default(),
        }
    }
}

/// Per-site ingredients of dyads, computed once and reused across dyad
/// subsets.
#[derive(Debug, Clone)]
pub struct DyadBuilder {
    pub keys: Vec<SiteKey>,
    pub profiles: Vec<SiteProfile>,
    pub estimates: Vec<Option<EffectEstimate>>,
    surfaces: Vec<Option<Surfaces>>,
    pub cache: MomentCache,
    pub micro_adjustment: bool,
    pub vars: Vec<DiffVar>,
    pub diagnostics: Vec<String>,
}

impl DyadBuilder {
    pub fn new(
        eb: &EvidenceBase,
        outcome: Outcome,
        estimates: &[EffectEstimate],
        opts: &DyadOptions,
    ) -> Result<Self> {
        let set = if opts.micro_adjustment {
            opts.adjustment_set
        } else {
            CovariateSet::None
        };
        let cache = MomentCache::for_set(eb, outcome, &opts.schema, set, &opts.surface)?;
        let mut diagnostics: Vec<String> = cache
            .diagnostics
            .iter()
            .map(|(k, m)| format!("site {k}: {m}"))
            .collect();
        let by_key: BTreeMap<&SiteKey, &EffectEstimate> = estimates
            .iter()
            .filter(|e| e.outcome == outcome)
            .map(|e| (&e.site, e))
            .collect();
        let keys: Vec<SiteKey> = eb.sites().iter().map(|s| s.key.clone()).collect();
        let surfaces: Vec<Option<Surfaces>> = (0..keys.len())
            .into_par_iter()
            .map(|i| cache.get(i).and_then(|_| cache.fit(&[i]).ok()))
            .collect();
        for (i, s) in surfaces.iter().enumerate() {
            if s.is_none() && cache.get(i).is_some() {
                diagnostics.push(format!("site {}: surface fit failed", keys[i]));
            }
        }
        Ok(Self {
            profiles: eb.sites().iter().map(SiteProfile::from_site).collect(),
            estimates: keys.iter().map(|k| by_key.get(k).map(|e| (*e).clone())).collect(),
            keys,
            surfaces,
            cache,
            micro_adjustment: opts.micro_adjustment,
            vars: opts.vars.clone(),
            diagnostics,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Extrapolated effect from reference `r` to target `t`.
    pub fn extrapolated(&self, r: usize, t: usize) -> std::result::Result<f64, String> {
        if self.micro_adjustment {
            let s = self.surfaces[r]
                .as_ref()
                .ok_or_else(|| format!("no surfaces for reference {}", self.keys[r]))?;
            let x = &self
                .cache
                .get(t)
                .ok_or_else(|| format!("no micro data for target {}", self.keys[t]))?
                .xbar;
            Ok(s.effect_at(x))
        } else {
            self.estimates[r]
                .as_ref()
                .map(|e| e.tau)
                .ok_or_else(|| format!("no effect estimate for reference {}", self.keys[r]))
        }
    }

    /// Unstandardized dyad (empty `diffs`).
    pub fn dyad(&self, r: usize, t: usize) -> std::result::Result<Dyad, String> {
        let label = || format!("{}->{}", self.keys[r], self.keys[t]);
        let te = self.estimates[t]
            .as_ref()
            .ok_or_else(|| format!("dyad {}: no effect estimate for target", label()))?;
        let tau_hat = self.extrapolated(r, t).map_err(|m| format!("dyad {}: {m}", label()))?;
        let (y0_hat, y0_target) = match (&self.surfaces[r], self.cache.get(t)) {
            (Some(s), Some(tm)) => (s.y0_at(&tm.xbar), tm.control_mean()),
            _ => (f64::NAN, f64::NAN),
        };
        let mut raw = Vec::with_capacity(self.vars.len());
        for &v in &self.vars {
            raw.push(raw_diff(v, &self.profiles[r], &self.profiles[t]).ok_or_else(|| {
                format!("dyad {}: missing covariate for {}", label(), v.name())
            })?);
        }
        Ok(Dyad {
            reference: self.keys[r].clone(),
            target: self.keys[t].clone(),
            reference_index: r,
            target_index: t,
            tau_hat,
            tau_target: te.tau,
            se_target: te.se,
            zeta: tau_hat - te.tau,
            y0_hat,
            y0_target,
            zeta_y0: y0_hat - y0_target,
            raw,
            diffs: Vec::new(),
        })
    }

    /// Dyads over pairs accepted by `keep(reference, target)`, standardized
    /// by `scales` or by the SDs of this set.
    pub fn build(
        &self,
        keep: impl Fn(usize, usize) -> bool + Sync,
        include_self: bool,
        unordered: bool,
        scales: Option<&[f64]>,
    ) -> DyadSet {
        let n = self.len();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|r| (0..n).map(move |t| (r, t)))
            .filter(|&(r, t)| (include_self || r != t) && (!unordered || r <= t) && keep(r, t))
            .collect();
        let results: Vec<_> = pairs.par_iter().map(|&(r, t)| self.dyad(r, t)).collect();
        let mut dyads = Vec::with_capacity(results.len());
        let mut diagnostics = self.diagnostics.clone();
        for r in results {
            match r {
                Ok(d) => dyads.push(d),
                Err(m) => diagnostics.push(m),
            }
        }
        let mut set = DyadSet {
            vars: self.vars.clone(),
            scales: Vec::new(),
            dyads,
            n_sites: n,
            diagnostics,
        };
        let sc = scales.map_or_else(|| set.difference_sds(), <[f64]>::to_vec);
        set.standardize_with(&sc);
        set
    }
}

/// Build all dyads of `eb` for `outcome`, estimating site effects first.
pub fn build_dyads(eb: &EvidenceBase, outcome: Outcome, opts: &DyadOptions) -> Result<DyadSet> {
    let est = estimate_all(eb, outcome);
    build_dyads_with_estimates(eb, outcome, &est.estimates, opts)
}

pub fn build_dyads_with_estimates(
    eb: &EvidenceBase,
    outcome: Outcome,
    estimates: &[EffectEstimate],
    opts: &DyadOptions,
) -> Result<DyadSet> {
    let b = DyadBuilder::new(eb, outcome, estimates, opts)?;
    let in_set = |set: &Option<BTreeSet<SiteKey>>, i: usize| set.as_ref().is_none_or(|s| s.contains(&b.keys[i]));
    Ok(b.build(
        |r, t| in_set(&opts.references, r) && in_set(&opts.targets, t),
        opts.include_self,
        opts.unordered,
        opts.scales.as_deref(),
    ))
}

/// Dyadic-robust meat from per-observation scores and their site pairs.
pub fn dyadic_meat<T: Scalar>(scores: &[Vec<T>], pairs: &[(usize, usize)], n_sites: usize) -> DenseMatrix<T> {
    let k = scores.first().map_or(0, Vec::len);
    let mut by_site = vec![vec![T::zero(); k]; n_sites];
    let mut by_pair: BTreeMap<(usize, usize), Vec<T>> = BTreeMap::new();
    for (s, &(a, b)) in scores.iter().zip(pairs) {
        for j in 0..k {
            by_site[a][j] += s[j];
        }
        if a != b {
            for j in 0..k {
                by_site[b][j] += s[j];
            }
            let p = by_pair.entry((a.min(b), a.max(b))).or_insert_with(|| vec![T::zero(); k]);
            for j in 0..k {
                p[j] += s[j];
            }
        }
    }
    let mut m = DenseMatrix::zeros(k, k);
    let mut add = |v: &[T], sign: T| {
        for a in 0..k {
            for b in 0..k {
                m[(a, b)] += sign * v[a] * v[b];
            }
        }
    };
    for v in &by_site {
        add(v, T::one());
    }
    for v in by_pair.values() {
        add(v, -T::one());
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicRegression {
    /// `"(intercept)"` then regressor names.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    /// Heteroskedasticity-robust (HC1) SEs for comparison.
    pub se_hc: Vec<f64>,
    pub n: usize,
    pub r_squared: f64,
    pub weighted: bool,
}

impl DyadicRegression {
    pub fn intercept(&self) -> (f64, f64) {
        (self.coefficients[0], self.se[0])
    }
}

/// Generic dyadic regression: `y` on `[1, x]` with optional weights.
pub fn dyadic_ols<T: Scalar>(
    x: &DenseMatrix<T>,
    y: &[T],
    weights: Option<&[T]>,
    pairs: &[(usize, usize)],
    n_sites: usize,
) -> Result<(OlsFit<T>, DenseMatrix<T>, DenseMatrix<T>)> {
    let fit = OlsFit::fit(x, y, weights)?;
    if !fit.aliased.is_empty() {
        return Err(Error::RankDeficient(format!(
            "dyadic regression: aliased columns {:?}",
            fit.aliased
        )));
    }
    let n = fit.n;
    let k = fit.rank();
    if n <= k {
        return Err(Error::insufficient("dyadic regression has no residual degrees of freedom"));
    }
    let scores = fit.scores(x);
    let meat = dyadic_meat(&scores, pairs, n_sites);
    let scale = T::from_usize_lossy(n) / T::from_usize_lossy(n - k);
    let v = sandwich(fit.bread(), &meat).map(|a| a * scale);
    let hc = fit.covariance(x, CovarianceKind::Hc1);
    Ok((fit, v, hc))
}

/// Regress `ζ` on an intercept and the standardized differences `regressors`.
pub fn dyadic_regression(set: &DyadSet, regressors: &[DiffVar], weighted: bool) -> Result<DyadicRegression> {
    dyadic_regression_on(set, regressors, weighted, |d| d.zeta)
}

pub fn dyadic_regression_on(
    set: &DyadSet,
    regressors: &[DiffVar],
    weighted: bool,
    response: impl Fn(&Dyad) -> f64,
) -> Result<DyadicRegression> {
    let idx: Vec<usize> = regressors.iter().map(|&v| set.var_index(v)).collect::<Result<_>>()?;
    let n = set.len();
    if n < idx.len() + 2 {
        return Err(Error::insufficient("too few dyads for the regression"));
    }
    let mut data = Vec::with_capacity(n * (idx.len() + 1));
    for d in &set.dyads {
        data.push(1.0);
        data.extend(idx.iter().map(|&k| d.diffs[k]));
    }
    let x = DenseMatrix::from_row_major(n, idx.len() + 1, data)?;
    let y: Vec<f64> = set.dyads.iter().map(&response).collect();
    let w: Option<Vec<f64>> = weighted.then(|| set.dyads.iter().map(Dyad::weight).collect());
    let pairs: Vec<(usize, usize)> = set
        .dyads
        .iter()
        .map(|d| (d.reference_index, d.target_index))
        .collect();
    let (fit, v, hc) = dyadic_ols(&x, &y, w.as_deref(), &pairs, set.n_sites)?;
    let sd = |m: &DenseMatrix<f64>| (0..m.rows()).map(|i| m[(i, i)].max(0.0).sqrt()).collect();
    let mut names = vec!["(intercept)".to_string()];
    names.extend(regressors.iter().map(|v| v.name().to_string()));
    Ok(DyadicRegression {
        names,
        coefficients: fit.coefficients.clone(),
        se: sd(&v),
        se_hc: sd(&hc),
        n,
        r_squared: fit.r_squared(&y),
        weighted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PointwiseSe {
    /// Sandwich with the dyadic-robust meat.
    #[default]
    Dyadic,
    /// Sandwich with the heteroskedasticity-robust meat.
    Hc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
#[derive(Default)]
pub enum Bandwidth {
    /// `1.06 · SD(x) · n^(−1/5)`.
    #[default]
    Auto,
    Fixed(f64),
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvfOptions {
    pub bandwidth: Bandwidth,
    pub grid_points: usize,
    pub weighted: bool,
    pub se: PointwiseSe,
    /// Multiplier on the pointwise SE for the band.
    pub band_width_se: f64,
}

impl Default for EvfOptions {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Auto,
            grid_points: 101,
            weighted: true,
            se: PointwiseSe::Dyadic,
            band_width_se: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvfCurve {
    pub covariate: String,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    /// NaN where fewer than 3 dyads carry kernel weight.
    pub fitted: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFit<T> {
    pub value: T,
    pub slope: T,
    pub se: T,
}

pub fn epanechnikov<T: Scalar>(u: T) -> T {
    if u.abs() <= T::one() {
        T::lit(0.75) * (T::one() - u * u)
    } else {
        T::zero()
    }
}

pub fn auto_bandwidth<T: Scalar>(x: &[T]) -> T {
    T::lit(1.06) * sample_sd(x) * T::from_usize_lossy(x.len()).powf(T::lit(-0.2))
}

/// Kernel-weighted local linear fit at `at`.
#[allow(clippy::too_many_arguments)]
pub fn local_linear_at<T: Scalar>(
    x: &[T],
    y: &[T],
    w: &[T],
    pairs: &[(usize, usize)],
    n_sites: usize,
    at: T,
    h: T,
    se_kind: PointwiseSe,
) -> Option<LocalFit<T>> {
    let mut idx = Vec::new();
    let mut kw = Vec::new();
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for i in 0..x.len() {
        let k = epanechnikov((x[i] - at) / h) * w[i];
        if k > T::zero() {
            let u = x[i] - at;
            s0 += k;
            s1 += k * u;
            s2 += k * u * u;
            t0 += k * y[i];
            t1 += k * u * y[i];
            idx.push(i);
            kw.push(k);
        }
    }
    if idx.len() < 3 {
        return None;
    }
    let det = s0 * s2 - s1 * s1;
    if !(det > T::epsilon() * s0 * s2) {
        return None;
    }
    let a = (s2 * t0 - s1 * t1) / det;
    let b = (s0 * t1 - s1 * t0) / det;
    let mut bread = DenseMatrix::zeros(2, 2);
    bread[(0, 0)] = s2 / det;
    bread[(0, 1)] = -s1 / det;
    bread[(1, 0)] = -s1 / det;
    bread[(1, 1)] = s0 / det;
    let scores: Vec<Vec<T>> = idx
        .iter()
        .zip(&kw)
        .map(|(&i, &k)| {
            let u = x[i] - at;
            let e = k * (y[i] - a - b * u);
            vec![e, e * u]
        })
        .collect();
    let meat = match se_kind {
        PointwiseSe::Dyadic => {
            let p: Vec<(usize, usize)> = idx.iter().map(|&i| pairs[i]).collect();
            dyadic_meat(&scores, &p, n_sites)
        }
        PointwiseSe::Hc => crate::ols::outer_sum(&scores),
    };
    let m = T::from_usize_lossy(idx.len());
    let v = sandwich(&bread, &meat)[(0, 0)] * m / (m - T::lit(2.0));
    Some(LocalFit {
        value: a,
        slope: b,
        se: v.max(T::zero()).sqrt(),
    })
}

struct CurveInput {
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    pairs: Vec<(usize, usize)>,
}

fn curve_input(set: &DyadSet, k: usize, weighted: bool, response: &dyn Fn(&Dyad) -> f64) -> CurveInput {
    let d = &set.dyads;
    CurveInput {
        x: d.iter().map(|d| d.diffs[k]).collect(),
        y: d.iter().map(response).collect(),
        w: d.iter().map(|d| if weighted { d.weight() } else { 1.0 }).collect(),
        pairs: d.iter().map(|d| (d.reference_index, d.target_index)).collect(),
    }
}

fn resolve_bandwidth(bw: Bandwidth, x: &[f64]) -> Result<f64> {
    let h = match bw {
        Bandwidth::Auto => auto_bandwidth(x),
        Bandwidth::Fixed(h) => h,
    };
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("bandwidth {h} must be positive")));
    }
    Ok(h)
}

/// Local linear regression of `ζ` on one standardized difference.
pub fn local_linear_evf(set: &DyadSet, var: DiffVar, opts: &EvfOptions) -> Result<EvfCurve> {
    local_linear_curve(set, var, opts, &|d| d.zeta)
}

pub fn local_linear_curve(
    set: &DyadSet,
    var: DiffVar,
    opts: &EvfOptions,
    response: &dyn Fn(&Dyad) -> f64,
) -> Result<EvfCurve> {
    if set.len() < 30 {
        return Err(Error::insufficient(format!(
            "external validity function needs at least 30 dyads, got {}",
            set.len()
        )));
    }
    let k = set.var_index(var)?;
    let inp = curve_input(set, k, opts.weighted, response);
    let (lo, hi) = inp
        .x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return Err(Error::invalid(format!("all {var} differences are identical")));
    }
    let h = resolve_bandwidth(opts.bandwidth, &inp.x)?;
    let grid = linspace(lo, hi, opts.grid_points.max(2));
    let fits: Vec<Option<LocalFit<f64>>> = grid
        .par_iter()
        .map(|&g| local_linear_at(&inp.x, &inp.y, &inp.w, &inp.pairs, set.n_sites, g, h, opts.se))
        .collect();
    let mut curve = EvfCurve {
        covariate: var.name().to_string(),
        bandwidth: h,
        grid,
        fitted: Vec::new(),
        se: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        n: set.len(),
    };
    for f in fits {
        let (v, s) = f.map_or((f64::NAN, f64::NAN), |f| (f.value, f.se));
        curve.fitted.push(v);
        curve.se.push(s);
        curve.lower.push(v - opts.band_width_se * s);
        curve.upper.push(v + opts.band_width_se * s);
    }
    Ok(curve)
}

/// Local linear value and SE at a single difference value.
pub fn evf_at(set: &DyadSet, var: DiffVar, at: f64, opts: &EvfOptions, response: &dyn Fn(&Dyad) -> f64) -> Result<LocalFit<f64>> {
    let k = set.var_index(var)?;
    let inp = curve_input(set, k, opts.weighted, response);
    let h = resolve_bandwidth(opts.bandwidth, &inp.x)?;
    local_linear_at(&inp.x, &inp.y, &inp.w, &inp.pairs, set.n_sites, at, h, opts.se)
        .ok_or_else(|| Error::insufficient(format!("too few dyads near {var} = {at}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationTest {
    pub curve: EvfCurve,
    /// Local linear control-mean error at zero difference.
    pub intercept: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    /// True when the test rejects at `alpha`.
    pub reject: bool,
    pub alpha: f64,
}

/// Test whether the control-mean error curve passes through the origin.
pub fn unconfounded_location_test(set: &DyadSet, var: DiffVar, opts: &EvfOptions, alpha: f64) -> Result<LocationTest> {
    let y0 = |d: &Dyad| d.zeta_y0;
    if set.dyads.iter().any(|d| !d.zeta_y0.is_finite()) {
        return Err(Error::invalid("control-mean errors unavailable for some dyads"));
    }
    let curve = local_linear_curve(set, var, opts, &y0)?;
    let at0 = evf_at(set, var, 0.0, opts, &y0)?;
    let z = if at0.se > 0.0 {
        at0.value / at0.se
    } else if at0.value == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let p = 2.0 * (1.0 - normal_cdf(z.abs()));
    Ok(LocationTest {
        curve,
        intercept: at0.value,
        se: at0.se,
        z,
        p_value: p,
        reject: p < alpha,
        alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub site: SiteKey,
    pub covariate_set: CovariateSet,
    pub predicted: f64,
    pub actual: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub covariate_set: CovariateSet,
    pub mean_abs_error: f64,
    pub median_abs_error: f64,
    pub density_grid: Vec<f64>,
    pub density: Vec<f64>,
    pub cdf_grid: Vec<f64>,
    pub cdf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSetComparison {
    pub rows: Vec<ComparisonRow>,
    pub distributions: Vec<ErrorDistribution>,
    pub diagnostics: Vec<String>,
}

impl CovariateSetComparison {
    pub fn errors(&self, set: CovariateSet) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.covariate_set == set)
            .map(|r| r.error)
            .collect()
    }

    pub fn mean_abs_error(&self, set: CovariateSet) -> f64 {
        let e = self.errors(set);
        e.iter().map(|v| v.abs()).sum::<f64>() / e.len() as f64
    }
}

/// Leave-one-out errors of pooled extrapolation under each covariate set.
pub fn covariate_set_comparison(
    eb: &EvidenceBase,
    outcome: Outcome,
    estimates: &[EffectEstimate],
    sets: &[CovariateSet],
    schema: &SeriesSchema,
    opts: &SurfaceOptions,
) -> Result<CovariateSetComparison> {
    if eb.len() < 3 {
        return Err(Error::insufficient("covariate-set comparison needs at least 3 sites"));
    }
    let actual: BTreeMap<&SiteKey, f64> = estimates
        .iter()
        .filter(|e| e.outcome == outcome)
        .map(|e| (&e.site, e.tau))
        .collect();
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    for &set in sets {
        let cache = MomentCache::for_set(eb, outcome, schema, set, opts)?;
        diagnostics.extend(cache.diagnostics.iter().map(|(k, m)| format!("{set}: site {k}: {m}")));
        let avail = cache.available();
        let out: Vec<std::result::Result<ComparisonRow, String>> = avail
            .par_iter()
            .map(|&t| {
                let key = &cache.get(t).expect("available").key;
                let act = *actual
                    .get(key)
                    .ok_or_else(|| format!("{set}: site {key}: no effect estimate"))?;
                let refs: Vec<usize> = avail.iter().copied().filter(|&i| i != t).collect();
                let s = cache.fit(&refs).map_err(|e| format!("{set}: site {key}: {e}"))?;
                let pred = s.effect_at(&cache.get(t).expect("available").xbar);
                Ok(ComparisonRow {
                    site: key.clone(),
                    covariate_set: set,
                    predicted: pred,
                    actual: act,
                    error: pred - act,
                })
            })
            .collect();
        for r in out {
            match r {
                Ok(row) => rows.push(row),
                Err(m) => diagnostics.push(m),
            }
        }
    }
    let mut distributions = Vec::new();
    for &set in sets {
        let e: Vec<f64> = rows.iter().filter(|r| r.covariate_set == set).map(|r| r.error).collect();
        if e.len() < 2 {
            continue;
        }
        let abs: Vec<f64> = e.iter().map(|v| v.abs()).collect();
        let span = e.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        let dgrid = linspace(-span * 1.25, span * 1.25, 201);
        let cgrid = linspace(0.0, span * 1.05, 201);
        distributions.push(ErrorDistribution {
            covariate_set: set,
            mean_abs_error: abs.iter().sum::<f64>() / abs.len() as f64,
            median_abs_error: quantile(&abs, 0.5),
            density: gaussian_kde(&e, &dgrid),
            density_grid: dgrid,
            cdf: ecdf(&abs, &cgrid),
            cdf_grid: cgrid,
        });
    }
    Ok(CovariateSetComparison {
        rows,
        distributions,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haversine_known_distance() {
        // Quarter of a great circle along the equator.
        let d = haversine_km(0.0, 0.0, 0.0, 90.0);
        assert!((d - EARTH_RADIUS_KM * std::f64::consts::FRAC_PI_2).abs() < 1e-6);
        assert_eq!(haversine_km(10.0, 20.0, 10.0, 20.0), 0.0);
    }

    #[test]
    fn meat_counts_shared_sites_once() {
        // Dyads 0->1, 1->0, 1->2: the first two share both sites.
        let s = vec![vec![1.0], vec![2.0], vec![4.0]];
        let m = dyadic_meat(&s, &[(0, 1), (1, 0), (1, 2)], 3);
        // All three share site 1, so M = (1+2+4)^2.
        assert_eq!(m[(0, 0)], 49.0);
        let m = dyadic_meat(&s, &[(0, 1), (2, 3), (4, 5)], 6);
        assert_eq!(m[(0, 0)], 1.0 + 4.0 + 16.0);
    }

    #[test]
    fn kernel_integrates_to_one() {
        let g = linspace(-1.0, 1.0, 2001);
        let area: f64 = g.iter().map(|&u| epanechnikov(u)).sum::<f64>() * 0.001;
        assert!((area - 1.0).abs() < 1e-3);
    }
}
