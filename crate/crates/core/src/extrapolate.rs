//! Conditional-mean surfaces and extrapolated target effects.
//!
//! Surfaces are fit separately for treated and control records. Each fit
//! needs only centered moments of the pooled reference data, so every site
//! is reduced once to per-arm [`ArmMoments`] (count, means, co-moments with
//! the outcome) and any reference pool is the merge of its sites' moments.
//! Leave-one-out and bootstrap pools therefore cost a merge, not a pass
//! over records.
//!
//! Within an arm the covariate terms are standardized, a LASSO path is run
//! and the minimum-Cp support is refit by least squares. The extrapolated
//! effect for a target is the difference of the two surfaces averaged over
//! the target's records, which by linearity is the difference evaluated at
//! the target's mean term vector.

use std::sync::Arc;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvidenceBase, MicroRecord, Outcome, SiteData, SiteKey};
use crate::error::{Error, Result};
use crate::lasso::{lasso_path_gram, select_cp, sigma2_full, GramProblem, LassoOptions};
use crate::linalg::{DenseMatrix, GramCholesky};
use crate::rng::{stream_rng, tag_str};
use crate::series::{build_series, CovariateSet, SeriesSchema, SeriesSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Minimum-Cp LASSO followed by a least-squares refit.
    #[default]
    Lasso,
    /// Least squares on every term (aliased terms dropped).
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceOptions {
    pub selection: Selection,
    pub lasso: LassoOptions,
    /// Per-site record cap for moment accumulation; `None` disables.
    pub subsample_cap: Option<usize>,
    pub subsample_seed: u64,
    /// Use sampling weights, rescaled within each site and arm to sum to
    /// the record count.
    pub use_weights: bool,
}

impl Default for SurfaceOptions {
    fn default() -> Self {
        Self {
            selection: Selection::Lasso,
            lasso: LassoOptions::default(),
            subsample_cap: Some(50_000),
            subsample_seed: 0,
            use_weights: false,
        }
    }
}

/// Centered sufficient statistics of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMoments {
    pub count: usize,
    /// Total weight (equals `count` when unweighted).
    pub n: f64,
    pub mean: Vec<f64>,
    /// Row-major `p × p` co-moment `Σ w (x − x̄)(x − x̄)ᵀ`.
    pub cxx: Vec<f64>,
    pub y_mean: f64,
    pub cxy: Vec<f64>,
    pub cyy: f64,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ArmMoments {
    pub fn empty(p: usize) -> Self {
        Self {
            count: 0,
            n: 0.0,
            mean: vec![0.0; p],
            cxx: vec![0.0; p * p],
            y_mean: 0.0,
            cxy: vec![0.0; p],
            cyy: 0.0,
            min: vec![f64::INFINITY; p],
            max: vec![f64::NEG_INFINITY; p],
        }
    }

    pub fn p(&self) -> usize {
        self.mean.len()
    }

    /// Two-pass moments of rows `x` (row-major, `p` columns).
    pub fn from_rows(x: &[f64], y: &[f64], w: Option<&[f64]>, p: usize) -> Self {
        let count = y.len();
        let mut m = Self::empty(p);
        if count == 0 {
            return m;
        }
        let wt = |i: usize| w.map_or(1.0, |w| w[i]);
        let n: f64 = (0..count).map(wt).sum();
        for i in 0..count {
            let row = &x[i * p..(i + 1) * p];
            let wi = wt(i);
            for j in 0..p {
                m.mean[j] += wi * row[j];
                m.min[j] = m.min[j].min(row[j]);
                m.max[j] = m.max[j].max(row[j]);
            }
            m.y_mean += wi * y[i];
        }
        for v in &mut m.mean {
            *v /= n;
        }
        m.y_mean /= n;
        let mut d = vec![0.0; p];
        for i in 0..count {
            let row = &x[i * p..(i + 1) * p];
            let wi = wt(i);
            for j in 0..p {
                d[j] = row[j] - m.mean[j];
            }
            let dy = y[i] - m.y_mean;
            for a in 0..p {
                let wa = wi * d[a];
                if wa == 0.0 {
                    continue;
                }
                let crow = &mut m.cxx[a * p..(a + 1) * p];
                for b in a..p {
                    crow[b] += wa * d[b];
                }
                m.cxy[a] += wa * dy;
            }
            m.cyy += wi * dy * dy;
        }
        for a in 0..p {
            for b in 0..a {
                m.cxx[a * p + b] = m.cxx[b * p + a];
            }
        }
        m.count = count;
        m.n = n;
        m
    }

    /// Pool with another arm's moments (parallel-axis update).
    pub fn merge(&mut self, o: &ArmMoments) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = o.clone();
            return;
        }
        let p = self.p();
        let n = self.n + o.n;
        let f = self.n * o.n / n;
        let dx: Vec<f64> = (0..p).map(|j| o.mean[j] - self.mean[j]).collect();
        let dy = o.y_mean - self.y_mean;
        for a in 0..p {
            let fa = f * dx[a];
            let (row, orow) = (&mut self.cxx[a * p..(a + 1) * p], &o.cxx[a * p..(a + 1) * p]);
            for b in 0..p {
                row[b] += orow[b] + fa * dx[b];
            }
            self.cxy[a] += o.cxy[a] + fa * dy;
        }
        self.cyy += o.cyy + f * dy * dy;
        for j in 0..p {
            self.mean[j] += dx[j] * o.n / n;
            self.min[j] = self.min[j].min(o.min[j]);
            self.max[j] = self.max[j].max(o.max[j]);
        }
        self.y_mean += dy * o.n / n;
        self.count += o.count;
        self.n = n;
    }
}

/// Per-site inputs to surface fitting and extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMoments {
    pub key: SiteKey,
    /// Index 0 control, 1 treated.
    pub arms: [ArmMoments; 2],
    /// Mean covariate-term row over all of the site's records.
    pub xbar: Vec<f64>,
    pub n_records: usize,
}

impl SiteMoments {
    pub fn control_mean(&self) -> f64 {
        self.arms[0].y_mean
    }

    pub fn difference_in_means(&self) -> f64 {
        self.arms[1].y_mean - self.arms[0].y_mean
    }
}

fn subsample(site: &SiteData, cap: Option<usize>, seed: u64) -> Vec<&MicroRecord> {
    match cap {
        Some(cap) if site.records.len() > cap => {
            let mut rng = stream_rng(seed, tag_str(&site.key.to_string()));
            let mut idx = sample(&mut rng, site.records.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &site.records[i]).collect()
        }
        _ => site.records.iter().collect(),
    }
}

/// Moments of one site for `spec`. Fails if a required macro value is
/// missing.
pub fn site_moments(
    site: &SiteData,
    outcome: Outcome,
    spec: &SeriesSpec,
    opts: &SurfaceOptions,
) -> Result<SiteMoments> {
    let p = spec.n_covariate_terms();
    let records = subsample(site, opts.subsample_cap, opts.subsample_seed);
    if records.is_empty() {
        return Err(Error::insufficient(format!("site {} has no records", site.key)));
    }
    let mut base = vec![0.0; spec.columns.len()];
    let mut row = vec![0.0; p];
    let mut xbar = vec![0.0; p];
    let mut arms: [(Vec<f64>, Vec<f64>, Vec<f64>); 2] = Default::default();
    for r in &records {
        spec.base_values(r, &site.macro_, &mut base).ok_or_else(|| {
            Error::invalid(format!(
                "site {}: macro covariate required by the {} set is missing",
                site.key, spec.covariate_set
            ))
        })?;
        spec.covariate_row(&base, &mut row);
        for (s, v) in xbar.iter_mut().zip(&row) {
            *s += v;
        }
        if let Some(y) = r.outcome(outcome) {
            let arm = &mut arms[usize::from(r.treated)];
            arm.0.extend_from_slice(&row);
            arm.1.push(y);
            arm.2.push(r.sampling_weight);
        }
    }
    for s in &mut xbar {
        *s /= records.len() as f64;
    }
    let build = |(x, y, w): &(Vec<f64>, Vec<f64>, Vec<f64>)| {
        let w = opts.use_weights.then(|| {
            let total: f64 = w.iter().sum();
            let scale = if total > 0.0 { w.len() as f64 / total } else { 0.0 };
            w.iter().map(|v| v * scale).collect::<Vec<_>>()
        });
        ArmMoments::from_rows(x, y, w.as_deref(), p)
    };
    Ok(SiteMoments {
        key: site.key.clone(),
        arms: [build(&arms[0]), build(&arms[1])],
        xbar,
        n_records: records.len(),
    })
}

/// Per-site moments for one series specification, in evidence-base order.
#[derive(Debug, Clone)]
pub struct MomentCache {
    pub spec: Arc<SeriesSpec>,
    pub names: Arc<Vec<String>>,
    pub outcome: Outcome,
    pub sites: Vec<Option<SiteMoments>>,
    /// Sites without moments, with reasons.
    pub diagnostics: Vec<(SiteKey, String)>,
    pub options: SurfaceOptions,
}

impl MomentCache {
    pub fn build(
        eb: &EvidenceBase,
        outcome: Outcome,
        spec: SeriesSpec,
        opts: &SurfaceOptions,
    ) -> Self {
        let results: Vec<Result<SiteMoments>> = eb
            .sites()
            .par_iter()
            .map(|s| site_moments(s, outcome, &spec, opts))
            .collect();
        let mut sites = Vec::with_capacity(results.len());
        let mut diagnostics = Vec::new();
        for (s, r) in eb.sites().iter().zip(results) {
            match r {
                Ok(m) => sites.push(Some(m)),
                Err(e) => {
                    diagnostics.push((s.key.clone(), e.to_string()));
                    sites.push(None);
                }
            }
        }
        Self {
            names: Arc::new(spec.covariate_names().to_vec()),
            spec: Arc::new(spec),
            outcome,
            sites,
            diagnostics,
            options: opts.clone(),
        }
    }

    pub fn for_set(
        eb: &EvidenceBase,
        outcome: Outcome,
        schema: &SeriesSchema,
        set: CovariateSet,
        opts: &SurfaceOptions,
    ) -> Result<Self> {
        Ok(Self::build(eb, outcome, build_series(schema, 2, set)?, opts))
    }

    pub fn get(&self, i: usize) -> Option<&SiteMoments> {
        self.sites.get(i).and_then(Option::as_ref)
    }

    pub fn available(&self) -> Vec<usize> {
        (0..self.sites.len()).filter(|&i| self.sites[i].is_some()).collect()
    }

    /// Merge the given sites (repeats allowed) into per-arm moments.
    pub fn pooled(&self, sites: &[usize]) -> Result<[ArmMoments; 2]> {
        let p = self.spec.n_covariate_terms();
        let mut out = [ArmMoments::empty(p), ArmMoments::empty(p)];
        for &i in sites {
            let m = self
                .get(i)
                .ok_or_else(|| Error::invalid(format!("reference site {i} has no moments")))?;
            out[0].merge(&m.arms[0]);
            out[1].merge(&m.arms[1]);
        }
        Ok(out)
    }

    /// Fit both arm surfaces on the pooled `sites`.
    pub fn fit(&self, sites: &[usize]) -> Result<Surfaces> {
        if sites.is_empty() {
            return Err(Error::insufficient("empty reference pool"));
        }
        let [c, t] = self.pooled(sites)?;
        let mut training: Vec<SiteKey> = sites
            .iter()
            .filter_map(|&i| self.get(i).map(|m| m.key.clone()))
            .collect();
        training.sort();
        training.dedup();
        let training = Arc::new(training);
        Ok(Surfaces {
            control: fit_arm(&c, &self.names, self.spec.covariate_set, &self.options, training.clone())?,
            treated: fit_arm(&t, &self.names, self.spec.covariate_set, &self.options, training)?,
        })
    }
}

/// A fitted conditional-mean surface for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedSurface {
    pub covariate_set: CovariateSet,
    /// Covariate term names (intercept excluded).
    pub terms: Arc<Vec<String>>,
    /// Indices into `terms` with nonzero refit coefficients.
    pub selected: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Means and population SDs of every term in the training data; SD 0
    /// marks a term constant in the training data.
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Range of each term in the training data.
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub cp_value: Option<f64>,
    pub lambda: Option<f64>,
    pub sigma2_full: Option<f64>,
    pub rss: f64,
    /// Residual sum of squares of the intercept-only model.
    pub tss: f64,
    pub n: usize,
    /// Selected terms dropped as collinear in the refit.
    pub aliased: Vec<usize>,
    pub training_sites: Arc<Vec<SiteKey>>,
}

impl FittedSurface {
    /// Surface value at a term vector.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .selected
                .iter()
                .zip(&self.coefficients)
                .map(|(&j, &b)| b * x[j])
                .sum::<f64>()
    }

    pub fn n_params(&self) -> usize {
        1 + self.selected.len()
    }

    pub fn selected_names(&self) -> Vec<&str> {
        self.selected.iter().map(|&j| self.terms[j].as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surfaces {
    pub treated: FittedSurface,
    pub control: FittedSurface,
}

impl Surfaces {
    pub fn effect_at(&self, xbar: &[f64]) -> f64 {
        self.treated.predict(xbar) - self.control.predict(xbar)
    }

    pub fn y0_at(&self, xbar: &[f64]) -> f64 {
        self.control.predict(xbar)
    }

    /// Terms on which the target lies outside the reference support.
    pub fn support_warnings(&self, xbar: &[f64]) -> Vec<String> {
        let mut out = Vec::new();
        for s in [&self.control, &self.treated] {
            for (j, name) in s.terms.iter().enumerate() {
                let x = xbar[j];
                let tol = 1e-9 * (s.max[j] - s.min[j]).abs().max(1.0);
                if (x < s.min[j] - tol || x > s.max[j] + tol) && !out.contains(name) {
                    out.push(name.clone());
                }
            }
        }
        out
    }
}

/// Columns whose squared multiple correlation with earlier columns exceeds
/// `1 - COLLINEAR_SCREEN_TOL` are left out of the LASSO path.
pub const COLLINEAR_SCREEN_TOL: f64 = 1e-8;

/// LASSO/Cp selection and least-squares refit on accumulated moments.
pub fn fit_moments(m: &ArmMoments, names: &Arc<Vec<String>>, set: CovariateSet, opts: &SurfaceOptions) -> Result<FittedSurface> {
    fit_arm(m, names, set, opts, Arc::new(Vec::new()))
}

fn fit_arm(
    m: &ArmMoments,
    names: &Arc<Vec<String>>,
    set: CovariateSet,
    opts: &SurfaceOptions,
    training: Arc<Vec<SiteKey>>,
) -> Result<FittedSurface> {
    if m.count < 2 {
        return Err(Error::insufficient("arm has fewer than 2 records"));
    }
    let p = m.p();
    let n = m.n;
    let scales: Vec<f64> = (0..p)
        .map(|j| {
            let s = (m.cxx[j * p + j] / n).max(0.0).sqrt();
            if s <= 1e-10 * m.mean[j].abs().max(1.0) {
                0.0
            } else {
                s
            }
        })
        .collect();
    let cols: Vec<usize> = (0..p).filter(|&j| scales[j] > 0.0).collect();
    let q = cols.len();

    let mut cp_value = None;
    let mut lambda = None;
    let mut sigma2 = None;
    let support: Vec<usize> = match opts.selection {
        Selection::Saturated => cols.clone(),
        Selection::Lasso if q == 0 => Vec::new(),
        Selection::Lasso => {
            let mut gram = DenseMatrix::zeros(q, q);
            for (a, &ja) in cols.iter().enumerate() {
                for (b, &jb) in cols.iter().enumerate() {
                    gram[(a, b)] = m.cxx[ja * p + jb] / (scales[ja] * scales[jb]);
                }
            }
            // Coordinate descent stalls on (near-)exactly collinear columns,
            // e.g. macro terms outnumbering sites; screen them out first.
            let screen = GramCholesky::factor_with_tol(&gram, COLLINEAR_SCREEN_TOL);
            let (gram, cols) = if screen.aliased().is_empty() {
                (gram, cols.clone())
            } else {
                let keep = screen.kept().to_vec();
                (gram.submatrix(&keep), keep.iter().map(|&a| cols[a]).collect::<Vec<_>>())
            };
            let q = cols.len();
            let prob = GramProblem {
                gram,
                zty: cols.iter().map(|&j| m.cxy[j] / scales[j]).collect(),
                yty: m.cyy,
                n: m.count,
                penalized: vec![true; q],
            };
            let path = lasso_path_gram(&prob, &opts.lasso)?;
            let s2 = sigma2_full(&prob, Some(&path))?;
            if s2 > 0.0 {
                let sel = select_cp(&path, &prob.penalized, s2)?;
                cp_value = Some(sel.cp);
                lambda = Some(path.lambdas[sel.index]);
                sigma2 = Some(s2);
                sel.support.iter().map(|&a| cols[a]).collect()
            } else {
                // Exact fit: the smallest-λ support reproduces it.
                let last = path.len() - 1;
                lambda = Some(path.lambdas[last]);
                sigma2 = Some(0.0);
                path.support(last).iter().map(|&a| cols[a]).collect()
            }
        }
    };

    let k = support.len();
    let mut g = DenseMatrix::zeros(k, k);
    for (a, &ja) in support.iter().enumerate() {
        for (b, &jb) in support.iter().enumerate() {
            g[(a, b)] = m.cxx[ja * p + jb];
        }
    }
    let chol = GramCholesky::factor(&g);
    let rhs: Vec<f64> = support.iter().map(|&j| m.cxy[j]).collect();
    let beta = chol.solve_full(&rhs);
    let selected: Vec<usize> = chol.kept().iter().map(|&a| support[a]).collect();
    let aliased: Vec<usize> = chol.aliased().iter().map(|&a| support[a]).collect();
    let explained: f64 = selected.iter().zip(&beta).map(|(&j, &b)| b * m.cxy[j]).sum();
    let intercept = m.y_mean - selected.iter().zip(&beta).map(|(&j, &b)| b * m.mean[j]).sum::<f64>();
    if !intercept.is_finite() || beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("surface coefficients".into()));
    }
    Ok(FittedSurface {
        covariate_set: set,
        terms: names.clone(),
        selected,
        coefficients: beta,
        intercept,
        means: m.mean.clone(),
        scales,
        min: m.min.clone(),
        max: m.max.clone(),
        cp_value,
        lambda,
        sigma2_full: sigma2,
        rss: (m.cyy - explained).max(0.0),
        tss: m.cyy,
        n: m.count,
        aliased,
        training_sites: training,
    })
}

/// Fit both arm surfaces on the pooled reference sites of `eb`.
pub fn fit_surface(
    eb: &EvidenceBase,
    outcome: Outcome,
    schema: &SeriesSchema,
    set: CovariateSet,
    opts: &SurfaceOptions,
) -> Result<(Surfaces, MomentCache)> {
    let cache = MomentCache::for_set(eb, outcome, schema, set, opts)?;
    let avail = cache.available();
    if avail.is_empty() {
        return Err(Error::insufficient("no reference site has usable data"));
    }
    let surfaces = cache.fit(&avail)?;
    Ok((surfaces, cache))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub value: f64,
    /// Terms on which the target leaves the reference support.
    pub support_warnings: Vec<String>,
}

/// Mean covariate-term row over a target's records.
pub fn target_xbar(spec: &SeriesSpec, target: &SiteData) -> Result<Vec<f64>> {
    if target.records.is_empty() {
        return Err(Error::insufficient(format!("target {} has zero records", target.key)));
    }
    let p = spec.n_covariate_terms();
    let mut base = vec![0.0; spec.columns.len()];
    let mut row = vec![0.0; p];
    let mut xbar = vec![0.0; p];
    for r in &target.records {
        spec.base_values(r, &target.macro_, &mut base)
            .ok_or_else(|| Error::invalid(format!("target {}: missing macro covariate", target.key)))?;
        spec.covariate_row(&base, &mut row);
        for (s, v) in xbar.iter_mut().zip(&row) {
            *s += v;
        }
    }
    let n = target.records.len() as f64;
    Ok(xbar.into_iter().map(|s| s / n).collect())
}

/// `τ̂₁`: mean over target records of the treated-minus-control surface.
pub fn extrapolate_effect(spec: &SeriesSpec, surfaces: &Surfaces, target: &SiteData) -> Result<Extrapolation> {
    let x = target_xbar(spec, target)?;
    Ok(Extrapolation {
        value: surfaces.effect_at(&x),
        support_warnings: surfaces.support_warnings(&x),
    })
}

/// Mean over target records of the control surface.
pub fn extrapolate_y0(spec: &SeriesSpec, surfaces: &Surfaces, target: &SiteData) -> Result<Extrapolation> {
    let x = target_xbar(spec, target)?;
    Ok(Extrapolation {
        value: surfaces.y0_at(&x),
        support_warnings: surfaces.support_warnings(&x),
    })
}
