//! Evidence accumulation replay: for each census year, predict that year's
//! site effects from sites observed in earlier years only.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvidenceBase, Outcome, SiteKey};
use crate::error::{Error, Result};
use crate::evf::{dyadic_regression, standardized, DiffVar, DyadBuilder, DyadOptions};
use crate::extrapolate::MomentCache;
use crate::series::CovariateSet;
use crate::site_effects::{estimate_all, EffectEstimate};
use crate::stats::weighted_mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Inverse-variance mean of the pool's effects.
    Pooled,
    /// Reference with the smallest predicted |ζ| from a dyadic regression
    /// fit on pool-internal dyads.
    ModelSelected,
    /// Nearest site by great-circle distance, other countries only.
    NearestGeoXcountry,
    /// Nearest site by great-circle distance, own country allowed.
    NearestGeoOwn,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Pooled,
        Method::ModelSelected,
        Method::NearestGeoXcountry,
        Method::NearestGeoOwn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pooled => "pooled",
            Method::ModelSelected => "model_selected",
            Method::NearestGeoXcountry => "nearest_geo_xcountry",
            Method::NearestGeoOwn => "nearest_geo_own",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown cumulative method '{s}'")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CumulativeOptions {
    pub methods: Vec<Method>,
    /// Method 1 pools micro data into one surface fit under
    /// `micro_pool_set` instead of averaging site effects.
    pub micro_pool: bool,
    pub micro_pool_set: CovariateSet,
    /// Dyad construction for method 2. Micro adjustment is off by default so
    /// the selected reference's own estimate is used.
    pub dyads: DyadOptions,
    pub regressors: Vec<DiffVar>,
    pub weighted: bool,
}

impl Default for CumulativeOptions {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            micro_pool: false,
            micro_pool_set: CovariateSet::Micro,
            dyads: DyadOptions {
                micro_adjustment: false,
                ..DyadOptions::default()
            },
            regressors: DiffVar::ALL.to_vec(),
            weighted: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeRun {
    pub year: i32,
    pub target: SiteKey,
    pub method: Method,
    pub predicted: f64,
    pub actual: f64,
    pub error: f64,
    pub pool_size: usize,
    /// Selected reference for methods 2–4.
    pub reference: Option<SiteKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeResult {
    pub runs: Vec<CumulativeRun>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearSummary {
    pub year: i32,
    pub method: Method,
    pub n: usize,
    pub mean_abs_error: f64,
}

impl CumulativeResult {
    pub fn mean_abs_error(&self, method: Method) -> Option<f64> {
        let e: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.error.abs())
            .collect();
        (!e.is_empty()).then(|| e.iter().sum::<f64>() / e.len() as f64)
    }

    /// Mean |error| per (year, method), sorted by year then method.
    pub fn by_year(&self) -> Vec<YearSummary> {
        let mut keys: BTreeSet<(i32, Method)> = BTreeSet::new();
        for r in &self.runs {
            keys.insert((r.year, r.method));
        }
        keys.into_iter()
            .map(|(year, method)| {
                let e: Vec<f64> = self
                    .runs
                    .iter()
                    .filter(|r| r.year == year && r.method == method)
                    .map(|r| r.error.abs())
                    .collect();
                YearSummary {
                    year,
                    method,
                    n: e.len(),
                    mean_abs_error: e.iter().sum::<f64>() / e.len() as f64,
                }
            })
            .collect()
    }
}

pub fn run_cumulative(eb: &EvidenceBase, outcome: Outcome, opts: &CumulativeOptions) -> Result<CumulativeResult> {
    let est = estimate_all(eb, outcome);
    let mut r = run_cumulative_with_estimates(eb, outcome, &est.estimates, opts)?;
    r.diagnostics
        .extend(est.skipped.iter().map(|s| format!("site {}: {}", s.site, s.reason)));
    Ok(r)
}

/// `(distance, year, country)` ordering key for nearest-site choice.
fn nearer(a: (f64, &SiteKey), b: (f64, &SiteKey)) -> bool {
    a.0.total_cmp(&b.0)
        .then(a.1.year.cmp(&b.1.year))
        .then(a.1.country.cmp(&b.1.country))
        .is_lt()
}

pub fn run_cumulative_with_estimates(
    eb: &EvidenceBase,
    outcome: Outcome,
    estimates: &[EffectEstimate],
    opts: &CumulativeOptions,
) -> Result<CumulativeResult> {
    let years: BTreeSet<i32> = eb.sites().iter().map(|s| s.key.year).collect();
    if years.len() < 2 {
        return Err(Error::insufficient("cumulative replay needs sites from at least 2 years"));
    }
    let builder = DyadBuilder::new(eb, outcome, estimates, &opts.dyads)?;
    let pool_cache = if opts.micro_pool && opts.methods.contains(&Method::Pooled) {
        Some(MomentCache::for_set(
            eb,
            outcome,
            &opts.dyads.schema,
            opts.micro_pool_set,
            &opts.dyads.surface,
        )?)
    } else {
        None
    };
    let per_year: Vec<(Vec<CumulativeRun>, Vec<String>)> = years
        .iter()
        .copied()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&year| year_runs(&builder, pool_cache.as_ref(), year, opts))
        .collect();
    let mut runs = Vec::new();
    let mut diagnostics = builder.diagnostics.clone();
    for (r, d) in per_year {
        runs.extend(r);
        diagnostics.extend(d);
    }
    Ok(CumulativeResult { runs, diagnostics })
}

fn year_runs(
    b: &DyadBuilder,
    pool_cache: Option<&MomentCache>,
    year: i32,
    opts: &CumulativeOptions,
) -> (Vec<CumulativeRun>, Vec<String>) {
    let mut runs = Vec::new();
    let mut diag = Vec::new();
    let has_est = |i: usize| b.estimates[i].is_some();
    let pool: Vec<usize> = (0..b.len()).filter(|&i| b.keys[i].year < year && has_est(i)).collect();
    let targets: Vec<usize> = (0..b.len()).filter(|&i| b.keys[i].year == year && has_est(i)).collect();
    if pool.is_empty() || targets.is_empty() {
        return (runs, diag);
    }
    let est = |i: usize| b.estimates[i].as_ref().expect("filtered");

    let model = if opts.methods.contains(&Method::ModelSelected) {
        let in_pool = |i: usize| b.keys[i].year < year && has_est(i);
        let set = b.build(|r, t| in_pool(r) && in_pool(t), false, false, None);
        match dyadic_regression(&set, &opts.regressors, opts.weighted) {
            Ok(reg) => {
                let idx: Vec<usize> = opts
                    .regressors
                    .iter()
                    .map(|&v| set.var_index(v).expect("regressor in set"))
                    .collect();
                Some((reg, idx, set.scales.clone(), set.vars.clone()))
            }
            Err(e) => {
                diag.push(format!("year {year}: model_selected: {e}"));
                None
            }
        }
    } else {
        None
    };

    for &t in &targets {
        let actual = est(t).tau;
        let mut push = |method: Method, predicted: f64, reference: Option<usize>| {
            runs.push(CumulativeRun {
                year,
                target: b.keys[t].clone(),
                method,
                predicted,
                actual,
                error: predicted - actual,
                pool_size: pool.len(),
                reference: reference.map(|r| b.keys[r].clone()),
            });
        };
        for &m in &opts.methods {
            match m {
                Method::Pooled => {
                    if let Some(cache) = pool_cache {
                        let refs: Vec<usize> = pool.iter().copied().filter(|&i| cache.get(i).is_some()).collect();
                        match (cache.fit(&refs), cache.get(t)) {
                            (Ok(s), Some(tm)) => push(m, s.effect_at(&tm.xbar), None),
                            (Err(e), _) => diag.push(format!("{} pooled: {e}", b.keys[t])),
                            (_, None) => diag.push(format!("{} pooled: no micro data", b.keys[t])),
                        }
                    } else {
                        let tau: Vec<f64> = pool.iter().map(|&i| est(i).tau).collect();
                        let w: Vec<f64> = pool.iter().map(|&i| est(i).weight()).collect();
                        push(m, weighted_mean(&tau, &w), None);
                    }
                }
                Method::ModelSelected => {
                    let Some((reg, idx, scales, vars)) = &model else {
                        continue;
                    };
                    let mut best: Option<(f64, usize, f64)> = None;
                    for &r in &pool {
                        let d = match b.dyad(r, t) {
                            Ok(d) => d,
                            Err(msg) => {
                                diag.push(msg);
                                continue;
                            }
                        };
                        let z = standardized(vars, &d.raw, scales);
                        let pred = reg.coefficients[0]
                            + idx
                                .iter()
                                .enumerate()
                                .map(|(j, &k)| reg.coefficients[j + 1] * z[k])
                                .sum::<f64>();
                        let better = best.is_none_or(|(bz, br, _)| {
                            nearer((pred.abs(), &b.keys[r]), (bz, &b.keys[br]))
                        });
                        if better {
                            best = Some((pred.abs(), r, d.tau_hat));
                        }
                    }
                    match best {
                        Some((_, r, tau_hat)) => push(m, tau_hat, Some(r)),
                        None => diag.push(format!("{} model_selected: no eligible reference", b.keys[t])),
                    }
                }
                Method::NearestGeoXcountry | Method::NearestGeoOwn => {
                    let own = m == Method::NearestGeoOwn;
                    let mut best: Option<(f64, usize)> = None;
                    for &r in &pool {
                        if !own && b.keys[r].country == b.keys[t].country {
                            continue;
                        }
                        let Some(dist) = b.profiles[r].distance_km(&b.profiles[t]) else {
                            continue;
                        };
                        if best.is_none_or(|(bd, br)| nearer((dist, &b.keys[r]), (bd, &b.keys[br]))) {
                            best = Some((dist, r));
                        }
                    }
                    match best {
                        Some((_, r)) => push(m, est(r).tau, Some(r)),
                        None => diag.push(format!("{} {m}: no eligible reference", b.keys[t])),
                    }
                }
            }
        }
    }
    (runs, diag)
}
