use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use exval::cumulative::Method;
use exval::evf::{DiffVar, PointwiseSe};
use exval::extrapolate::Selection;
use exval::lasso::LassoOptions;
use exval::siteselect::{Objective, MACRO_VARS};
use exval::synth::DgpConfig;
use exval::{CovariateSet, Outcome, SeriesSchema, SiteKey};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Command;

/// Name accepted by `summaries` for the table compiled into the binary.
pub const BUNDLED: &str = "bundled";

/// Effective run configuration. Read from a JSON file, then overridden by
/// flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub micro: Option<PathBuf>,
    #[serde(rename = "macro")]
    pub macro_: Option<PathBuf>,
    /// Site summary CSV, or `"bundled"`.
    pub summaries: Option<String>,
    pub output_dir: PathBuf,

    pub outcome: Outcome,
    pub covariate_set: CovariateSet,
    pub micro_covariates: Vec<String>,
    pub macro_covariates: Vec<String>,
    pub use_weights: bool,
    pub self_dyads: bool,
    pub selection: Selection,
    pub subsample_cap: Option<usize>,
    pub lasso: LassoOptions,
    pub restrict: bool,
    pub skip_invalid: bool,

    pub seed: u64,
    pub alpha: f64,
    pub c_star: Option<f64>,
    pub mc_reps: usize,
    pub bootstrap_reps: usize,
    pub variance_set: Option<CovariateSet>,
    pub variance_order: usize,

    pub target: Option<String>,
    pub first_site: Option<String>,
    pub objective: Objective,
    pub ranking_covariates: Vec<DiffVar>,
    pub regularize: bool,

    pub evf_covariates: Vec<DiffVar>,
    pub bandwidth: Option<f64>,
    pub grid_points: usize,
    pub evf_weighted: bool,
    pub pointwise_se: PointwiseSe,
    pub micro_adjustment: bool,

    pub methods: Vec<Method>,
    pub micro_pool: bool,

    /// `homogeneous`, `macro_driven` or `monotone`; replaces `simulate`.
    pub preset: Option<String>,
    /// Generator settings. Its `seed` is replaced by the run seed.
    pub simulate: DgpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            micro: None,
            macro_: None,
            summaries: None,
            output_dir: PathBuf::from("output"),
            outcome: Outcome::MoreKids,
            covariate_set: CovariateSet::Both,
            micro_covariates: exval::series::DEFAULT_MICRO.iter().map(|s| s.to_string()).collect(),
            macro_covariates: exval::series::DEFAULT_MACRO.iter().map(|s| s.to_string()).collect(),
            use_weights: false,
            self_dyads: false,
            selection: Selection::Lasso,
            subsample_cap: Some(50_000),
            lasso: LassoOptions::default(),
            restrict: false,
            skip_invalid: false,
            seed: 0,
            alpha: 0.05,
            c_star: None,
            mc_reps: 1000,
            bootstrap_reps: 200,
            variance_set: None,
            variance_order: 1,
            target: None,
            first_site: None,
            objective: Objective::MinError,
            ranking_covariates: MACRO_VARS.to_vec(),
            regularize: false,
            evf_covariates: vec![DiffVar::EducOwn, DiffVar::LogGdp, DiffVar::Year, DiffVar::Distance],
            bandwidth: None,
            grid_points: 101,
            evf_weighted: true,
            pointwise_se: PointwiseSe::Dyadic,
            micro_adjustment: true,
            methods: Method::ALL.to_vec(),
            micro_pool: false,
            preset: None,
            simulate: DgpConfig::default(),
        }
    }
}

/// Flags that override config-file keys. Every flag is global so it may
/// follow the subcommand.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Micro-data CSV.
    #[arg(long, global = true)]
    pub micro: Option<PathBuf>,
    /// Macro-covariate CSV.
    #[arg(long = "macro", global = true)]
    pub macro_: Option<PathBuf>,
    /// Site summary CSV or `bundled`.
    #[arg(long, global = true)]
    pub summaries: Option<String>,
    #[arg(long, short = 'o', global = true)]
    pub output_dir: Option<PathBuf>,
    /// `more_kids` or `econ_active`.
    #[arg(long, global = true)]
    pub outcome: Option<String>,
    /// `none`, `micro`, `macro` or `both`.
    #[arg(long, global = true)]
    pub covariate_set: Option<String>,
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub use_weights: Option<bool>,
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub self_dyads: Option<bool>,
    /// `lasso` or `saturated`.
    #[arg(long, global = true)]
    pub selection: Option<String>,
    /// Per-site record cap; 0 disables.
    #[arg(long, global = true)]
    pub subsample_cap: Option<usize>,
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub restrict: Option<bool>,
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub skip_invalid: Option<bool>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long = "c-star", global = true, allow_hyphen_values = true)]
    pub c_star: Option<f64>,
    #[arg(long, global = true)]
    pub mc_reps: Option<usize>,
    #[arg(long, global = true)]
    pub bootstrap_reps: Option<usize>,
    /// Site as COUNTRY-YEAR.
    #[arg(long, global = true)]
    pub target: Option<String>,
    /// Base site for second-site selection, as COUNTRY-YEAR.
    #[arg(long, global = true)]
    pub first_site: Option<String>,
    /// `min_error` or `max_distance`.
    #[arg(long, global = true)]
    pub objective: Option<String>,
    /// Comma-separated difference variables.
    #[arg(long, global = true, value_delimiter = ',')]
    pub evf_covariates: Option<Vec<String>>,
    /// Fixed EVF bandwidth; omit for the rule-of-thumb.
    #[arg(long, global = true)]
    pub bandwidth: Option<f64>,
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub micro_adjustment: Option<bool>,
    /// Generator preset for `simulate`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub n_sites: Option<usize>,
    #[arg(long, global = true)]
    pub records_per_site: Option<usize>,
    #[arg(long, global = true)]
    pub intrinsic_sd: Option<f64>,
    #[arg(long, global = true)]
    pub c1_shift: Option<f64>,
}

fn parse_named<T: DeserializeOwned>(what: &str, s: &str, problems: &mut Vec<String>) -> Option<T> {
    match serde_json::from_value(serde_json::Value::String(s.trim().to_string())) {
        Ok(v) => Some(v),
        Err(_) => {
            problems.push(format!("{what}: unrecognized value `{s}`"));
            None
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, Vec<String>> {
        let text = std::fs::read_to_string(path).map_err(|e| vec![format!("config {}: {e}", path.display())])?;
        serde_json::from_str(&text).map_err(|e| vec![format!("config {}: {e}", path.display())])
    }

    /// Apply flags; unparseable values are appended to `problems`.
    pub fn apply(&mut self, o: Overrides, problems: &mut Vec<String>) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = o.$field {
                    self.$field = v;
                }
            };
            ($field:ident, some) => {
                if let Some(v) = o.$field {
                    self.$field = Some(v);
                }
            };
            ($field:ident, named $what:literal) => {
                if let Some(v) = o.$field.as_deref() {
                    if let Some(x) = parse_named($what, v, problems) {
                        self.$field = x;
                    }
                }
            };
        }
        set!(micro, some);
        set!(macro_, some);
        set!(summaries, some);
        set!(output_dir);
        set!(outcome, named "outcome");
        set!(covariate_set, named "covariate_set");
        set!(use_weights);
        set!(self_dyads);
        set!(selection, named "selection");
        if let Some(cap) = o.subsample_cap {
            self.subsample_cap = (cap > 0).then_some(cap);
        }
        set!(restrict);
        set!(skip_invalid);
        set!(seed);
        set!(alpha);
        set!(c_star, some);
        set!(mc_reps);
        set!(bootstrap_reps);
        set!(target, some);
        set!(first_site, some);
        set!(objective, named "objective");
        if let Some(vs) = o.evf_covariates {
            let parsed: Vec<Option<DiffVar>> = vs.iter().map(|v| parse_named("evf_covariates", v, problems)).collect();
            if parsed.iter().all(Option::is_some) {
                self.evf_covariates = parsed.into_iter().flatten().collect();
            }
        }
        set!(bandwidth, some);
        set!(micro_adjustment);
        set!(preset, some);
        if let Some(v) = o.n_sites {
            self.simulate.n_sites = v;
        }
        if let Some(v) = o.records_per_site {
            self.simulate.records_per_site = v;
        }
        if let Some(v) = o.intrinsic_sd {
            self.simulate.intrinsic_sd = v;
        }
        if let Some(v) = o.c1_shift {
            self.simulate.c1_violation_shift = v;
        }
    }

    /// Generator settings with the preset applied and the run seed in place.
    pub fn dgp(&self) -> DgpConfig {
        let s = &self.simulate;
        let mut cfg = match self.preset.as_deref() {
            Some("macro_driven") => DgpConfig::macro_driven(s.n_sites, s.records_per_site, s.intrinsic_sd, self.seed),
            Some("monotone") => DgpConfig::monotone(s.n_sites, s.records_per_site, self.seed),
            Some("homogeneous") => DgpConfig {
                n_sites: s.n_sites,
                records_per_site: s.records_per_site,
                ..DgpConfig::default()
            },
            _ => s.clone(),
        };
        if self.preset.is_some() {
            cfg.c1_violation_shift = s.c1_violation_shift;
        }
        cfg.seed = self.seed;
        cfg
    }

    pub fn schema(&self) -> exval::Result<SeriesSchema> {
        let m: Vec<&str> = self.micro_covariates.iter().map(String::as_str).collect();
        let a: Vec<&str> = self.macro_covariates.iter().map(String::as_str).collect();
        SeriesSchema::from_names(&m, &a)
    }

    pub fn target_key(&self) -> Option<SiteKey> {
        self.target.as_deref().and_then(|s| SiteKey::from_str(s).ok())
    }

    pub fn first_site_key(&self) -> Option<SiteKey> {
        self.first_site.as_deref().and_then(|s| SiteKey::from_str(s).ok())
    }

    /// Every problem with this configuration for `cmd`.
    pub fn validate(&self, cmd: Command) -> Vec<String> {
        let mut p = Vec::new();
        let needs_micro = !matches!(cmd, Command::Simulate | Command::Heterogeneity);
        if needs_micro || (cmd == Command::Heterogeneity && self.summaries.is_none()) {
            if self.micro.is_none() {
                p.push("`micro` is required".to_string());
            }
            if self.macro_.is_none() {
                p.push("`macro` is required".to_string());
            }
        }
        for (name, path) in [("micro", &self.micro), ("macro", &self.macro_)] {
            if let Some(path) = path {
                if cmd != Command::Simulate && !path.is_file() {
                    p.push(format!("`{name}` file {} does not exist", path.display()));
                }
            }
        }
        if let Some(s) = &self.summaries {
            if s != BUNDLED && !Path::new(s).is_file() {
                p.push(format!("`summaries` file {s} does not exist"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            p.push(format!("`alpha` = {} must lie in (0, 1)", self.alpha));
        }
        if self.mc_reps < exval::heterogeneity::MIN_MC_REPS {
            p.push(format!(
                "`mc_reps` = {} below minimum {}",
                self.mc_reps,
                exval::heterogeneity::MIN_MC_REPS
            ));
        }
        if self.bootstrap_reps < 2 {
            p.push("`bootstrap_reps` must be at least 2".into());
        }
        if !(1..=2).contains(&self.variance_order) {
            p.push("`variance_order` must be 1 or 2".into());
        }
        if let Some(cap) = self.subsample_cap {
            if cap < 2 {
                p.push("`subsample_cap` must be at least 2 (0 disables)".into());
            }
        }
        let l = &self.lasso;
        if l.n_lambda < 2 {
            p.push("`lasso.n_lambda` must be at least 2".into());
        }
        if !(l.min_ratio > 0.0 && l.min_ratio < 1.0) {
            p.push("`lasso.min_ratio` must lie in (0, 1)".into());
        }
        if !(l.tol > 0.0 && l.tol.is_finite()) {
            p.push("`lasso.tol` must be positive".into());
        }
        if l.max_sweeps == 0 {
            p.push("`lasso.max_sweeps` must be positive".into());
        }
        if let Err(e) = self.schema() {
            p.push(format!("covariates: {e}"));
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                p.push(format!("`bandwidth` = {h} must be positive"));
            }
        }
        if self.grid_points < 2 {
            p.push("`grid_points` must be at least 2".into());
        }
        if cmd == Command::Evf && self.evf_covariates.is_empty() {
            p.push("`evf_covariates` is empty".into());
        }
        if cmd == Command::SiteSelect && self.ranking_covariates.is_empty() {
            p.push("`ranking_covariates` is empty".into());
        }
        if cmd == Command::Cumulative && self.methods.is_empty() {
            p.push("`methods` is empty".into());
        }
        for (name, v) in [("target", &self.target), ("first_site", &self.first_site)] {
            if let Some(s) = v {
                if let Err(e) = SiteKey::from_str(s) {
                    p.push(format!("`{name}`: {e}"));
                }
            }
        }
        if cmd == Command::Decide {
            if self.target.is_none() {
                p.push("`target` is required for decide".into());
            }
            match self.c_star {
                None => p.push("`c_star` is required for decide".into()),
                Some(c) if !c.is_finite() => p.push("`c_star` must be finite".into()),
                _ => {}
            }
        }
        if cmd == Command::Simulate {
            if let Some(pr) = &self.preset {
                if !["homogeneous", "macro_driven", "monotone"].contains(&pr.as_str()) {
                    p.push(format!("`preset` `{pr}` is not homogeneous, macro_driven or monotone"));
                }
            }
            if let Err(e) = self.dgp().validate() {
                p.push(format!("simulate: {e}"));
            }
        }
        p
    }
}
