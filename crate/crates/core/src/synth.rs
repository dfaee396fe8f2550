//! Seeded synthetic evidence bases with known effect surfaces.
//!
//! # Generating process
//!
//! Each country `g` draws a standardized macro vector
//! `z_g = (gdp, lfp, lat, lon) ~ N(0, Σ)`. Site `j` of country `g` adds
//! `drift · j` to the GDP component plus `N(0, site_macro_sd²)` noise, and
//! reports macro covariates as affine maps of `z` (log GDP per capita
//! `8 + 1·gdp`, women's LFP `0.45 + 0.1·lfp` clipped to `[0.01, 0.99]`,
//! latitude `10 + 25·lat`, longitude `60·lon`, both clipped to their valid
//! ranges). Total fertility is `4 − 0.8·gdp + 0.3·e₁` floored at 1.1 and
//! the sex-ratio imbalance `0.02·(0.5·lfp + √0.75·e₂)`, with site-level
//! standard normal `e₁, e₂` drawn after the records. Legal origin is drawn
//! once per country.
//!
//! Records: age uniform on 21–35, own education from a latent normal
//! shifted by `educ_gdp_shift · gdp` cut at (−0.5, 0.5, 1.5), spouse
//! education correlated with own (missing with `spouse_missing_prob`),
//! age at first birth with the oldest child under 18, treatment by a fair
//! coin (C0 holds by construction).
//!
//! With `v = z` and `w = ((age − 28)/4.32, educ_own − 2.5)`, the control
//! mean is `μ₀ = b₀ + g'v + h'w` and the effect is
//! `τ(v, w) = a₀ + a'v + b'w + w'Cv`. Site `c` adds an effect shock
//! `ε_c = σ_ζ (√s·u_g + √(1−s)·e_c)` with `s = country_share`. When
//! `c1_violation_shift` is nonzero, every odd-indexed site (the target
//! population, `D = 1`) gets that shift added to both potential outcomes;
//! no covariate records it.
//!
//! Binary outcomes compare one uniform draw per record against the clipped
//! means `[0.01, 0.99]` of both potential outcomes, so `Y(1) − Y(0)` is
//! monotone in the means. Continuous outcomes are the means plus a shared
//! `N(0, outcome_noise_sd²)` draw.
//!
//! # Randomness
//!
//! ChaCha8 streams: site `c` uses stream `c + 1` of `seed`; country `g` uses
//! stream `g` of `derive_seed(seed, 1)`. Output does not depend on thread
//! scheduling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    Education, EvidenceBase, MacroCovariates, MaritalStatus, MicroRecord, SiteData, SiteKey,
};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, GramCholesky};
use crate::rng::{derive_seed, stream_rng, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    #[default]
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacroDistribution {
    /// Covariance of the standardized (gdp, lfp, lat, lon) vector.
    pub covariance: [[f64; 4]; 4],
    /// Per-site macro noise around the country draw.
    pub site_macro_sd: f64,
    /// Added to the GDP component per within-country site index.
    pub gdp_drift: f64,
    pub prob_british: f64,
    pub prob_french: f64,
}

impl Default for MacroDistribution {
    fn default() -> Self {
        Self {
            covariance: [
                [1.0, 0.3, 0.2, 0.0],
                [0.3, 1.0, 0.0, 0.0],
                [0.2, 0.0, 1.0, 0.1],
                [0.0, 0.0, 0.1, 1.0],
            ],
            site_macro_sd: 0.1,
            gdp_drift: 0.2,
            prob_british: 0.3,
            prob_french: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroDistribution {
    pub educ_gdp_shift: f64,
    pub spouse_educ_corr: f64,
    pub spouse_missing_prob: f64,
    /// Share of records drawn unmarried (removed by the sample
    /// restrictions).
    pub unmarried_prob: f64,
}

impl Default for MicroDistribution {
    fn default() -> Self {
        Self {
            educ_gdp_shift: 0.5,
            spouse_educ_corr: 0.6,
            spouse_missing_prob: 0.15,
            unmarried_prob: 0.0,
        }
    }
}

/// `τ(v, w) = a₀ + a'v + b'w + w'Cv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectFunction {
    pub a0: f64,
    pub a: [f64; 4],
    pub b: [f64; 2],
    pub c: [[f64; 4]; 2],
}

impl Default for EffectFunction {
    fn default() -> Self {
        Self {
            a0: 0.05,
            a: [0.0; 4],
            b: [0.0; 2],
            c: [[0.0; 4]; 2],
        }
    }
}

impl EffectFunction {
    pub fn eval(&self, v: &[f64; 4], w: &[f64; 2]) -> f64 {
        let mut t = self.a0;
        for k in 0..4 {
            t += self.a[k] * v[k];
        }
        for k in 0..2 {
            t += self.b[k] * w[k];
            for l in 0..4 {
                t += w[k] * self.c[k][l] * v[l];
            }
        }
        t
    }
}

/// `μ₀ = b₀ + g'v + h'w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineFunction {
    pub b0: f64,
    pub g: [f64; 4],
    pub h: [f64; 2],
}

impl Default for BaselineFunction {
    fn default() -> Self {
        Self {
            b0: 0.5,
            g: [-0.08, 0.0, 0.0, 0.0],
            h: [0.05, -0.03],
        }
    }
}

impl BaselineFunction {
    pub fn eval(&self, v: &[f64; 4], w: &[f64; 2]) -> f64 {
        self.b0 + (0..4).map(|k| self.g[k] * v[k]).sum::<f64>() + self.h[0] * w[0] + self.h[1] * w[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n_sites: usize,
    pub records_per_site: usize,
    /// Sites per country; countries are `ceil(n_sites / sites_per_country)`.
    pub sites_per_country: usize,
    pub first_year: i32,
    pub year_step: i32,
    pub macro_distribution: MacroDistribution,
    pub micro_distribution: MicroDistribution,
    pub effect_function: EffectFunction,
    pub baseline: BaselineFunction,
    pub intrinsic_sd: f64,
    /// Share of the effect shock variance common to a country.
    pub country_share: f64,
    pub outcome_noise_sd: f64,
    pub outcome_kind: OutcomeKind,
    pub c1_violation_shift: f64,
    /// Constant effect on the second outcome (economic activity).
    pub econ_effect: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_sites: 20,
            records_per_site: 2_000,
            sites_per_country: 1,
            first_year: 1960,
            year_step: 10,
            macro_distribution: MacroDistribution::default(),
            micro_distribution: MicroDistribution::default(),
            effect_function: EffectFunction::default(),
            baseline: BaselineFunction::default(),
            intrinsic_sd: 0.0,
            country_share: 0.0,
            outcome_noise_sd: 0.0,
            outcome_kind: OutcomeKind::Binary,
            c1_violation_shift: 0.0,
            econ_effect: -0.005,
            seed: 1,
        }
    }
}

impl DgpConfig {
    /// Effects driven by GDP and LFP with mild micro heterogeneity.
    pub fn macro_driven(n_sites: usize, records_per_site: usize, intrinsic_sd: f64, seed: u64) -> Self {
        Self {
            n_sites,
            records_per_site,
            effect_function: EffectFunction {
                a0: 0.06,
                a: [-0.03, 0.015, 0.0, 0.0],
                b: [0.004, 0.0],
                c: [[0.0; 4]; 2],
            },
            intrinsic_sd,
            seed,
            ..Self::default()
        }
    }

    /// Effects strictly increasing in GDP alone, no intrinsic variation.
    pub fn monotone(n_sites: usize, records_per_site: usize, seed: u64) -> Self {
        Self {
            n_sites,
            records_per_site,
            effect_function: EffectFunction {
                a0: 0.06,
                a: [0.03, 0.0, 0.0, 0.0],
                ..EffectFunction::default()
            },
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_sites < 2 {
            problems.push("n_sites must be at least 2".to_string());
        }
        if self.records_per_site < 2 {
            problems.push("records_per_site must be at least 2".to_string());
        }
        if self.sites_per_country == 0 {
            problems.push("sites_per_country must be positive".to_string());
        }
        if self.year_step <= 0 {
            problems.push("year_step must be positive".to_string());
        }
        for (name, v) in [
            ("intrinsic_sd", self.intrinsic_sd),
            ("outcome_noise_sd", self.outcome_noise_sd),
            ("site_macro_sd", self.macro_distribution.site_macro_sd),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                problems.push(format!("{name} must be finite and nonnegative"));
            }
        }
        if !(0.0..=1.0).contains(&self.country_share) {
            problems.push("country_share must lie in [0, 1]".into());
        }
        let md = &self.micro_distribution;
        for (name, v) in [
            ("spouse_missing_prob", md.spouse_missing_prob),
            ("unmarried_prob", md.unmarried_prob),
            ("prob_british", self.macro_distribution.prob_british),
            ("prob_french", self.macro_distribution.prob_french),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.macro_distribution.prob_british + self.macro_distribution.prob_french > 1.0 {
            problems.push("legal-origin probabilities sum above 1".into());
        }
        if !(-1.0..=1.0).contains(&md.spouse_educ_corr) {
            problems.push("spouse_educ_corr must lie in [-1, 1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}

/// Known per-site quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    pub key: SiteKey,
    pub country_index: usize,
    /// Standardized macro vector `v`.
    pub v: [f64; 4],
    /// Mean over records of `τ(v, w)` plus `ε_c`.
    pub tau: f64,
    pub epsilon: f64,
    /// Mean of `E[Y(0)]` over records, including any shift, before
    /// clipping.
    pub y0_mean: f64,
    pub shift: f64,
    /// Member of the target population (`D = 1`) for the location test.
    pub target_population: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub config: DgpConfig,
    pub sites: Vec<SiteTruth>,
}

impl Oracle {
    pub fn truth(&self, key: &SiteKey) -> Option<&SiteTruth> {
        self.sites.iter().find(|s| &s.key == key)
    }
}

pub fn country_code(g: usize) -> String {
    format!("C{g:03}")
}

struct Country {
    z: [f64; 4],
    shock: f64,
    british: bool,
    french: bool,
}

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn generate(cfg: &DgpConfig) -> Result<(EvidenceBase, Oracle)> {
    cfg.validate()?;
    let md = &cfg.macro_distribution;
    let cov = DenseMatrix::from_rows(&md.covariance.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
    GramCholesky::strict(&cov).map_err(|_| Error::invalid("macro covariance is not positive definite"))?;
    let lower = cholesky_lower(&cov);
    let n_countries = cfg.n_sites.div_ceil(cfg.sites_per_country);
    let country_seed = derive_seed(cfg.seed, 1);
    let countries: Vec<Country> = (0..n_countries)
        .map(|g| {
            let mut rng = stream_rng(country_seed, g as u64);
            let e: [f64; 4] = std::array::from_fn(|_| normal(&mut rng));
            let mut z = [0.0; 4];
            for a in 0..4 {
                for b in 0..=a {
                    z[a] += lower[a][b] * e[b];
                }
            }
            let shock = normal(&mut rng);
            let u: f64 = rng.random();
            Country {
                z,
                shock,
                british: u < md.prob_british,
                french: u >= md.prob_british && u < md.prob_british + md.prob_french,
            }
        })
        .collect();

    let sites: Vec<(SiteData, SiteTruth)> = (0..cfg.n_sites)
        .into_par_iter()
        .map(|c| generate_site(cfg, c, &countries))
        .collect();
    let (data, truth): (Vec<_>, Vec<_>) = sites.into_iter().unzip();
    let eb = EvidenceBase::new(data, None)?;
    let mut truth = truth;
    truth.sort_by(|a, b| a.key.cmp(&b.key));
    Ok((
        eb,
        Oracle {
            config: cfg.clone(),
            sites: truth,
        },
    ))
}

fn cholesky_lower(cov: &DenseMatrix<f64>) -> [[f64; 4]; 4] {
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let s: f64 = cov[(i, j)] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = if i == j { s.max(0.0).sqrt() } else { s / l[j][j] };
        }
    }
    l
}

fn educ_level(latent: f64) -> u8 {
    1 + u8::from(latent > -0.5) + u8::from(latent > 0.5) + u8::from(latent > 1.5)
}

fn generate_site(cfg: &DgpConfig, c: usize, countries: &[Country]) -> (SiteData, SiteTruth) {
    let g = c / cfg.sites_per_country;
    let j = c % cfg.sites_per_country;
    let country = &countries[g];
    let md = &cfg.macro_distribution;
    let mi = &cfg.micro_distribution;
    let mut rng = stream_rng(cfg.seed, c as u64 + 1);

    let mut v = country.z;
    v[0] += md.gdp_drift * j as f64;
    for (k, vk) in v.iter_mut().enumerate() {
        // Location is fixed within a country.
        if k < 2 {
            *vk += md.site_macro_sd * normal(&mut rng);
        }
    }
    let epsilon = cfg.intrinsic_sd
        * (cfg.country_share.sqrt() * country.shock + (1.0 - cfg.country_share).sqrt() * normal(&mut rng));
    let target_population = c % 2 == 1;
    let shift = if target_population { cfg.c1_violation_shift } else { 0.0 };
    let year = cfg.first_year + j as i32 * cfg.year_step + (g as i32 % cfg.year_step);
    let key = SiteKey::new(country_code(g), year);

    let mut records = Vec::with_capacity(cfg.records_per_site);
    let (mut tau_sum, mut y0_sum, mut educ_sum) = (0.0, 0.0, 0.0);
    let rho = mi.spouse_educ_corr;
    for _ in 0..cfg.records_per_site {
        let age: u16 = rng.random_range(21..=35);
        let own_latent = normal(&mut rng) + mi.educ_gdp_shift * v[0];
        let own = educ_level(own_latent);
        let sp_draw = normal(&mut rng);
        let spouse = if rng.random::<f64>() < mi.spouse_missing_prob {
            None
        } else {
            Some(educ_level(rho * own_latent + (1.0 - rho * rho).sqrt() * sp_draw))
        };
        let afb: u16 = rng.random_range(age.saturating_sub(17).max(15)..=age - 2);
        let married = rng.random::<f64>() >= mi.unmarried_prob;
        let treated = rng.random::<bool>();
        let u: f64 = rng.random();
        let u_econ: f64 = rng.random();
        let noise = cfg.outcome_noise_sd * normal(&mut rng);

        let w = [(f64::from(age) - 28.0) / 4.32, f64::from(own) - 2.5];
        let tau_i = cfg.effect_function.eval(&v, &w);
        let mu0 = cfg.baseline.eval(&v, &w) + shift;
        let mu1 = mu0 + tau_i + epsilon;
        tau_sum += tau_i;
        y0_sum += mu0;
        educ_sum += f64::from(own);

        let (y0, y1) = match cfg.outcome_kind {
            OutcomeKind::Binary => {
                let clip = |m: f64| (m + noise).clamp(0.01, 0.99);
                (u < clip(mu0), u < clip(mu1))
            }
            OutcomeKind::Continuous => (mu0 + noise > 0.5, mu1 + noise > 0.5),
        };
        let econ_mean = (0.45 + 0.1 * v[1]).clamp(0.01, 0.99);
        let econ = u_econ < (econ_mean + if treated { cfg.econ_effect } else { 0.0 }).clamp(0.01, 0.99);
        let mut record = MicroRecord {
            outcome_more_kids: if treated { y1 } else { y0 },
            outcome_econ_active: Some(econ),
            treated,
            age,
            educ_own: Education::new(own).expect("level in range"),
            educ_spouse: spouse.map(|l| Education::new(l).expect("level in range")),
            age_first_birth: afb,
            marital_status: if married {
                MaritalStatus::Married
            } else {
                MaritalStatus::NeverMarried
            },
            oldest_child_age: age - afb,
            sampling_weight: 1.0,
            continuous_outcome: None,
        };
        if cfg.outcome_kind == OutcomeKind::Continuous {
            record.continuous_outcome = Some(if treated { mu1 } else { mu0 } + noise);
        }
        records.push(record);
    }
    let n = cfg.records_per_site as f64;
    let lgdp = 8.0 + v[0];
    let (tfr_noise, sex_noise) = (normal(&mut rng), normal(&mut rng));
    let macro_ = MacroCovariates {
        log_gdp_pc: Some(lgdp),
        lfp_women: Some((0.45 + 0.1 * v[1]).clamp(0.01, 0.99)),
        tfr: Some((4.0 - 0.8 * v[0] + 0.3 * tfr_noise).max(1.1)),
        mean_education: Some(educ_sum / n),
        sex_ratio_imbalance: Some(0.02 * (0.5 * v[1] + 0.75f64.sqrt() * sex_noise)),
        latitude: Some((10.0 + 25.0 * v[2]).clamp(-89.0, 89.0)),
        longitude: Some((60.0 * v[3]).clamp(-179.0, 179.0)),
        legal_origin_british: Some(if country.british { 1.0 } else { 0.0 }),
        legal_origin_french: Some(if country.french { 1.0 } else { 0.0 }),
    };
    (
        SiteData {
            key: key.clone(),
            macro_,
            records,
        },
        SiteTruth {
            key,
            country_index: g,
            v,
            tau: tau_sum / n + epsilon,
            epsilon,
            y0_mean: y0_sum / n,
            shift,
            target_population,
        },
    )
}
