//! Multi-site evidence: record types, CSV ingestion, validation and the
//! sample restrictions applied before estimation.
//!
//! Three delimited-text inputs are understood:
//!
//! * micro files, one row per mother, with column names given by a
//!   [`MicroSchema`];
//! * macro files, one row per `(country, year)` with the
//!   [`MacroCovariates`] fields (literal `NA` for missing);
//! * site-summary files in the layout `country, year, tau_more_kids,
//!   se_more_kids, tau_econ_active, se_econ_active`.
//!
//! Row numbers in diagnostics are 1-based file line numbers, the header
//! being line 1.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::site_effects::EffectEstimate;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteKey {
    pub country: String,
    pub year: i32,
}

impl SiteKey {
    pub fn new(country: impl Into<String>, year: i32) -> Self {
        Self {
            country: country.into(),
            year,
        }
    }
}

/// Parses `COUNTRY-YEAR`, splitting on the last `-`.
impl std::str::FromStr for SiteKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, y) = s
            .trim()
            .rsplit_once('-')
            .ok_or_else(|| Error::invalid(format!("site `{s}` is not COUNTRY-YEAR")))?;
        let year = y
            .parse::<i32>()
            .map_err(|_| Error::invalid(format!("site `{s}`: bad year `{y}`")))?;
        if c.is_empty() {
            return Err(Error::invalid(format!("site `{s}`: empty country")));
        }
        Ok(Self::new(c, year))
    }
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.country, self.year)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    MoreKids,
    EconActive,
}

impl Outcome {
    pub const ALL: [Outcome; 2] = [Outcome::MoreKids, Outcome::EconActive];

    pub fn label(self) -> &'static str {
        match self {
            Outcome::MoreKids => "more_kids",
            Outcome::EconActive => "econ_active",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "more_kids" | "morekids" => Ok(Outcome::MoreKids),
            "econ_active" | "econactive" => Ok(Outcome::EconActive),
            other => Err(Error::invalid(format!("unknown outcome `{other}`"))),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaritalStatus {
    Married,
    NeverMarried,
    Separated,
    Divorced,
    Widowed,
    Other,
}

impl MaritalStatus {
    pub fn label(self) -> &'static str {
        match self {
            MaritalStatus::Married => "married",
            MaritalStatus::NeverMarried => "never_married",
            MaritalStatus::Separated => "separated",
            MaritalStatus::Divorced => "divorced",
            MaritalStatus::Widowed => "widowed",
            MaritalStatus::Other => "other",
        }
    }

    fn parse(s: &str, married_values: &[String]) -> Option<Self> {
        let v = s.trim().to_ascii_lowercase();
        if married_values.iter().any(|m| m.eq_ignore_ascii_case(&v)) {
            return Some(MaritalStatus::Married);
        }
        match v.as_str() {
            "married" => Some(MaritalStatus::Married),
            "never_married" | "single" => Some(MaritalStatus::NeverMarried),
            "separated" => Some(MaritalStatus::Separated),
            "divorced" => Some(MaritalStatus::Divorced),
            "widowed" => Some(MaritalStatus::Widowed),
            "other" => Some(MaritalStatus::Other),
            _ => None,
        }
    }
}

/// Four-level ordinal education code, 1 (lowest) to 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Education(u8);

impl Education {
    pub const LEVELS: u8 = 4;

    pub fn new(level: u8) -> Option<Self> {
        (1..=Self::LEVELS).contains(&level).then_some(Self(level))
    }

    pub fn level(self) -> u8 {
        self.0
    }
}

/// One mother-level observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroRecord {
    pub outcome_more_kids: bool,
    pub outcome_econ_active: Option<bool>,
    /// First two children share a sex.
    pub treated: bool,
    pub age: u16,
    pub educ_own: Education,
    /// `None` is kept as its own category level.
    pub educ_spouse: Option<Education>,
    pub age_first_birth: u16,
    pub marital_status: MaritalStatus,
    pub oldest_child_age: u16,
    pub sampling_weight: f64,
    /// Real-valued replacement for the more-kids outcome, set only by
    /// continuous synthetic worlds. Never read from or written to CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuous_outcome: Option<f64>,
}

impl MicroRecord {
    pub fn outcome(&self, outcome: Outcome) -> Option<f64> {
        if let (Outcome::MoreKids, Some(y)) = (outcome, self.continuous_outcome) {
            return Some(y);
        }
        let v = match outcome {
            Outcome::MoreKids => Some(self.outcome_more_kids),
            Outcome::EconActive => self.outcome_econ_active,
        };
        v.map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.age < self.age_first_birth {
            return Err(format!(
                "age {} below age at first birth {}",
                self.age, self.age_first_birth
            ));
        }
        if !(self.sampling_weight >= 0.0) || !self.sampling_weight.is_finite() {
            return Err(format!("invalid sampling weight {}", self.sampling_weight));
        }
        Ok(())
    }
}

/// Context-level covariates. Every field may be missing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MacroCovariates {
    pub log_gdp_pc: Option<f64>,
    pub lfp_women: Option<f64>,
    pub tfr: Option<f64>,
    pub mean_education: Option<f64>,
    pub sex_ratio_imbalance: Option<f64>,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub legal_origin_british: Option<f64>,
    pub legal_origin_french: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroField {
    LogGdpPc,
    LfpWomen,
    Tfr,
    MeanEducation,
    SexRatioImbalance,
    Latitude,
    Longitude,
    LegalOriginBritish,
    LegalOriginFrench,
}

impl MacroField {
    pub const ALL: [MacroField; 9] = [
        MacroField::LogGdpPc,
        MacroField::LfpWomen,
        MacroField::Tfr,
        MacroField::MeanEducation,
        MacroField::SexRatioImbalance,
        MacroField::Latitude,
        MacroField::Longitude,
        MacroField::LegalOriginBritish,
        MacroField::LegalOriginFrench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MacroField::LogGdpPc => "log_gdp_pc",
            MacroField::LfpWomen => "lfp_women",
            MacroField::Tfr => "tfr",
            MacroField::MeanEducation => "mean_education",
            MacroField::SexRatioImbalance => "sex_ratio_imbalance",
            MacroField::Latitude => "latitude",
            MacroField::Longitude => "longitude",
            MacroField::LegalOriginBritish => "legal_origin_british",
            MacroField::LegalOriginFrench => "legal_origin_french",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| Error::UnknownCovariate(s.to_string()))
    }
}

impl MacroCovariates {
    pub fn get(&self, field: MacroField) -> Option<f64> {
        match field {
            MacroField::LogGdpPc => self.log_gdp_pc,
            MacroField::LfpWomen => self.lfp_women,
            MacroField::Tfr => self.tfr,
            MacroField::MeanEducation => self.mean_education,
            MacroField::SexRatioImbalance => self.sex_ratio_imbalance,
            MacroField::Latitude => self.latitude,
            MacroField::Longitude => self.longitude,
            MacroField::LegalOriginBritish => self.legal_origin_british,
            MacroField::LegalOriginFrench => self.legal_origin_french,
        }
    }

    pub fn set(&mut self, field: MacroField, value: Option<f64>) {
        let slot = match field {
            MacroField::LogGdpPc => &mut self.log_gdp_pc,
            MacroField::LfpWomen => &mut self.lfp_women,
            MacroField::Tfr => &mut self.tfr,
            MacroField::MeanEducation => &mut self.mean_education,
            MacroField::SexRatioImbalance => &mut self.sex_ratio_imbalance,
            MacroField::Latitude => &mut self.latitude,
            MacroField::Longitude => &mut self.longitude,
            MacroField::LegalOriginBritish => &mut self.legal_origin_british,
            MacroField::LegalOriginFrench => &mut self.legal_origin_french,
        };
        *slot = value;
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let check = |name: &str, v: Option<f64>, lo: f64, hi: f64| match v {
            Some(x) if !(lo..=hi).contains(&x) => Err(format!("{name} = {x} outside [{lo}, {hi}]")),
            _ => Ok(()),
        };
        check("lfp_women", self.lfp_women, 0.0, 1.0)?;
        check("latitude", self.latitude, -90.0, 90.0)?;
        check("longitude", self.longitude, -180.0, 180.0)?;
        check("legal_origin_british", self.legal_origin_british, 0.0, 1.0)?;
        check("legal_origin_french", self.legal_origin_french, 0.0, 1.0)?;
        if let Some(t) = self.tfr {
            if t <= 0.0 {
                return Err(format!("tfr = {t} must be positive"));
            }
        }
        for f in MacroField::ALL {
            if let Some(x) = self.get(f) {
                if !x.is_finite() {
                    return Err(format!("{} is not finite", f.name()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteData {
    pub key: SiteKey,
    #[serde(rename = "macro")]
    pub macro_: MacroCovariates,
    pub records: Vec<MicroRecord>,
}

impl SiteData {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::insufficient(format!("site {} has no records", self.key)));
        }
        let treated = self.records.iter().filter(|r| r.treated).count();
        if treated == 0 || treated == self.records.len() {
            return Err(Error::insufficient(format!(
                "site {} has a single treatment arm",
                self.key
            )));
        }
        self.macro_
            .validate()
            .map_err(|m| Error::invalid(format!("site {}: {m}", self.key)))
    }

    /// Mean of a micro attribute over records where it is present.
    pub fn micro_mean(&self, f: impl Fn(&MicroRecord) -> Option<f64>) -> Option<f64> {
        let (s, n) = self
            .records
            .iter()
            .filter_map(f)
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBase {
    sites: Vec<SiteData>,
    target_designation: Option<SiteKey>,
}

impl EvidenceBase {
    /// Sites are stored sorted by key; input order does not matter.
    pub fn new(mut sites: Vec<SiteData>, target: Option<SiteKey>) -> Result<Self> {
        sites.sort_by(|a, b| a.key.cmp(&b.key));
        for w in sites.windows(2) {
            if w[0].key == w[1].key {
                return Err(Error::Duplicate(format!("site {}", w[0].key)));
            }
        }
        if let Some(t) = &target {
            if !sites.iter().any(|s| &s.key == t) {
                return Err(Error::invalid(format!("target {t} is not a member site")));
            }
        }
        Ok(Self {
            sites,
            target_designation: target,
        })
    }

    /// Join grouped micro records with macro rows. Sites without a macro row
    /// get all-missing covariates and a diagnostic.
    pub fn assemble(
        groups: BTreeMap<SiteKey, Vec<MicroRecord>>,
        macros: &BTreeMap<SiteKey, MacroCovariates>,
    ) -> Result<(Self, Vec<String>)> {
        let mut diagnostics = Vec::new();
        let mut sites = Vec::with_capacity(groups.len());
        for (key, records) in groups {
            let macro_ = match macros.get(&key) {
                Some(m) => *m,
                None => {
                    diagnostics.push(format!("site {key}: no macro covariate row"));
                    MacroCovariates::default()
                }
            };
            sites.push(SiteData {
                key,
                macro_,
                records,
            });
        }
        Ok((Self::new(sites, None)?, diagnostics))
    }

    pub fn sites(&self) -> &[SiteData] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn target_designation(&self) -> Option<&SiteKey> {
        self.target_designation.as_ref()
    }

    pub fn with_target(mut self, target: Option<SiteKey>) -> Result<Self> {
        if let Some(t) = &target {
            if self.index_of(t).is_none() {
                return Err(Error::invalid(format!("target {t} is not a member site")));
            }
        }
        self.target_designation = target;
        Ok(self)
    }

    pub fn index_of(&self, key: &SiteKey) -> Option<usize> {
        self.sites.binary_search_by(|s| s.key.cmp(key)).ok()
    }

    pub fn site(&self, key: &SiteKey) -> Option<&SiteData> {
        self.index_of(key).map(|i| &self.sites[i])
    }

    /// Keep only the sites for which `keep` holds.
    pub fn filter(&self, keep: impl Fn(&SiteData) -> bool) -> Self {
        let sites: Vec<SiteData> = self.sites.iter().filter(|s| keep(s)).cloned().collect();
        let target = self
            .target_designation
            .clone()
            .filter(|t| sites.iter().any(|s| &s.key == t));
        Self {
            sites,
            target_designation: target,
        }
    }
}

/// Column mapping for micro files. Every field names a column in the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroSchema {
    pub country: String,
    pub year: String,
    pub outcome_more_kids: String,
    pub outcome_econ_active: String,
    pub treated: String,
    pub age: String,
    pub educ_own: String,
    pub educ_spouse: String,
    pub age_first_birth: String,
    pub marital_status: String,
    pub oldest_child_age: String,
    /// Optional; weights default to 1 when absent.
    pub sampling_weight: Option<String>,
    /// Extra tokens read as "married" (case-insensitive).
    pub married_values: Vec<String>,
    /// Tokens read as missing.
    pub missing_tokens: Vec<String>,
}

impl Default for MicroSchema {
    fn default() -> Self {
        Self {
            country: "country".into(),
            year: "year".into(),
            outcome_more_kids: "more_kids".into(),
            outcome_econ_active: "econ_active".into(),
            treated: "same_sex".into(),
            age: "age".into(),
            educ_own: "educ_own".into(),
            educ_spouse: "educ_spouse".into(),
            age_first_birth: "age_first_birth".into(),
            marital_status: "marital_status".into(),
            oldest_child_age: "oldest_child_age".into(),
            sampling_weight: Some("weight".into()),
            married_values: vec!["1".into()],
            missing_tokens: vec!["NA".into(), "".into(), ".".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Skip rows that fail to parse (each is reported) instead of failing.
    pub skip_invalid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct MicroLoad {
    pub groups: BTreeMap<SiteKey, Vec<MicroRecord>>,
    pub diagnostics: Vec<RowDiagnostic>,
    pub rows_read: usize,
}

impl MicroLoad {
    pub fn record_count(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn rows_rejected(&self) -> usize {
        self.diagnostics.len()
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn header_index(headers: &csv::StringRecord) -> HashMap<String, usize> {
    headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim_start_matches('\u{feff}').to_string(), i))
        .collect()
}

fn require(path: &Path, idx: &HashMap<String, usize>, col: &str) -> Result<usize> {
    idx.get(col).copied().ok_or_else(|| Error::MissingColumn {
        path: path.to_path_buf(),
        column: col.to_string(),
    })
}

struct MicroColumns {
    country: usize,
    year: usize,
    more_kids: usize,
    econ_active: Option<usize>,
    treated: usize,
    age: usize,
    educ_own: usize,
    educ_spouse: Option<usize>,
    age_first_birth: usize,
    marital_status: usize,
    oldest_child_age: usize,
    weight: Option<usize>,
}

/// Read a micro file into per-site record groups.
pub fn load_micro(path: &Path, schema: &MicroSchema, opts: LoadOptions) -> Result<MicroLoad> {
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let idx = header_index(&headers);
    let cols = MicroColumns {
        country: require(path, &idx, &schema.country)?,
        year: require(path, &idx, &schema.year)?,
        more_kids: require(path, &idx, &schema.outcome_more_kids)?,
        econ_active: idx.get(&schema.outcome_econ_active).copied(),
        treated: require(path, &idx, &schema.treated)?,
        age: require(path, &idx, &schema.age)?,
        educ_own: require(path, &idx, &schema.educ_own)?,
        educ_spouse: idx.get(&schema.educ_spouse).copied(),
        age_first_birth: require(path, &idx, &schema.age_first_birth)?,
        marital_status: require(path, &idx, &schema.marital_status)?,
        oldest_child_age: require(path, &idx, &schema.oldest_child_age)?,
        weight: schema
            .sampling_weight
            .as_ref()
            .and_then(|c| idx.get(c).copied()),
    };

    let mut groups: BTreeMap<SiteKey, Vec<MicroRecord>> = BTreeMap::new();
    let mut diagnostics = Vec::new();
    let mut rows_read = 0;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        rows_read += 1;
        let rec = rec.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        match parse_micro_row(&rec, &cols, schema) {
            Ok((key, r)) => groups.entry(key).or_default().push(r),
            Err(message) => {
                if !opts.skip_invalid {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        row: line,
                        message,
                    });
                }
                diagnostics.push(RowDiagnostic { row: line, message });
            }
        }
    }
    Ok(MicroLoad {
        groups,
        diagnostics,
        rows_read,
    })
}

fn parse_micro_row(
    rec: &csv::StringRecord,
    c: &MicroColumns,
    schema: &MicroSchema,
) -> std::result::Result<(SiteKey, MicroRecord), String> {
    let is_missing = |s: &str| schema.missing_tokens.iter().any(|m| m == s);
    let field = |i: usize| rec.get(i).unwrap_or("");
    let int = |name: &str, i: usize| -> std::result::Result<i64, String> {
        field(i)
            .parse::<i64>()
            .map_err(|_| format!("{name}: cannot parse `{}` as integer", field(i)))
    };
    let binary = |name: &str, i: usize| -> std::result::Result<bool, String> {
        match field(i) {
            "0" => Ok(false),
            "1" => Ok(true),
            v => Err(format!("{name}: `{v}` is not 0 or 1")),
        }
    };
    let years = |name: &str, i: usize| -> std::result::Result<u16, String> {
        let v = int(name, i)?;
        u16::try_from(v).map_err(|_| format!("{name}: {v} out of range"))
    };
    let educ = |name: &str, i: usize| -> std::result::Result<Education, String> {
        let v = int(name, i)?;
        u8::try_from(v)
            .ok()
            .and_then(Education::new)
            .ok_or_else(|| format!("{name}: level {v} not in 1..=4"))
    };

    let country = field(c.country).to_string();
    if country.is_empty() {
        return Err("country: empty".into());
    }
    let year = i32::try_from(int("year", c.year)?).map_err(|_| "year: out of range".to_string())?;
    let econ_active = match c.econ_active {
        Some(i) if !is_missing(field(i)) => Some(binary("econ_active", i)?),
        _ => None,
    };
    let educ_spouse = match c.educ_spouse {
        Some(i) if !is_missing(field(i)) => Some(educ("educ_spouse", i)?),
        _ => None,
    };
    let marital = field(c.marital_status);
    let marital_status = MaritalStatus::parse(marital, &schema.married_values)
        .ok_or_else(|| format!("marital_status: unknown value `{marital}`"))?;
    let sampling_weight = match c.weight {
        Some(i) if !is_missing(field(i)) => field(i)
            .parse::<f64>()
            .map_err(|_| format!("weight: cannot parse `{}`", field(i)))?,
        _ => 1.0,
    };
    let record = MicroRecord {
        outcome_more_kids: binary("more_kids", c.more_kids)?,
        outcome_econ_active: econ_active,
        treated: binary("treated", c.treated)?,
        age: years("age", c.age)?,
        educ_own: educ("educ_own", c.educ_own)?,
        educ_spouse,
        age_first_birth: years("age_first_birth", c.age_first_birth)?,
        marital_status,
        oldest_child_age: years("oldest_child_age", c.oldest_child_age)?,
        sampling_weight,
        continuous_outcome: None,
    };
    record.validate()?;
    Ok((SiteKey { country, year }, record))
}

/// Write records in the default micro layout.
pub fn write_micro(path: &Path, eb: &EvidenceBase) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    writeln!(
        out,
        "country,year,more_kids,econ_active,same_sex,age,educ_own,educ_spouse,age_first_birth,marital_status,oldest_child_age,weight"
    )
    .map_err(io)?;
    let b = |v: bool| if v { "1" } else { "0" };
    for s in eb.sites() {
        for r in &s.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&s.key.country),
                s.key.year,
                b(r.outcome_more_kids),
                r.outcome_econ_active.map_or("NA", b),
                b(r.treated),
                r.age,
                r.educ_own.level(),
                r.educ_spouse.map_or("NA".to_string(), |e| e.level().to_string()),
                r.age_first_birth,
                r.marital_status.label(),
                r.oldest_child_age,
                r.sampling_weight
            )
            .map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

/// Read macro covariates keyed by site.
pub fn load_macro(path: &Path) -> Result<BTreeMap<SiteKey, MacroCovariates>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let idx = header_index(&headers);
    let country = require(path, &idx, "country")?;
    let year = require(path, &idx, "year")?;
    let fields: Vec<(MacroField, Option<usize>)> = MacroField::ALL
        .iter()
        .map(|&f| (f, idx.get(f.name()).copied()))
        .collect();
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let perr = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row: line,
            message,
        };
        let y: i32 = rec
            .get(year)
            .unwrap_or("")
            .parse()
            .map_err(|_| perr("year: not an integer".into()))?;
        let key = SiteKey::new(rec.get(country).unwrap_or(""), y);
        let mut m = MacroCovariates::default();
        for &(f, col) in &fields {
            let Some(col) = col else { continue };
            let raw = rec.get(col).unwrap_or("");
            let v = if raw.is_empty() || raw == "NA" {
                None
            } else {
                Some(
                    raw.parse::<f64>()
                        .map_err(|_| perr(format!("{}: cannot parse `{raw}`", f.name())))?,
                )
            };
            m.set(f, v);
        }
        m.validate().map_err(perr)?;
        if out.insert(key.clone(), m).is_some() {
            return Err(Error::Duplicate(format!("macro row for {key}")));
        }
    }
    Ok(out)
}

pub fn write_macro(path: &Path, eb: &EvidenceBase) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    let names: Vec<&str> = MacroField::ALL.iter().map(|f| f.name()).collect();
    writeln!(out, "country,year,{}", names.join(",")).map_err(io)?;
    for s in eb.sites() {
        let vals: Vec<String> = MacroField::ALL.iter().map(|&f| fmt_opt(s.macro_.get(f))).collect();
        writeln!(out, "{},{},{}", csv_field(&s.key.country), s.key.year, vals.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Counts from [`apply_sample_restrictions`]. A record failing several
/// criteria is counted once under each.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestrictionReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub failed_marital: usize,
    pub failed_age: usize,
    pub failed_oldest_child: usize,
    pub warning: Option<String>,
}

pub const MIN_AGE: u16 = 21;
pub const MAX_AGE: u16 = 35;
pub const MAX_OLDEST_CHILD_AGE: u16 = 17;

/// Keep married women aged 21–35 whose oldest child is under 18.
pub fn apply_sample_restrictions(records: &[MicroRecord]) -> (Vec<MicroRecord>, RestrictionReport) {
    let mut report = RestrictionReport {
        input: records.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        let married = r.marital_status == MaritalStatus::Married;
        let age_ok = (MIN_AGE..=MAX_AGE).contains(&r.age);
        let child_ok = r.oldest_child_age <= MAX_OLDEST_CHILD_AGE;
        report.failed_marital += usize::from(!married);
        report.failed_age += usize::from(!age_ok);
        report.failed_oldest_child += usize::from(!child_ok);
        if married && age_ok && child_ok {
            kept.push(r.clone());
        }
    }
    report.kept = kept.len();
    report.dropped = report.input - report.kept;
    if kept.is_empty() && !records.is_empty() {
        report.warning = Some("sample restrictions removed every record".into());
    }
    (kept, report)
}

/// Apply the restrictions site by site; sites left without records are
/// removed and named in the returned warnings.
pub fn restrict_evidence_base(eb: &EvidenceBase) -> (EvidenceBase, BTreeMap<SiteKey, RestrictionReport>) {
    let mut reports = BTreeMap::new();
    let mut sites = Vec::new();
    for s in eb.sites() {
        let (records, rep) = apply_sample_restrictions(&s.records);
        reports.insert(s.key.clone(), rep);
        if !records.is_empty() {
            sites.push(SiteData {
                key: s.key.clone(),
                macro_: s.macro_,
                records,
            });
        }
    }
    let target = eb
        .target_designation()
        .cloned()
        .filter(|t| sites.iter().any(|s| &s.key == t));
    let eb = EvidenceBase::new(sites, target).expect("subset of a valid evidence base");
    (eb, reports)
}

const SUMMARY_COLUMNS: [&str; 6] = [
    "country",
    "year",
    "tau_more_kids",
    "se_more_kids",
    "tau_econ_active",
    "se_econ_active",
];

/// Read per-site effect summaries. Rows with `NA` effects emit nothing for
/// that outcome.
pub fn load_site_summaries(path: &Path) -> Result<Vec<EffectEstimate>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_site_summaries(file, path)
}

/// Parse summaries from an in-memory CSV string.
pub fn parse_site_summaries(text: &str) -> Result<Vec<EffectEstimate>> {
    read_site_summaries(text.as_bytes(), Path::new("<memory>"))
}

fn read_site_summaries<R: std::io::Read>(src: R, path: &Path) -> Result<Vec<EffectEstimate>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(src);
    let headers = rdr
        .headers()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let idx = header_index(&headers);
    let cols: Vec<usize> = SUMMARY_COLUMNS
        .iter()
        .map(|c| require(path, &idx, c))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let perr = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row: line,
            message,
        };
        let get = |k: usize| rec.get(cols[k]).unwrap_or("");
        let num = |k: usize| -> Result<Option<f64>> {
            let raw = get(k);
            if raw.is_empty() || raw == "NA" {
                return Ok(None);
            }
            raw.parse::<f64>()
                .map(Some)
                .map_err(|_| perr(format!("{}: cannot parse `{raw}`", SUMMARY_COLUMNS[k])))
        };
        let year: i32 = get(1)
            .parse()
            .map_err(|_| perr(format!("year: cannot parse `{}`", get(1))))?;
        let site = SiteKey::new(get(0), year);
        for (outcome, k) in [(Outcome::MoreKids, 2), (Outcome::EconActive, 4)] {
            let Some(tau) = num(k)? else { continue };
            let se = match num(k + 1)? {
                Some(se) if se > 0.0 && se.is_finite() => se,
                _ => {
                    return Err(perr(format!(
                        "{}: standard error must be positive when an effect is present",
                        SUMMARY_COLUMNS[k + 1]
                    )))
                }
            };
            if !seen.insert((site.clone(), outcome)) {
                return Err(Error::Duplicate(format!("{site} / {outcome}")));
            }
            out.push(EffectEstimate {
                site: site.clone(),
                outcome,
                tau,
                se,
                n: None,
                covariate_set: "summary".into(),
            });
        }
    }
    Ok(out)
}

/// Write estimates in the summary layout, one row per site.
pub fn write_site_summaries(path: &Path, estimates: &[EffectEstimate]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut rows: BTreeMap<SiteKey, [Option<(f64, f64)>; 2]> = BTreeMap::new();
    for e in estimates {
        let slot = match e.outcome {
            Outcome::MoreKids => 0,
            Outcome::EconActive => 1,
        };
        rows.entry(e.site.clone()).or_default()[slot] = Some((e.tau, e.se));
    }
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    writeln!(out, "{}", SUMMARY_COLUMNS.join(",")).map_err(io)?;
    for (site, v) in rows {
        let cell = |x: Option<(f64, f64)>| match x {
            Some((t, s)) => format!("{t},{s}"),
            None => "NA,NA".to_string(),
        };
        writeln!(
            out,
            "{},{},{},{}",
            csv_field(&site.country),
            site.year,
            cell(v[0]),
            cell(v[1])
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

/// The per-country-year effect table shipped with the crate.
pub const APPENDIX_TABLE_1: &str = include_str!("../fixtures/appendix_table1.csv");

/// Estimates for one outcome, in input order.
pub fn estimates_for(estimates: &[EffectEstimate], outcome: Outcome) -> Vec<EffectEstimate> {
    estimates.iter().filter(|e| e.outcome == outcome).cloned().collect()
}
