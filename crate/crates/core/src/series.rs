//! Second-order series expansions over micro and macro covariates.
//!
//! Covariates ("atoms") are either continuous or categorical. A categorical
//! atom expands to indicator columns for its non-base levels. The order-2
//! expansion holds every main effect, the square of every continuous column
//! and every pairwise product of columns from different atoms (products of
//! indicators of the same factor are identically zero and are skipped).
//!
//! Covariate sets restrict which atoms take part:
//!
//! * `none`: intercept and treatment only;
//! * `micro` / `macro`: the expansion over that scope alone;
//! * `both`: the expansion over all atoms, which adds micro×macro products.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{MacroCovariates, MacroField, MicroRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateSet {
    None,
    Micro,
    Macro,
    Both,
}

impl CovariateSet {
    pub const ALL: [CovariateSet; 4] = [
        CovariateSet::None,
        CovariateSet::Micro,
        CovariateSet::Macro,
        CovariateSet::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CovariateSet::None => "none",
            CovariateSet::Micro => "micro",
            CovariateSet::Macro => "macro",
            CovariateSet::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown covariate set `{s}`")))
    }

    fn includes(self, scope: Scope) -> bool {
        matches!(
            (self, scope),
            (CovariateSet::Both, _)
                | (CovariateSet::Micro, Scope::Micro)
                | (CovariateSet::Macro, Scope::Macro)
        )
    }
}

impl fmt::Display for CovariateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Micro,
    Macro,
}

/// Where an atom's column values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Age,
    AgeFirstBirth,
    /// Indicator of own education at the given level.
    EducOwn(u8),
    /// Indicator of spouse education at the given level; `0` is missing.
    EducSpouse(u8),
    Macro(MacroField),
}

impl Source {
    fn eval(self, r: &MicroRecord, m: &MacroCovariates) -> Option<f64> {
        let ind = |b: bool| if b { 1.0 } else { 0.0 };
        match self {
            Source::Age => Some(f64::from(r.age)),
            Source::AgeFirstBirth => Some(f64::from(r.age_first_birth)),
            Source::EducOwn(l) => Some(ind(r.educ_own.level() == l)),
            Source::EducSpouse(0) => Some(ind(r.educ_spouse.is_none())),
            Source::EducSpouse(l) => Some(ind(r.educ_spouse.map(|e| e.level()) == Some(l))),
            Source::Macro(f) => m.get(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub name: String,
    pub scope: Scope,
    pub continuous: bool,
    pub columns: Vec<Column>,
}

/// The covariates available for series expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSchema {
    pub atoms: Vec<Atom>,
}

pub const DEFAULT_MICRO: [&str; 4] = ["age", "educ_own", "educ_spouse", "age_first_birth"];
pub const DEFAULT_MACRO: [&str; 5] = ["log_gdp_pc", "lfp_women", "legal_origin", "latitude", "longitude"];

fn atom_by_name(name: &str) -> Result<Atom> {
    let cont = |scope, source| Atom {
        name: name.to_string(),
        scope,
        continuous: true,
        columns: vec![Column {
            name: name.to_string(),
            source,
        }],
    };
    let factor = |scope, cols: Vec<(String, Source)>| Atom {
        name: name.to_string(),
        scope,
        continuous: false,
        columns: cols
            .into_iter()
            .map(|(name, source)| Column { name, source })
            .collect(),
    };
    Ok(match name {
        "age" => cont(Scope::Micro, Source::Age),
        "age_first_birth" => cont(Scope::Micro, Source::AgeFirstBirth),
        "educ_own" => factor(
            Scope::Micro,
            (2..=4)
                .map(|l| (format!("educ_own={l}"), Source::EducOwn(l)))
                .collect(),
        ),
        "educ_spouse" => factor(
            Scope::Micro,
            (2..=4)
                .map(|l| (format!("educ_spouse={l}"), Source::EducSpouse(l)))
                .chain(std::iter::once(("educ_spouse=NA".to_string(), Source::EducSpouse(0))))
                .collect(),
        ),
        "legal_origin" => factor(
            Scope::Macro,
            vec![
                ("legal_origin=british".into(), Source::Macro(MacroField::LegalOriginBritish)),
                ("legal_origin=french".into(), Source::Macro(MacroField::LegalOriginFrench)),
            ],
        ),
        other => match MacroField::parse(other) {
            Ok(f) => cont(Scope::Macro, Source::Macro(f)),
            Err(_) => return Err(Error::UnknownCovariate(other.to_string())),
        },
    })
}

impl SeriesSchema {
    pub fn from_names(micro: &[&str], macro_: &[&str]) -> Result<Self> {
        let mut atoms = Vec::new();
        for (names, scope) in [(micro, Scope::Micro), (macro_, Scope::Macro)] {
            for n in names {
                let a = atom_by_name(n)?;
                if a.scope != scope {
                    return Err(Error::invalid(format!(
                        "covariate `{n}` is not a {} covariate",
                        if scope == Scope::Micro { "micro" } else { "macro" }
                    )));
                }
                if atoms.iter().any(|b: &Atom| b.name == a.name) {
                    return Err(Error::Duplicate(format!("covariate `{n}`")));
                }
                atoms.push(a);
            }
        }
        Ok(Self { atoms })
    }

    /// Macro fields referenced by atoms in `set`.
    pub fn macro_fields(&self, set: CovariateSet) -> Vec<MacroField> {
        self.atoms
            .iter()
            .filter(|a| a.scope == Scope::Macro && set.includes(a.scope))
            .flat_map(|a| a.columns.iter())
            .filter_map(|c| match c.source {
                Source::Macro(f) => Some(f),
                _ => None,
            })
            .collect()
    }
}

impl Default for SeriesSchema {
    fn default() -> Self {
        Self::from_names(&DEFAULT_MICRO, &DEFAULT_MACRO).expect("default schema")
    }
}

/// A series term: a product of at most two base columns (possibly the same
/// continuous column twice).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Treatment,
    Main { a: usize },
    Product { a: usize, b: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSpec {
    pub covariate_set: CovariateSet,
    /// Base columns referenced by the terms.
    pub columns: Vec<Column>,
    /// `Intercept`, `Treatment`, then covariate terms.
    pub terms: Vec<Term>,
    pub names: Vec<String>,
}

/// Build the order-2 expansion for `set`. Only `order = 2` is supported.
pub fn build_series(schema: &SeriesSchema, order: usize, set: CovariateSet) -> Result<SeriesSpec> {
    if !(1..=2).contains(&order) {
        return Err(Error::invalid(format!("series order {order} not supported (1 or 2)")));
    }
    let atoms: Vec<&Atom> = schema.atoms.iter().filter(|a| set.includes(a.scope)).collect();
    let mut columns = Vec::new();
    let mut owner = Vec::new();
    for (k, a) in atoms.iter().enumerate() {
        for c in &a.columns {
            columns.push(c.clone());
            owner.push((k, a.continuous));
        }
    }
    let mut terms = vec![Term::Intercept, Term::Treatment];
    terms.extend((0..columns.len()).map(|a| Term::Main { a }));
    if order == 2 {
        for a in 0..columns.len() {
            if owner[a].1 {
                terms.push(Term::Product { a, b: a });
            }
        }
        for a in 0..columns.len() {
            for b in a + 1..columns.len() {
                if owner[a].0 != owner[b].0 {
                    terms.push(Term::Product { a, b });
                }
            }
        }
    }
    let names = terms
        .iter()
        .map(|t| match *t {
            Term::Intercept => "(intercept)".to_string(),
            Term::Treatment => "treated".to_string(),
            Term::Main { a } => columns[a].name.clone(),
            Term::Product { a, b } if a == b => format!("{}^2", columns[a].name),
            Term::Product { a, b } => format!("{}*{}", columns[a].name, columns[b].name),
        })
        .collect();
    Ok(SeriesSpec {
        covariate_set: set,
        columns,
        terms,
        names,
    })
}

impl SeriesSpec {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Number of covariate terms (everything but intercept and treatment).
    pub fn n_covariate_terms(&self) -> usize {
        self.terms.len() - 2
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names[2..]
    }

    /// Fill `base` with the base-column values for one record. Returns
    /// `None` if a macro value is missing.
    pub fn base_values(&self, r: &MicroRecord, m: &MacroCovariates, base: &mut [f64]) -> Option<()> {
        for (slot, c) in base.iter_mut().zip(&self.columns) {
            *slot = c.source.eval(r, m)?;
        }
        Some(())
    }

    /// Covariate-term values (excluding intercept and treatment) from
    /// base-column values.
    pub fn covariate_row(&self, base: &[f64], out: &mut [f64]) {
        for (slot, t) in out.iter_mut().zip(&self.terms[2..]) {
            *slot = match *t {
                Term::Main { a } => base[a],
                Term::Product { a, b } => base[a] * base[b],
                Term::Intercept | Term::Treatment => unreachable!("covariate terms only"),
            };
        }
    }

    /// Terms whose columns all come from macro covariates.
    pub fn is_macro_only(&self, term: usize) -> bool {
        let macro_col = |a: usize| matches!(self.columns[a].source, Source::Macro(_));
        match self.terms[term] {
            Term::Main { a } => macro_col(a),
            Term::Product { a, b } => macro_col(a) && macro_col(b),
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn none_has_two_terms() {
        let s = build_series(&SeriesSchema::default(), 2, CovariateSet::None).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.terms, vec![Term::Intercept, Term::Treatment]);
    }

    #[test]
    fn hand_enumeration_continuous_plus_factor() {
        let schema = SeriesSchema::from_names(&["age", "educ_own"], &[]).unwrap();
        let s = build_series(&schema, 2, CovariateSet::Micro).unwrap();
        let expected = [
            "(intercept)",
            "treated",
            "age",
            "educ_own=2",
            "educ_own=3",
            "educ_own=4",
            "age^2",
            "age*educ_own=2",
            "age*educ_own=3",
            "age*educ_own=4",
        ];
        assert_eq!(s.names, expected);
    }

    #[test]
    fn both_contains_micro_and_macro() {
        let schema = SeriesSchema::default();
        let both = build_series(&schema, 2, CovariateSet::Both).unwrap();
        for set in [CovariateSet::Micro, CovariateSet::Macro] {
            let s = build_series(&schema, 2, set).unwrap();
            assert!(s.names.iter().all(|n| both.names.contains(n)));
            assert!(s.len() < both.len());
        }
        assert!(both.names.iter().any(|n| n == "age*log_gdp_pc"));
    }

    #[test]
    fn unknown_covariate() {
        assert!(matches!(
            SeriesSchema::from_names(&["height"], &[]),
            Err(Error::UnknownCovariate(_))
        ));
    }
}
