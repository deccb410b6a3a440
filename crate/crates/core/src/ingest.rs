//! Free-text formulation parsing, unit harmonization, duplicate collapse
//! and support filtering.
//!
//! Records arrive as free text such as `"10% DMSO + 90% FBS"`. Each clause
//! is split off, its ingredient name resolved against a [`Registry`] of
//! canonical descriptors, and its concentration converted into the
//! ingredient's canonical unit (M for molar-class, % for percent-class).
//! Basal media and buffers are recognized and dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::sync::OnceLock;

use nalgebra::DMatrix;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Percent features below this value are treated as absent.
pub const PERCENT_TRACE_FLOOR: f64 = 0.1;
/// Molar features below this value (1 mM) are treated as absent.
pub const MOLAR_TRACE_FLOOR: f64 = 0.001;
/// Minimum number of literature formulations a feature needs to stay active.
pub const MIN_LITERATURE_SUPPORT: usize = 3;

const BUILTIN_REGISTRY: &str = include_str!("../data/registry.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitClass {
    Molar,
    Percent,
}

impl UnitClass {
    pub fn trace_floor(self) -> f64 {
        match self {
            UnitClass::Molar => MOLAR_TRACE_FLOOR,
            UnitClass::Percent => PERCENT_TRACE_FLOOR,
        }
    }

    /// Column-name suffix used in parsed CSV files.
    pub fn suffix(self) -> &'static str {
        match self {
            UnitClass::Molar => "_M",
            UnitClass::Percent => "_pct",
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            UnitClass::Molar => "M",
            UnitClass::Percent => "%",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngredientDescriptor {
    #[serde(rename = "id")]
    pub canonical_id: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    pub unit_class: UnitClass,
    #[serde(default)]
    pub molecular_weight: Option<f64>,
    #[serde(default)]
    pub density: Option<f64>,
    pub family: String,
    pub search_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Canonical {
    Ingredient(String),
    ExcludedMedia,
    Unknown,
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    #[serde(default)]
    media: Vec<String>,
    #[serde(default)]
    ingredient: Vec<IngredientDescriptor>,
}

/// Set of canonical ingredient descriptors plus excluded media names.
#[derive(Debug, Clone)]
pub struct Registry {
    descriptors: BTreeMap<String, IngredientDescriptor>,
    lookup: HashMap<String, Canonical>,
}

fn normalize_name(raw: &str) -> String {
    raw.chars()
        .map(|c| match c {
            '₂' => '2',
            '–' | '—' => '-',
            other => other,
        })
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

impl Registry {
    /// The registry shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_REGISTRY).expect("builtin registry is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: RegistryFile =
            toml::from_str(text).map_err(|e| Error::Registry(e.to_string()))?;
        Self::new(file.ingredient, file.media)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn new(descriptors: Vec<IngredientDescriptor>, media: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::new();
        let mut by_id = BTreeMap::new();
        for d in descriptors {
            if d.canonical_id.trim().is_empty() {
                return Err(Error::Registry("empty canonical id".into()));
            }
            if !(d.search_bound > 0.0 && d.search_bound.is_finite()) {
                return Err(Error::Registry(format!(
                    "{}: search_bound must be positive",
                    d.canonical_id
                )));
            }
            if d.unit_class == UnitClass::Molar && !d.molecular_weight.is_some_and(|w| w > 0.0) {
                return Err(Error::Registry(format!(
                    "{}: molar ingredients need a positive molecular_weight",
                    d.canonical_id
                )));
            }
            let names = std::iter::once(&d.canonical_id).chain(d.synonyms.iter());
            for name in names {
                let key = normalize_name(name);
                match lookup.get(&key) {
                    Some(Canonical::Ingredient(other)) if other != &d.canonical_id => {
                        return Err(Error::Registry(format!(
                            "synonym {name:?} claimed by both {other} and {}",
                            d.canonical_id
                        )));
                    }
                    _ => {
                        lookup.insert(key, Canonical::Ingredient(d.canonical_id.clone()));
                    }
                }
            }
            if by_id.insert(d.canonical_id.clone(), d).is_some() {
                return Err(Error::Registry("duplicate canonical id".into()));
            }
        }
        for m in media {
            let key = normalize_name(&m);
            if let Some(Canonical::Ingredient(id)) = lookup.get(&key) {
                return Err(Error::Registry(format!("media name {m:?} collides with {id}")));
            }
            lookup.insert(key, Canonical::ExcludedMedia);
        }
        Ok(Registry {
            descriptors: by_id,
            lookup,
        })
    }

    pub fn get(&self, id: &str) -> Option<&IngredientDescriptor> {
        self.descriptors.get(id)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &IngredientDescriptor> {
        self.descriptors.values()
    }

    /// Resolve a raw ingredient name (case and whitespace insensitive).
    pub fn canonicalize(&self, raw_name: &str) -> Result<Canonical> {
        let key = normalize_name(raw_name);
        if key.is_empty() {
            return Err(Error::input("empty ingredient name"));
        }
        Ok(self.lookup.get(&key).cloned().unwrap_or(Canonical::Unknown))
    }
}

/// Concentration of one canonical ingredient in its canonical unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amount {
    pub value: f64,
    pub unit: UnitClass,
}

/// Mapping canonical id → concentration. Values are never negative.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FormulationVector {
    entries: BTreeMap<String, Amount>,
}

impl FormulationVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert (accumulating onto an existing entry). Non-positive values
    /// are ignored.
    pub fn add(&mut self, id: impl Into<String>, value: f64, unit: UnitClass) {
        if !(value > 0.0) {
            return;
        }
        let slot = self
            .entries
            .entry(id.into())
            .or_insert(Amount { value: 0.0, unit });
        slot.value += value;
    }

    pub fn with(mut self, id: impl Into<String>, value: f64, unit: UnitClass) -> Self {
        self.add(id, value, unit);
        self
    }

    pub fn get(&self, id: &str) -> Option<Amount> {
        self.entries.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Amount)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy without entries below the trace floor.
    pub fn floored(&self) -> Self {
        FormulationVector {
            entries: self
                .entries
                .iter()
                .filter(|(_, a)| a.value >= a.unit.trace_floor())
                .map(|(k, a)| (k.clone(), *a))
                .collect(),
        }
    }

    /// Number of entries at or above the trace floor.
    pub fn n_active(&self) -> usize {
        self.entries
            .values()
            .filter(|a| a.value >= a.unit.trace_floor())
            .count()
    }

    /// Canonical signature: sub-floor entries dropped, values rounded to four
    /// significant digits, entries sorted by id.
    pub fn signature(&self) -> String {
        signature(self)
    }

    /// Dense row aligned with `columns`; ids not in `columns` are dropped.
    pub fn to_row(&self, columns: &[FeatureColumn]) -> Vec<f64> {
        columns
            .iter()
            .map(|c| self.entries.get(&c.id).map_or(0.0, |a| a.value))
            .collect()
    }

    pub fn from_row(row: &[f64], columns: &[FeatureColumn]) -> Self {
        let mut v = FormulationVector::new();
        for (x, c) in row.iter().zip(columns) {
            v.add(c.id.clone(), *x, c.unit);
        }
        v
    }
}

impl fmt::Display for FormulationVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .entries
            .iter()
            .map(|(k, a)| format!("{} {}{}", k, format_sig(a.value), a.unit.symbol()))
            .collect();
        f.write_str(&parts.join(" + "))
    }
}

fn format_sig(v: f64) -> String {
    // four significant digits, scientific so the text is unambiguous
    format!("{v:.3e}")
}

/// See [`FormulationVector::signature`].
pub fn signature(vector: &FormulationVector) -> String {
    vector
        .entries
        .iter()
        .filter(|(_, a)| a.value >= a.unit.trace_floor())
        .map(|(k, a)| format!("{}{}={}", k, a.unit.suffix(), format_sig(a.value)))
        .collect::<Vec<_>>()
        .join("|")
}

/// Signature of a dense row in a given column layout.
pub fn row_signature(row: &[f64], columns: &[FeatureColumn]) -> String {
    FormulationVector::from_row(row, columns).signature()
}

fn number_unit_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?x)
            (?P<num>\d+(?:\.\d+)?|\.\d+)\s*
            (?P<unit>
                %\s*\(?\s*(?P<basis>[vVwW]\s*/\s*[vVwW])\s*\)?
              | %
              | (?i:mg\s*/\s*ml)\b
              | (?i:mmol\s*/\s*l)\b
              | (?i:mol\s*/\s*l)\b
              | mM\b
              | M\b
            )",
        )
        .unwrap()
    })
}

fn clause_split_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\s*[+;&]\s*|,\s+|\s+(?:and|with|in|plus)\s+").unwrap()
    })
}

/// Convert a concentration string into the descriptor's canonical unit.
/// Returns `Ok(None)` for zero.
///
/// `%` is read as v/v when the descriptor has a density and as w/v
/// (g/100 mL) otherwise; an explicit `% v/v` on a molar ingredient without
/// density is a conversion error.
pub fn parse_concentration(value_text: &str, ingredient: &IngredientDescriptor) -> Result<Option<f64>> {
    let caps = number_unit_re()
        .captures(value_text)
        .ok_or_else(|| Error::input(format!("no concentration in {value_text:?}")))?;
    let number: f64 = caps["num"]
        .parse()
        .map_err(|_| Error::input(format!("bad number in {value_text:?}")))?;
    let unit = caps["unit"].to_ascii_lowercase().replace(char::is_whitespace, "");
    let basis = caps
        .name("basis")
        .map(|b| b.as_str().to_ascii_lowercase().replace(char::is_whitespace, ""));
    let id = &ingredient.canonical_id;

    let value = match ingredient.unit_class {
        UnitClass::Molar => {
            let mw = ingredient
                .molecular_weight
                .ok_or_else(|| Error::Conversion(format!("{id} has no molecular weight")))?;
            if unit.starts_with('%') {
                match (basis.as_deref(), ingredient.density) {
                    (Some("w/v"), _) | (None, None) => number * 10.0 / mw,
                    (_, Some(density)) => number / 100.0 * density * 1000.0 / mw,
                    (_, None) => {
                        return Err(Error::Conversion(format!(
                            "{id}: % v/v needs a density"
                        )))
                    }
                }
            } else if unit == "mg/ml" {
                number / mw
            } else if unit == "mm" || unit == "mmol/l" {
                // case folded: "mM"
                number * 1e-3
            } else {
                number
            }
        }
        UnitClass::Percent => {
            if unit.starts_with('%') {
                number
            } else if unit == "mg/ml" {
                number / 10.0
            } else {
                let mw = ingredient.molecular_weight.ok_or_else(|| {
                    Error::Conversion(format!("{id} is percent-only; molar input needs a molecular weight"))
                })?;
                let molar = if unit == "mm" || unit == "mmol/l" {
                    number * 1e-3
                } else {
                    number
                };
                molar * mw / 10.0
            }
        }
    };
    if !value.is_finite() || value < 0.0 {
        return Err(Error::Conversion(format!("{value_text:?} gives {value}")));
    }
    Ok((value > 0.0).then_some(value))
}

/// Non-fatal parse finding attached to a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub clause: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ParsedFormulation {
    pub vector: FormulationVector,
    pub warnings: Vec<ParseWarning>,
}

fn clean_name(s: &str) -> String {
    s.replace("()", " ")
        .replace("[]", " ")
        .trim_matches(|c: char| c.is_whitespace() || "()[]:,.-".contains(c))
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parse one free-text formulation record.
pub fn parse_formulation(free_text: &str, registry: &Registry) -> Result<ParsedFormulation> {
    let mut vector = FormulationVector::new();
    let mut warnings = Vec::new();
    let mut pairs = 0usize;
    for clause in clause_split_re().split(free_text.trim()) {
        let clause = clause.trim();
        if clause.is_empty() {
            continue;
        }
        let warn = |msg: String| ParseWarning {
            clause: clause.to_string(),
            message: msg,
        };
        let m = number_unit_re().find(clause);
        let name = match m {
            Some(m) => clean_name(&format!("{} {}", &clause[..m.start()], &clause[m.end()..])),
            None => clean_name(clause),
        };
        if name.is_empty() {
            warnings.push(warn("concentration without ingredient".into()));
            continue;
        }
        let id = match registry.canonicalize(&name)? {
            Canonical::ExcludedMedia => continue,
            Canonical::Unknown => {
                warnings.push(warn(format!("unknown ingredient {name:?} dropped")));
                continue;
            }
            Canonical::Ingredient(id) => id,
        };
        let Some(m) = m else {
            warnings.push(warn(format!("{id} has no concentration")));
            continue;
        };
        let desc = registry.get(&id).expect("lookup ids are registered");
        match parse_concentration(m.as_str(), desc) {
            Ok(Some(v)) => {
                vector.add(id, v, desc.unit_class);
                pairs += 1;
            }
            Ok(None) => pairs += 1,
            Err(e) => warnings.push(warn(e.to_string())),
        }
    }
    if pairs == 0 {
        return Err(Error::RowExcluded(format!(
            "no ingredient/concentration pair in {free_text:?}"
        )));
    }
    Ok(ParsedFormulation { vector, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Literature,
    Wetlab,
}

impl std::str::FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "literature" | "lit" => Ok(Source::Literature),
            "wetlab" | "wet-lab" | "wet_lab" | "wet" => Ok(Source::Wetlab),
            other => Err(Error::input(format!("unknown source {other:?}"))),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Literature => "literature",
            Source::Wetlab => "wetlab",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub vector: FormulationVector,
    pub viability: f64,
    pub source: Source,
    pub stage: u32,
    pub provenance_id: String,
}

impl Observation {
    pub fn new(vector: FormulationVector, viability: f64, source: Source) -> Result<Self> {
        if !(0.0..=100.0).contains(&viability) {
            return Err(Error::input(format!("viability {viability} outside [0, 100]")));
        }
        Ok(Observation {
            vector,
            viability,
            source,
            stage: 0,
            provenance_id: String::new(),
        })
    }
}

/// One feature column of a dataset / search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub id: String,
    pub unit: UnitClass,
    pub family: String,
    pub search_bound: f64,
    #[serde(default)]
    pub molecular_weight: Option<f64>,
    #[serde(default)]
    pub density: Option<f64>,
}

impl FeatureColumn {
    pub fn name(&self) -> String {
        format!("{}{}", self.id, self.unit.suffix())
    }

    pub fn from_descriptor(d: &IngredientDescriptor) -> Self {
        FeatureColumn {
            id: d.canonical_id.clone(),
            unit: d.unit_class,
            family: d.family.clone(),
            search_bound: d.search_bound,
            molecular_weight: d.molecular_weight,
            density: d.density,
        }
    }

    /// Convert a % v/v amount into this column's unit.
    pub fn from_percent_vv(&self, percent: f64) -> f64 {
        match (self.unit, self.density, self.molecular_weight) {
            (UnitClass::Molar, Some(rho), Some(mw)) => percent / 100.0 * rho * 1000.0 / mw,
            (UnitClass::Molar, None, Some(mw)) => percent * 10.0 / mw,
            _ => percent,
        }
    }
}

/// Deduplicated, support-filtered feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Sorted by canonical id.
    pub columns: Vec<FeatureColumn>,
    pub matrix: DMatrix<f64>,
    pub targets: Vec<f64>,
    pub sources: Vec<Source>,
    pub stages: Vec<u32>,
    pub provenance: Vec<String>,
    pub signatures: Vec<String>,
    pub active_mask: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_order(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.id.clone()).collect()
    }

    pub fn active_columns(&self) -> Vec<FeatureColumn> {
        self.columns
            .iter()
            .zip(&self.active_mask)
            .filter(|(_, &a)| a)
            .map(|(c, _)| c.clone())
            .collect()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.matrix.row(i).iter().copied().collect()
    }

    pub fn vector(&self, i: usize) -> FormulationVector {
        FormulationVector::from_row(&self.row(i), &self.columns)
    }

    /// Rows re-expressed in `columns`; ingredients outside `columns` are
    /// dropped.
    pub fn matrix_for(&self, columns: &[FeatureColumn]) -> DMatrix<f64> {
        let idx: Vec<Option<usize>> = columns
            .iter()
            .map(|c| self.columns.iter().position(|o| o.id == c.id))
            .collect();
        DMatrix::from_fn(self.len(), columns.len(), |i, j| {
            idx[j].map_or(0.0, |k| self.matrix[(i, k)])
        })
    }

    pub fn rows_with_source(&self, source: Source) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sources[i] == source).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.clone(),
            matrix: DMatrix::from_fn(rows.len(), self.columns.len(), |i, j| {
                self.matrix[(rows[i], j)]
            }),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            sources: rows.iter().map(|&i| self.sources[i]).collect(),
            stages: rows.iter().map(|&i| self.stages[i]).collect(),
            provenance: rows.iter().map(|&i| self.provenance[i].clone()).collect(),
            signatures: rows.iter().map(|&i| self.signatures[i].clone()).collect(),
            active_mask: self.active_mask.clone(),
        }
    }
}

fn column_for(id: &str, unit: UnitClass, registry: &Registry) -> FeatureColumn {
    match registry.get(id) {
        Some(d) => FeatureColumn::from_descriptor(d),
        None => FeatureColumn {
            id: id.to_string(),
            unit,
            family: "other".into(),
            search_bound: match unit {
                UnitClass::Molar => 1.0,
                UnitClass::Percent => 10.0,
            },
            molecular_weight: None,
            density: None,
        },
    }
}

/// Collapse duplicate signatures (mean viability), order features by id and
/// mask features with fewer than three literature occurrences.
///
/// Rows merge only with rows of the same source. The representative vector
/// of a merged group is its lexicographically smallest member so the result
/// does not depend on record order.
pub fn build_dataset(records: &[Observation], registry: &Registry) -> Result<Dataset> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut units: BTreeMap<String, UnitClass> = BTreeMap::new();
    for r in records {
        if !(0.0..=100.0).contains(&r.viability) {
            return Err(Error::input(format!(
                "viability {} outside [0, 100]",
                r.viability
            )));
        }
        for (id, a) in r.vector.iter() {
            if !(a.value >= 0.0 && a.value.is_finite()) {
                return Err(Error::input(format!("{id}: invalid concentration {}", a.value)));
            }
            units.entry(id.to_string()).or_insert(a.unit);
        }
    }
    let columns: Vec<FeatureColumn> = units
        .iter()
        .map(|(id, unit)| column_for(id, *unit, registry))
        .collect();

    struct Group<'a> {
        members: Vec<&'a Observation>,
    }
    let mut groups: BTreeMap<(String, Source), Group> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.vector.signature(), r.source))
            .or_insert_with(|| Group { members: vec![] })
            .members
            .push(r);
    }

    let n = groups.len();
    let d = columns.len();
    let mut matrix = DMatrix::zeros(n, d);
    let mut targets = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    let mut stages = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    let mut signatures = Vec::with_capacity(n);
    for (i, ((sig, source), group)) in groups.into_iter().enumerate() {
        let rep_row = group
            .members
            .iter()
            .map(|m| m.vector.to_row(&columns))
            .min_by(|a, b| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("groups are non-empty");
        for (j, v) in rep_row.iter().enumerate() {
            matrix[(i, j)] = *v;
        }
        let mut vs: Vec<f64> = group.members.iter().map(|m| m.viability).collect();
        vs.sort_by(f64::total_cmp);
        targets.push(vs.iter().sum::<f64>() / vs.len() as f64);
        sources.push(source);
        stages.push(group.members.iter().map(|m| m.stage).min().unwrap_or(0));
        let prov: BTreeSet<&str> = group.members.iter().map(|m| m.provenance_id.as_str()).collect();
        provenance.push(prov.into_iter().collect::<Vec<_>>().join(";"));
        signatures.push(sig);
    }

    let active_mask = (0..d)
        .map(|j| {
            let floor = columns[j].unit.trace_floor();
            (0..n)
                .filter(|&i| sources[i] == Source::Literature && matrix[(i, j)] >= floor)
                .count()
                >= MIN_LITERATURE_SUPPORT
        })
        .collect();

    Ok(Dataset {
        columns,
        matrix,
        targets,
        sources,
        stages,
        provenance,
        signatures,
        active_mask,
    })
}

/// A raw-record CSV row that was skipped.
#[derive(Debug, Clone)]
pub struct RejectedRow {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub observations: Vec<Observation>,
    pub warnings: Vec<(String, ParseWarning)>,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    record_id: String,
    formulation_text: String,
    viability_percent: String,
    source: String,
    #[serde(default)]
    provenance_id: String,
}

/// Read a raw-record CSV: `record_id, formulation_text, viability_percent,
/// source, provenance_id`.
pub fn read_records_csv<R: Read>(reader: R, registry: &Registry) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut report = IngestReport::default();
    for rec in rdr.deserialize::<RawRecord>() {
        let rec = rec?;
        let reject = |reason: String| RejectedRow {
            record_id: rec.record_id.clone(),
            reason,
        };
        let viability: f64 = match rec.viability_percent.trim().trim_end_matches('%').parse() {
            Ok(v) => v,
            Err(_) => {
                report.rejected.push(reject(format!(
                    "no extractable viability in {:?}",
                    rec.viability_percent
                )));
                continue;
            }
        };
        if !(0.0..=100.0).contains(&viability) {
            report
                .rejected
                .push(reject(format!("viability {viability} outside [0, 100]")));
            continue;
        }
        let source = match rec.source.parse::<Source>() {
            Ok(s) => s,
            Err(e) => {
                report.rejected.push(reject(e.to_string()));
                continue;
            }
        };
        match parse_formulation(&rec.formulation_text, registry) {
            Ok(parsed) => {
                report
                    .warnings
                    .extend(parsed.warnings.into_iter().map(|w| (rec.record_id.clone(), w)));
                report.observations.push(Observation {
                    vector: parsed.vector,
                    viability,
                    source,
                    stage: 0,
                    provenance_id: rec.provenance_id.clone(),
                });
            }
            Err(e) => report.rejected.push(reject(e.to_string())),
        }
    }
    Ok(report)
}

/// Write a parsed dataset: one `<id>_M` / `<id>_pct` column per feature,
/// then `viability_percent, source, signature`.
pub fn write_dataset_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = dataset.columns.iter().map(FeatureColumn::name).collect();
    header.extend(["viability_percent", "source", "signature"].map(String::from));
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.matrix.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(dataset.targets[i].to_string());
        rec.push(dataset.sources[i].to_string());
        rec.push(dataset.signatures[i].clone());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Write observations with their stage and provenance: one column per
/// feature present in any row, then `viability_percent, source, stage,
/// provenance_id, signature`. Readable by [`read_parsed_csv`].
pub fn write_observations_csv<W: Write>(records: &[Observation], writer: W) -> Result<()> {
    let mut units: BTreeMap<String, UnitClass> = BTreeMap::new();
    for r in records {
        for (id, a) in r.vector.iter() {
            units.entry(id.to_string()).or_insert(a.unit);
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = units.iter().map(|(id, u)| format!("{id}{}", u.suffix())).collect();
    header.extend(["viability_percent", "source", "stage", "provenance_id", "signature"].map(String::from));
    w.write_record(&header)?;
    for r in records {
        let mut rec: Vec<String> = units
            .keys()
            .map(|id| r.vector.get(id).map_or(0.0, |a| a.value).to_string())
            .collect();
        rec.push(r.viability.to_string());
        rec.push(r.source.to_string());
        rec.push(r.stage.to_string());
        rec.push(r.provenance_id.clone());
        rec.push(r.vector.signature());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Split a parsed-CSV column name into (canonical id, unit class).
pub fn split_column_name(name: &str) -> Option<(&str, UnitClass)> {
    if let Some(id) = name.strip_suffix("_pct") {
        Some((id, UnitClass::Percent))
    } else {
        name.strip_suffix("_M").map(|id| (id, UnitClass::Molar))
    }
}

/// Read observations back from a parsed CSV (the format written by
/// [`write_dataset_csv`]).
pub fn read_parsed_csv<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let feature_cols: Vec<(usize, String, UnitClass)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| split_column_name(h).map(|(id, u)| (i, id.to_string(), u)))
        .collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let via = find("viability_percent")
        .ok_or_else(|| Error::input("parsed CSV lacks viability_percent"))?;
    let src = find("source");
    let stage = find("stage");
    let prov = find("provenance_id");
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(0.0);
            }
            s.parse()
                .map_err(|_| Error::input(format!("row {}: bad number {s:?}", line + 1)))
        };
        let mut vector = FormulationVector::new();
        for (i, id, unit) in &feature_cols {
            vector.add(id.clone(), num(*i)?, *unit);
        }
        let mut obs = Observation::new(
            vector,
            num(via)?,
            match src {
                Some(i) => rec.get(i).unwrap_or("literature").parse()?,
                None => Source::Literature,
            },
        )?;
        if let Some(i) = stage {
            obs.stage = rec.get(i).unwrap_or("0").trim().parse().unwrap_or(0);
        }
        if let Some(i) = prov {
            obs.provenance_id = rec.get(i).unwrap_or("").to_string();
        }
        out.push(obs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> Registry {
        Registry::builtin()
    }

    #[test]
    fn synonyms_resolve_case_insensitively() {
        let r = reg();
        assert_eq!(r.canonicalize("Me2SO").unwrap(), Canonical::Ingredient("DMSO".into()));
        assert_eq!(r.canonicalize("  me2so ").unwrap(), Canonical::Ingredient("DMSO".into()));
        assert_eq!(r.canonicalize("Ectoine").unwrap(), Canonical::Ingredient("ectoin".into()));
        assert_eq!(r.canonicalize("FCS").unwrap(), Canonical::Ingredient("FBS".into()));
        assert_eq!(r.canonicalize("1,2-propanediol").unwrap(), Canonical::Ingredient("PG".into()));
        assert_eq!(r.canonicalize("dextran-40").unwrap(), Canonical::Ingredient("dextran".into()));
    }

    #[test]
    fn media_is_excluded_and_unknown_is_unknown() {
        let r = reg();
        assert_eq!(r.canonicalize("DMEM").unwrap(), Canonical::ExcludedMedia);
        assert_eq!(r.canonicalize("α-MEM").unwrap(), Canonical::ExcludedMedia);
        assert_eq!(r.canonicalize("xyzzy-polymer").unwrap(), Canonical::Unknown);
        assert!(matches!(r.canonicalize("   "), Err(Error::Input(_))));
    }

    #[test]
    fn overlapping_synonyms_are_rejected() {
        let d = |id: &str, syn: &[&str]| IngredientDescriptor {
            canonical_id: id.into(),
            synonyms: syn.iter().map(|s| s.to_string()).collect(),
            unit_class: UnitClass::Percent,
            molecular_weight: None,
            density: None,
            family: "x".into(),
            search_bound: 1.0,
        };
        let err = Registry::new(vec![d("A", &["foo"]), d("B", &["FOO"])], vec![]);
        assert!(matches!(err, Err(Error::Registry(_))));
        let mut bad = d("C", &[]);
        bad.unit_class = UnitClass::Molar;
        assert!(Registry::new(vec![bad], vec![]).is_err());
    }

    #[test]
    fn concentration_units() {
        let r = reg();
        let treh = r.get("trehalose").unwrap();
        let dmso = r.get("DMSO").unwrap();
        let fbs = r.get("FBS").unwrap();
        assert!((parse_concentration("300 mM", treh).unwrap().unwrap() - 0.3).abs() < 1e-12);
        let expected = 0.10 * 1100.4 / 78.13;
        let got = parse_concentration("10%", dmso).unwrap().unwrap();
        assert!((got - expected).abs() < 1e-12, "{got}");
        assert!((got - 1.408).abs() < 5e-4);
        assert_eq!(parse_concentration("0 M", dmso).unwrap(), None);
        assert_eq!(parse_concentration("90%", fbs).unwrap(), Some(90.0));
        // mg/ml on a molar ingredient: g/L divided by MW
        let v = parse_concentration("34.23 mg/ml", treh).unwrap().unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        // % on a solid without density: w/v
        let v = parse_concentration("10%", treh).unwrap().unwrap();
        assert!((v - 100.0 / 342.30).abs() < 1e-12);
        assert!(matches!(
            parse_concentration("10 % v/v", treh),
            Err(Error::Conversion(_))
        ));
        assert!(matches!(parse_concentration("ten", dmso), Err(Error::Input(_))));
        assert!(matches!(parse_concentration("5 ppm", dmso), Err(Error::Input(_))));
    }

    #[test]
    fn formulation_text_examples() {
        let r = reg();
        let p = parse_formulation("10% DMSO + 90% FBS", &r).unwrap();
        assert!((p.vector.get("DMSO").unwrap().value - 1.40838).abs() < 1e-4);
        assert_eq!(p.vector.get("FBS").unwrap().value, 90.0);
        assert_eq!(p.vector.len(), 2);

        let p = parse_formulation("5% DMSO in DMEM", &r).unwrap();
        assert_eq!(p.vector.len(), 1);
        assert!((p.vector.get("DMSO").unwrap().value - 0.70419).abs() < 1e-4);
        assert!(p.warnings.is_empty());

        assert!(matches!(parse_formulation("", &r), Err(Error::RowExcluded(_))));
        assert!(matches!(parse_formulation("DMEM", &r), Err(Error::RowExcluded(_))));

        let p = parse_formulation("10% DMSO, 2% xyzzy-polymer", &r).unwrap();
        assert_eq!(p.vector.len(), 1);
        assert_eq!(p.warnings.len(), 1);

        let p = parse_formulation("trehalose (300 mM) + 1,2-propanediol 1 M; 0.5 mg/ml HA", &r).unwrap();
        assert!((p.vector.get("trehalose").unwrap().value - 0.3).abs() < 1e-12);
        assert_eq!(p.vector.get("PG").unwrap().value, 1.0);
        assert!((p.vector.get("HA").unwrap().value - 0.05).abs() < 1e-12);
    }

    #[test]
    fn signature_examples() {
        let trace = FormulationVector::new().with("DMSO", 0.0005, UnitClass::Molar);
        assert_eq!(trace.signature(), "");

        let a = FormulationVector::new()
            .with("EG", 1.0, UnitClass::Molar)
            .with("sucrose", 0.0009, UnitClass::Molar);
        let b = FormulationVector::new().with("EG", 1.0, UnitClass::Molar);
        assert_eq!(a.signature(), b.signature());

        let x = FormulationVector::new()
            .with("A", 1.0, UnitClass::Molar)
            .with("B", 2.0, UnitClass::Percent);
        let y = FormulationVector::new()
            .with("B", 2.0, UnitClass::Percent)
            .with("A", 1.0, UnitClass::Molar);
        assert_eq!(x.signature(), y.signature());
        assert_eq!(x.signature(), "A_M=1.000e0|B_pct=2.000e0");

        // four significant digits
        let j1 = FormulationVector::new().with("EG", 1.00001, UnitClass::Molar);
        assert_eq!(j1.signature(), b.signature());
        let j2 = FormulationVector::new().with("EG", 1.001, UnitClass::Molar);
        assert_ne!(j2.signature(), b.signature());
    }

    fn obs(v: FormulationVector, y: f64, s: Source) -> Observation {
        Observation::new(v, y, s).unwrap()
    }

    #[test]
    fn duplicates_collapse_to_mean() {
        let r = reg();
        let v = FormulationVector::new().with("DMSO", 1.0, UnitClass::Molar);
        let ds = build_dataset(
            &[obs(v.clone(), 60.0, Source::Literature), obs(v, 70.0, Source::Literature)],
            &r,
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.targets[0], 65.0);
    }

    #[test]
    fn support_mask_needs_three_literature_rows() {
        let r = reg();
        let mut rows = vec![];
        for i in 0..3 {
            rows.push(obs(
                FormulationVector::new().with("DMSO", 0.5 + i as f64 * 0.1, UnitClass::Molar),
                50.0,
                Source::Literature,
            ));
        }
        for i in 0..2 {
            rows.push(obs(
                FormulationVector::new().with("EG", 0.5 + i as f64 * 0.1, UnitClass::Molar),
                50.0,
                Source::Literature,
            ));
        }
        // wet-lab rows do not count toward support
        rows.push(obs(
            FormulationVector::new().with("EG", 2.0, UnitClass::Molar),
            50.0,
            Source::Wetlab,
        ));
        let ds = build_dataset(&rows, &r).unwrap();
        assert_eq!(ds.feature_order(), vec!["DMSO", "EG"]);
        assert_eq!(ds.active_mask, vec![true, false]);
    }

    #[test]
    fn single_and_empty_inputs() {
        let r = reg();
        let ds = build_dataset(
            &[obs(FormulationVector::new().with("FBS", 10.0, UnitClass::Percent), 40.0, Source::Literature)],
            &r,
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.active_mask, vec![false]);
        assert!(matches!(build_dataset(&[], &r), Err(Error::EmptyDataset)));
    }

    #[test]
    fn records_csv_rejects_bad_rows() {
        let csv = "record_id,formulation_text,viability_percent,source,provenance_id\n\
                   r1,10% DMSO + 90% FBS,80,literature,doi:1\n\
                   r2,5% DMSO in DMEM,112,literature,doi:2\n\
                   r3,,50,literature,doi:3\n\
                   r4,1 M EG,n/a,literature,doi:4\n\
                   r5,1 M EG,55.5,wetlab,EXP1\n";
        let rep = read_records_csv(csv.as_bytes(), &reg()).unwrap();
        assert_eq!(rep.observations.len(), 2);
        assert_eq!(rep.rejected.len(), 3);
        assert_eq!(rep.observations[1].source, Source::Wetlab);
    }

    #[test]
    fn parsed_csv_round_trip() {
        let r = reg();
        let rows = vec![
            obs(parse_formulation("10% DMSO + 90% FBS", &r).unwrap().vector, 80.0, Source::Literature),
            obs(parse_formulation("1 M EG", &r).unwrap().vector, 30.0, Source::Literature),
        ];
        let ds = build_dataset(&rows, &r).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("DMSO_M,EG_M,FBS_pct,viability_percent,source,signature"));
        let back = build_dataset(&read_parsed_csv(&buf[..]).unwrap(), &r).unwrap();
        assert_eq!(back.signatures, ds.signatures);
        assert_eq!(back.targets, ds.targets);
    }
}
