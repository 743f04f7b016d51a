//! Datasets with arbitrary nonmonotone missingness.
//!
//! Rows hold `K` optional values. Every distinct missingness mask becomes a
//! pattern; pattern ids are dense in `1..=J`, id 1 is always the complete case
//! and the remaining ids are ordered by descending frequency (ties broken by
//! the mask read as a binary number, first variable most significant, larger
//! first). Assignment depends only on the multiset of masks, so shuffling rows
//! leaves the pattern table unchanged.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ldcm::NonresponseFit;

/// Measurement scale of one variable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Continuous,
    /// Coded 0/1.
    Binary,
    /// Stored as the level index `0..levels.len()`.
    Categorical(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
}

impl Variable {
    pub fn new(name: impl Into<String>, kind: VarKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Ordered, uniquely named variables `L = (L_1, ..., L_K)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Variable>", into = "Vec<Variable>")]
pub struct VariableSchema {
    vars: Vec<Variable>,
}

impl TryFrom<Vec<Variable>> for VariableSchema {
    type Error = Error;

    fn try_from(vars: Vec<Variable>) -> Result<Self> {
        Self::new(vars)
    }
}

impl From<VariableSchema> for Vec<Variable> {
    fn from(s: VariableSchema) -> Self {
        s.vars
    }
}

impl VariableSchema {
    pub fn new(vars: Vec<Variable>) -> Result<Self> {
        if vars.is_empty() {
            return Err(Error::Schema("at least one variable is required".into()));
        }
        for (i, v) in vars.iter().enumerate() {
            if v.name.trim().is_empty() {
                return Err(Error::Schema(format!("variable {} has an empty name", i + 1)));
            }
            if vars[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::Schema(format!("duplicate variable name `{}`", v.name)));
            }
            if let VarKind::Categorical(levels) = &v.kind {
                if levels.is_empty() {
                    return Err(Error::Schema(format!(
                        "categorical variable `{}` has no levels",
                        v.name
                    )));
                }
            }
        }
        Ok(Self { vars })
    }

    /// Shorthand for an all-continuous schema.
    pub fn continuous(names: &[&str]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| Variable::new(*n, VarKind::Continuous))
                .collect(),
        )
    }

    /// Shorthand for an all-binary schema.
    pub fn binary(names: &[&str]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| Variable::new(*n, VarKind::Binary))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.vars
    }

    pub fn name(&self, j: usize) -> &str {
        &self.vars[j].name
    }

    pub fn kind(&self, j: usize) -> &VarKind {
        &self.vars[j].kind
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.vars
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Number of support points of a discrete variable, `None` when continuous.
    pub fn levels(&self, j: usize) -> Option<usize> {
        match &self.vars[j].kind {
            VarKind::Continuous => None,
            VarKind::Binary => Some(2),
            VarKind::Categorical(l) => Some(l.len()),
        }
    }

    /// True when every variable has finite support.
    pub fn is_discrete(&self) -> bool {
        (0..self.len()).all(|j| self.levels(j).is_some())
    }

    fn parse_cell(&self, j: usize, raw: &str) -> std::result::Result<f64, String> {
        match &self.vars[j].kind {
            VarKind::Continuous => {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| format!("`{raw}` is not a number"))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(format!("`{raw}` is not finite"))
                }
            }
            VarKind::Binary => match raw {
                "0" | "0.0" | "false" | "FALSE" => Ok(0.0),
                "1" | "1.0" | "true" | "TRUE" => Ok(1.0),
                _ => Err(format!("`{raw}` is not a binary value")),
            },
            VarKind::Categorical(levels) => levels
                .iter()
                .position(|l| l == raw)
                .map(|i| i as f64)
                .ok_or_else(|| format!("`{raw}` is not a declared level")),
        }
    }

    /// Checks a stored value against the variable's kind.
    fn validate_value(&self, j: usize, v: f64) -> std::result::Result<(), String> {
        if !v.is_finite() {
            return Err("value is not finite".into());
        }
        if let Some(levels) = self.levels(j) {
            if v.fract() != 0.0 || v < 0.0 || v >= levels as f64 {
                return Err(format!("value {v} outside the {levels} declared levels"));
            }
        }
        Ok(())
    }

    /// Renders a stored value the way `ingest_csv` would read it back.
    pub fn format_value(&self, j: usize, v: f64) -> String {
        match &self.vars[j].kind {
            VarKind::Continuous => format!("{v}"),
            VarKind::Binary => format!("{}", v as u8),
            VarKind::Categorical(levels) => levels[v as usize].clone(),
        }
    }
}

/// Which variables are observed under a pattern (`true` = observed).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatternMask(Vec<bool>);

impl PatternMask {
    pub fn new(observed: Vec<bool>) -> Self {
        Self(observed)
    }

    pub fn complete(k: usize) -> Self {
        Self(vec![true; k])
    }

    pub fn of_row(row: &[Option<f64>]) -> Self {
        Self(row.iter().map(Option::is_some).collect())
    }

    /// Parses a bit string such as `"101"`.
    pub fn parse(bits: &str) -> Result<Self> {
        bits.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Invalid(format!("mask `{bits}` must contain only 0 and 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(|&b| b)
    }

    pub fn is_observed(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn observed(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&j| self.0[j]).collect()
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&j| !self.0[j]).collect()
    }

    fn cmp_binary(&self, other: &Self) -> std::cmp::Ordering {
        // equal lengths: lexicographic order on bits is numeric order
        self.0.cmp(&other.0)
    }
}

impl fmt::Display for PatternMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatternInfo {
    pub id: usize,
    pub mask: PatternMask,
    pub count: usize,
}

/// One line of the exported pattern table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub id: usize,
    pub mask: String,
    pub count: usize,
    pub percent: f64,
}

/// Rectangular data with per-row missingness pattern codes.
#[derive(Clone, Debug)]
pub struct PatternedDataset {
    schema: VariableSchema,
    values: Vec<Option<f64>>,
    pattern_of: Vec<usize>,
    patterns: Vec<PatternInfo>,
}

impl PatternedDataset {
    /// Builds a dataset from in-memory rows, validating every present value.
    pub fn from_rows(schema: VariableSchema, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let k = schema.len();
        let mut values = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != k {
                return Err(Error::Parse {
                    row: i + 1,
                    column: "*".into(),
                    message: format!("expected {k} values, found {}", row.len()),
                });
            }
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    schema.validate_value(j, *v).map_err(|message| Error::Parse {
                        row: i + 1,
                        column: schema.name(j).to_string(),
                        message,
                    })?;
                }
            }
            values.extend(row);
        }
        Self::assemble(schema, values)
    }

    fn assemble(schema: VariableSchema, values: Vec<Option<f64>>) -> Result<Self> {
        let k = schema.len();
        let n = values.len() / k;
        let masks: Vec<PatternMask> = values.chunks(k).map(PatternMask::of_row).collect();

        let mut counts: HashMap<&PatternMask, usize> = HashMap::new();
        for m in &masks {
            *counts.entry(m).or_default() += 1;
        }
        let complete = PatternMask::complete(k);
        let cc = counts.get(&complete).copied().unwrap_or(0);
        if cc == 0 {
            return Err(Error::NoCompleteCases);
        }
        let mut others: Vec<(PatternMask, usize)> = counts
            .iter()
            .filter(|(m, _)| !m.is_complete())
            .map(|(m, &c)| ((*m).clone(), c))
            .collect();
        others.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| b.0.cmp_binary(&a.0)));

        let mut patterns = vec![PatternInfo {
            id: 1,
            mask: complete,
            count: cc,
        }];
        for (i, (mask, count)) in others.into_iter().enumerate() {
            patterns.push(PatternInfo {
                id: i + 2,
                mask,
                count,
            });
        }
        let lookup: HashMap<&PatternMask, usize> =
            patterns.iter().map(|p| (&p.mask, p.id)).collect();
        let pattern_of = masks.iter().map(|m| lookup[m]).collect();
        debug_assert_eq!(n, masks.len());

        Ok(Self {
            schema,
            values,
            pattern_of,
            patterns,
        })
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.pattern_of.len()
    }

    pub fn k(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        let k = self.k();
        &self.values[i * k..(i + 1) * k]
    }

    /// The row as plain numbers; `None` unless every value is present.
    pub fn full_row(&self, i: usize) -> Option<Vec<f64>> {
        self.row(i).iter().copied().collect()
    }

    pub fn pattern_id(&self, i: usize) -> usize {
        self.pattern_of[i]
    }

    pub fn mask_of_row(&self, i: usize) -> &PatternMask {
        &self.patterns[self.pattern_of[i] - 1].mask
    }

    pub fn is_complete(&self, i: usize) -> bool {
        self.pattern_of[i] == 1
    }

    /// Patterns ordered by id.
    pub fn patterns(&self) -> &[PatternInfo] {
        &self.patterns
    }

    pub fn num_patterns(&self) -> usize {
        self.patterns.len()
    }

    pub fn pattern(&self, id: usize) -> Option<&PatternInfo> {
        id.checked_sub(1).and_then(|i| self.patterns.get(i))
    }

    pub fn id_for_mask(&self, mask: &PatternMask) -> Option<usize> {
        self.patterns.iter().find(|p| &p.mask == mask).map(|p| p.id)
    }

    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.is_complete(i)).collect()
    }

    pub fn complete_count(&self) -> usize {
        self.patterns[0].count
    }

    /// Patterns whose count falls below `min_count`; they are kept, only reported.
    pub fn rare_patterns(&self, min_count: usize) -> Vec<usize> {
        self.patterns
            .iter()
            .filter(|p| p.count < min_count)
            .map(|p| p.id)
            .collect()
    }

    /// New dataset made of the given rows (with repetition); patterns are re-derived.
    pub fn resample(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.k());
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        Self::assemble(self.schema.clone(), values)
    }

    /// Writes the dataset as CSV, leaving missing cells empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.schema.variables().iter().map(|v| v.name.as_str()))?;
        for i in 0..self.n() {
            let rec: Vec<String> = self
                .row(i)
                .iter()
                .enumerate()
                .map(|(j, v)| v.map(|v| self.schema.format_value(j, v)).unwrap_or_default())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a CSV file (header required) into a patterned dataset.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    schema: &VariableSchema,
    na_token: &str,
) -> Result<PatternedDataset> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, schema, na_token)
}

pub fn ingest_reader<R: Read>(
    reader: R,
    schema: &VariableSchema,
    na_token: &str,
) -> Result<PatternedDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut column_of = vec![usize::MAX; schema.len()];
    for (c, name) in header.iter().enumerate() {
        let j = schema.index_of(name.trim())?;
        column_of[j] = c;
    }
    if let Some(j) = column_of.iter().position(|&c| c == usize::MAX) {
        return Err(Error::Schema(format!(
            "column `{}` declared in schema but absent from header",
            schema.name(j)
        )));
    }

    let mut values = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, &c) in column_of.iter().enumerate() {
            let raw = rec.get(c).unwrap_or("").trim();
            if raw.is_empty() || raw == na_token {
                values.push(None);
            } else {
                let v = schema.parse_cell(j, raw).map_err(|message| Error::Parse {
                    row: r + 1,
                    column: schema.name(j).to_string(),
                    message,
                })?;
                values.push(Some(v));
            }
        }
    }
    PatternedDataset::assemble(schema.clone(), values)
}

/// Guesses a schema from the data: 0/1 columns are binary, numeric columns
/// continuous, anything else categorical with levels in order of appearance.
pub fn infer_schema(path: impl AsRef<Path>, na_token: &str) -> Result<VariableSchema> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (c, col) in cells.iter_mut().enumerate() {
            let raw = rec.get(c).unwrap_or("").trim();
            if !raw.is_empty() && raw != na_token {
                col.push(raw.to_string());
            }
        }
    }
    let vars = names
        .into_iter()
        .zip(cells)
        .map(|(name, col)| {
            let kind = if col.iter().all(|s| s == "0" || s == "1") {
                VarKind::Binary
            } else if col.iter().all(|s| s.parse::<f64>().is_ok_and(f64::is_finite)) {
                VarKind::Continuous
            } else {
                let mut levels: Vec<String> = Vec::new();
                for s in col {
                    if !levels.contains(&s) {
                        levels.push(s);
                    }
                }
                VarKind::Categorical(levels)
            };
            Variable { name, kind }
        })
        .collect();
    VariableSchema::new(vars)
}

/// Pattern table ordered by id; percents sum to 100.
pub fn tabulate_patterns(d: &PatternedDataset) -> Vec<PatternRow> {
    let n = d.n() as f64;
    d.patterns()
        .iter()
        .map(|p| PatternRow {
            id: p.id,
            mask: p.mask.to_string(),
            count: p.count,
            percent: 100.0 * p.count as f64 / n,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub min_estimated_pi1: f64,
    /// Zero-based row indices.
    pub flagged_rows: Vec<usize>,
    pub threshold: f64,
}

/// Flags complete-case rows whose fitted complete-case probability falls
/// below `sigma`. Incomplete rows are skipped because their probability
/// depends on unobserved values. Advisory only.
pub fn check_positivity(d: &PatternedDataset, fit: &NonresponseFit, sigma: f64) -> PositivityReport {
    let mut min = 1.0f64;
    let mut flagged = Vec::new();
    for i in d.complete_rows() {
        if let Ok(p) = fit.model().pi1(d.row(i)) {
            min = min.min(p);
            if p < sigma {
                flagged.push(i);
            }
        }
    }
    PositivityReport {
        min_estimated_pi1: min,
        flagged_rows: flagged,
        threshold: sigma,
    }
}
