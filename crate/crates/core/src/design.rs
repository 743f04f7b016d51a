//! Design terms and feature maps.
//!
//! A term is `1` (intercept), a variable name, a power such as `X^2`, or a
//! product such as `X:Y` or `X^2:Y`. Categorical variables expand into
//! treatment-coded indicators for every level except the first, and products
//! involving categoricals expand into all combinations of those indicators.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DVector;

use crate::data::{PatternMask, VarKind, VariableSchema};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
struct Factor {
    var: usize,
    power: u32,
}

/// One parsed term; the intercept has no factors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Term {
    text: String,
    factors: Vec<Factor>,
    /// Column multiplicity per factor (1 for numeric, levels - 1 for categorical).
    widths: Vec<usize>,
    categorical: Vec<bool>,
}

impl Term {
    pub fn intercept() -> Self {
        Self {
            text: "1".into(),
            factors: Vec::new(),
            widths: Vec::new(),
            categorical: Vec::new(),
        }
    }

    pub fn parse(schema: &VariableSchema, text: &str) -> Result<Self> {
        let text = text.trim();
        let bad = |message: &str| Error::Term {
            term: text.to_string(),
            message: message.to_string(),
        };
        if text == "1" {
            return Ok(Self::intercept());
        }
        if text.is_empty() {
            return Err(bad("empty term"));
        }
        let mut factors = Vec::new();
        let mut widths = Vec::new();
        let mut categorical = Vec::new();
        for part in text.split(':') {
            let part = part.trim();
            let (name, power) = match part.split_once('^') {
                Some((name, p)) => {
                    let power: u32 = p
                        .trim()
                        .parse()
                        .map_err(|_| bad("power must be a positive integer"))?;
                    if power == 0 {
                        return Err(bad("power must be a positive integer"));
                    }
                    (name.trim(), power)
                }
                None => (part, 1),
            };
            let var = schema.index_of(name).map_err(|_| bad(&format!("unknown variable `{name}`")))?;
            if factors.iter().any(|f: &Factor| f.var == var) {
                return Err(bad("a variable may appear only once in a product; use a power"));
            }
            match schema.kind(var) {
                VarKind::Categorical(levels) => {
                    if power != 1 {
                        return Err(bad("powers of categorical variables are not defined"));
                    }
                    if levels.len() < 2 {
                        return Err(bad("categorical variable with a single level carries no contrast"));
                    }
                    widths.push(levels.len() - 1);
                    categorical.push(true);
                }
                _ => {
                    widths.push(1);
                    categorical.push(false);
                }
            }
            factors.push(Factor { var, power });
        }
        Ok(Self {
            text: text.to_string(),
            factors,
            widths,
            categorical,
        })
    }

    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn variables(&self) -> impl Iterator<Item = usize> + '_ {
        self.factors.iter().map(|f| f.var)
    }

    pub fn ncols(&self) -> usize {
        self.widths.iter().product()
    }

    fn column_names(&self, schema: &VariableSchema) -> Vec<String> {
        if self.is_intercept() {
            return vec!["1".into()];
        }
        let mut names = vec![String::new()];
        for (f, &cat) in self.factors.iter().zip(&self.categorical) {
            let labels: Vec<String> = if cat {
                let VarKind::Categorical(levels) = schema.kind(f.var) else {
                    unreachable!()
                };
                levels[1..]
                    .iter()
                    .map(|l| format!("{}[{}]", schema.name(f.var), l))
                    .collect()
            } else if f.power == 1 {
                vec![schema.name(f.var).to_string()]
            } else {
                vec![format!("{}^{}", schema.name(f.var), f.power)]
            };
            names = names
                .iter()
                .flat_map(|prefix| {
                    labels.iter().map(move |l| {
                        if prefix.is_empty() {
                            l.clone()
                        } else {
                            format!("{prefix}:{l}")
                        }
                    })
                })
                .collect();
        }
        names
    }

    fn push_values(&self, value: &dyn Fn(usize) -> Option<f64>, out: &mut Vec<f64>) -> std::result::Result<(), usize> {
        let start = out.len();
        out.push(1.0);
        for (i, f) in self.factors.iter().enumerate() {
            let v = value(f.var).ok_or(f.var)?;
            let current: Vec<f64> = out.drain(start..).collect();
            if self.categorical[i] {
                let width = self.widths[i];
                for c in current {
                    for level in 1..=width {
                        out.push(if v as usize == level { c } else { 0.0 });
                    }
                }
            } else {
                let p = v.powi(f.power as i32);
                out.extend(current.into_iter().map(|c| c * p));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// An ordered list of terms with resolved column names.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    terms: Vec<Term>,
    names: Vec<String>,
    var_names: Vec<String>,
}

impl Design {
    pub fn parse<S: AsRef<str>>(schema: &VariableSchema, terms: &[S]) -> Result<Self> {
        let terms = terms
            .iter()
            .map(|t| Term::parse(schema, t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_terms(schema, terms)
    }

    pub fn from_terms(schema: &VariableSchema, terms: Vec<Term>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &terms {
            if !seen.insert(t.text.replace(' ', "")) {
                return Err(Error::Term {
                    term: t.text.clone(),
                    message: "duplicate term".into(),
                });
            }
        }
        let names = terms.iter().flat_map(|t| t.column_names(schema)).collect();
        let var_names = (0..schema.len()).map(|j| schema.name(j).to_string()).collect();
        Ok(Self {
            terms,
            names,
            var_names,
        })
    }

    pub fn intercept_only(schema: &VariableSchema) -> Self {
        Self::from_terms(schema, vec![Term::intercept()]).expect("intercept-only design")
    }

    /// Intercept plus the listed variables.
    pub fn main_effects(schema: &VariableSchema, vars: &[usize]) -> Self {
        let mut terms = vec![Term::intercept()];
        for &j in vars {
            terms.push(Term::parse(schema, schema.name(j)).expect("schema variable"));
        }
        Self::from_terms(schema, terms).expect("main-effects design")
    }

    /// Intercept, main effects and all two-way products of the listed variables.
    pub fn main_and_pairwise(schema: &VariableSchema, vars: &[usize]) -> Self {
        let mut terms = vec![Term::intercept()];
        for &j in vars {
            terms.push(Term::parse(schema, schema.name(j)).expect("schema variable"));
        }
        for (a, &j) in vars.iter().enumerate() {
            for &k in &vars[a + 1..] {
                let text = format!("{}:{}", schema.name(j), schema.name(k));
                terms.push(Term::parse(schema, &text).expect("schema variables"));
            }
        }
        Self::from_terms(schema, terms).expect("pairwise design")
    }

    /// Same design with an intercept prepended when absent.
    pub fn with_intercept(mut self) -> Self {
        if !self.has_intercept() {
            self.terms.insert(0, Term::intercept());
            self.names.insert(0, "1".into());
        }
        self
    }

    /// Same design with any intercept removed.
    pub fn without_intercept(mut self) -> Self {
        if let Some(pos) = self.terms.iter().position(Term::is_intercept) {
            self.terms.remove(pos);
            let offset: usize = self.terms[..pos].iter().map(Term::ncols).sum();
            self.names.remove(offset);
        }
        self
    }

    pub fn has_intercept(&self) -> bool {
        self.terms.iter().any(Term::is_intercept)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn term_strings(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.text.clone()).collect()
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Sorted indices of the variables referenced by any term.
    pub fn variables(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.terms.iter().flat_map(Term::variables).collect();
        set.into_iter().collect()
    }

    /// Fails naming the first variable the design needs but `mask` leaves unobserved.
    pub fn check_observed(&self, mask: &PatternMask) -> std::result::Result<(), String> {
        match self.variables().into_iter().find(|&j| !mask.is_observed(j)) {
            Some(j) => Err(self.var_names[j].clone()),
            None => Ok(()),
        }
    }

    fn eval_with(&self, value: &dyn Fn(usize) -> Option<f64>) -> Result<DVector<f64>> {
        let mut out = Vec::with_capacity(self.ncols());
        for t in &self.terms {
            t.push_values(value, &mut out)
                .map_err(|j| Error::MissingValue(self.var_names[j].clone()))?;
        }
        Ok(DVector::from_vec(out))
    }

    /// Feature vector of a row with possibly missing values.
    pub fn eval(&self, row: &[Option<f64>]) -> Result<DVector<f64>> {
        self.eval_with(&|j| row[j])
    }

    /// Feature vector of a fully specified row; NaN entries count as missing.
    pub fn eval_full(&self, row: &[f64]) -> Result<DVector<f64>> {
        self.eval_with(&|j| Some(row[j]).filter(|v| !v.is_nan()))
    }
}
