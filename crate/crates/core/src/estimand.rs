//! Full-data estimating functions `U(L; β)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::data::{VarKind, VariableSchema};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::numeric::expit;

/// A full-data estimating function with a unique root `β_0` of `E U(L; β) = 0`.
///
/// Rows are passed as fully specified `K`-vectors; variables the estimand does
/// not use may hold NaN.
pub trait Estimand: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn names(&self) -> Vec<String>;
    /// Sorted indices of the variables `U` depends on.
    fn variables(&self) -> Vec<usize>;
    fn value(&self, row: &[f64], beta: &DVector<f64>) -> Result<DVector<f64>>;
    /// `∂U/∂β`, `p × p`.
    fn jacobian(&self, row: &[f64], beta: &DVector<f64>) -> Result<DMatrix<f64>>;
    /// True when `U` is affine in variable `var` for fixed other inputs.
    fn affine_in(&self, var: usize) -> bool;
}

/// `U = L_j − β`.
#[derive(Clone, Debug)]
pub struct CoordinateMean {
    var: usize,
    name: String,
}

impl Estimand for CoordinateMean {
    fn dim(&self) -> usize {
        1
    }

    fn names(&self) -> Vec<String> {
        vec![format!("mean({})", self.name)]
    }

    fn variables(&self) -> Vec<usize> {
        vec![self.var]
    }

    fn value(&self, row: &[f64], beta: &DVector<f64>) -> Result<DVector<f64>> {
        let v = row[self.var];
        if v.is_nan() {
            return Err(Error::MissingValue(self.name.clone()));
        }
        Ok(DVector::from_element(1, v - beta[0]))
    }

    fn jacobian(&self, _row: &[f64], _beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(1, 1, -1.0))
    }

    fn affine_in(&self, _var: usize) -> bool {
        true
    }
}

/// Logistic-regression score `U = x (y − expit(x'β))` with `x` including an intercept.
#[derive(Clone, Debug)]
pub struct LogisticScore {
    outcome: usize,
    outcome_name: String,
    design: Design,
}

impl Estimand for LogisticScore {
    fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn names(&self) -> Vec<String> {
        self.design.names().to_vec()
    }

    fn variables(&self) -> Vec<usize> {
        let mut v = self.design.variables();
        if !v.contains(&self.outcome) {
            v.push(self.outcome);
            v.sort_unstable();
        }
        v
    }

    fn value(&self, row: &[f64], beta: &DVector<f64>) -> Result<DVector<f64>> {
        let y = row[self.outcome];
        if y.is_nan() {
            return Err(Error::MissingValue(self.outcome_name.clone()));
        }
        let x = self.design.eval_full(row)?;
        let p = expit(x.dot(beta));
        Ok(x * (y - p))
    }

    fn jacobian(&self, row: &[f64], beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let x = self.design.eval_full(row)?;
        let p = expit(x.dot(beta));
        Ok(-(&x * x.transpose()) * (p * (1.0 - p)))
    }

    fn affine_in(&self, var: usize) -> bool {
        var == self.outcome && !self.design.variables().contains(&var)
    }
}

/// Estimand selector: built-ins or a user implementation.
#[derive(Clone, Debug)]
pub struct EstimandSpec {
    inner: Arc<dyn Estimand>,
    label: String,
}

impl EstimandSpec {
    pub fn mean(schema: &VariableSchema, var: &str) -> Result<Self> {
        let j = schema.index_of(var)?;
        if matches!(schema.kind(j), VarKind::Categorical(_)) {
            return Err(Error::Invalid(format!(
                "mean of categorical variable `{var}` is not defined"
            )));
        }
        Ok(Self {
            inner: Arc::new(CoordinateMean {
                var: j,
                name: var.to_string(),
            }),
            label: format!("mean:{var}"),
        })
    }

    pub fn logistic<S: AsRef<str>>(schema: &VariableSchema, outcome: &str, covariates: &[S]) -> Result<Self> {
        let j = schema.index_of(outcome)?;
        if !matches!(schema.kind(j), VarKind::Binary) {
            return Err(Error::Invalid(format!("logistic outcome `{outcome}` must be binary")));
        }
        let design = Design::parse(schema, covariates)?.with_intercept();
        if design.variables().contains(&j) {
            return Err(Error::Invalid(format!(
                "logistic outcome `{outcome}` also appears among the covariates"
            )));
        }
        let terms: Vec<&str> = covariates.iter().map(|s| s.as_ref()).collect();
        Ok(Self {
            inner: Arc::new(LogisticScore {
                outcome: j,
                outcome_name: outcome.to_string(),
                design,
            }),
            label: format!("logistic:{outcome}~{}", terms.join("+")),
        })
    }

    pub fn custom(estimand: Arc<dyn Estimand>, label: impl Into<String>) -> Self {
        Self {
            inner: estimand,
            label: label.into(),
        }
    }

    /// Parses `mean:VAR` or `logistic:Y~X1+X2` (`logistic:Y~1` for intercept only).
    pub fn parse(schema: &VariableSchema, text: &str) -> Result<Self> {
        let text = text.trim();
        if let Some(var) = text.strip_prefix("mean:") {
            return Self::mean(schema, var.trim());
        }
        if let Some(rest) = text.strip_prefix("logistic:") {
            let (y, xs) = rest.split_once('~').ok_or_else(|| {
                Error::Invalid(format!("logistic estimand `{text}` must look like logistic:Y~X1+X2"))
            })?;
            let covs: Vec<&str> = xs.split('+').map(str::trim).filter(|s| !s.is_empty()).collect();
            return Self::logistic(schema, y.trim(), &covs);
        }
        Err(Error::Invalid(format!(
            "unknown estimand `{text}` (expected mean:VAR or logistic:Y~X1+X2)"
        )))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn estimand(&self) -> &dyn Estimand {
        self.inner.as_ref()
    }
}

impl std::ops::Deref for EstimandSpec {
    type Target = dyn Estimand;

    fn deref(&self) -> &Self::Target {
        self.inner.as_ref()
    }
}
