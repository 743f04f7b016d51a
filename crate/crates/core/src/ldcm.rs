//! Logit discrete choice nonresponse model.
//!
//! Each incomplete pattern `r` carries an odds model
//! `Odds_r(L_(r)) = exp(α_r' q_r(L_(r)))` against the complete case. Pattern
//! probabilities follow the multinomial logit form
//! `Π_r = Odds_r / (1 + Σ_s Odds_s)` with `Π_1 = 1 / (1 + Σ_s Odds_s)`.
//! Coefficients are estimated one pattern at a time by logistic regression of
//! `1{R = r}` on `q_r` within the rows having `R ∈ {1, r}`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PatternMask, PatternedDataset, VariableSchema};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::general_dcm::GeneralDcm;
use crate::numeric::{expit, log1p_exp, max_abs, solve};

/// Gradient max-norm tolerance of the pairwise Newton iterations.
pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 100;
/// Coefficient bound on the standardized scale beyond which separation is declared.
pub const SEPARATION_BOUND: f64 = 30.0;

/// Default feature map applied to patterns without an explicit design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DefaultDesign {
    #[default]
    MainEffects,
    MainAndPairwise,
    InterceptOnly,
}

impl DefaultDesign {
    pub fn build(self, schema: &VariableSchema, mask: &PatternMask) -> Design {
        let vars = mask.observed();
        match self {
            DefaultDesign::MainEffects => Design::main_effects(schema, &vars),
            DefaultDesign::MainAndPairwise => Design::main_and_pairwise(schema, &vars),
            DefaultDesign::InterceptOnly => Design::intercept_only(schema),
        }
    }
}

/// Per-pattern feature maps `q_r(L_(r))`, one per incomplete pattern.
///
/// Every design includes an intercept and references only variables observed
/// under its pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternDesigns {
    entries: Vec<(PatternMask, Design)>,
}

pub type OddsModelSpec = PatternDesigns;

impl PatternDesigns {
    /// Designs for `masks` (complete mask skipped), using `overrides` where given.
    pub fn build(
        schema: &VariableSchema,
        masks: &[PatternMask],
        default: DefaultDesign,
        overrides: &[(PatternMask, Design)],
    ) -> Result<Self> {
        for (mask, design) in overrides {
            if mask.len() != schema.len() {
                return Err(Error::Spec {
                    pattern: mask.to_string(),
                    message: format!("mask length differs from the {} schema variables", schema.len()),
                });
            }
            if mask.is_complete() {
                return Err(Error::Spec {
                    pattern: mask.to_string(),
                    message: "the complete-case pattern has no odds model".into(),
                });
            }
            if let Err(var) = design.check_observed(mask) {
                return Err(Error::Spec {
                    pattern: mask.to_string(),
                    message: format!("term uses `{var}`, which is unobserved under this pattern"),
                });
            }
        }
        let mut entries = Vec::new();
        for mask in masks.iter().filter(|m| !m.is_complete()) {
            let design = match overrides.iter().find(|(m, _)| m == mask) {
                Some((_, d)) => d.clone().with_intercept(),
                None => default.build(schema, mask),
            };
            entries.push((mask.clone(), design));
        }
        Ok(Self { entries })
    }

    /// Default designs for every incomplete pattern of `d`.
    pub fn for_dataset(d: &PatternedDataset, default: DefaultDesign) -> Self {
        let masks: Vec<PatternMask> = d.patterns().iter().map(|p| p.mask.clone()).collect();
        Self::build(d.schema(), &masks, default, &[]).expect("default designs are always valid")
    }

    pub fn from_entries(schema: &VariableSchema, entries: Vec<(PatternMask, Design)>) -> Result<Self> {
        let masks: Vec<PatternMask> = entries.iter().map(|(m, _)| m.clone()).collect();
        Self::build(schema, &masks, DefaultDesign::MainEffects, &entries)
    }

    pub fn entries(&self) -> &[(PatternMask, Design)] {
        &self.entries
    }

    pub fn masks(&self) -> Vec<PatternMask> {
        self.entries.iter().map(|(m, _)| m.clone()).collect()
    }

    pub fn get(&self, mask: &PatternMask) -> Option<&Design> {
        self.entries.iter().find(|(m, _)| m == mask).map(|(_, d)| d)
    }

    /// Errors unless every incomplete pattern of `d` has a design.
    pub fn covers(&self, d: &PatternedDataset) -> Result<()> {
        for p in d.patterns().iter().skip(1) {
            if self.get(&p.mask).is_none() {
                return Err(Error::Spec {
                    pattern: p.id.to_string(),
                    message: format!("no design for mask {}", p.mask),
                });
            }
        }
        Ok(())
    }
}

/// Configuration form of one pattern's design: the pattern is named either by
/// its id in the dataset or by its mask string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternTerms {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub terms: Vec<String>,
}

impl PatternTerms {
    pub fn resolve_mask(&self, d: &PatternedDataset) -> Result<PatternMask> {
        match (&self.pattern, &self.mask) {
            (Some(id), None) => d.pattern(*id).map(|p| p.mask.clone()).ok_or_else(|| Error::Spec {
                pattern: id.to_string(),
                message: "no such pattern in the data".into(),
            }),
            (None, Some(m)) => {
                let mask = PatternMask::parse(m)?;
                if mask.len() != d.k() {
                    return Err(Error::Spec {
                        pattern: m.clone(),
                        message: format!("mask length differs from the {} variables", d.k()),
                    });
                }
                Ok(mask)
            }
            _ => Err(Error::Invalid(
                "each pattern design needs exactly one of `pattern` or `mask`".into(),
            )),
        }
    }

    /// Resolves the pattern and parses the terms, checking they are observed.
    pub fn resolve(&self, d: &PatternedDataset) -> Result<(PatternMask, Design)> {
        let mask = self.resolve_mask(d)?;
        let label = self
            .pattern
            .map(|p| p.to_string())
            .unwrap_or_else(|| mask.to_string());
        let design = Design::parse(d.schema(), &self.terms).map_err(|e| Error::Spec {
            pattern: label.clone(),
            message: e.to_string(),
        })?;
        if let Err(var) = design.check_observed(&mask) {
            return Err(Error::Spec {
                pattern: label,
                message: format!("term uses `{var}`, which is unobserved under this pattern"),
            });
        }
        Ok((mask, design))
    }
}

/// Designs for every incomplete pattern of `d`, with per-pattern overrides.
pub fn designs_for(d: &PatternedDataset, default: DefaultDesign, overrides: &[PatternTerms]) -> Result<PatternDesigns> {
    let resolved = overrides
        .iter()
        .map(|o| o.resolve(d))
        .collect::<Result<Vec<_>>>()?;
    let mut masks: Vec<PatternMask> = d.patterns().iter().map(|p| p.mask.clone()).collect();
    for (m, _) in &resolved {
        if !masks.contains(m) {
            masks.push(m.clone());
        }
    }
    PatternDesigns::build(d.schema(), &masks, default, &resolved)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OddsEntry {
    pub mask: PatternMask,
    pub design: Design,
    pub coef: DVector<f64>,
}

/// Fitted (or user-supplied) odds models for every incomplete pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct OddsModel {
    entries: Vec<OddsEntry>,
}

impl OddsModel {
    pub fn new(entries: Vec<OddsEntry>) -> Result<Self> {
        for e in &entries {
            if e.coef.len() != e.design.ncols() {
                return Err(Error::Spec {
                    pattern: e.mask.to_string(),
                    message: format!(
                        "{} coefficients supplied for {} design columns",
                        e.coef.len(),
                        e.design.ncols()
                    ),
                });
            }
        }
        Ok(Self { entries })
    }

    /// Odds model with explicit coefficients, one vector per design of `spec`.
    pub fn from_spec(spec: &OddsModelSpec, coefs: Vec<DVector<f64>>) -> Result<Self> {
        if coefs.len() != spec.entries().len() {
            return Err(Error::Invalid(format!(
                "{} coefficient vectors for {} patterns",
                coefs.len(),
                spec.entries().len()
            )));
        }
        Self::new(
            spec.entries()
                .iter()
                .zip(coefs)
                .map(|((mask, design), coef)| OddsEntry {
                    mask: mask.clone(),
                    design: design.clone(),
                    coef,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[OddsEntry] {
        &self.entries
    }

    pub fn masks(&self) -> Vec<PatternMask> {
        self.entries.iter().map(|e| e.mask.clone()).collect()
    }

    pub fn entry(&self, mask: &PatternMask) -> Option<&OddsEntry> {
        self.entries.iter().find(|e| &e.mask == mask)
    }

    /// `Odds_r` for the given pattern; the complete case has odds 1.
    pub fn odds(&self, mask: &PatternMask, row: &[Option<f64>]) -> Result<f64> {
        if mask.is_complete() {
            return Ok(1.0);
        }
        let e = self.entry(mask).ok_or_else(|| Error::Spec {
            pattern: mask.to_string(),
            message: "pattern has no odds model".into(),
        })?;
        Self::entry_odds(e, row)
    }

    fn entry_odds(e: &OddsEntry, row: &[Option<f64>]) -> Result<f64> {
        let q = e.design.eval(row)?;
        let o = q.dot(&e.coef).exp();
        if o.is_finite() {
            Ok(o)
        } else {
            Err(Error::NonFinite(format!("odds of pattern {}", e.mask)))
        }
    }

    /// Odds of every incomplete pattern, in entry order.
    pub fn odds_all(&self, row: &[Option<f64>]) -> Result<Vec<f64>> {
        self.entries.iter().map(|e| Self::entry_odds(e, row)).collect()
    }

    pub fn pi1(&self, row: &[Option<f64>]) -> Result<f64> {
        let s: f64 = self.odds_all(row)?.iter().sum();
        Ok(1.0 / (1.0 + s))
    }

    /// `Π_r`; the row must supply every variable used by any pattern's design.
    pub fn pi(&self, mask: &PatternMask, row: &[Option<f64>]) -> Result<f64> {
        let pi1 = self.pi1(row)?;
        Ok(self.odds(mask, row)? * pi1)
    }

    pub fn n_params(&self) -> usize {
        self.entries.iter().map(|e| e.coef.len()).sum()
    }

    pub fn params(&self) -> DVector<f64> {
        let v: Vec<f64> = self.entries.iter().flat_map(|e| e.coef.iter().copied()).collect();
        DVector::from_vec(v)
    }

    pub fn with_params(&self, theta: &DVector<f64>) -> Self {
        let mut out = self.clone();
        let mut k = 0;
        for e in &mut out.entries {
            for c in e.coef.iter_mut() {
                *c = theta[k];
                k += 1;
            }
        }
        out
    }

    /// Parameter names as `mask/term`.
    pub fn param_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .flat_map(|e| e.design.names().iter().map(move |t| format!("{}/{}", e.mask, t)))
            .collect()
    }
}

/// Nonresponse model used by the estimators.
#[derive(Clone, Debug)]
pub enum ResponseModel {
    Logit(OddsModel),
    General(GeneralDcm),
}

impl ResponseModel {
    pub fn masks(&self) -> Vec<PatternMask> {
        match self {
            ResponseModel::Logit(m) => m.masks(),
            ResponseModel::General(g) => g.masks(),
        }
    }

    pub fn is_logit(&self) -> bool {
        matches!(self, ResponseModel::Logit(_))
    }

    pub fn as_logit(&self) -> Option<&OddsModel> {
        match self {
            ResponseModel::Logit(m) => Some(m),
            ResponseModel::General(_) => None,
        }
    }

    /// Ratios `Π_r / Π_1` for every incomplete pattern, in `masks()` order.
    pub fn odds_all(&self, row: &[Option<f64>]) -> Result<Vec<f64>> {
        match self {
            ResponseModel::Logit(m) => m.odds_all(row),
            ResponseModel::General(g) => {
                let full = full_row(row)?;
                let p = g.probabilities(&full)?;
                Ok(p[1..].iter().map(|pr| pr / p[0]).collect())
            }
        }
    }

    pub fn pi1(&self, row: &[Option<f64>]) -> Result<f64> {
        match self {
            ResponseModel::Logit(m) => m.pi1(row),
            ResponseModel::General(g) => Ok(g.probabilities(&full_row(row)?)?[0]),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            ResponseModel::Logit(m) => m.n_params(),
            ResponseModel::General(g) => g.n_params(),
        }
    }

    pub fn params(&self) -> DVector<f64> {
        match self {
            ResponseModel::Logit(m) => m.params(),
            ResponseModel::General(g) => g.params(),
        }
    }

    pub fn with_params(&self, theta: &DVector<f64>) -> Self {
        match self {
            ResponseModel::Logit(m) => ResponseModel::Logit(m.with_params(theta)),
            ResponseModel::General(g) => ResponseModel::General(g.with_params(theta)),
        }
    }
}

pub(crate) fn full_row(row: &[Option<f64>]) -> Result<Vec<f64>> {
    row.iter()
        .enumerate()
        .map(|(j, v)| v.ok_or_else(|| Error::MissingValue(format!("#{}", j + 1))))
        .collect()
}

/// Convergence record of one pattern's fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternFitInfo {
    pub mask: String,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub terms: Vec<String>,
    pub estimates: Vec<f64>,
}

/// One exported coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub pattern: usize,
    pub term: String,
    pub estimate: f64,
}

/// Fitted nonresponse model with per-row influence functions (`n × dim α`).
#[derive(Clone, Debug)]
pub struct NonresponseFit {
    model: ResponseModel,
    diagnostics: Vec<PatternFitInfo>,
    influence: DMatrix<f64>,
}

impl NonresponseFit {
    pub fn new(model: ResponseModel, diagnostics: Vec<PatternFitInfo>, influence: DMatrix<f64>) -> Self {
        Self {
            model,
            diagnostics,
            influence,
        }
    }

    pub fn model(&self) -> &ResponseModel {
        &self.model
    }

    pub fn diagnostics(&self) -> &[PatternFitInfo] {
        &self.diagnostics
    }

    pub fn influence(&self) -> &DMatrix<f64> {
        &self.influence
    }

    /// `Odds_r` for pattern id `r` of `d`.
    pub fn odds(&self, d: &PatternedDataset, r: usize, row: &[Option<f64>]) -> Result<f64> {
        let mask = pattern_mask(d, r)?;
        match &self.model {
            ResponseModel::Logit(m) => m.odds(&mask, row),
            ResponseModel::General(_) => {
                let masks = self.model.masks();
                let k = masks.iter().position(|m| m == &mask).ok_or_else(|| Error::Spec {
                    pattern: r.to_string(),
                    message: "pattern has no nonresponse model".into(),
                })?;
                Ok(self.model.odds_all(row)?[k])
            }
        }
    }

    /// `Π_r` for pattern id `r` of `d` at a fully specified row.
    pub fn pi(&self, d: &PatternedDataset, r: usize, row: &[Option<f64>]) -> Result<f64> {
        let pi1 = self.model.pi1(row)?;
        if r == 1 {
            return Ok(pi1);
        }
        Ok(self.odds(d, r, row)? * pi1)
    }

    pub fn coefficient_table(&self, d: &PatternedDataset) -> Vec<CoefficientRow> {
        let mut out = Vec::new();
        if let ResponseModel::Logit(m) = &self.model {
            for e in m.entries() {
                let pattern = d.id_for_mask(&e.mask).unwrap_or(0);
                for (term, est) in e.design.names().iter().zip(e.coef.iter()) {
                    out.push(CoefficientRow {
                        pattern,
                        term: term.clone(),
                        estimate: *est,
                    });
                }
            }
        }
        out
    }
}

fn pattern_mask(d: &PatternedDataset, r: usize) -> Result<PatternMask> {
    d.pattern(r)
        .map(|p| p.mask.clone())
        .ok_or_else(|| Error::Invalid(format!("pattern id {r} not present in dataset")))
}

/// `Π_1` at every complete-case row, in row order.
pub fn pi1_on_complete_cases(fit: &NonresponseFit, d: &PatternedDataset) -> Result<Vec<f64>> {
    d.complete_rows()
        .into_iter()
        .map(|i| fit.model().pi1(d.row(i)))
        .collect()
}

/// Result of one logistic regression.
#[derive(Clone, Debug)]
pub struct LogitFit {
    pub coef: DVector<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// `Σ p(1-p) x x'` at the solution, original scale.
    pub information: DMatrix<f64>,
}

/// Maximum-likelihood logistic regression by Newton-Raphson with step halving.
///
/// Non-intercept columns are centered (when an intercept column is present)
/// and scaled inside the solver; coefficients are returned on the original
/// scale. `label` names the problem in errors.
pub fn logistic_mle(x: &DMatrix<f64>, y: &[f64], names: &[String], label: &str) -> Result<LogitFit> {
    let (m, p) = x.shape();
    let intercept = (0..p).find(|&j| x.column(j).iter().all(|&v| v == 1.0));
    let mut center = vec![0.0; p];
    let mut scale = vec![1.0; p];
    for j in 0..p {
        if Some(j) == intercept {
            continue;
        }
        let col = x.column(j);
        let mean = col.sum() / m as f64;
        let c = if intercept.is_some() { mean } else { 0.0 };
        let ss = col.iter().map(|v| (v - c).powi(2)).sum::<f64>() / m as f64;
        if ss <= 0.0 {
            return Err(Error::Singular {
                context: format!("pattern {label}: design column `{}` is constant", names[j]),
            });
        }
        center[j] = c;
        scale[j] = ss.sqrt();
    }
    let z = DMatrix::from_fn(m, p, |i, j| (x[(i, j)] - center[j]) / scale[j]);

    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = &z * b;
        eta.iter()
            .zip(y)
            .map(|(e, yi)| yi * e - log1p_exp(*e))
            .sum::<f64>()
            / m as f64
    };
    let grad_hess = |b: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let eta = &z * b;
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for i in 0..m {
            let pr = expit(eta[i]);
            let zi = z.row(i).transpose();
            g.axpy(y[i] - pr, &zi, 1.0);
            h.ger(pr * (1.0 - pr), &zi, &zi, 1.0);
        }
        (g / m as f64, h / m as f64)
    };

    let mut b = DVector::zeros(p);
    let mut ll = loglik(&b);
    let mut iterations = 0;
    let context = format!("pattern {label}: information matrix");
    loop {
        let (g, h) = grad_hess(&b);
        let gn = max_abs(&g);
        if gn <= NEWTON_TOL {
            // one more full step tightens the root well below the tolerance
            let step = solve(&h, &g, &context)?;
            let polished = &b + step;
            let (g2, _) = grad_hess(&polished);
            if max_abs(&g2) <= gn {
                b = polished;
            }
            break;
        }
        if iterations >= NEWTON_MAX_ITER {
            return Err(Error::NoConvergence {
                context: format!("pairwise logistic fit of pattern {label}"),
                iterations,
                residual: gn,
            });
        }
        let step = solve(&h, &g, &context)?;
        let mut t = 1.0;
        let mut next = &b + &step * t;
        let mut ll_next = loglik(&next);
        let mut halvings = 0;
        // the slack absorbs summation rounding in the log-likelihood near the optimum
        while !(ll_next >= ll - 1e-11 * (1.0 + ll.abs())) && halvings < 40 {
            t *= 0.5;
            next = &b + &step * t;
            ll_next = loglik(&next);
            halvings += 1;
        }
        b = next;
        ll = ll_next;
        iterations += 1;
        if let Some((j, v)) = b
            .iter()
            .enumerate()
            .max_by(|a, c| a.1.abs().total_cmp(&c.1.abs()))
        {
            if v.abs() > SEPARATION_BOUND || !v.is_finite() {
                return Err(Error::Separation {
                    pattern: label.to_string(),
                    term: names[j].clone(),
                });
            }
        }
    }
    let (g, _) = grad_hess(&b);
    let gradient_norm = max_abs(&g);

    let mut coef = DVector::zeros(p);
    for j in 0..p {
        coef[j] = b[j] / scale[j];
    }
    if let Some(c) = intercept {
        let shift: f64 = (0..p).filter(|&j| j != c).map(|j| coef[j] * center[j]).sum();
        coef[c] = b[c] - shift;
    }

    let eta = x * &coef;
    let mut information = DMatrix::zeros(p, p);
    for i in 0..m {
        let pr = expit(eta[i]);
        let xi = x.row(i).transpose();
        information.ger(pr * (1.0 - pr), &xi, &xi, 1.0);
    }
    Ok(LogitFit {
        coef,
        iterations,
        gradient_norm,
        information,
    })
}

struct PairwiseResult {
    fit: LogitFit,
    rows: Vec<usize>,
    features: DMatrix<f64>,
    y: Vec<f64>,
}

fn fit_one_pattern(d: &PatternedDataset, mask: &PatternMask, design: &Design) -> Result<PairwiseResult> {
    let label = d
        .id_for_mask(mask)
        .map(|id| id.to_string())
        .unwrap_or_else(|| mask.to_string());
    let rows: Vec<usize> = (0..d.n())
        .filter(|&i| d.is_complete(i) || d.mask_of_row(i) == mask)
        .collect();
    let n_r = rows.iter().filter(|&&i| !d.is_complete(i)).count();
    let n_1 = rows.len() - n_r;
    if n_r == 0 || n_1 == 0 {
        return Err(Error::EmptyArm {
            pattern: label,
            message: format!("{n_1} complete cases, {n_r} cases of the pattern"),
        });
    }
    let p = design.ncols();
    let mut features = DMatrix::zeros(rows.len(), p);
    for (k, &i) in rows.iter().enumerate() {
        let q = design.eval(d.row(i))?;
        features.row_mut(k).copy_from(&q.transpose());
    }
    let y: Vec<f64> = rows
        .iter()
        .map(|&i| if d.is_complete(i) { 0.0 } else { 1.0 })
        .collect();
    let fit = logistic_mle(&features, &y, design.names(), &label)?;
    Ok(PairwiseResult {
        fit,
        rows,
        features,
        y,
    })
}

/// Fits every pattern's odds model on its pairwise subset `{R ∈ {1, r}}`.
///
/// The influence function of `α̃_r` at row `i` is `n (Σ p(1-p) q q')^{-1} s_i`
/// with `s_i` the row's logistic score (zero outside the subset).
pub fn fit_pairwise_logistic(d: &PatternedDataset, spec: &OddsModelSpec) -> Result<NonresponseFit> {
    spec.covers(d)?;
    let results: Vec<Result<PairwiseResult>> = spec
        .entries()
        .par_iter()
        .map(|(mask, design)| fit_one_pattern(d, mask, design))
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let n = d.n();
    let dim: usize = results.iter().map(|r| r.fit.coef.len()).sum();
    let mut influence = DMatrix::zeros(n, dim);
    let mut entries = Vec::new();
    let mut diagnostics = Vec::new();
    let mut offset = 0;
    for (res, (mask, design)) in results.into_iter().zip(spec.entries()) {
        let p = res.fit.coef.len();
        let inv = crate::numeric::inverse(&res.fit.information, &format!("pattern {mask}: information matrix"))?;
        let eta = &res.features * &res.fit.coef;
        for (k, &i) in res.rows.iter().enumerate() {
            let q = res.features.row(k).transpose();
            let score = q * (res.y[k] - expit(eta[k]));
            let inf = &inv * score * n as f64;
            for j in 0..p {
                influence[(i, offset + j)] = inf[j];
            }
        }
        offset += p;
        diagnostics.push(PatternFitInfo {
            mask: mask.to_string(),
            iterations: res.fit.iterations,
            gradient_norm: res.fit.gradient_norm,
            terms: design.names().to_vec(),
            estimates: res.fit.coef.iter().copied().collect(),
        });
        entries.push(OddsEntry {
            mask: mask.clone(),
            design: design.clone(),
            coef: res.fit.coef,
        });
    }
    Ok(NonresponseFit::new(
        ResponseModel::Logit(OddsModel::new(entries)?),
        diagnostics,
        influence,
    ))
}
