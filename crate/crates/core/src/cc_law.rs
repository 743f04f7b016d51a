//! Models for the complete-case law `f(L | R = 1; η)` and the conditional
//! expectations `E[U(L; β) | L_(r), R = 1]` they induce.
//!
//! Three kinds are available:
//! * `discrete_loglinear`: a log-linear model over a finite support, handled
//!   by exact enumeration of the missing cells.
//! * `gaussian_linear`: a normal linear regression of one outcome on
//!   predictors; expectations use closed-form substitution, which requires `U`
//!   to be affine in the outcome.
//! * `per_pattern_regression`: one least-squares projection of `U` on
//!   `q_r(L_(r))` per pattern. The models need not be compatible with a single
//!   joint law. They are what the multiply robust estimator uses.
//!
//! The joint-law kinds are always mutually compatible across patterns; the
//! per-pattern kind trades that for pattern-specific robustness.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{PatternMask, PatternedDataset, VarKind, VariableSchema};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::estimand::Estimand;
use crate::ldcm::{designs_for, DefaultDesign, PatternDesigns, PatternTerms};
use crate::numeric::{inverse, max_abs, solve};
use crate::sensitivity::ExpTilt;

/// Largest product space enumerated for discrete laws.
pub const ENUMERATION_CAP: u128 = 1_000_000;

/// Configuration of a complete-case law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum LawSpec {
    /// Log-linear terms over all variables; an empty list means main effects.
    DiscreteLoglinear {
        #[serde(default)]
        terms: Vec<String>,
    },
    GaussianLinear {
        outcome: String,
        predictors: Vec<String>,
    },
    PerPatternRegression {
        #[serde(default)]
        default: DefaultDesign,
        #[serde(default)]
        patterns: Vec<PatternTerms>,
    },
}

impl LawSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LawSpec::DiscreteLoglinear { .. } => "discrete_loglinear",
            LawSpec::GaussianLinear { .. } => "gaussian_linear",
            LawSpec::PerPatternRegression { .. } => "per_pattern_regression",
        }
    }
}

/// Fits the law described by `spec` on the complete cases of `d`.
pub fn fit_law(d: &PatternedDataset, spec: &LawSpec) -> Result<CompleteCaseLaw> {
    match spec {
        LawSpec::PerPatternRegression { default, patterns } => {
            fit_pattern_specific(d, &designs_for(d, *default, patterns)?)
        }
        other => fit_complete_case_mle(d, other),
    }
}

/// Row with missing entries encoded as NaN.
pub fn fill_row(row: &[Option<f64>]) -> Vec<f64> {
    row.iter().map(|v| v.unwrap_or(f64::NAN)).collect()
}

fn determined_by(est: &dyn Estimand, mask: &PatternMask) -> bool {
    est.variables().iter().all(|&j| mask.is_observed(j))
}

/// Mixed-radix enumeration of all cells with the given level counts.
pub fn enumerate_cells(levels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let total: u128 = levels.iter().map(|&l| l as u128).product();
    if total > ENUMERATION_CAP {
        return Err(Error::EnumerationCap {
            cells: total,
            cap: ENUMERATION_CAP,
        });
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut cur = vec![0usize; levels.len()];
    for _ in 0..total {
        out.push(cur.clone());
        for j in (0..levels.len()).rev() {
            cur[j] += 1;
            if cur[j] < levels[j] {
                break;
            }
            cur[j] = 0;
        }
    }
    Ok(out)
}

/// Log-linear law `f(l) ∝ exp(η' f(l))` over the full finite support.
#[derive(Clone, Debug)]
pub struct DiscreteLaw {
    schema: VariableSchema,
    design: Design,
    eta: DVector<f64>,
    levels: Vec<usize>,
    cells: Vec<Vec<f64>>,
    features: DMatrix<f64>,
    probs: Vec<f64>,
    influence: DMatrix<f64>,
    iterations: usize,
}

impl DiscreteLaw {
    /// Law with explicit parameters (no fitted influence function).
    pub fn new(schema: &VariableSchema, design: Design, eta: DVector<f64>) -> Result<Self> {
        if !schema.is_discrete() {
            return Err(Error::Invalid(
                "discrete_loglinear requires every variable to be binary or categorical".into(),
            ));
        }
        let design = design.without_intercept();
        if eta.len() != design.ncols() {
            return Err(Error::Invalid(format!(
                "{} log-linear parameters for {} design columns",
                eta.len(),
                design.ncols()
            )));
        }
        let levels: Vec<usize> = (0..schema.len()).map(|j| schema.levels(j).unwrap()).collect();
        let cells: Vec<Vec<f64>> = enumerate_cells(&levels)?
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f64).collect())
            .collect();
        let mut features = DMatrix::zeros(cells.len(), design.ncols());
        for (k, c) in cells.iter().enumerate() {
            features.row_mut(k).copy_from(&design.eval_full(c)?.transpose());
        }
        let mut law = Self {
            schema: schema.clone(),
            design,
            eta,
            levels,
            cells,
            features,
            probs: Vec::new(),
            influence: DMatrix::zeros(0, 0),
            iterations: 0,
        };
        law.refresh();
        Ok(law)
    }

    fn refresh(&mut self) {
        let lp = &self.features * &self.eta;
        let m = lp.max();
        let w: Vec<f64> = lp.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = w.iter().sum();
        self.probs = w.into_iter().map(|v| v / z).collect();
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn eta(&self) -> &DVector<f64> {
        &self.eta
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// All support cells in mixed-radix order (last variable fastest).
    pub fn cells(&self) -> &[Vec<f64>] {
        &self.cells
    }

    /// Cell probabilities aligned with [`cells`](Self::cells).
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn cell_index(&self, cell: &[f64]) -> Option<usize> {
        let mut idx = 0usize;
        for (j, &v) in cell.iter().enumerate() {
            if v.fract() != 0.0 || v < 0.0 || v as usize >= self.levels[j] {
                return None;
            }
            idx = idx * self.levels[j] + v as usize;
        }
        Some(idx)
    }

    pub fn prob(&self, cell: &[f64]) -> Option<f64> {
        self.cell_index(cell).map(|i| self.probs[i])
    }

    pub fn with_eta(&self, eta: &DVector<f64>) -> Self {
        let mut out = self.clone();
        out.eta = eta.clone();
        out.refresh();
        out
    }

    fn mean_and_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.design.ncols();
        let mut mean = DVector::zeros(p);
        let mut second = DMatrix::zeros(p, p);
        for (k, &pr) in self.probs.iter().enumerate() {
            let f = self.features.row(k).transpose();
            mean.axpy(pr, &f, 1.0);
            second.ger(pr, &f, &f, 1.0);
        }
        let cov = second - &mean * mean.transpose();
        (mean, cov)
    }

    /// Complete-case MLE by Newton's method on the mean log-likelihood.
    pub fn fit(d: &PatternedDataset, design: Design) -> Result<Self> {
        let design = design.without_intercept();
        let p = design.ncols();
        let mut law = Self::new(d.schema(), design, DVector::zeros(p))?;
        let cc = d.complete_rows();
        let n_cc = cc.len() as f64;
        let mut fbar = DVector::zeros(p);
        let mut cc_features = Vec::with_capacity(cc.len());
        for &i in &cc {
            let f = law.design.eval(d.row(i))?;
            fbar += &f;
            cc_features.push(f);
        }
        fbar /= n_cc;
        let loglik = |l: &DiscreteLaw| -> f64 {
            let lp = &l.features * &l.eta;
            let m = lp.max();
            let lz = m + lp.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            fbar.dot(&l.eta) - lz
        };
        let mut ll = loglik(&law);
        let mut iterations = 0;
        loop {
            let (mean, cov) = law.mean_and_cov();
            let g = &fbar - &mean;
            if max_abs(&g) <= 1e-10 {
                // one more full step tightens the moment match well below the tolerance
                if let Ok(step) = solve(&cov, &g, "complete-case log-linear Hessian") {
                    let polished = law.with_eta(&(&law.eta + step));
                    if max_abs(&(&fbar - polished.mean_and_cov().0)) <= max_abs(&g) {
                        law = polished;
                    }
                }
                break;
            }
            if iterations >= 200 {
                return Err(Error::NoConvergence {
                    context: "complete-case log-linear fit".into(),
                    iterations,
                    residual: max_abs(&g),
                });
            }
            let step = solve(&cov, &g, "complete-case log-linear Hessian")?;
            let mut t = 1.0;
            let mut next = law.with_eta(&(&law.eta + &step));
            let mut ll_next = loglik(&next);
            let mut halvings = 0;
            while !(ll_next >= ll - 1e-14 * ll.abs()) && halvings < 40 {
                t *= 0.5;
                next = law.with_eta(&(&law.eta + &step * t));
                ll_next = loglik(&next);
                halvings += 1;
            }
            law = next;
            ll = ll_next;
            iterations += 1;
        }
        let (mean, cov) = law.mean_and_cov();
        let n = d.n() as f64;
        let info_inv = inverse(&(cov * (n_cc / n)), "complete-case log-linear Hessian")?;
        let mut influence = DMatrix::zeros(d.n(), p);
        for (&i, f) in cc.iter().zip(&cc_features) {
            let v = &info_inv * (f - &mean);
            influence.row_mut(i).copy_from(&v.transpose());
        }
        law.influence = influence;
        law.iterations = iterations;
        Ok(law)
    }

    fn cond_expectation(
        &self,
        est: &dyn Estimand,
        beta: &DVector<f64>,
        mask: &PatternMask,
        row: &[Option<f64>],
        tilt: Option<&Design>,
        phi: f64,
    ) -> Result<DVector<f64>> {
        let missing = mask.missing();
        let levels: Vec<usize> = missing.iter().map(|&j| self.levels[j]).collect();
        let mut cell = fill_row(row);
        for &j in &missing {
            cell[j] = 0.0;
        }
        let completions = enumerate_cells(&levels)?;
        let mut lps = Vec::with_capacity(completions.len());
        for c in &completions {
            for (&j, &v) in missing.iter().zip(c) {
                cell[j] = v as f64;
            }
            let mut lp = self.design.eval_full(&cell)?.dot(&self.eta);
            if let Some(t) = tilt {
                lp += phi * t.eval_full(&cell)?.sum();
            }
            lps.push(lp);
        }
        let m = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut num = DVector::zeros(est.dim());
        let mut den = 0.0;
        for (c, lp) in completions.iter().zip(&lps) {
            for (&j, &v) in missing.iter().zip(c) {
                cell[j] = v as f64;
            }
            let w = (lp - m).exp();
            num.axpy(w, &est.value(&cell, beta)?, 1.0);
            den += w;
        }
        let out = num / den;
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite("tilted conditional expectation".into()))
        }
    }
}

/// Normal linear regression `Y | X ~ N(γ' q(X), σ²)` among complete cases.
#[derive(Clone, Debug)]
pub struct GaussianLaw {
    outcome: usize,
    design: Design,
    gamma: DVector<f64>,
    sigma2: f64,
    /// Complete-case mean of `q(X)`.
    nu: DVector<f64>,
    cc_rows: Vec<usize>,
    cc_q: DMatrix<f64>,
    cc_y: DVector<f64>,
}

impl GaussianLaw {
    pub fn fit<S: AsRef<str>>(d: &PatternedDataset, outcome: &str, predictors: &[S]) -> Result<Self> {
        let schema = d.schema();
        let j = schema.index_of(outcome)?;
        if matches!(schema.kind(j), VarKind::Categorical(_)) {
            return Err(Error::Invalid(format!(
                "gaussian_linear outcome `{outcome}` must not be categorical"
            )));
        }
        let design = Design::parse(schema, predictors)?.with_intercept();
        if design.variables().contains(&j) {
            return Err(Error::Invalid(format!(
                "gaussian_linear outcome `{outcome}` also appears among the predictors"
            )));
        }
        let cc = d.complete_rows();
        let p = design.ncols();
        let mut q = DMatrix::zeros(cc.len(), p);
        let mut y = DVector::zeros(cc.len());
        for (k, &i) in cc.iter().enumerate() {
            q.row_mut(k).copy_from(&design.eval(d.row(i))?.transpose());
            y[k] = d.row(i)[j].expect("complete row");
        }
        let qtq = q.transpose() * &q;
        let gamma = solve(&qtq, &(q.transpose() * &y), "complete-case regression normal equations")?;
        let resid = &y - &q * &gamma;
        let sigma2 = resid.norm_squared() / cc.len() as f64;
        if !(sigma2 > 0.0) {
            return Err(Error::Singular {
                context: "complete-case regression (zero residual variance)".into(),
            });
        }
        let nu = DVector::from_fn(p, |c, _| q.column(c).mean());
        Ok(Self {
            outcome: j,
            design,
            gamma,
            sigma2,
            nu,
            cc_rows: cc,
            cc_q: q,
            cc_y: y,
        })
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn outcome(&self) -> usize {
        self.outcome
    }

    fn params(&self) -> DVector<f64> {
        let p = self.gamma.len();
        let mut v = DVector::zeros(2 * p + 1);
        v.rows_mut(0, p).copy_from(&self.gamma);
        v[p] = self.sigma2;
        v.rows_mut(p + 1, p).copy_from(&self.nu);
        v
    }

    fn with_params(&self, theta: &DVector<f64>) -> Self {
        let p = self.gamma.len();
        let mut out = self.clone();
        out.gamma = theta.rows(0, p).into_owned();
        out.sigma2 = theta[p];
        out.nu = theta.rows(p + 1, p).into_owned();
        out
    }

    fn influence(&self, n: usize) -> Result<DMatrix<f64>> {
        let p = self.gamma.len();
        let n_cc = self.cc_rows.len() as f64;
        let nf = n as f64;
        let bread = inverse(&(self.cc_q.transpose() * &self.cc_q / nf), "complete-case regression")?;
        let mut out = DMatrix::zeros(n, 2 * p + 1);
        for (k, &i) in self.cc_rows.iter().enumerate() {
            let q = self.cc_q.row(k).transpose();
            let e = self.cc_y[k] - q.dot(&self.gamma);
            let ig = &bread * &q * e;
            out.view_mut((i, 0), (1, p)).copy_from(&ig.transpose());
            out[(i, p)] = (nf / n_cc) * (e * e - self.sigma2);
            let inu = (&q - &self.nu) * (nf / n_cc);
            out.view_mut((i, p + 1), (1, p)).copy_from(&inu.transpose());
        }
        Ok(out)
    }

    fn tilt_shift(&self, tilt: Option<&Design>, phi: f64) -> Result<f64> {
        match tilt {
            None => Ok(0.0),
            Some(t) => {
                let linear_in_outcome = t.ncols() == 1
                    && t.variables() == vec![self.outcome]
                    && t.terms().len() == 1
                    && t.names()[0] == t.term_strings()[0]
                    && !t.names()[0].contains('^');
                if !linear_in_outcome {
                    return Err(Error::Unsupported(
                        "gaussian_linear supports only tilts linear in its outcome".into(),
                    ));
                }
                Ok(phi * self.sigma2)
            }
        }
    }

    fn cond_expectation(
        &self,
        est: &dyn Estimand,
        beta: &DVector<f64>,
        mask: &PatternMask,
        row: &[Option<f64>],
        tilt: Option<&Design>,
        phi: f64,
    ) -> Result<DVector<f64>> {
        let preds = self.design.variables();
        let missing_u: Vec<usize> = est
            .variables()
            .into_iter()
            .filter(|&j| !mask.is_observed(j))
            .collect();
        if missing_u != [self.outcome] || !est.affine_in(self.outcome) {
            return Err(Error::Unsupported(format!(
                "the estimating function must depend on unobserved variables only through the gaussian_linear outcome, affinely (pattern {mask})"
            )));
        }
        let shift = self.tilt_shift(tilt, phi)?;
        let mut filled = fill_row(row);
        if preds.iter().all(|&j| mask.is_observed(j)) {
            let m = self.design.eval(row)?.dot(&self.gamma);
            filled[self.outcome] = m + shift;
        } else if preds.iter().all(|&j| !mask.is_observed(j)) {
            filled[self.outcome] = match tilt {
                None => self.gamma.dot(&self.nu),
                Some(_) => {
                    // tilted predictor distribution, reweighted empirically
                    let fitted = &self.cc_q * &self.gamma;
                    let mx = fitted.iter().map(|m| phi * m).fold(f64::NEG_INFINITY, f64::max);
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for &m in fitted.iter() {
                        let w = (phi * m - mx).exp();
                        num += w * (m + shift);
                        den += w;
                    }
                    num / den
                }
            };
        } else {
            return Err(Error::Unsupported(format!(
                "gaussian_linear predictors are only partly observed under pattern {mask}; the conditional expectation would need Monte Carlo integration, which is out of scope"
            )));
        }
        est.value(&filled, beta)
    }
}

#[derive(Clone, Debug)]
struct PerPatternEntry {
    mask: PatternMask,
    design: Design,
    /// `(Q'Q)^{-1} Q'` over complete cases, `d × n_cc`.
    proj: DMatrix<f64>,
    /// `Q`, `n_cc × d`.
    q: DMatrix<f64>,
}

/// Pattern-specific projections of `U` on `q_r(L_(r))` among complete cases.
///
/// The coefficients are linear in `U(β)` and are recomputed at every `β`;
/// optional offsets shift them for numerical differentiation.
#[derive(Clone, Debug)]
pub struct PerPatternLaw {
    entries: Vec<PerPatternEntry>,
    cc_rows: Vec<usize>,
    cc_full: Vec<Vec<f64>>,
    offsets: Option<DVector<f64>>,
}

impl PerPatternLaw {
    pub fn masks(&self) -> Vec<PatternMask> {
        self.entries.iter().map(|e| e.mask.clone()).collect()
    }

    pub fn designs(&self) -> Vec<(PatternMask, Design)> {
        self.entries.iter().map(|e| (e.mask.clone(), e.design.clone())).collect()
    }

    fn u_cc(&self, est: &dyn Estimand, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = est.dim();
        let mut u = DMatrix::zeros(self.cc_full.len(), p);
        for (k, row) in self.cc_full.iter().enumerate() {
            u.row_mut(k).copy_from(&est.value(row, beta)?.transpose());
        }
        Ok(u)
    }

    /// Coefficient matrices (`d_r × p`) at `β`, offsets included.
    fn coefficients(&self, est: &dyn Estimand, beta: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        let u = self.u_cc(est, beta)?;
        let p = est.dim();
        let mut k = 0;
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let mut b = &e.proj * &u;
            if let Some(off) = &self.offsets {
                for v in b.iter_mut() {
                    *v += off[k];
                    k += 1;
                }
            }
            debug_assert_eq!(b.shape(), (e.design.ncols(), p));
            out.push(b);
        }
        Ok(out)
    }

    fn n_params(&self, p: usize) -> usize {
        self.entries.iter().map(|e| e.design.ncols() * p).sum()
    }

    fn influence(&self, n: usize, est: &dyn Estimand, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = est.dim();
        let u = self.u_cc(est, beta)?;
        let mut out = DMatrix::zeros(n, self.n_params(p));
        let nf = n as f64;
        let mut col = 0;
        for e in &self.entries {
            let dr = e.design.ncols();
            let b = &e.proj * &u;
            let bread = inverse(&(e.q.transpose() * &e.q / nf), "per-pattern regression")?;
            for (k, &i) in self.cc_rows.iter().enumerate() {
                let q = e.q.row(k).transpose();
                let resid = u.row(k).transpose() - b.transpose() * &q;
                let inf = &bread * &q * resid.transpose();
                for (off, v) in inf.iter().enumerate() {
                    out[(i, col + off)] = *v;
                }
            }
            col += dr * p;
        }
        Ok(out)
    }
}

/// Fits one regression per pattern in `designs` on the complete cases.
pub fn fit_pattern_specific(d: &PatternedDataset, designs: &PatternDesigns) -> Result<CompleteCaseLaw> {
    let cc = d.complete_rows();
    let cc_full: Vec<Vec<f64>> = cc.iter().map(|&i| d.full_row(i).expect("complete row")).collect();
    let mut entries = Vec::new();
    for (mask, design) in designs.entries() {
        let mut q = DMatrix::zeros(cc.len(), design.ncols());
        for (k, &i) in cc.iter().enumerate() {
            q.row_mut(k).copy_from(&design.eval(d.row(i))?.transpose());
        }
        let context = format!("per-pattern regression for mask {mask}");
        let qtq_inv = inverse(&(q.transpose() * &q), &context)?;
        let proj = qtq_inv * q.transpose();
        entries.push(PerPatternEntry {
            mask: mask.clone(),
            design: design.clone(),
            proj,
            q,
        });
    }
    Ok(CompleteCaseLaw::PerPattern(PerPatternLaw {
        entries,
        cc_rows: cc,
        cc_full,
        offsets: None,
    }))
}

/// Fits a joint complete-case law (`discrete_loglinear` or `gaussian_linear`).
pub fn fit_complete_case_mle(d: &PatternedDataset, spec: &LawSpec) -> Result<CompleteCaseLaw> {
    match spec {
        LawSpec::DiscreteLoglinear { terms } => {
            let design = if terms.is_empty() {
                let all: Vec<usize> = (0..d.k()).collect();
                Design::main_effects(d.schema(), &all)
            } else {
                Design::parse(d.schema(), terms)?
            };
            Ok(CompleteCaseLaw::Discrete(DiscreteLaw::fit(d, design)?))
        }
        LawSpec::GaussianLinear { outcome, predictors } => {
            Ok(CompleteCaseLaw::Gaussian(GaussianLaw::fit(d, outcome, predictors)?))
        }
        LawSpec::PerPatternRegression { .. } => Err(Error::Invalid(
            "per_pattern_regression is fitted pattern by pattern, not as a joint law".into(),
        )),
    }
}

/// A fitted complete-case law.
#[derive(Clone, Debug)]
pub enum CompleteCaseLaw {
    Discrete(DiscreteLaw),
    Gaussian(GaussianLaw),
    PerPattern(PerPatternLaw),
}

impl CompleteCaseLaw {
    pub fn kind(&self) -> &'static str {
        match self {
            CompleteCaseLaw::Discrete(_) => "discrete_loglinear",
            CompleteCaseLaw::Gaussian(_) => "gaussian_linear",
            CompleteCaseLaw::PerPattern(_) => "per_pattern_regression",
        }
    }

    pub fn is_per_pattern(&self) -> bool {
        matches!(self, CompleteCaseLaw::PerPattern(_))
    }

    pub fn n_params(&self, est: &dyn Estimand) -> usize {
        match self {
            CompleteCaseLaw::Discrete(l) => l.eta.len(),
            CompleteCaseLaw::Gaussian(l) => 2 * l.gamma.len() + 1,
            CompleteCaseLaw::PerPattern(l) => l.n_params(est.dim()),
        }
    }

    /// Current parameter vector; for per-pattern laws, the (zero) coefficient offsets.
    pub fn params(&self, est: &dyn Estimand) -> DVector<f64> {
        match self {
            CompleteCaseLaw::Discrete(l) => l.eta.clone(),
            CompleteCaseLaw::Gaussian(l) => l.params(),
            CompleteCaseLaw::PerPattern(l) => l
                .offsets
                .clone()
                .unwrap_or_else(|| DVector::zeros(l.n_params(est.dim()))),
        }
    }

    pub fn with_params(&self, theta: &DVector<f64>) -> Self {
        match self {
            CompleteCaseLaw::Discrete(l) => CompleteCaseLaw::Discrete(l.with_eta(theta)),
            CompleteCaseLaw::Gaussian(l) => CompleteCaseLaw::Gaussian(l.with_params(theta)),
            CompleteCaseLaw::PerPattern(l) => {
                let mut out = l.clone();
                out.offsets = Some(theta.clone());
                CompleteCaseLaw::PerPattern(out)
            }
        }
    }

    /// Per-row influence functions of the law's parameters (`n × dim η`).
    pub fn influence(&self, d: &PatternedDataset, est: &dyn Estimand, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            CompleteCaseLaw::Discrete(l) => {
                if l.influence.nrows() != d.n() {
                    return Err(Error::Invalid(
                        "log-linear law was not fitted on this dataset; influence functions unavailable".into(),
                    ));
                }
                Ok(l.influence.clone())
            }
            CompleteCaseLaw::Gaussian(l) => l.influence(d.n()),
            CompleteCaseLaw::PerPattern(l) => l.influence(d.n(), est, beta),
        }
    }

    /// Prepares conditional expectations of `U(·; β)`, optionally under an
    /// exponential tilt of the missing values.
    pub fn engine<'a>(
        &'a self,
        est: &'a dyn Estimand,
        beta: &DVector<f64>,
        tilt: Option<&'a ExpTilt>,
    ) -> Result<ExpectationEngine<'a>> {
        let coefs = match self {
            CompleteCaseLaw::PerPattern(l) => {
                if tilt.is_some_and(|t| !t.is_null()) {
                    return Err(Error::Unsupported(
                        "per_pattern_regression cannot evaluate tilted expectations".into(),
                    ));
                }
                l.coefficients(est, beta)?
            }
            _ => Vec::new(),
        };
        Ok(ExpectationEngine {
            law: self,
            est,
            beta: beta.clone(),
            tilt,
            coefs,
        })
    }

    /// One-off `E[U | L_(r), R = 1]` for pattern id `r` of `d` (see [`engine`](Self::engine)).
    pub fn cond_expectation(
        &self,
        d: &PatternedDataset,
        r: usize,
        row: &[Option<f64>],
        est: &dyn Estimand,
        beta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let mask = d
            .pattern(r)
            .ok_or_else(|| Error::Invalid(format!("pattern id {r} not present in dataset")))?
            .mask
            .clone();
        self.engine(est, beta, None)?.cond_expectation(&mask, row)
    }
}

/// Conditional expectations at a fixed `β` (and tilt).
pub struct ExpectationEngine<'a> {
    law: &'a CompleteCaseLaw,
    est: &'a dyn Estimand,
    beta: DVector<f64>,
    tilt: Option<&'a ExpTilt>,
    coefs: Vec<DMatrix<f64>>,
}

impl ExpectationEngine<'_> {
    /// `E[U | L_(r), R = 1]` using only the values `row` has observed under `mask`.
    pub fn cond_expectation(&self, mask: &PatternMask, row: &[Option<f64>]) -> Result<DVector<f64>> {
        let visible: Vec<Option<f64>> = row
            .iter()
            .enumerate()
            .map(|(j, v)| if mask.is_observed(j) { *v } else { None })
            .collect();
        if determined_by(self.est, mask) {
            return self.est.value(&fill_row(&visible), &self.beta);
        }
        let (feature, phi) = match self.tilt {
            Some(t) => (t.feature(mask), t.phi),
            None => (None, 0.0),
        };
        match self.law {
            CompleteCaseLaw::Discrete(l) => l.cond_expectation(self.est, &self.beta, mask, &visible, feature, phi),
            CompleteCaseLaw::Gaussian(l) => l.cond_expectation(self.est, &self.beta, mask, &visible, feature, phi),
            CompleteCaseLaw::PerPattern(l) => {
                let k = l.entries.iter().position(|e| &e.mask == mask).ok_or_else(|| Error::Spec {
                    pattern: mask.to_string(),
                    message: "no per-pattern regression for this pattern".into(),
                })?;
                let q = l.entries[k].design.eval(&visible)?;
                Ok(self.coefs[k].transpose() * q)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Variable;
    use crate::estimand::EstimandSpec;
    use approx::assert_relative_eq;

    fn binary2() -> VariableSchema {
        VariableSchema::binary(&["A", "B"]).unwrap()
    }

    #[test]
    fn uniform_complete_cases_give_zero_eta() {
        let s = binary2();
        let rows = vec![
            vec![Some(0.0), Some(0.0)],
            vec![Some(0.0), Some(1.0)],
            vec![Some(1.0), Some(0.0)],
            vec![Some(1.0), Some(1.0)],
            vec![Some(1.0), None],
        ];
        let d = PatternedDataset::from_rows(s, rows).unwrap();
        let law = fit_complete_case_mle(&d, &LawSpec::DiscreteLoglinear { terms: vec![] }).unwrap();
        let CompleteCaseLaw::Discrete(l) = &law else { panic!() };
        assert!(max_abs(l.eta()) < 1e-12);
        assert_relative_eq!(l.probabilities().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn three_binary_loglinear_normalizes_over_eight_cells() {
        let s = VariableSchema::binary(&["A", "B", "C"]).unwrap();
        let design = Design::parse(&s, &["A", "B", "C"]).unwrap();
        let eta = DVector::from_vec(vec![0.3, -0.2, 0.8]);
        let l = DiscreteLaw::new(&s, design, eta.clone()).unwrap();
        assert_eq!(l.cells().len(), 8);
        let z: f64 = l
            .cells()
            .iter()
            .map(|c| (0.3 * c[0] - 0.2 * c[1] + 0.8 * c[2]).exp())
            .sum();
        assert_relative_eq!(l.prob(&[1.0, 1.0, 1.0]).unwrap(), (0.9f64).exp() / z, epsilon = 1e-14);
    }

    #[test]
    fn gaussian_substitution_and_exactness() {
        let s = VariableSchema::continuous(&["X", "Y"]).unwrap();
        let rows = vec![
            vec![Some(0.0), Some(1.0)],
            vec![Some(1.0), Some(2.5)],
            vec![Some(2.0), Some(5.5)],
            vec![Some(3.0), Some(7.0)],
            vec![Some(1.5), None],
            vec![None, Some(0.25)],
            vec![None, None],
        ];
        let d = PatternedDataset::from_rows(s.clone(), rows).unwrap();
        let law = fit_complete_case_mle(
            &d,
            &LawSpec::GaussianLinear {
                outcome: "Y".into(),
                predictors: vec!["X".into()],
            },
        )
        .unwrap();
        let CompleteCaseLaw::Gaussian(g) = &law else { panic!() };
        let est = EstimandSpec::mean(&s, "Y").unwrap();
        let beta = DVector::from_element(1, 0.4);
        let eng = law.engine(est.estimand(), &beta, None).unwrap();
        let m = |t: &str| PatternMask::parse(t).unwrap();
        let e2 = eng.cond_expectation(&m("10"), d.row(4)).unwrap()[0];
        assert_relative_eq!(e2, g.gamma()[0] + g.gamma()[1] * 1.5 - 0.4, epsilon = 1e-12);
        let e3 = eng.cond_expectation(&m("01"), d.row(5)).unwrap()[0];
        assert_eq!(e3, 0.25 - 0.4);
        let e4 = eng.cond_expectation(&m("00"), d.row(6)).unwrap()[0];
        assert_relative_eq!(e4, (1.0 + 2.5 + 5.5 + 7.0) / 4.0 - 0.4, epsilon = 1e-12);
        // conditioning ignores values hidden by the mask
        let hidden = eng.cond_expectation(&m("10"), d.row(0)).unwrap()[0];
        assert_relative_eq!(hidden, g.gamma()[0] - 0.4, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_rejects_nonlinear_dependence() {
        let s = VariableSchema::new(vec![
            Variable::new("X", VarKind::Continuous),
            Variable::new("Y", VarKind::Binary),
        ])
        .unwrap();
        let rows = vec![
            vec![Some(0.0), Some(1.0)],
            vec![Some(1.0), Some(0.0)],
            vec![Some(2.0), Some(1.0)],
            vec![None, Some(1.0)],
        ];
        let d = PatternedDataset::from_rows(s.clone(), rows).unwrap();
        let law = fit_complete_case_mle(
            &d,
            &LawSpec::GaussianLinear {
                outcome: "Y".into(),
                predictors: vec![],
            },
        )
        .unwrap();
        // logistic score in X with X missing: not affine in the missing coordinate
        let est = EstimandSpec::logistic(&s, "Y", &["X"]).unwrap();
        let beta = DVector::zeros(2);
        let eng = law.engine(est.estimand(), &beta, None).unwrap();
        let err = eng.cond_expectation(&PatternMask::parse("01").unwrap(), d.row(3)).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)) && err.to_string().contains("affinely"), "{err}");
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        assert!(matches!(
            enumerate_cells(&[1000, 1000, 2]),
            Err(Error::EnumerationCap { .. })
        ));
        assert_eq!(enumerate_cells(&[2, 3]).unwrap().len(), 6);
        assert_eq!(enumerate_cells(&[2, 3]).unwrap()[1], vec![0, 1]);
    }
}
