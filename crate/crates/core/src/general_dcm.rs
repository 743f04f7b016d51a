//! Discrete choice nonresponse with arbitrary i.i.d. utility errors.
//!
//! Pattern `r` carries utility `μ_r(L) + ε_r`; the complete case is the
//! baseline with `μ_1 ≡ 0`, and `v_r = μ_r − μ_1 = α_r' q_r(L_(r))` is modelled
//! on variables observed under `r`. Then
//! `Π_r = ∫ Π_{s≠r} F(v_r − v_s + ε) f(ε) dε`.
//! Extreme-value errors give the multinomial logit and `v_r = log Odds_r`;
//! standard-normal errors are integrated by Gauss-Hermite quadrature.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{PatternMask, PatternedDataset};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::ldcm::{fit_pairwise_logistic, NonresponseFit, OddsModelSpec, PatternFitInfo, ResponseModel};
use crate::numeric::{condition_number, inverse, jacobian_fd, max_abs, par_sum_rows, solve};
use crate::quadrature::{integrate_real_line, HermiteRule};

pub const DEFAULT_ORDER: usize = 20;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied error law; both functions must be given.
#[derive(Clone)]
pub struct CustomDistribution {
    pub name: String,
    pub cdf: ScalarFn,
    pub pdf: ScalarFn,
}

impl fmt::Debug for CustomDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomDistribution({})", self.name)
    }
}

/// Distribution `F_ε` of the utility errors.
#[derive(Clone, Debug)]
pub enum ErrorDistribution {
    /// Standard Gumbel (maximum) law, `F(x) = exp(−exp(−x))`.
    ExtremeValue,
    StandardNormal,
    Custom(CustomDistribution),
}

impl ErrorDistribution {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "extreme_value" => Ok(Self::ExtremeValue),
            "standard_normal" => Ok(Self::StandardNormal),
            other => Err(Error::Invalid(format!(
                "unknown error distribution `{other}` (expected extreme_value or standard_normal)"
            ))),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Self::ExtremeValue => "extreme_value",
            Self::StandardNormal => "standard_normal",
            Self::Custom(c) => &c.name,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Self::ExtremeValue => (-(-x).exp()).exp(),
            Self::StandardNormal => 0.5 * erfc(-x / std::f64::consts::SQRT_2),
            Self::Custom(c) => (c.cdf)(x),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Self::ExtremeValue => (-x - (-x).exp()).exp(),
            Self::StandardNormal => (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            Self::Custom(c) => (c.pdf)(x),
        }
    }
}

/// Choice probabilities from raw utilities `μ` by generic adaptive
/// integration over the error density. Works for every distribution.
pub fn choice_probabilities_numeric(dist: &ErrorDistribution, mu: &[f64]) -> Result<Vec<f64>> {
    check_finite(mu)?;
    (0..mu.len())
        .map(|r| {
            integrate_real_line(
                |e| {
                    let mut prod = dist.pdf(e);
                    for (s, &ms) in mu.iter().enumerate() {
                        if s != r && prod != 0.0 {
                            prod *= dist.cdf(mu[r] - ms + e);
                        }
                    }
                    prod
                },
                1e-12,
            )
        })
        .collect()
}

fn check_finite(mu: &[f64]) -> Result<()> {
    if mu.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("utility difference".into()))
    }
}

/// Multinomial logit probabilities from raw utilities.
pub fn softmax(mu: &[f64]) -> Vec<f64> {
    let m = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = mu.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Choice probabilities from raw utilities for the production paths:
/// closed form for extreme-value errors, Hermite quadrature for normal errors
/// and adaptive integration for custom laws.
pub fn choice_probabilities(dist: &ErrorDistribution, rule: &HermiteRule, mu: &[f64]) -> Result<Vec<f64>> {
    check_finite(mu)?;
    match dist {
        ErrorDistribution::ExtremeValue => Ok(softmax(mu)),
        ErrorDistribution::StandardNormal => Ok((0..mu.len())
            .map(|r| {
                let gaps: Vec<f64> = mu
                    .iter()
                    .enumerate()
                    .filter(|&(s, _)| s != r)
                    .map(|(_, &ms)| mu[r] - ms)
                    .collect();
                normal_choice_prob(rule, &gaps)
            })
            .collect()),
        ErrorDistribution::Custom(_) => choice_probabilities_numeric(dist, mu),
    }
}

fn ln_norm_cdf(z: f64) -> f64 {
    if z > -30.0 {
        (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        // Mills-ratio expansion; erfc underflows further out
        let z2 = z * z;
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

/// `φ(z) / Φ(z)`.
fn inverse_mills(z: f64) -> f64 {
    (-0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() - ln_norm_cdf(z)).exp()
}

/// `P(ε_r + g_s > ε_s for all s)` with iid standard normal errors, where
/// `g_s = μ_r − μ_s`. The integrand `φ(e) ∏ Φ(g_s + e)` is log-concave, so the
/// Hermite rule is recentred at its mode and rescaled by its curvature there
/// (Liu-Pierce adaptive quadrature).
fn normal_choice_prob(rule: &HermiteRule, gaps: &[f64]) -> f64 {
    let log_f = |e: f64| -0.5 * e * e + gaps.iter().map(|g| ln_norm_cdf(g + e)).sum::<f64>();
    let curvature = |e: f64| {
        -1.0 - gaps
            .iter()
            .map(|g| {
                let z = g + e;
                let l = inverse_mills(z);
                l * (z + l)
            })
            .sum::<f64>()
    };
    let mut mode = 0.0f64;
    for _ in 0..60 {
        let grad = -mode + gaps.iter().map(|g| inverse_mills(g + mode)).sum::<f64>();
        let step = (grad / curvature(mode)).clamp(-4.0, 4.0);
        mode -= step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    let scale = (-1.0 / curvature(mode)).sqrt() * std::f64::consts::SQRT_2;
    let total: f64 = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(x, w)| w * (x * x + log_f(mode + scale * x)).exp())
        .sum();
    total * scale / (2.0 * std::f64::consts::PI).sqrt()
}

/// Per-pattern utility-difference designs plus the quadrature order.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityDiffSpec {
    pub designs: OddsModelSpec,
    pub order: usize,
}

impl UtilityDiffSpec {
    pub fn new(designs: OddsModelSpec) -> Self {
        Self {
            designs,
            order: DEFAULT_ORDER,
        }
    }
}

/// A fully parameterized general discrete choice model.
#[derive(Clone, Debug)]
pub struct GeneralDcm {
    dist: ErrorDistribution,
    spec: UtilityDiffSpec,
    alpha: Vec<DVector<f64>>,
    rule: Arc<HermiteRule>,
}

impl GeneralDcm {
    pub fn new(dist: ErrorDistribution, spec: UtilityDiffSpec, alpha: Vec<DVector<f64>>) -> Result<Self> {
        if alpha.len() != spec.designs.entries().len() {
            return Err(Error::Invalid(format!(
                "{} coefficient vectors for {} patterns",
                alpha.len(),
                spec.designs.entries().len()
            )));
        }
        for (a, (mask, d)) in alpha.iter().zip(spec.designs.entries()) {
            if a.len() != d.ncols() {
                return Err(Error::Spec {
                    pattern: mask.to_string(),
                    message: format!("{} coefficients for {} design columns", a.len(), d.ncols()),
                });
            }
        }
        let rule = Arc::new(HermiteRule::new(spec.order)?);
        Ok(Self {
            dist,
            spec,
            alpha,
            rule,
        })
    }

    pub fn distribution(&self) -> &ErrorDistribution {
        &self.dist
    }

    pub fn spec(&self) -> &UtilityDiffSpec {
        &self.spec
    }

    pub fn alpha(&self) -> &[DVector<f64>] {
        &self.alpha
    }

    pub fn masks(&self) -> Vec<PatternMask> {
        self.spec.designs.masks()
    }

    /// `(0, v_2, ..., v_J)` at a fully specified row.
    pub fn utilities(&self, row: &[f64]) -> Result<Vec<f64>> {
        let mut mu = Vec::with_capacity(self.alpha.len() + 1);
        mu.push(0.0);
        for (a, (_, d)) in self.alpha.iter().zip(self.spec.designs.entries()) {
            mu.push(d.eval_full(row)?.dot(a));
        }
        Ok(mu)
    }

    /// `(Π_1, Π_2, ..., Π_J)` in `masks()` order after the complete case.
    pub fn probabilities(&self, row: &[f64]) -> Result<Vec<f64>> {
        choice_probabilities(&self.dist, &self.rule, &self.utilities(row)?)
    }

    /// Same as [`probabilities`](Self::probabilities) through generic adaptive integration.
    pub fn probabilities_numeric(&self, row: &[f64]) -> Result<Vec<f64>> {
        choice_probabilities_numeric(&self.dist, &self.utilities(row)?)
    }

    pub fn choice_prob(&self, mask: &PatternMask, row: &[f64]) -> Result<f64> {
        let p = self.probabilities(row)?;
        if mask.is_complete() {
            return Ok(p[0]);
        }
        let k = self.masks().iter().position(|m| m == mask).ok_or_else(|| Error::Spec {
            pattern: mask.to_string(),
            message: "pattern has no utility model".into(),
        })?;
        Ok(p[k + 1])
    }

    pub fn n_params(&self) -> usize {
        self.alpha.iter().map(|a| a.len()).sum()
    }

    pub fn params(&self) -> DVector<f64> {
        DVector::from_vec(self.alpha.iter().flat_map(|a| a.iter().copied()).collect())
    }

    pub fn with_params(&self, theta: &DVector<f64>) -> Self {
        let mut out = self.clone();
        let mut k = 0;
        for a in &mut out.alpha {
            for v in a.iter_mut() {
                *v = theta[k];
                k += 1;
            }
        }
        out
    }
}

/// Instrument `G_r` used in the moment conditions.
#[derive(Clone, Debug, Default)]
pub enum Instrument {
    /// `∂v_r/∂α_r = q_r(L_(r))`.
    #[default]
    Derivative,
    /// `q_r / (1 + exp(α_r' q_r))`; with extreme-value errors the moments are
    /// then exactly the pairwise logistic scores.
    PairwiseScore,
    /// User feature maps over `L_(r)`, one per pattern, matching `dim α_r`.
    Custom(OddsModelSpec),
}

impl Instrument {
    fn label(&self) -> &'static str {
        match self {
            Instrument::Derivative => "derivative",
            Instrument::PairwiseScore => "pairwise_score",
            Instrument::Custom(_) => "custom",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmmOptions {
    pub instrument: Instrument,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            instrument: Instrument::Derivative,
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// Summary of a GMM solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmDiagnostics {
    pub instrument: String,
    pub iterations: usize,
    /// Max-norm of the averaged moments, per pattern.
    pub moment_norms: Vec<f64>,
    pub jacobian_condition: f64,
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GeneralDcm,
    pub diagnostics: GmmDiagnostics,
    /// Per-row influence functions `−J^{-1} W_i`, `n × dim α`.
    pub influence: DMatrix<f64>,
}

impl GmmFit {
    pub fn alpha_hat(&self) -> &[DVector<f64>] {
        self.model.alpha()
    }

    pub fn into_nonresponse_fit(self) -> NonresponseFit {
        let info = self
            .model
            .masks()
            .iter()
            .zip(self.model.alpha())
            .zip(self.model.spec().designs.entries())
            .zip(&self.diagnostics.moment_norms)
            .map(|(((mask, a), (_, design)), norm)| PatternFitInfo {
                mask: mask.to_string(),
                iterations: self.diagnostics.iterations,
                gradient_norm: *norm,
                terms: design.names().to_vec(),
                estimates: a.iter().copied().collect(),
            })
            .collect();
        NonresponseFit::new(ResponseModel::General(self.model), info, self.influence)
    }
}

struct MomentProblem<'a> {
    d: &'a PatternedDataset,
    base: GeneralDcm,
    instrument: &'a Instrument,
    /// Pattern index (into the design entries) of each row; `None` for complete cases.
    slot: Vec<Option<usize>>,
    offsets: Vec<usize>,
}

impl<'a> MomentProblem<'a> {
    fn new(d: &'a PatternedDataset, base: GeneralDcm, instrument: &'a Instrument) -> Result<Self> {
        let masks = base.masks();
        let slot = (0..d.n())
            .map(|i| {
                if d.is_complete(i) {
                    Ok(None)
                } else {
                    masks
                        .iter()
                        .position(|m| m == d.mask_of_row(i))
                        .map(Some)
                        .ok_or_else(|| Error::Spec {
                            pattern: d.pattern_id(i).to_string(),
                            message: "pattern has no utility model".into(),
                        })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if let Instrument::Custom(g) = instrument {
            for ((mask, design), (_, q)) in g.entries().iter().zip(base.spec().designs.entries()) {
                if design.ncols() != q.ncols() {
                    return Err(Error::Spec {
                        pattern: mask.to_string(),
                        message: format!(
                            "instrument has {} columns but the utility model has {}",
                            design.ncols(),
                            q.ncols()
                        ),
                    });
                }
            }
            if g.masks() != masks {
                return Err(Error::Invalid("instrument patterns differ from the utility model".into()));
            }
        }
        let mut offsets = vec![0];
        for a in base.alpha() {
            offsets.push(offsets.last().unwrap() + a.len());
        }
        Ok(Self {
            d,
            base,
            instrument,
            slot,
            offsets,
        })
    }

    fn instrument_at(&self, model: &GeneralDcm, k: usize, row: &[Option<f64>]) -> Result<DVector<f64>> {
        let design = &model.spec().designs.entries()[k].1;
        match self.instrument {
            Instrument::Derivative => design.eval(row),
            Instrument::PairwiseScore => {
                let q = design.eval(row)?;
                let odds = q.dot(&model.alpha()[k]).exp();
                Ok(q / (1.0 + odds))
            }
            Instrument::Custom(g) => g.entries()[k].1.eval(row),
        }
    }

    fn row_moment(&self, model: &GeneralDcm, i: usize) -> Result<DVector<f64>> {
        let dim = *self.offsets.last().unwrap();
        let mut w = DVector::zeros(dim);
        let row = self.d.row(i);
        match self.slot[i] {
            Some(k) => {
                let g = self.instrument_at(model, k, row)?;
                w.rows_mut(self.offsets[k], g.len()).copy_from(&g);
            }
            None => {
                let full = crate::ldcm::full_row(row)?;
                let p = model.probabilities(&full)?;
                for k in 0..model.alpha().len() {
                    let g = self.instrument_at(model, k, row)?;
                    let ratio = p[k + 1] / p[0];
                    w.rows_mut(self.offsets[k], g.len()).axpy(-ratio, &g, 0.0);
                }
            }
        }
        Ok(w)
    }

    fn mean_moment(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let model = self.base.with_params(theta);
        let dim = theta.len();
        let s = par_sum_rows(self.d.n(), dim, |i| self.row_moment(&model, i))?;
        let m = s / self.d.n() as f64;
        if m.iter().all(|v| v.is_finite()) {
            Ok(m)
        } else {
            Err(Error::NonFinite("GMM moments".into()))
        }
    }
}

/// Solves the stacked moment conditions `P_n W_r(G_r; α) = 0` for every
/// incomplete pattern by Newton's method with a central-difference Jacobian.
pub fn gmm_fit(
    d: &PatternedDataset,
    dist: ErrorDistribution,
    spec: &UtilityDiffSpec,
    opts: &GmmOptions,
) -> Result<GmmFit> {
    spec.designs.covers(d)?;
    if d.complete_count() == 0 {
        return Err(Error::NoCompleteCases);
    }
    // start from the pairwise logit fit, rescaled to the error law's spread
    let start = fit_pairwise_logistic(d, &spec.designs)?;
    let scale = match dist {
        ErrorDistribution::StandardNormal => std::f64::consts::SQRT_2 / (std::f64::consts::PI / 3f64.sqrt()),
        _ => 1.0,
    };
    let start_alpha: Vec<DVector<f64>> = start
        .model()
        .as_logit()
        .expect("pairwise fit is logit")
        .entries()
        .iter()
        .map(|e| &e.coef * scale)
        .collect();
    let base = GeneralDcm::new(dist, spec.clone(), start_alpha)?;
    let problem = MomentProblem::new(d, base.clone(), &opts.instrument)?;

    let mut theta = base.params();
    let mut m = problem.mean_moment(&theta)?;
    let mut iterations = 0;
    while max_abs(&m) > opts.tol {
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                context: "GMM moment solve".into(),
                iterations,
                residual: max_abs(&m),
            });
        }
        let jac = jacobian_fd(|t| problem.mean_moment(t), &theta)?;
        let step = solve(&jac, &(-&m), "GMM moment Jacobian").map_err(|_| Error::RankDeficient {
            context: "GMM instrument Jacobian".into(),
        })?;
        let norm0 = m.norm();
        let mut t = 1.0;
        let mut next = &theta + &step;
        let mut m_next = problem.mean_moment(&next);
        let mut halvings = 0;
        while !matches!(&m_next, Ok(v) if v.norm() < norm0) && halvings < 30 {
            t *= 0.5;
            next = &theta + &step * t;
            m_next = problem.mean_moment(&next);
            halvings += 1;
        }
        let m_next = m_next?;
        if m_next.norm() >= norm0 {
            return Err(Error::NoConvergence {
                context: "GMM moment solve (no descent direction)".into(),
                iterations,
                residual: max_abs(&m),
            });
        }
        theta = next;
        m = m_next;
        iterations += 1;
    }

    let jac = jacobian_fd(|t| problem.mean_moment(t), &theta)?;
    let cond = condition_number(&jac);
    let jinv = inverse(&jac, "GMM moment Jacobian").map_err(|_| Error::RankDeficient {
        context: "GMM instrument Jacobian".into(),
    })?;
    let model = base.with_params(&theta);
    let n = d.n();
    let dim = theta.len();
    let mut influence = DMatrix::zeros(n, dim);
    for i in 0..n {
        let w = problem.row_moment(&model, i)?;
        let inf = -(&jinv * w);
        influence.row_mut(i).copy_from(&inf.transpose());
    }
    let moment_norms = problem
        .offsets
        .windows(2)
        .map(|w| m.rows(w[0], w[1] - w[0]).iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .collect();
    Ok(GmmFit {
        model,
        diagnostics: GmmDiagnostics {
            instrument: opts.instrument.label().into(),
            iterations,
            moment_norms,
            jacobian_condition: cond,
        },
        influence,
    })
}

/// Builds a custom-instrument spec from explicit designs.
pub fn custom_instrument(designs: OddsModelSpec) -> Instrument {
    Instrument::Custom(designs)
}

/// Intercept-only designs for each mask; a convenience for toy models.
pub fn intercept_designs(d: &PatternedDataset) -> OddsModelSpec {
    let entries: Vec<(PatternMask, Design)> = d
        .patterns()
        .iter()
        .skip(1)
        .map(|p| (p.mask.clone(), Design::intercept_only(d.schema())))
        .collect();
    OddsModelSpec::from_entries(d.schema(), entries).expect("intercept designs are valid")
}
