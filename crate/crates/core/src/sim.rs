//! Monte Carlo study with two variables, four missingness patterns and four
//! specification scenarios.
//!
//! `(X, Y)` follows a three-component bivariate normal mixture with weights
//! `(1/2, e/(2+2e), 1/(2+2e))`, means `(0,0)`, `(1,1)`, `(1,2)` and common
//! covariance `[[1, 1], [1, 2]]`. Patterns are drawn with probabilities
//! proportional to `(1, e^X, e^{2Y}, e^{-1})` for "both observed", "X only",
//! "Y only" and "neither". The target is `E(Y) = (2+e)/(2+2e)`.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cc_law::{fit_complete_case_mle, fit_pattern_specific, CompleteCaseLaw, LawSpec};
use crate::data::{PatternMask, PatternedDataset, VariableSchema};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::estimand::EstimandSpec;
use crate::estimators::{point_estimate, solve_with_sandwich, Equation, Method};
use crate::inference::{bootstrap, Z_975};
use crate::ldcm::{fit_pairwise_logistic, NonresponseFit, PatternDesigns, ResponseModel};

/// `E(Y) = (2 + e) / (2 + 2e)`.
pub fn true_beta() -> f64 {
    let e = std::f64::consts::E;
    (2.0 + e) / (2.0 + 2.0 * e)
}

/// Mixture weights of the three components.
pub fn mixture_weights() -> [f64; 3] {
    let e = std::f64::consts::E;
    [0.5, e / (2.0 + 2.0 * e), 1.0 / (2.0 + 2.0 * e)]
}

pub const MIXTURE_MEANS: [(f64, f64); 3] = [(0.0, 0.0), (1.0, 1.0), (1.0, 2.0)];

/// Largest tolerated share of failed replicates per method.
pub const MAX_REP_FAILURE: f64 = 0.05;

fn rep_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// `n` draws of `(X, Y)` for replicate `rep`.
pub fn generate_full_data(n: usize, seed: u64, rep: u64) -> Vec<[f64; 2]> {
    let mut rng = rep_rng(seed, rep);
    let w = mixture_weights();
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let c = if u < w[0] {
                0
            } else if u < w[0] + w[1] {
                1
            } else {
                2
            };
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let (mx, my) = MIXTURE_MEANS[c];
            [mx + z1, my + z1 + z2]
        })
        .collect()
}

/// Masks of the four patterns in their natural order.
pub fn pattern_masks() -> [PatternMask; 4] {
    [
        PatternMask::new(vec![true, true]),
        PatternMask::new(vec![true, false]),
        PatternMask::new(vec![false, true]),
        PatternMask::new(vec![false, false]),
    ]
}

/// `P(R = r | X, Y)` for the four patterns.
pub fn pattern_probabilities(x: f64, y: f64) -> [f64; 4] {
    let w = [1.0, x.exp(), (2.0 * y).exp(), (-1.0f64).exp()];
    let s: f64 = w.iter().sum();
    [w[0] / s, w[1] / s, w[2] / s, w[3] / s]
}

/// Applies the missingness mechanism with its own RNG stream.
pub fn assign_patterns(full: &[[f64; 2]], seed: u64, rep: u64) -> Result<PatternedDataset> {
    // distinct stream family from the full-data draws
    let mut rng = rep_rng(seed ^ 0x9E37_79B9_7F4A_7C15, rep);
    let rows = full
        .iter()
        .map(|&[x, y]| {
            let p = pattern_probabilities(x, y);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut r = 3;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    r = k;
                    break;
                }
            }
            match r {
                0 => vec![Some(x), Some(y)],
                1 => vec![Some(x), None],
                2 => vec![None, Some(y)],
                _ => vec![None, None],
            }
        })
        .collect();
    PatternedDataset::from_rows(schema(), rows)
}

pub fn schema() -> VariableSchema {
    VariableSchema::continuous(&["X", "Y"]).expect("static schema")
}

/// Observed data of replicate `rep`.
pub fn simulate_dataset(n: usize, seed: u64, rep: u64) -> Result<PatternedDataset> {
    assign_patterns(&generate_full_data(n, seed, rep), seed, rep)
}

/// Which working models are correctly specified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Both models correct.
    Bth,
    /// Odds correct, outcome regression wrong.
    Nrm,
    /// Outcome regression correct, odds wrong.
    Ccm,
    /// Both wrong.
    Bad,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Bth, Scenario::Nrm, Scenario::Ccm, Scenario::Bad];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Bth => "bth",
            Scenario::Nrm => "nrm",
            Scenario::Ccm => "ccm",
            Scenario::Bad => "bad",
        }
    }

    pub fn odds_correct(&self) -> bool {
        matches!(self, Scenario::Bth | Scenario::Nrm)
    }

    pub fn law_correct(&self) -> bool {
        matches!(self, Scenario::Bth | Scenario::Ccm)
    }

    /// Odds designs: `(1, X)`, `(1, Y)`, `(1)` when correct, squares otherwise.
    pub fn odds_designs(&self) -> PatternDesigns {
        let s = schema();
        let [_, m2, m3, m4] = pattern_masks();
        let (t2, t3) = if self.odds_correct() { ("X", "Y") } else { ("X^2", "Y^2") };
        PatternDesigns::from_entries(
            &s,
            vec![
                (m2, Design::parse(&s, &["1", t2]).expect("static design")),
                (m3, Design::parse(&s, &["1", t3]).expect("static design")),
                (m4, Design::intercept_only(&s)),
            ],
        )
        .expect("static designs")
    }

    fn law_predictor(&self) -> &'static str {
        if self.law_correct() {
            "X"
        } else {
            "X^2"
        }
    }

    /// Normal linear regression of `Y` on `1 + X` (correct) or `1 + X²`.
    pub fn law_spec(&self) -> LawSpec {
        LawSpec::GaussianLinear {
            outcome: "Y".into(),
            predictors: vec![self.law_predictor().into()],
        }
    }

    /// Per-pattern regressions matching [`law_spec`](Self::law_spec), for MR.
    pub fn per_pattern_designs(&self) -> PatternDesigns {
        let s = schema();
        let [_, m2, m3, m4] = pattern_masks();
        PatternDesigns::from_entries(
            &s,
            vec![
                (m2, Design::parse(&s, &["1", self.law_predictor()]).expect("static design")),
                (m3, Design::parse(&s, &["1", "Y"]).expect("static design")),
                (m4, Design::intercept_only(&s)),
            ],
        )
        .expect("static designs")
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Invalid(format!("unknown scenario `{s}` (expected bth, nrm, ccm or bad)")))
    }
}

/// Nested bootstrap settings: `b` resamples on each of the first `reps` replicates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimBootstrap {
    pub b: usize,
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub replicates: usize,
    pub scenario: Scenario,
    pub seed: u64,
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<SimBootstrap>,
}

impl SimConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            n: 2000,
            replicates: 200,
            scenario,
            seed: 7,
            methods: vec![Method::Ipw, Method::Pm, Method::Dr],
            bootstrap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Invalid("replicates must be at least 1".into()));
        }
        if self.n < 10 {
            return Err(Error::Invalid(format!("n = {} is too small", self.n)));
        }
        if self.methods.is_empty() {
            return Err(Error::Invalid("methods: at least one method is required".into()));
        }
        if let Some(m) = self.methods.iter().find(|m| **m == Method::Mle) {
            return Err(Error::Invalid(format!(
                "methods: {m} is unavailable for continuous simulated data"
            )));
        }
        if let Some(b) = self.bootstrap {
            if b.b < 50 {
                return Err(Error::Invalid(format!("bootstrap.b must be at least 50, got {}", b.b)));
            }
        }
        Ok(())
    }
}

/// Table summary of one method across replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub replicates: usize,
    pub failures: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Monte Carlo standard error of the bias, `mc_sd / sqrt(R)`.
    pub se_bias: f64,
    /// Monte Carlo SD of the estimates (denominator `R`).
    pub mc_sd: f64,
    pub rmse: f64,
    pub mean_sandwich_sd: f64,
    /// Share of Wald 95% intervals covering the truth.
    pub coverage: f64,
    pub sd_ratio_mc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_bootstrap_sd: Option<f64>,
    /// Mean sandwich SD over the bootstrapped replicates divided by the mean bootstrap SD.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd_ratio_bootstrap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub truth: f64,
    pub methods: Vec<MethodSummary>,
    /// SHA-256 over the bits of every replicate's fitted odds coefficients.
    pub odds_fingerprint: String,
    /// SHA-256 over the bits of every replicate's complete-case law parameters.
    pub law_fingerprint: String,
}

impl SimResult {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

#[derive(Clone, Debug, Default)]
struct RepOutcome {
    odds_bits: Vec<u64>,
    law_bits: Vec<u64>,
    /// Per method: estimate, sandwich SD, optional bootstrap SD.
    results: Vec<Option<(f64, f64, Option<f64>)>>,
}

fn odds_bits(fit: &NonresponseFit) -> Vec<u64> {
    match fit.model() {
        ResponseModel::Logit(m) => m.params().iter().map(|v| v.to_bits()).collect(),
        ResponseModel::General(g) => g.params().iter().map(|v| v.to_bits()).collect(),
    }
}

fn law_bits(law: &CompleteCaseLaw, est: &EstimandSpec) -> Vec<u64> {
    law.params(est.estimand()).iter().map(|v| v.to_bits()).collect()
}

/// Nuisance fits of one scenario on one dataset.
pub struct ScenarioFits {
    pub odds: NonresponseFit,
    pub law: CompleteCaseLaw,
    pub per_pattern: Option<CompleteCaseLaw>,
}

impl ScenarioFits {
    pub fn fit(d: &PatternedDataset, scenario: Scenario, with_mr: bool) -> Result<Self> {
        let odds = fit_pairwise_logistic(d, &restrict(&scenario.odds_designs(), d)?)?;
        let law = fit_complete_case_mle(d, &scenario.law_spec())?;
        let per_pattern = if with_mr {
            Some(fit_pattern_specific(d, &restrict(&scenario.per_pattern_designs(), d)?)?)
        } else {
            None
        };
        Ok(Self { odds, law, per_pattern })
    }

    pub fn equation<'a>(&self, d: &'a PatternedDataset, method: Method, est: &'a EstimandSpec) -> Result<Equation<'a>> {
        let law = if method == Method::Mr { self.per_pattern.as_ref() } else { Some(&self.law) };
        Equation::new(d, method, est, Some(&self.odds), law, None)
    }
}

fn restrict(designs: &PatternDesigns, d: &PatternedDataset) -> Result<PatternDesigns> {
    let present: Vec<PatternMask> = d.patterns().iter().map(|p| p.mask.clone()).collect();
    PatternDesigns::from_entries(
        d.schema(),
        designs
            .entries()
            .iter()
            .filter(|(m, _)| present.contains(m))
            .cloned()
            .collect(),
    )
}

/// Point estimate of one method on one dataset under a scenario.
pub fn scenario_point(d: &PatternedDataset, scenario: Scenario, method: Method) -> Result<f64> {
    let est = EstimandSpec::mean(d.schema(), "Y")?;
    let fits = ScenarioFits::fit(d, scenario, method == Method::Mr)?;
    let eq = fits.equation(d, method, &est)?;
    Ok(point_estimate(&eq)?.0[0])
}

fn run_rep(cfg: &SimConfig, rep: usize) -> Result<RepOutcome> {
    let d = simulate_dataset(cfg.n, cfg.seed, rep as u64)?;
    let est = EstimandSpec::mean(d.schema(), "Y")?;
    let with_mr = cfg.methods.contains(&Method::Mr);
    let fits = ScenarioFits::fit(&d, cfg.scenario, with_mr)?;
    let mut out = RepOutcome {
        odds_bits: odds_bits(&fits.odds),
        law_bits: law_bits(&fits.law, &est),
        results: Vec::with_capacity(cfg.methods.len()),
    };
    let boot = cfg.bootstrap.filter(|b| rep < b.reps);
    for &m in &cfg.methods {
        let res = (|| -> Result<(f64, f64, Option<f64>)> {
            let eq = fits.equation(&d, m, &est)?;
            let (report, _) = solve_with_sandwich(&eq, Some(&fits.odds))?;
            let boot_sd = match boot {
                Some(b) => {
                    let boot_seed = cfg.seed.wrapping_add(1_000_003 * (rep as u64 + 1));
                    let r = bootstrap(&d, b.b, boot_seed, |r| {
                        scenario_point(r, cfg.scenario, m).map(|v| DVector::from_element(1, v))
                    })?;
                    Some(r.sd[0])
                }
                None => None,
            };
            Ok((report.beta_hat[0], report.se[0], boot_sd))
        })();
        out.results.push(res.ok());
    }
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Runs every replicate (in parallel) and accumulates the table statistics in
/// replicate order.
pub fn run_monte_carlo(cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let outcomes: Vec<Option<RepOutcome>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| run_rep(cfg, rep).ok())
        .collect();
    let truth = true_beta();
    let mut odds_hash = Sha256::new();
    let mut law_hash = Sha256::new();
    for o in outcomes.iter().flatten() {
        for b in &o.odds_bits {
            odds_hash.update(b.to_le_bytes());
        }
        for b in &o.law_bits {
            law_hash.update(b.to_le_bytes());
        }
    }
    let mut methods = Vec::new();
    for (k, &m) in cfg.methods.iter().enumerate() {
        let vals: Vec<(f64, f64, Option<f64>)> = outcomes
            .iter()
            .map(|o| o.as_ref().and_then(|o| o.results[k]))
            .flatten()
            .collect();
        let failures = cfg.replicates - vals.len();
        if failures as f64 > MAX_REP_FAILURE * cfg.replicates as f64 {
            return Err(Error::TooManyFailures {
                failed: failures,
                total: cfg.replicates,
            });
        }
        methods.push(summarize(m, &vals, failures, truth));
    }
    Ok(SimResult {
        config: cfg.clone(),
        truth,
        methods,
        odds_fingerprint: hex(&odds_hash.finalize()),
        law_fingerprint: hex(&law_hash.finalize()),
    })
}

fn summarize(method: Method, vals: &[(f64, f64, Option<f64>)], failures: usize, truth: f64) -> MethodSummary {
    let r = vals.len() as f64;
    let mean = vals.iter().map(|v| v.0).sum::<f64>() / r;
    let mc_var = vals.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / r;
    let mc_sd = mc_var.sqrt();
    let bias = mean - truth;
    let mean_sandwich_sd = vals.iter().map(|v| v.1).sum::<f64>() / r;
    let covered = vals
        .iter()
        .filter(|v| (v.0 - truth).abs() <= Z_975 * v.1)
        .count() as f64;
    let booted: Vec<&(f64, f64, Option<f64>)> = vals.iter().filter(|v| v.2.is_some()).collect();
    let (mean_bootstrap_sd, sd_ratio_bootstrap) = if booted.is_empty() {
        (None, None)
    } else {
        let k = booted.len() as f64;
        let boot = booted.iter().map(|v| v.2.unwrap()).sum::<f64>() / k;
        let sand = booted.iter().map(|v| v.1).sum::<f64>() / k;
        (Some(boot), Some(sand / boot))
    };
    MethodSummary {
        method,
        replicates: vals.len(),
        failures,
        mean_estimate: mean,
        bias,
        se_bias: mc_sd / r.sqrt(),
        mc_sd,
        rmse: (bias * bias + mc_var).sqrt(),
        mean_sandwich_sd,
        coverage: covered / r,
        sd_ratio_mc: mean_sandwich_sd / mc_sd,
        mean_bootstrap_sd,
        sd_ratio_bootstrap,
    }
}

/// Text tables: bias/SE/RMSE, then SD accuracy and coverage.
pub fn render_tables(results: &[SimResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Bias, standard error of bias and RMSE (truth {:.4})", true_beta());
    let _ = writeln!(
        s,
        "{:<9}{:<7}{:>10}{:>10}{:>10}{:>10}{:>7}",
        "scenario", "method", "bias", "se(bias)", "mc_sd", "rmse", "fail"
    );
    for r in results {
        for m in &r.methods {
            let _ = writeln!(
                s,
                "{:<9}{:<7}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>7}",
                r.config.scenario.name(),
                m.method,
                m.bias,
                m.se_bias,
                m.mc_sd,
                m.rmse,
                m.failures
            );
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Accuracy of the SD estimator and 95% Wald coverage");
    let _ = writeln!(
        s,
        "{:<9}{:<7}{:>12}{:>12}{:>12}{:>10}",
        "scenario", "method", "est/mc", "est/boot", "boot_sd", "coverage"
    );
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    for r in results {
        for m in &r.methods {
            let _ = writeln!(
                s,
                "{:<9}{:<7}{:>12.3}{:>12}{:>12}{:>10.3}",
                r.config.scenario.name(),
                m.method,
                m.sd_ratio_mc,
                opt(m.sd_ratio_bootstrap),
                opt(m.mean_bootstrap_sd),
                m.coverage
            );
        }
    }
    s
}


/// Observed-pattern shares of the synthetic cohort, as `(mask, percent)`.
/// Masks list `preterm`, `low_cd4`, `cont_haart`; 1 means observed.
pub const COHORT_PATTERNS: [(&str, f64); 8] = [
    ("111", 10.5),
    ("011", 0.7),
    ("101", 18.3),
    ("001", 1.6),
    ("110", 33.9),
    ("010", 1.5),
    ("100", 30.6),
    ("000", 2.9),
];

pub fn cohort_schema() -> VariableSchema {
    VariableSchema::binary(&["preterm", "low_cd4", "cont_haart"]).expect("static schema")
}

/// Synthetic binary cohort with the eight missingness patterns of
/// [`COHORT_PATTERNS`] at roughly those shares.
///
/// The full data follow a log-linear law with a `low_cd4:cont_haart`
/// interaction; each pattern's odds against the complete case are its share
/// ratio times `exp(0.3 · Σ observed values)`, so missingness is
/// nonignorable but satisfies the complete-case missing value restriction.
pub fn cohort_dataset(n: usize, seed: u64) -> Result<PatternedDataset> {
    let mut rng = rep_rng(seed, 0);
    let law = |l: [f64; 3]| (-1.8 * l[0] + 0.4 * l[1] + 0.9 * l[2] + 0.2 * l[0] * l[1] - 0.5 * l[1] * l[2]).exp();
    let cells: Vec<[f64; 3]> = (0..8)
        .map(|c| [((c >> 2) & 1) as f64, ((c >> 1) & 1) as f64, (c & 1) as f64])
        .collect();
    let weights: Vec<f64> = cells.iter().map(|&c| law(c)).collect();
    let total: f64 = weights.iter().sum();
    let masks: Vec<PatternMask> = COHORT_PATTERNS
        .iter()
        .map(|(m, _)| PatternMask::parse(m).expect("static mask"))
        .collect();
    let base = COHORT_PATTERNS[0].1;
    let rows = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut cell = cells[7];
            for (c, w) in cells.iter().zip(&weights) {
                acc += w;
                if u < acc {
                    cell = *c;
                    break;
                }
            }
            let odds: Vec<f64> = masks
                .iter()
                .zip(COHORT_PATTERNS.iter())
                .map(|(m, (_, pct))| {
                    let s: f64 = m.observed().iter().map(|&j| cell[j]).sum();
                    if m.is_complete() {
                        1.0
                    } else {
                        pct / base * (0.3 * s).exp()
                    }
                })
                .collect();
            let z: f64 = odds.iter().sum();
            let v: f64 = rng.random::<f64>() * z;
            let mut acc = 0.0;
            let mut k = odds.len() - 1;
            for (j, o) in odds.iter().enumerate() {
                acc += o;
                if v < acc {
                    k = j;
                    break;
                }
            }
            (0..3)
                .map(|j| masks[k].is_observed(j).then_some(cell[j]))
                .collect()
        })
        .collect();
    PatternedDataset::from_rows(cohort_schema(), rows)
}
