//! Command-line front end: configuration, validation, dispatch and report
//! writing.
//!
//! Exit codes: 0 on success, 1 for user errors (bad arguments, configuration
//! or data), 2 for numerical failures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use choicemiss::general_dcm::ErrorDistribution;
use choicemiss::sensitivity::{parse_grid, parse_tilt, sweep, SelectionBiasSpec};
use choicemiss::sim::{render_tables, run_monte_carlo, Scenario, SimBootstrap, SimConfig};
use choicemiss::{
    designs_for, fit_law, infer_schema, ingest_csv, tabulate_patterns, DefaultDesign, EstimandSpec, LawChoice, LawSpec,
    Method, NonresponseChoice, PatternTerms, PatternedDataset, Pipeline, VarianceMode, VariableSchema,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "choicemiss", version, about = "Estimation with nonmonotone nonignorable missing data")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tabulate missingness patterns of a CSV file.
    Patterns(PatternsArgs),
    /// Fit nuisance models and estimate the target parameter.
    Estimate(EstimateArgs),
    /// Sweep a selection-bias tilt over a grid.
    Sensitivity(SensitivityArgs),
    /// Run the Monte Carlo study.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct PatternsArgs {
    pub input: PathBuf,
    #[arg(long, default_value = "NA")]
    pub na_token: String,
    /// JSON schema file (a list of variables); inferred when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured methods (repeatable).
    #[arg(long = "method")]
    pub methods: Vec<Method>,
    /// Overrides the configured estimand, e.g. `mean:Y` or `logistic:Y~X1+X2`.
    #[arg(long)]
    pub estimand: Option<String>,
    /// `sandwich`, `bootstrap` or `both`.
    #[arg(long, value_parser = parse_variance)]
    pub variance: Option<VarianceMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Tilt such as `r=2: phi*Y` (repeatable); overrides the configured tilts.
    #[arg(long = "tilt")]
    pub tilts: Vec<String>,
    /// `start:stop:step` or a comma list.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// Comma-separated methods among ipw, pm, dr.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Comma-separated scenarios among bth, nrm, ccm, bad.
    #[arg(long, value_delimiter = ',', default_value = "bth")]
    pub scenario: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "ipw,pm,dr")]
    pub methods: Vec<Method>,
    /// Bootstrap resamples per replicate (0 disables the nested bootstrap).
    #[arg(long, default_value_t = 0)]
    pub boot_b: usize,
    /// Number of leading replicates that get the nested bootstrap.
    #[arg(long, default_value_t = 50)]
    pub boot_reps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Odds-model section of a [`RunConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OddsConfig {
    #[serde(default)]
    pub default: DefaultDesign,
    #[serde(default)]
    pub patterns: Vec<PatternTerms>,
    /// `logit` (default), `normal` or `extreme_value`.
    #[serde(default = "default_errors")]
    pub errors: String,
}

impl Default for OddsConfig {
    fn default() -> Self {
        Self {
            default: DefaultDesign::default(),
            patterns: Vec::new(),
            errors: default_errors(),
        }
    }
}

fn parse_variance(s: &str) -> std::result::Result<VarianceMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown variance mode `{s}` (expected sandwich, bootstrap or both)"))
}

fn default_errors() -> String {
    "logit".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub tilts: Vec<String>,
    pub grid: String,
}

/// JSON run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: PathBuf,
    #[serde(default = "default_na")]
    pub na_token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<VariableSchema>,
    #[serde(default)]
    pub odds: OddsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<LawSpec>,
    pub estimand: String,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub variance: VarianceMode,
    #[serde(default = "default_boot_reps")]
    pub boot_reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityConfig>,
}

fn default_na() -> String {
    "NA".into()
}

fn default_boot_reps() -> usize {
    200
}

/// User or numerical failure, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::User(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<choicemiss::Error> for CliError {
    fn from(e: choicemiss::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::User(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

/// Everything a run needs after validation.
pub struct Resolved {
    pub dataset: PatternedDataset,
    pub estimand: EstimandSpec,
    pub pipelines: Vec<Pipeline>,
}

fn error_law(name: &str) -> Result<NonresponseChoice, String> {
    match name {
        "logit" => Ok(NonresponseChoice::Logit),
        "extreme_value" => Ok(NonresponseChoice::Gmm(ErrorDistribution::ExtremeValue)),
        "normal" => Ok(NonresponseChoice::Gmm(ErrorDistribution::StandardNormal)),
        other => Err(format!("odds.errors: unknown error law `{other}` (expected logit, extreme_value or normal)")),
    }
}

/// Checks a configuration against its dataset. Every violation is reported,
/// each naming the offending field (and pattern id where relevant).
pub fn validate_config(cfg: &RunConfig, d: &PatternedDataset) -> std::result::Result<Resolved, Vec<String>> {
    let mut errs = Vec::new();
    if cfg.methods.is_empty() {
        errs.push("methods: at least one method is required".to_string());
    }
    let estimand = match EstimandSpec::parse(d.schema(), &cfg.estimand) {
        Ok(e) => Some(e),
        Err(e) => {
            errs.push(format!("estimand: {e}"));
            None
        }
    };
    let odds = match designs_for(d, cfg.odds.default, &cfg.odds.patterns) {
        Ok(o) => Some(o),
        Err(e) => {
            errs.push(format!("odds.patterns: {e}"));
            None
        }
    };
    let nonresponse = match error_law(&cfg.odds.errors) {
        Ok(c) => Some(c),
        Err(e) => {
            errs.push(e);
            None
        }
    };
    let law = match &cfg.law {
        Some(spec) => match LawChoice::resolve(d, spec) {
            Ok(l) => Some(l),
            Err(e) => {
                errs.push(format!("law: {e}"));
                None
            }
        },
        None => None,
    };
    if let Some(LawSpec::GaussianLinear { outcome, predictors }) = &cfg.law {
        if let Err(e) = d.schema().index_of(outcome) {
            errs.push(format!("law.outcome: {e}"));
        }
        if let Err(e) = choicemiss::Design::parse(d.schema(), predictors) {
            errs.push(format!("law.predictors: {e}"));
        }
    }
    if let Some(LawSpec::DiscreteLoglinear { terms }) = &cfg.law {
        if !d.schema().is_discrete() {
            errs.push("law: discrete_loglinear requires every variable to be binary or categorical".into());
        } else if !terms.is_empty() {
            if let Err(e) = choicemiss::Design::parse(d.schema(), terms) {
                errs.push(format!("law.terms: {e}"));
            }
        }
    }
    for &m in &cfg.methods {
        if m.needs_law() && cfg.law.is_none() {
            errs.push(format!("complete-case law required for {m}"));
        }
        if m == Method::Mle && !d.schema().is_discrete() {
            errs.push("methods: mle requires an all-categorical schema".into());
        }
        if matches!(m, Method::Dr | Method::Mr | Method::Mle) && cfg.odds.errors != "logit" {
            errs.push(format!("odds.errors: {m} requires logit errors"));
        }
    }
    if matches!(cfg.variance, VarianceMode::Bootstrap | VarianceMode::Both) && cfg.boot_reps < 50 {
        errs.push(format!("boot_reps: at least 50 bootstrap replicates required, got {}", cfg.boot_reps));
    }
    if let Some(s) = &cfg.sensitivity {
        validate_sensitivity(d, &s.tilts, &s.grid, &mut errs);
    }

    let mut pipelines = Vec::new();
    if let (Some(est), Some(odds), Some(nr)) = (&estimand, &odds, &nonresponse) {
        for &m in &cfg.methods {
            let law_m = if m.needs_law() || m == Method::Mle { law.clone() } else { None };
            match Pipeline::new(m, est.clone(), odds.clone(), nr.clone(), law_m) {
                Ok(p) => pipelines.push(p),
                Err(e) => {
                    let msg = format!("methods: {e}");
                    if !errs.iter().any(|x| msg.ends_with(x.as_str()) || x.ends_with(&e.to_string())) {
                        errs.push(msg);
                    }
                }
            }
        }
    }
    if errs.is_empty() {
        Ok(Resolved {
            dataset: d.clone(),
            estimand: estimand.expect("no errors"),
            pipelines,
        })
    } else {
        Err(errs)
    }
}

fn validate_sensitivity(d: &PatternedDataset, tilts: &[String], grid: &str, errs: &mut Vec<String>) {
    if tilts.is_empty() {
        errs.push("sensitivity.tilts: at least one tilt is required".into());
    }
    for t in tilts {
        if let Err(e) = parse_tilt(d, t) {
            errs.push(format!("sensitivity.tilts: {e}"));
        }
    }
    match parse_grid(grid) {
        Ok(g) if !g.contains(&0.0) => errs.push("sensitivity.grid: the grid must contain 0".into()),
        Ok(_) => {}
        Err(e) => errs.push(format!("sensitivity.grid: {e}")),
    }
}

fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| user(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| user(format!("config {}: {e}", path.display())))?;
    if cfg.input.is_relative() {
        if let Some(dir) = path.parent() {
            cfg.input = dir.join(&cfg.input);
        }
    }
    Ok(cfg)
}

fn load_dataset(input: &Path, schema: Option<&VariableSchema>, na: &str) -> CliResult<(PatternedDataset, VariableSchema)> {
    let schema = match schema {
        Some(s) => s.clone(),
        None => infer_schema(input, na)?,
    };
    let d = ingest_csv(input, &schema, na)?;
    Ok((d, schema))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Report envelope: library version, the resolved configuration and its hash.
#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    config: &'a C,
    results: R,
}

fn write_report<C: Serialize, R: Serialize>(command: &str, config: &C, results: R, out: Option<&Path>) -> CliResult<String> {
    let config_json = serde_json::to_vec(config).map_err(|e| user(e.to_string()))?;
    let env = Envelope {
        version: VERSION,
        command,
        config_sha256: sha256_hex(&config_json),
        config,
        results,
    };
    let json = serde_json::to_string_pretty(&env).map_err(|e| user(e.to_string()))?;
    if let Some(path) = out {
        fs::write(path, &json).map_err(|e| user(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(json)
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "-".into()
    }
}

fn cmd_patterns(a: &PatternsArgs) -> CliResult<String> {
    let schema = match &a.schema {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| user(format!("cannot read schema {}: {e}", p.display())))?;
            Some(serde_json::from_str::<VariableSchema>(&text).map_err(|e| user(format!("schema: {e}")))?)
        }
        None => None,
    };
    let (d, schema) = load_dataset(&a.input, schema.as_ref(), &a.na_token)?;
    let rows = tabulate_patterns(&d);
    let mut s = String::new();
    let _ = write!(s, "{:<9}", "pattern");
    for v in schema.variables() {
        let _ = write!(s, "{:>12}", v.name);
    }
    let _ = writeln!(s, "{:>9}{:>9}", "count", "percent");
    for r in &rows {
        let _ = write!(s, "{:<9}", r.id);
        for c in r.mask.chars() {
            let _ = write!(s, "{c:>12}");
        }
        let _ = writeln!(s, "{:>9}{:>8.1}%", r.count, r.percent);
    }
    #[derive(Serialize)]
    struct Cfg<'a> {
        input: &'a Path,
        na_token: &'a str,
        schema: &'a VariableSchema,
    }
    let cfg = Cfg {
        input: &a.input,
        na_token: &a.na_token,
        schema: &schema,
    };
    write_report("patterns", &cfg, &rows, a.out.as_deref())?;
    Ok(s)
}

fn join_violations(v: Vec<String>) -> CliError {
    user(format!("invalid configuration:\n  {}", v.join("\n  ")))
}

fn cmd_estimate(a: &EstimateArgs) -> CliResult<String> {
    let mut cfg = read_config(&a.config)?;
    if !a.methods.is_empty() {
        cfg.methods = a.methods.clone();
    }
    if let Some(e) = &a.estimand {
        cfg.estimand = e.clone();
    }
    if let Some(v) = a.variance {
        cfg.variance = v;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (d, schema) = load_dataset(&cfg.input, cfg.schema.as_ref(), &cfg.na_token)?;
    cfg.schema = Some(schema);
    let resolved = validate_config(&cfg, &d).map_err(join_violations)?;
    let mut reports = Vec::new();
    for p in &resolved.pipelines {
        reports.push(p.run(&resolved.dataset, cfg.variance, cfg.boot_reps, cfg.seed)?);
    }
    let mut s = String::new();
    let _ = writeln!(s, "estimand {} (n = {})", resolved.estimand.label(), d.n());
    let _ = writeln!(
        s,
        "{:<7}{:<22}{:>11}{:>11}{:>11}{:>11}",
        "method", "coefficient", "estimate", "se", "ci_low", "ci_high"
    );
    for r in &reports {
        for (j, name) in r.names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<7}{:<22}{:>11}{:>11}{:>11}{:>11}",
                r.method,
                name,
                fmt_num(r.beta_hat[j]),
                fmt_num(r.se[j]),
                fmt_num(r.ci[j][0]),
                fmt_num(r.ci[j][1])
            );
        }
    }
    write_report("estimate", &cfg, &reports, a.out.as_deref())?;
    Ok(s)
}

fn cmd_sensitivity(a: &SensitivityArgs) -> CliResult<String> {
    let mut cfg = read_config(&a.config)?;
    if !a.methods.is_empty() {
        cfg.methods = a.methods.clone();
    }
    let mut sens = cfg.sensitivity.clone().unwrap_or(SensitivityConfig {
        tilts: Vec::new(),
        grid: "0".into(),
    });
    if !a.tilts.is_empty() {
        sens.tilts = a.tilts.clone();
    }
    if let Some(g) = &a.grid {
        sens.grid = g.clone();
    }
    cfg.sensitivity = Some(sens.clone());
    let (d, schema) = load_dataset(&cfg.input, cfg.schema.as_ref(), &cfg.na_token)?;
    cfg.schema = Some(schema);
    let mut errs = match validate_config(&cfg, &d) {
        Ok(_) => Vec::new(),
        Err(e) => e,
    };
    if let Some(m) = cfg.methods.iter().find(|m| !matches!(m, Method::Ipw | Method::Pm | Method::Dr)) {
        errs.push(format!("methods: sensitivity analysis supports ipw, pm and dr, not {m}"));
    }
    if cfg.odds.errors != "logit" {
        errs.push("odds.errors: sensitivity analysis requires logit errors".into());
    }
    if !errs.is_empty() {
        return Err(join_violations(errs));
    }
    let est = EstimandSpec::parse(d.schema(), &cfg.estimand)?;
    let odds = designs_for(&d, cfg.odds.default, &cfg.odds.patterns)?;
    let law = match &cfg.law {
        Some(spec) if cfg.methods.iter().any(Method::needs_law) => Some(fit_law(&d, spec)?),
        _ => None,
    };
    let features = sens
        .tilts
        .iter()
        .map(|t| parse_tilt(&d, t))
        .collect::<choicemiss::Result<Vec<_>>>()?;
    let spec = SelectionBiasSpec {
        features,
        grid: parse_grid(&sens.grid)?,
    };
    let curve = sweep(&d, &cfg.methods, &spec, &odds, law.as_ref(), &est)?;
    let mut s = String::new();
    let _ = writeln!(s, "estimand {} (n = {})", est.label(), d.n());
    let _ = writeln!(s, "{:>8}{:<3}{:<7}{:<22}{:>11}{:>11}", "phi", "", "method", "coefficient", "estimate", "se");
    for p in &curve.points {
        for r in &p.reports {
            for (j, name) in r.names.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{:>8.3}{:<3}{:<7}{:<22}{:>11}{:>11}",
                    p.phi,
                    "",
                    r.method,
                    name,
                    fmt_num(r.beta_hat[j]),
                    fmt_num(r.se[j])
                );
            }
        }
        for f in &p.failures {
            let _ = writeln!(s, "{:>8.3}{:<3}{:<7}failed: {}", p.phi, "", f.method, f.error);
        }
    }
    write_report("sensitivity", &cfg, &curve, a.out.as_deref())?;
    Ok(s)
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<String> {
    let scenarios = a
        .scenario
        .iter()
        .map(|s| s.parse::<Scenario>())
        .collect::<choicemiss::Result<Vec<_>>>()?;
    let configs: Vec<SimConfig> = scenarios
        .iter()
        .map(|&scenario| SimConfig {
            n: a.n,
            replicates: a.reps,
            scenario,
            seed: a.seed,
            methods: a.methods.clone(),
            bootstrap: (a.boot_b > 0).then_some(SimBootstrap {
                b: a.boot_b,
                reps: a.boot_reps,
            }),
        })
        .collect();
    let mut results = Vec::new();
    for c in &configs {
        results.push(run_monte_carlo(c)?);
    }
    let s = render_tables(&results);
    write_report("simulate", &configs, &results, a.out.as_deref())?;
    Ok(s)
}

/// Runs one parsed command, returning the text table for stdout.
pub fn execute(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Patterns(a) => cmd_patterns(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Sensitivity(a) => cmd_sensitivity(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let started = std::time::Instant::now();
    let outcome = match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(user(format!("--threads: {e}"))),
        },
        None => execute(&cli),
    };
    match outcome {
        Ok(table) => {
            print!("{table}");
            eprintln!("finished in {:.2?}", started.elapsed());
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
