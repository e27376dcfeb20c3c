//! Argument and configuration handling. Every subcommand accepts a JSON
//! config file via `--config`; explicit command-line flags override file
//! values, and the fully resolved configuration can be echoed with
//! `--print-config`.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use cge_core::{CsvSchema, Error, Family, FitConfig, GroupRule, Init, Result};

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// JSON config file; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV (UTF-8, header row, RFC 4180 quoting).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Column mapping: inline JSON or a path to a JSON file, e.g.
    /// '{"response":"y","covariates":["x1"],"ways":["user","movie"]}'.
    #[arg(long)]
    pub schema: Option<String>,
    /// Outcome family: gaussian | logistic | poisson | ordered-probit.
    #[arg(long)]
    pub family: Option<String>,
    /// Groups per way: "auto" (floor of sqrt of the level count) or a comma
    /// list such as "8,10".
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative objective tolerance (also the drift threshold).
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of independent starts (best final objective wins).
    #[arg(long)]
    pub starts: Option<usize>,
    /// Initialization: quantile | random.
    #[arg(long)]
    pub init: Option<String>,
    /// Confidence level for the Wald intervals.
    #[arg(long)]
    pub level: Option<f64>,
    /// Output path for the model JSON (default model.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// json (default) or csv (also writes a flat coefficient table).
    #[arg(long)]
    pub format: Option<String>,
    /// Worker threads for replication-level parallelism (default: cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Number of ordered-probit categories (default: largest response seen).
    #[arg(long)]
    pub categories: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

/// File-config mirror of the fit flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFileConfig {
    pub input: Option<PathBuf>,
    pub schema: Option<serde_json::Value>,
    pub family: Option<String>,
    pub groups: Option<String>,
    pub lambda: Option<f64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub starts: Option<usize>,
    pub init: Option<String>,
    pub level: Option<f64>,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub threads: Option<usize>,
    pub categories: Option<usize>,
}

/// Fully resolved fit run, echoed by `--print-config`.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedFit {
    pub input: PathBuf,
    pub schema: CsvSchema,
    pub family: String,
    pub fit: FitConfig,
    pub level: f64,
    pub out: PathBuf,
    pub format: OutputFormat,
    pub threads: Option<usize>,
    pub categories: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

impl FitArgs {
    pub fn resolve(self) -> Result<ResolvedFit> {
        let file: FitFileConfig = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
            None => FitFileConfig::default(),
        };
        let input = self
            .input
            .or(file.input)
            .ok_or_else(|| Error::Config("--input is required".into()))?;
        let schema_text = match (self.schema, file.schema) {
            (Some(s), _) => s,
            (None, Some(v)) => v.to_string(),
            (None, None) => return Err(Error::Config("--schema is required".into())),
        };
        let schema = parse_schema(&schema_text)?;
        let family = self
            .family
            .or(file.family)
            .ok_or_else(|| Error::Config("--family is required".into()))?;
        parse_family_name(&family)?; // validate early
        let groups = match self.groups.or(file.groups) {
            None => GroupRule::Auto,
            Some(g) => parse_groups(&g)?,
        };
        let init = match self.init.or(file.init) {
            None => Init::Quantile,
            Some(s) => parse_init(&s)?,
        };
        let defaults = FitConfig::default();
        let fit = FitConfig {
            groups,
            lambda: self.lambda.or(file.lambda).unwrap_or(defaults.lambda),
            max_iter: self.max_iter.or(file.max_iter).unwrap_or(defaults.max_iter),
            tol_obj: self.tol.or(file.tol).unwrap_or(defaults.tol_obj),
            seed: self.seed.or(file.seed).unwrap_or(defaults.seed),
            init,
            n_starts: self.starts.or(file.starts).unwrap_or(defaults.n_starts),
            ..defaults
        };
        Ok(ResolvedFit {
            input,
            schema,
            family,
            fit,
            level: self.level.or(file.level).unwrap_or(0.95),
            out: self.out.or(file.out).unwrap_or_else(|| PathBuf::from("model.json")),
            format: parse_format(self.format.or(file.format).as_deref())?,
            threads: self.threads.or(file.threads),
            categories: self.categories.or(file.categories),
        })
    }
}

#[derive(Args, Debug, Clone)]
pub struct SmoothArgs {
    /// Fitted model JSON produced by `cge fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// The training CSV the model was fitted on.
    #[arg(long)]
    pub input: PathBuf,
    /// Output path for the smoothed-effects JSON (default smoothed.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    /// Fitted model JSON produced by `cge fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of rows to predict (same column names as the training schema;
    /// the response column is optional and, if present, adds metrics).
    #[arg(long)]
    pub rows: PathBuf,
    /// Smoothed-effects JSON from `cge smooth`; point effects if omitted.
    #[arg(long)]
    pub smoothed: Option<PathBuf>,
    /// Allow way levels unseen at training time (they contribute effect 0
    /// and flag the row); otherwise unknown levels are an error.
    #[arg(long)]
    pub allow_new_levels: bool,
    /// Output path (default predictions.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// csv (default) or json.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    /// two-way-logistic | three-way-poisson | ordered-two-way.
    #[arg(long)]
    pub design: String,
    /// Comma list of sample sizes, e.g. "5000,10000,20000".
    #[arg(long)]
    pub n: String,
    /// s1 | s2.
    #[arg(long, default_value = "s1")]
    pub scenario: String,
    /// Replications per sample size.
    #[arg(long)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Groups per way ("auto" or comma list).
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Output prefix; writes `<out>.json` and `<out>.csv` (default simresult).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub print_config: bool,
}

pub fn parse_schema(text: &str) -> Result<CsvSchema> {
    let trimmed = text.trim();
    let json = if trimmed.starts_with('{') {
        trimmed.to_string()
    } else {
        std::fs::read_to_string(trimmed)?
    };
    let schema: CsvSchema = serde_json::from_str(&json)?;
    Ok(schema)
}

pub fn parse_family_name(name: &str) -> Result<&'static str> {
    match name {
        "gaussian" => Ok("gaussian"),
        "logistic" => Ok("logistic"),
        "poisson" => Ok("poisson"),
        "ordered-probit" => Ok("ordered-probit"),
        other => Err(Error::Config(format!(
            "unknown family '{other}' (expected gaussian|logistic|poisson|ordered-probit)"
        ))),
    }
}

/// Family for loading; the ordered probit gets provisional thresholds that
/// `fit_ordered_null` replaces.
pub fn family_for_load(name: &str, categories: usize) -> Result<Family> {
    Ok(match parse_family_name(name)? {
        "gaussian" => Family::Gaussian,
        "logistic" => Family::BernoulliLogit,
        "poisson" => Family::PoissonLog,
        _ => Family::ordered_probit_default(categories)?,
    })
}

pub fn parse_groups(text: &str) -> Result<GroupRule> {
    if text.trim() == "auto" {
        return Ok(GroupRule::Auto);
    }
    let counts: std::result::Result<Vec<usize>, _> =
        text.split(',').map(|t| t.trim().parse::<usize>()).collect();
    match counts {
        Ok(c) if !c.is_empty() => Ok(GroupRule::Counts(c)),
        _ => Err(Error::Config(format!(
            "--groups expects \"auto\" or a comma list of positive integers, got '{text}'"
        ))),
    }
}

pub fn parse_init(text: &str) -> Result<Init> {
    match text {
        "quantile" => Ok(Init::Quantile),
        "random" => Ok(Init::Random),
        other => Err(Error::Config(format!(
            "unknown init '{other}' (expected quantile|random)"
        ))),
    }
}

pub fn parse_format(text: Option<&str>) -> Result<OutputFormat> {
    match text {
        None | Some("json") => Ok(OutputFormat::Json),
        Some("csv") => Ok(OutputFormat::Csv),
        Some(other) => Err(Error::Config(format!(
            "unknown format '{other}' (expected json|csv)"
        ))),
    }
}

/// Installs the global worker pool when `--threads` was given.
pub fn setup_threads(threads: Option<usize>) -> Result<()> {
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Largest integer response in a CSV column (ordered-probit category count).
pub fn scan_max_category(path: &Path, column: &str) -> Result<usize> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Load {
            location: path.display().to_string(),
            msg: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Load {
            location: "header".into(),
            msg: e.to_string(),
        })?
        .clone();
    let col = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::Load {
            location: "header".into(),
            msg: format!("missing column '{column}'"),
        })?;
    let mut max_cat = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Load {
            location: path.display().to_string(),
            msg: e.to_string(),
        })?;
        if let Some(field) = record.get(col) {
            if let Ok(v) = field.trim().parse::<usize>() {
                max_cat = max_cat.max(v);
            }
        }
    }
    if max_cat < 2 {
        return Err(Error::Config(
            "ordered probit needs at least two categories in the response".into(),
        ));
    }
    Ok(max_cat)
}
