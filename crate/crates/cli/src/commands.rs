//! Implementations of the four subcommands.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cge_core::artifact::ModelArtifact;
use cge_core::sim::{run_replications_with_progress, DesignKind, Scenario, SimDesign, SimResult};
use cge_core::{
    build_level_index, fit_ordered_null, infer, Dataset, Error, Family,
    FitConfig, LevelRef, PredictRows, Result, SmoothedEffects,
};

use crate::config::{
    self, FitArgs, OutputFormat, PredictArgs, ResolvedFit, SimulateArgs, SmoothArgs,
};

pub fn fit(args: FitArgs) -> Result<i32> {
    let print_config = args.print_config;
    let resolved = args.resolve()?;
    if print_config {
        println!("{}", serde_json::to_string_pretty(&resolved)?);
        return Ok(0);
    }
    config::setup_threads(resolved.threads)?;
    let (ds, beta_null) = load_for_fit(&resolved)?;
    let model = cge_core::fit(&ds, &resolved.fit).map_err(|e| match e {
        Error::RankDeficient { column } => Error::RankDeficientNamed {
            name: resolved
                .schema
                .covariates
                .get(column)
                .cloned()
                .unwrap_or_else(|| format!("{}", column + 1)),
        },
        other => other,
    })?;
    let inference = infer(&ds, &model, resolved.level)?;
    let artifact = ModelArtifact::build(
        &model,
        &ds,
        &inference,
        Some(resolved.schema.clone()),
        &resolved.fit,
        beta_null,
    );
    artifact.save(&resolved.out)?;
    print_fit_summary(&resolved, &ds, &artifact);
    if resolved.format == OutputFormat::Csv {
        let path = sibling(&resolved.out, "coefficients.csv");
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(out, "coefficient,estimate,se,lower,upper")?;
        for (j, name) in resolved.schema.covariates.iter().enumerate() {
            let (lo, hi) = artifact.intervals[j];
            writeln!(
                out,
                "{name},{},{},{lo},{hi}",
                artifact.beta[j], artifact.se[j]
            )?;
        }
        println!("coefficient table written to {}", path.display());
    }
    Ok(if model.converged { 0 } else { 2 })
}

fn load_for_fit(resolved: &ResolvedFit) -> Result<(Dataset, Option<Vec<f64>>)> {
    if config::parse_family_name(&resolved.family)? == "ordered-probit" {
        let categories = match resolved.categories {
            Some(k) => k,
            None => config::scan_max_category(&resolved.input, &resolved.schema.response)?,
        };
        let family = config::family_for_load(&resolved.family, categories)?;
        let ds = Dataset::load_csv(&resolved.input, &resolved.schema, family)?;
        // Thresholds come from the no-effects baseline and stay fixed in the
        // crossed-effects fit; the baseline coefficients ride along in the
        // artifact for comparison.
        let (thresholds, beta_null) = fit_ordered_null(&ds, categories)?;
        Ok((ds.with_thresholds(thresholds)?, Some(beta_null)))
    } else {
        let family = config::family_for_load(&resolved.family, 2)?;
        let ds = Dataset::load_csv(&resolved.input, &resolved.schema, family)?;
        Ok((ds, None))
    }
}

fn print_fit_summary(resolved: &ResolvedFit, ds: &Dataset, artifact: &ModelArtifact) {
    println!(
        "family {} | N={} ({} rejected) | ways {:?} | groups {:?} | lambda {}",
        artifact.family.name(),
        artifact.n_obs,
        ds.rows_rejected,
        artifact.level_counts,
        artifact.group_counts,
        artifact.lambda
    );
    println!(
        "{} after {} sweeps | objective {:.6}",
        if artifact.converged { "converged" } else { "hit the iteration cap" },
        artifact.sweeps,
        artifact.objective_trace.last().copied().unwrap_or(f64::NAN)
    );
    println!("recovered intercept {:.6} | psi {:.6}", artifact.recovered_intercept, artifact.psi);
    if let Family::OrderedProbit { thresholds } = &artifact.family {
        let c: Vec<String> = thresholds.iter().map(|c| format!("{c:.4}")).collect();
        println!("thresholds [{}]", c.join(", "));
    }
    for (j, name) in resolved.schema.covariates.iter().enumerate() {
        let (lo, hi) = artifact.intervals[j];
        println!(
            "  {name}: {:+.6} (se {:.6}, {:.0}% CI [{:+.6}, {:+.6}])",
            artifact.beta[j],
            artifact.se[j],
            100.0 * artifact.confidence_level,
            lo,
            hi
        );
    }
    let w = &artifact.warnings;
    if w.underflow_floors + w.empty_groups + w.psi_floors > 0 {
        println!(
            "warnings: {} probability floors, {} empty groups, {} dispersion floors",
            w.underflow_floors, w.empty_groups, w.psi_floors
        );
    }
    println!("model written to {}", resolved.out.display());
}

/// Smoothed-effects artifact written by `cge smooth`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SmoothArtifact {
    pub schema_version: u32,
    pub beta: Vec<f64>,
    pub beta_smoothed: Vec<f64>,
    pub psi_smoothed: f64,
    /// Per way: `n_k x G_k` row-stochastic pseudo-posterior matrix.
    pub pi: Vec<Vec<Vec<f64>>>,
    /// Per way: smoothed effect per level.
    pub effects: Vec<Vec<f64>>,
}

pub fn smooth(args: SmoothArgs) -> Result<i32> {
    if args.print_config {
        println!(
            "{}",
            serde_json::json!({
                "model": args.model, "input": args.input,
                "out": args.out.clone().unwrap_or_else(|| PathBuf::from("smoothed.json")),
                "threads": args.threads,
            })
        );
        return Ok(0);
    }
    config::setup_threads(args.threads)?;
    let artifact = ModelArtifact::load(&args.model)?;
    let schema = artifact
        .schema
        .clone()
        .ok_or_else(|| Error::Config("model artifact carries no schema".into()))?;
    let ds = Dataset::load_csv(&args.input, &schema, artifact.family.clone())?;
    check_levels_match(&artifact, &ds)?;
    let model = artifact.to_model();
    let idx = build_level_index(&ds);
    let sm = cge_core::smooth(&model, &ds, &idx)?;
    let out = args.out.unwrap_or_else(|| PathBuf::from("smoothed.json"));
    let payload = SmoothArtifact {
        schema_version: 1,
        beta: artifact.beta.clone(),
        beta_smoothed: sm.beta_smoothed.clone(),
        psi_smoothed: sm.psi_smoothed,
        pi: sm.pi.clone(),
        effects: sm.effects.clone(),
    };
    std::fs::write(&out, serde_json::to_string_pretty(&payload)? + "\n")?;
    let drift = artifact
        .beta
        .iter()
        .zip(&sm.beta_smoothed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "smoothed {} ways | max |beta - beta_smoothed| = {drift:.3e} | written to {}",
        sm.pi.len(),
        out.display()
    );
    Ok(0)
}

fn check_levels_match(artifact: &ModelArtifact, ds: &Dataset) -> Result<()> {
    for way in 0..artifact.level_labels.len() {
        if ds.level_labels(way) != artifact.level_labels[way].as_slice() {
            return Err(Error::Config(format!(
                "input level table for way {} does not match the model artifact",
                way + 1
            )));
        }
    }
    Ok(())
}

pub fn predict(args: PredictArgs) -> Result<i32> {
    if args.print_config {
        println!(
            "{}",
            serde_json::json!({
                "model": args.model, "rows": args.rows, "smoothed": args.smoothed,
                "allow_new_levels": args.allow_new_levels,
                "out": args.out.clone().unwrap_or_else(|| PathBuf::from("predictions.csv")),
                "format": args.format.clone().unwrap_or_else(|| "csv".into()),
            })
        );
        return Ok(0);
    }
    let artifact = ModelArtifact::load(&args.model)?;
    let schema = artifact
        .schema
        .clone()
        .ok_or_else(|| Error::Config("model artifact carries no schema".into()))?;
    let model = artifact.to_model();
    let smoothed: Option<SmoothedEffects> = match &args.smoothed {
        Some(path) => {
            let payload: SmoothArtifact = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            Some(SmoothedEffects {
                pi: payload.pi,
                effects: payload.effects,
                beta_smoothed: payload.beta_smoothed,
                psi_smoothed: payload.psi_smoothed,
            })
        }
        None => None,
    };
    let (rows, observed, row_ids) = read_rows(&args.rows, &schema, &artifact)?;
    let preds = cge_core::predict(&model, smoothed.as_ref(), &rows, args.allow_new_levels)?;
    let out = args.out.unwrap_or_else(|| PathBuf::from("predictions.csv"));
    match config::parse_format(Some(args.format.as_deref().unwrap_or("csv")))? {
        OutputFormat::Csv => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(w, "row,mean,category,new_level")?;
            for (p, id) in preds.iter().zip(&row_ids) {
                let cat = p.category.map(|c| c.to_string()).unwrap_or_default();
                writeln!(w, "{id},{},{cat},{}", p.mean, p.new_level)?;
            }
        }
        OutputFormat::Json => {
            let items: Vec<serde_json::Value> = preds
                .iter()
                .zip(&row_ids)
                .map(|(p, id)| {
                    serde_json::json!({
                        "row": id, "mean": p.mean, "category": p.category,
                        "new_level": p.new_level,
                    })
                })
                .collect();
            std::fs::write(&out, serde_json::to_string_pretty(&items)? + "\n")?;
        }
    }
    println!("{} predictions written to {}", preds.len(), out.display());
    if let (Some(obs), Some(k)) = (&observed, model.family.n_categories()) {
        let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        let (mae, ac0, ac1) = cge_core::sim::ordered_metrics(&means, obs, k)?;
        println!(
            "{}",
            serde_json::json!({"mae": mae, "ac0": ac0, "ac1": ac1, "n": obs.len()})
        );
    }
    Ok(0)
}

type RowsAndObserved = (PredictRows, Option<Vec<f64>>, Vec<usize>);

/// Reads prediction rows; returns the rows, the observed responses when the
/// response column is present, and 1-based input row ids (rows with empty
/// used fields are skipped).
fn read_rows(path: &Path, schema: &cge_core::CsvSchema, artifact: &ModelArtifact) -> Result<RowsAndObserved> {
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
    let col = |name: &str| headers.iter().position(|h| h == name);
    let cov_cols: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| {
            col(c).ok_or_else(|| Error::Load {
                location: "header".into(),
                msg: format!("missing column '{c}'"),
            })
        })
        .collect::<Result<_>>()?;
    let way_cols: Vec<usize> = schema
        .ways
        .iter()
        .map(|c| {
            col(c).ok_or_else(|| Error::Load {
                location: "header".into(),
                msg: format!("missing column '{c}'"),
            })
        })
        .collect::<Result<_>>()?;
    let resp_col = col(&schema.response);
    let p = cov_cols.len();
    let k_ways = way_cols.len();
    let mut x = Vec::new();
    let mut ways: Vec<Vec<LevelRef>> = vec![Vec::new(); k_ways];
    let mut observed = Vec::new();
    let mut row_ids = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row_no = idx + 2;
        let record = record.map_err(|e| Error::Load {
            location: format!("row {row_no}"),
            msg: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        if cov_cols.iter().chain(way_cols.iter()).any(|&c| field(c).is_empty()) {
            continue;
        }
        for (j, &c) in cov_cols.iter().enumerate() {
            let v: f64 = field(c).parse().map_err(|_| Error::Load {
                location: format!("row {row_no}, column '{}'", schema.covariates[j]),
                msg: format!("unparsable value '{}'", field(c)),
            })?;
            x.push(v);
        }
        for (k, &c) in way_cols.iter().enumerate() {
            ways[k].push(artifact.level_ref(k, field(c)));
        }
        if let Some(rc) = resp_col {
            if let Ok(v) = field(rc).parse::<f64>() {
                observed.push(v);
            }
        }
        row_ids.push(row_no - 1); // 1-based data row
    }
    let n = row_ids.len();
    if x.len() != n * p {
        return Err(Error::Load {
            location: path.display().to_string(),
            msg: "inconsistent covariate rows".into(),
        });
    }
    let observed = (observed.len() == n).then_some(observed);
    Ok((PredictRows { n, x, ways }, observed, row_ids))
}

pub fn simulate(args: SimulateArgs) -> Result<i32> {
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&resolved_sim_json(&args)?)?);
        return Ok(0);
    }
    config::setup_threads(args.threads)?;
    let kind = parse_design(&args.design)?;
    let scenario = parse_scenario(&args.scenario)?;
    let sizes = parse_sizes(&args.n)?;
    let fit = sim_fit_config(&args)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("simresult"));
    let mut results: Vec<SimResult> = Vec::new();
    for &n_obs in &sizes {
        let design = SimDesign {
            kind,
            n_obs,
            scenario,
            replications: args.reps,
            seed: args.seed,
            fit: fit.clone(),
            level: args.level,
        };
        let reps = args.reps;
        let res = run_replications_with_progress(&design, |r, ok| {
            eprintln!(
                "N={n_obs}: replication {r}/{reps} {}",
                if ok { "done" } else { "failed" }
            );
        })?;
        println!(
            "N={n_obs}: mse_mean={:.6} cp_mean={:.4} intercept={:.4} failures={} ({:.2}s/fit)",
            res.mse_mean, res.cp_mean, res.intercept_mean, res.failures, res.runtime_mean_s
        );
        results.push(res);
    }
    let json_path = out.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&results)? + "\n")?;
    let csv_path = out.with_extension("csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(w, "n,mse_cge,cp_cge,intercept_mean,runtime_mean_s,failures")?;
    for r in &results {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.n_obs, r.mse_mean, r.cp_mean, r.intercept_mean, r.runtime_mean_s, r.failures
        )?;
    }
    drop(w);
    println!(
        "results written to {} and {}",
        json_path.display(),
        csv_path.display()
    );
    Ok(0)
}

fn resolved_sim_json(args: &SimulateArgs) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "design": args.design,
        "n": parse_sizes(&args.n)?,
        "scenario": args.scenario,
        "reps": args.reps,
        "seed": args.seed,
        "fit": sim_fit_config(args)?,
        "level": args.level,
        "out": args.out.clone().unwrap_or_else(|| PathBuf::from("simresult")),
        "threads": args.threads,
    }))
}

fn sim_fit_config(args: &SimulateArgs) -> Result<FitConfig> {
    let defaults = FitConfig::default();
    Ok(FitConfig {
        groups: match &args.groups {
            None => defaults.groups.clone(),
            Some(g) => config::parse_groups(g)?,
        },
        lambda: args.lambda.unwrap_or(defaults.lambda),
        max_iter: args.max_iter.unwrap_or(defaults.max_iter),
        tol_obj: args.tol.unwrap_or(defaults.tol_obj),
        seed: args.seed,
        n_starts: args.starts.unwrap_or(defaults.n_starts),
        ..defaults
    })
}

fn parse_design(text: &str) -> Result<DesignKind> {
    match text {
        "two-way-logistic" => Ok(DesignKind::TwoWayLogistic),
        "three-way-poisson" => Ok(DesignKind::ThreeWayPoisson),
        "ordered-two-way" => Ok(DesignKind::OrderedTwoWay),
        other => Err(Error::Config(format!(
            "unknown design '{other}' (expected two-way-logistic|three-way-poisson|ordered-two-way)"
        ))),
    }
}

fn parse_scenario(text: &str) -> Result<Scenario> {
    match text {
        "s1" => Ok(Scenario::S1),
        "s2" => Ok(Scenario::S2),
        other => Err(Error::Config(format!("unknown scenario '{other}' (expected s1|s2)"))),
    }
}

fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    let sizes: std::result::Result<Vec<usize>, _> =
        text.split(',').map(|t| t.trim().parse::<usize>()).collect();
    match sizes {
        Ok(s) if !s.is_empty() => Ok(s),
        _ => Err(Error::Config(format!(
            "--n expects a comma list of sample sizes, got '{text}'"
        ))),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    path.with_file_name(format!("{stem}.{suffix}"))
}
