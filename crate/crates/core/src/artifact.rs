//! The versioned model artifact written by `fit` and consumed by the
//! `smooth` and `predict` commands.
//!
//! Serialization is deterministic: struct field order is fixed, all
//! containers are ordered, and floats print in shortest round-trip form, so
//! identical fits produce byte-identical JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, Dataset};
use crate::error::{Error, Result};
use crate::estimator::{recover_intercept, FitConfig, FitWarnings, FittedModel, ModelParams};
use crate::family::Family;
use crate::inference::{InferenceResult, LevelRef};

pub const SCHEMA_VERSION: u32 = 1;

/// Everything needed to reuse a fit: parameters, level tables, inference
/// summaries, and the configuration echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub family: Family,
    /// Column mapping of the training CSV, when the model came from one.
    pub schema: Option<CsvSchema>,
    pub n_obs: usize,
    pub level_counts: Vec<usize>,
    pub group_counts: Vec<usize>,
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub psi: f64,
    pub se: Vec<f64>,
    pub confidence_level: f64,
    pub intervals: Vec<(f64, f64)>,
    /// How the covariance was computed. The Hessian-with-offsets approach is
    /// a large-sample approximation; it is labeled so downstream consumers
    /// do not mistake it for an exact finite-sample covariance.
    pub inference_method: String,
    /// Per way: group support values, sorted ascending.
    pub alpha: Vec<Vec<f64>>,
    /// Per way: 1-based group id of each level.
    pub assignments: Vec<Vec<usize>>,
    /// Per way: expanded per-level point effect (support at the assignment).
    pub level_effects: Vec<Vec<f64>>,
    /// Per way: original level labels in code order.
    pub level_labels: Vec<Vec<String>>,
    pub recovered_intercept: f64,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
    pub warnings: FitWarnings,
    /// Baseline no-effects coefficients for the ordered probit workflow.
    pub beta_null: Option<Vec<f64>>,
    pub fit_config: FitConfig,
}

impl ModelArtifact {
    pub fn build(
        model: &FittedModel,
        ds: &Dataset,
        inference: &InferenceResult,
        schema: Option<CsvSchema>,
        cfg: &FitConfig,
        beta_null: Option<Vec<f64>>,
    ) -> ModelArtifact {
        let level_effects = (0..ds.n_ways())
            .map(|k| {
                model.params.gamma[k]
                    .iter()
                    .map(|&g| model.params.alpha[k][g])
                    .collect()
            })
            .collect();
        ModelArtifact {
            schema_version: SCHEMA_VERSION,
            family: model.family.clone(),
            schema,
            n_obs: ds.n_obs(),
            level_counts: ds.level_counts().to_vec(),
            group_counts: model.group_counts.clone(),
            lambda: model.lambda,
            beta: model.params.beta.clone(),
            psi: model.params.psi,
            se: inference.se.clone(),
            confidence_level: inference.level,
            intervals: inference.intervals.clone(),
            inference_method:
                "wald, inverse negative Hessian with fitted effects as offsets (large-sample approximation)"
                    .into(),
            alpha: model.params.alpha.clone(),
            assignments: (0..ds.n_ways())
                .map(|k| model.params.gamma[k].iter().map(|&g| g + 1).collect())
                .collect(),
            level_effects,
            level_labels: (0..ds.n_ways())
                .map(|k| ds.level_labels(k).to_vec())
                .collect(),
            recovered_intercept: recover_intercept(&model.params, ds),
            objective_trace: model.objective_trace.clone(),
            converged: model.converged,
            sweeps: model.sweeps,
            warnings: model.warnings,
            beta_null,
            fit_config: cfg.clone(),
        }
    }

    /// Deterministic pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<ModelArtifact> {
        let art: ModelArtifact = serde_json::from_str(text)?;
        art.validate()?;
        Ok(art)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelArtifact> {
        let text = std::fs::read_to_string(path)?;
        ModelArtifact::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported artifact schema version {}",
                self.schema_version
            )));
        }
        self.family.validate()?;
        let k = self.level_counts.len();
        if self.alpha.len() != k
            || self.assignments.len() != k
            || self.level_labels.len() != k
            || self.group_counts.len() != k
        {
            return Err(Error::Config("artifact way tables inconsistent".into()));
        }
        for way in 0..k {
            if self.assignments[way].len() != self.level_counts[way] {
                return Err(Error::Config("artifact assignment length mismatch".into()));
            }
            if self
                .assignments[way]
                .iter()
                .any(|&g| g == 0 || g > self.alpha[way].len())
            {
                return Err(Error::Config("artifact assignment out of range".into()));
            }
        }
        Ok(())
    }

    /// Reconstructs the in-memory fitted model.
    pub fn to_model(&self) -> FittedModel {
        FittedModel {
            params: ModelParams {
                beta: self.beta.clone(),
                psi: self.psi,
                alpha: self.alpha.clone(),
                gamma: self
                    .assignments
                    .iter()
                    .map(|a| a.iter().map(|&g| g - 1).collect())
                    .collect(),
            },
            lambda: self.lambda,
            family: self.family.clone(),
            group_counts: self.group_counts.clone(),
            objective_trace: self.objective_trace.clone(),
            block_trace: Vec::new(),
            converged: self.converged,
            sweeps: self.sweeps,
            warnings: self.warnings,
        }
    }

    /// Resolves a way label against the training level table.
    pub fn level_ref(&self, way: usize, label: &str) -> LevelRef {
        match self.level_labels[way].iter().position(|l| l == label) {
            Some(code) => LevelRef::Code(code),
            None => LevelRef::Unknown(label.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fit, FitConfig};
    use crate::inference::infer;
    use crate::sim::{gen_two_way_logistic, Scenario};

    #[test]
    fn round_trips_and_stays_byte_identical() {
        let (ds, _) = gen_two_way_logistic(600, Scenario::S1, 2);
        let cfg = FitConfig { max_iter: 40, ..FitConfig::default() };
        let model = fit(&ds, &cfg).unwrap();
        let inference = infer(&ds, &model, 0.95).unwrap();
        let art = ModelArtifact::build(&model, &ds, &inference, None, &cfg, None);
        let json = art.to_json();
        let back = ModelArtifact::from_json(&json).unwrap();
        assert_eq!(back.to_json(), json);
        let rebuilt = back.to_model();
        assert_eq!(rebuilt.params, model.params);
    }

    #[test]
    fn rejects_unknown_schema_version() {
        let (ds, _) = gen_two_way_logistic(400, Scenario::S1, 2);
        let cfg = FitConfig { max_iter: 20, ..FitConfig::default() };
        let model = fit(&ds, &cfg).unwrap();
        let inference = infer(&ds, &model, 0.95).unwrap();
        let mut art = ModelArtifact::build(&model, &ds, &inference, None, &cfg, None);
        art.schema_version = 99;
        let json = art.to_json();
        assert!(ModelArtifact::from_json(&json).is_err());
    }
}
