//! Experiment plan files: strict JSON, unknown keys rejected, every value
//! range-checked with a path-qualified message.
//!
//! Defaults: learning rate 0.005, momentum 0.9, weight decay 1e-5, buffer
//! capacity 4096, pseudo-label lambda 0.99, TTA epsilon 0.001,
//! validation fraction 0.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::IwmsMode;
use crate::methods::{BatchComponent, MethodSpec, MethodVariant, DEFAULT_PL_LAMBDA, DEFAULT_TTA_EPSILON};
use crate::model::ModelConfig;
use crate::stream::{GeneratorSpec, StreamConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {at}: {message}")]
    Parse {
        path: PathBuf,
        /// JSON path of the offending key.
        at: String,
        message: String,
    },
    #[error("config {path}: {field}: {message}")]
    Invalid {
        path: PathBuf,
        field: String,
        message: String,
    },
}

/// Stream section of a plan; delay and seed are injected per run from the
/// sweep lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanStream {
    pub n: usize,
    pub horizon: u64,
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub validation_fraction: f64,
}

/// Method section of a plan; the budget is injected per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanMethod {
    pub variant: PlanVariant,
    #[serde(default)]
    pub composition: Option<Vec<BatchComponent>>,
    #[serde(default)]
    pub mode: Option<IwmsMode>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanVariant {
    Naive,
    Iwms,
    PseudoLabel,
    Tta,
}

impl PlanMethod {
    /// Materialize a [`MethodSpec`] for one budget value.
    pub fn resolve(&self, budget: u32) -> MethodSpec {
        let variant = match self.variant {
            PlanVariant::Naive => MethodVariant::Naive,
            PlanVariant::Iwms => MethodVariant::Iwms,
            PlanVariant::PseudoLabel => MethodVariant::PseudoLabel {
                lambda: self.lambda.unwrap_or(DEFAULT_PL_LAMBDA),
            },
            PlanVariant::Tta => MethodVariant::Tta {
                epsilon: self.epsilon.unwrap_or(DEFAULT_TTA_EPSILON),
            },
        };
        let mut spec = MethodSpec::new(variant, budget);
        if let Some(composition) = &self.composition {
            spec = spec.with_composition(composition.clone());
        }
        if let Some(mode) = self.mode {
            spec = spec.with_mode(mode);
        }
        spec
    }
}

fn default_buffer_capacity() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    stream: PlanStream,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default = "default_buffer_capacity")]
    buffer_capacity: usize,
    methods: Vec<PlanMethod>,
    delays: Vec<u64>,
    budgets: Vec<u32>,
    seeds: Vec<u64>,
    output_dir: PathBuf,
}

/// A validated plan: the cross product of (method, delay, budget, seed)
/// defines the run set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub stream: PlanStream,
    pub model: ModelConfig,
    pub buffer_capacity: usize,
    pub methods: Vec<PlanMethod>,
    pub delays: Vec<u64>,
    pub budgets: Vec<u32>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentPlan {
    /// Stream config for one run of the sweep.
    pub fn stream_config(&self, delay: u64, seed: u64) -> StreamConfig {
        StreamConfig {
            n: self.stream.n,
            delay,
            horizon: self.stream.horizon,
            generator: self.stream.generator.clone(),
            seed,
            validation_fraction: self.stream.validation_fraction,
        }
    }
}

/// Parse and validate a plan file.
pub fn parse_config(path: &Path) -> Result<ExperimentPlan, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let file: PlanFile =
        serde_path_to_error::deserialize(&mut de).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            at: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    validate(path, file)
}

fn validate(path: &Path, file: PlanFile) -> Result<ExperimentPlan, ConfigError> {
    let invalid = |field: &str, message: String| ConfigError::Invalid {
        path: path.to_path_buf(),
        field: field.to_string(),
        message,
    };
    if file.stream.n < 1 {
        return Err(invalid("stream.n", "must be >= 1".to_string()));
    }
    if file.stream.horizon < 1 {
        return Err(invalid("stream.horizon", "must be >= 1".to_string()));
    }
    if !(0.0..1.0).contains(&file.stream.validation_fraction) {
        return Err(invalid(
            "stream.validation_fraction",
            format!("must be in [0, 1), got {}", file.stream.validation_fraction),
        ));
    }
    if file.model.learning_rate.is_nan() || file.model.learning_rate <= 0.0 {
        return Err(invalid(
            "model.learning_rate",
            format!("must be > 0, got {}", file.model.learning_rate),
        ));
    }
    if !(0.0..1.0).contains(&file.model.momentum) {
        return Err(invalid(
            "model.momentum",
            format!("must be in [0, 1), got {}", file.model.momentum),
        ));
    }
    if file.model.weight_decay.is_nan() || file.model.weight_decay < 0.0 {
        return Err(invalid(
            "model.weight_decay",
            format!("must be >= 0, got {}", file.model.weight_decay),
        ));
    }
    if file.buffer_capacity < 1 {
        return Err(invalid("buffer_capacity", "must be >= 1".to_string()));
    }
    if file.methods.is_empty() {
        return Err(invalid("methods", "must list at least one method".to_string()));
    }
    for (i, m) in file.methods.iter().enumerate() {
        let field = |sub: &str| format!("methods[{i}].{sub}");
        match m.variant {
            PlanVariant::PseudoLabel => {
                if let Some(lambda) = m.lambda {
                    if !(0.0..=1.0).contains(&lambda) {
                        return Err(invalid(
                            &field("lambda"),
                            format!("must be in [0, 1], got {lambda}"),
                        ));
                    }
                }
                if m.epsilon.is_some() {
                    return Err(invalid(
                        &field("epsilon"),
                        "only valid for the tta variant".to_string(),
                    ));
                }
            }
            PlanVariant::Tta => {
                if let Some(epsilon) = m.epsilon {
                    if epsilon.is_nan() || epsilon < 0.0 {
                        return Err(invalid(
                            &field("epsilon"),
                            format!("must be >= 0, got {epsilon}"),
                        ));
                    }
                }
                if m.lambda.is_some() {
                    return Err(invalid(
                        &field("lambda"),
                        "only valid for the pseudo_label variant".to_string(),
                    ));
                }
            }
            _ => {
                if m.lambda.is_some() {
                    return Err(invalid(
                        &field("lambda"),
                        "only valid for the pseudo_label variant".to_string(),
                    ));
                }
                if m.epsilon.is_some() {
                    return Err(invalid(
                        &field("epsilon"),
                        "only valid for the tta variant".to_string(),
                    ));
                }
            }
        }
        if let Some(composition) = &m.composition {
            if composition.is_empty() {
                return Err(invalid(&field("composition"), "must not be empty".to_string()));
            }
        }
    }
    if file.delays.is_empty() {
        return Err(invalid("delays", "must list at least one delay".to_string()));
    }
    if file.budgets.is_empty() {
        return Err(invalid("budgets", "must list at least one budget".to_string()));
    }
    if let Some(c) = file.budgets.iter().find(|&&c| c < 1) {
        return Err(invalid("budgets", format!("budgets must be >= 1, got {c}")));
    }
    if file.seeds.is_empty() {
        return Err(invalid("seeds", "must list at least one seed".to_string()));
    }

    Ok(ExperimentPlan {
        stream: file.stream,
        model: file.model,
        buffer_capacity: file.buffer_capacity,
        methods: file.methods,
        delays: file.delays,
        budgets: file.budgets,
        seeds: file.seeds,
        output_dir: file.output_dir,
    })
}
