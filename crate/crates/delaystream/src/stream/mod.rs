//! The delayed-label stream protocol.
//!
//! At every step `t` the stream reveals one unlabeled batch; the true labels
//! of that batch arrive `d` steps later as a [`DelayedLabelBatch`]. Consumers
//! never see a label any other way — the evaluation harness scores
//! predictions through a crate-private accessor, and every label delivery is
//! logged so causality can be audited after a run.

mod generators;
mod ingest;

pub use generators::{
    gen_abrupt_shift, gen_label_burst, gen_rotating_gaussians, AbruptShift, LabelBurst,
    RawSample, RotatingGaussians,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::sub_seed;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid stream config: {0}")]
    InvalidConfig(String),
    #[error("cannot read stream file {path}: {source}")]
    FileRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed stream file {path}: {reason}")]
    FileFormat { path: PathBuf, reason: String },
    #[error("stream needs {needed} samples (horizon x n) but only {available} remain after the validation split")]
    InsufficientRows { available: usize, needed: usize },
}

/// One unlabeled observation. Its true label is withheld by the stream and
/// only reaches consumers through the matching [`DelayedLabelBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Unique within a run.
    pub id: u64,
    /// Step at which the stream revealed this sample.
    pub origin_step: u64,
    pub features: Vec<f64>,
}

/// The batch of exactly `n` samples revealed at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub step: u64,
    pub samples: Vec<Sample>,
}

/// Labels for the batch revealed at `origin_step`, delivered `d` steps later.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedLabelBatch {
    pub origin_step: u64,
    /// `(sample_id, label)` in reveal order.
    pub pairs: Vec<(u64, usize)>,
}

/// A withheld labeled sample, used only for backward-transfer evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    /// Position in raw generation order; the validation set is sorted by it.
    pub origin_index: u64,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Synthetic drift generators and file replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum GeneratorSpec {
    RotatingGaussians(RotatingGaussians),
    AbruptShift(AbruptShift),
    LabelBurst(LabelBurst),
    File { path: PathBuf },
}

impl GeneratorSpec {
    fn validate(&self, horizon: u64) -> Result<(), StreamError> {
        let invalid = |msg: String| Err(StreamError::InvalidConfig(msg));
        let check_mixture = |k: usize, dim: usize, noise: f64, radius: f64| {
            if k < 2 {
                return invalid(format!("num_classes must be >= 2, got {k}"));
            }
            if dim < 2 {
                return invalid(format!("dim must be >= 2, got {dim}"));
            }
            if noise.is_nan() || noise < 0.0 {
                return invalid(format!("noise must be >= 0, got {noise}"));
            }
            if radius.is_nan() || radius <= 0.0 {
                return invalid(format!("radius must be > 0, got {radius}"));
            }
            Ok(())
        };
        match self {
            GeneratorSpec::RotatingGaussians(s) => {
                check_mixture(s.num_classes, s.dim, s.noise, s.radius)
            }
            GeneratorSpec::AbruptShift(s) => {
                check_mixture(s.num_classes, s.dim, s.noise, s.radius)?;
                if s.shift_step < 1 || s.shift_step > horizon {
                    return invalid(format!(
                        "shift_step {} outside horizon 1..={horizon}",
                        s.shift_step
                    ));
                }
                Ok(())
            }
            GeneratorSpec::LabelBurst(s) => {
                check_mixture(s.num_classes, s.dim, s.noise, s.radius)?;
                if s.burst_len < 1 {
                    return invalid("burst_len must be >= 1".to_string());
                }
                Ok(())
            }
            GeneratorSpec::File { .. } => Ok(()),
        }
    }
}

/// Full configuration of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Batch size.
    pub n: usize,
    /// Label delay in steps.
    pub delay: u64,
    /// Total steps.
    pub horizon: u64,
    pub generator: GeneratorSpec,
    pub seed: u64,
    /// Fraction of generated samples withheld per class, in `[0, 1)`.
    pub validation_fraction: f64,
}

impl StreamConfig {
    fn validate(&self) -> Result<(), StreamError> {
        if self.n < 1 {
            return Err(StreamError::InvalidConfig("n must be >= 1".to_string()));
        }
        if self.horizon < 1 {
            return Err(StreamError::InvalidConfig("horizon must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(StreamError::InvalidConfig(format!(
                "validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        self.generator.validate(self.horizon)
    }
}

/// An opened stream: all batches, hidden labels, and the validation split,
/// generated once so replays are byte-identical.
#[derive(Debug, Clone)]
pub struct StreamHandle {
    config: StreamConfig,
    dim: usize,
    num_classes: usize,
    batches: Vec<StreamBatch>,
    /// Hidden truth, aligned with `batches`.
    truth: Vec<Vec<usize>>,
    validation: Vec<LabeledSample>,
    /// `(delivered_at, origin_step)` for every delayed label delivery.
    delivery_log: Vec<(u64, u64)>,
    /// Steps whose truth was revealed to the evaluator.
    eval_log: Vec<u64>,
}

/// Open a stream. Yields, per step `t` in `1..=horizon`, one [`StreamBatch`]
/// and (once `t > d`) the [`DelayedLabelBatch`] for origin step `t - d`.
pub fn open_stream(config: StreamConfig) -> Result<StreamHandle, StreamError> {
    StreamHandle::open(config)
}

impl StreamHandle {
    pub fn open(config: StreamConfig) -> Result<Self, StreamError> {
        config.validate()?;
        let (raw, dim, num_classes) = generate_raw(&config)?;
        let needed = config.horizon as usize * config.n;
        let (stream_idx, validation_idx) =
            split_validation(&raw, num_classes, config.validation_fraction);
        if stream_idx.len() < needed {
            return Err(StreamError::InsufficientRows {
                available: stream_idx.len(),
                needed,
            });
        }

        let mut batches = Vec::with_capacity(config.horizon as usize);
        let mut truth = Vec::with_capacity(config.horizon as usize);
        for t in 1..=config.horizon {
            let offset = (t - 1) as usize * config.n;
            let ids = &stream_idx[offset..offset + config.n];
            batches.push(StreamBatch {
                step: t,
                samples: ids
                    .iter()
                    .map(|&i| Sample {
                        id: i as u64,
                        origin_step: t,
                        features: raw[i].features.clone(),
                    })
                    .collect(),
            });
            truth.push(ids.iter().map(|&i| raw[i].label).collect());
        }
        let validation = validation_idx
            .into_iter()
            .map(|i| LabeledSample {
                id: i as u64,
                origin_index: i as u64,
                features: raw[i].features.clone(),
                label: raw[i].label,
            })
            .collect();

        Ok(StreamHandle {
            config,
            dim,
            num_classes,
            batches,
            truth,
            validation,
            delivery_log: Vec::new(),
            eval_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn delay(&self) -> u64 {
        self.config.delay
    }

    pub fn horizon(&self) -> u64 {
        self.config.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of classes: declared by the generator, or `max label + 1` for
    /// file streams.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The unlabeled batch revealed at `step` (1-based).
    pub fn batch(&self, step: u64) -> &StreamBatch {
        assert!(
            step >= 1 && step <= self.config.horizon,
            "step {step} outside 1..={}",
            self.config.horizon
        );
        &self.batches[(step - 1) as usize]
    }

    /// Labels delivered at `step`: the batch of origin `step - d`, or `None`
    /// while `step <= d`. Every delivery is logged.
    pub fn delayed_labels(&mut self, step: u64) -> Option<DelayedLabelBatch> {
        if step < 1 || step > self.config.horizon {
            return None;
        }
        let origin = step.checked_sub(self.config.delay)?;
        if origin < 1 {
            return None;
        }
        self.delivery_log.push((step, origin));
        let batch = &self.batches[(origin - 1) as usize];
        let labels = &self.truth[(origin - 1) as usize];
        Some(DelayedLabelBatch {
            origin_step: origin,
            pairs: batch
                .samples
                .iter()
                .zip(labels)
                .map(|(s, &y)| (s.id, y))
                .collect(),
        })
    }

    /// The withheld, time-ordered validation set.
    pub fn validation_set(&self) -> &[LabeledSample] {
        &self.validation
    }

    /// Audit trail of `(delivered_at, origin_step)` label deliveries.
    pub fn delivery_log(&self) -> &[(u64, u64)] {
        &self.delivery_log
    }

    /// Privileged truth accessor for the evaluation harness only (Step 4 of
    /// the per-step protocol). Logged; never available outside the crate.
    pub(crate) fn eval_labels(&mut self, step: u64) -> Vec<usize> {
        assert!(
            step >= 1 && step <= self.config.horizon,
            "step {step} outside 1..={}",
            self.config.horizon
        );
        self.eval_log.push(step);
        self.truth[(step - 1) as usize].clone()
    }

    #[cfg(test)]
    pub(crate) fn eval_log(&self) -> &[u64] {
        &self.eval_log
    }

    /// Materialize the stream in the ingestion CSV format. Replaying the file
    /// with the `file` generator reproduces these exact batches.
    pub fn export_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let rows = self.batches.iter().zip(&self.truth).flat_map(|(b, ys)| {
            b.samples
                .iter()
                .zip(ys)
                .map(|(s, &y)| (b.step, y, s.features.clone()))
        });
        ingest::write_rows(&mut file, self.dim, rows)
    }
}

/// Turn a CSV path into a file-replay generator spec.
pub fn ingest_file(path: impl Into<PathBuf>) -> GeneratorSpec {
    GeneratorSpec::File { path: path.into() }
}

fn generate_raw(config: &StreamConfig) -> Result<(Vec<RawSample>, usize, usize), StreamError> {
    match &config.generator {
        GeneratorSpec::File { path } => ingest::read_rows(path),
        synthetic => {
            let stream_seed = sub_seed(config.seed, "stream");
            // Oversample so the stream still fills horizon*n batches after the
            // per-class withholding.
            let raw_steps = if config.validation_fraction == 0.0 {
                config.horizon
            } else {
                (config.horizon as f64 / (1.0 - config.validation_fraction)).ceil() as u64
            };
            let mut raw = Vec::with_capacity(raw_steps as usize * config.n);
            for t in 1..=raw_steps {
                let step_samples = match synthetic {
                    GeneratorSpec::RotatingGaussians(s) => {
                        gen_rotating_gaussians(s, stream_seed, t, config.n)
                    }
                    GeneratorSpec::AbruptShift(s) => gen_abrupt_shift(s, stream_seed, t, config.n),
                    GeneratorSpec::LabelBurst(s) => gen_label_burst(s, stream_seed, t, config.n),
                    GeneratorSpec::File { .. } => unreachable!(),
                };
                raw.extend(step_samples);
            }
            let (dim, num_classes) = match synthetic {
                GeneratorSpec::RotatingGaussians(s) => (s.dim, s.num_classes),
                GeneratorSpec::AbruptShift(s) => (s.dim, s.num_classes),
                GeneratorSpec::LabelBurst(s) => (s.dim, s.num_classes),
                GeneratorSpec::File { .. } => unreachable!(),
            };
            Ok((raw, dim, num_classes))
        }
    }
}

/// Withhold the last `fraction` of samples of each class, preserving time
/// order on both sides of the split.
fn split_validation(
    raw: &[RawSample],
    num_classes: usize,
    fraction: f64,
) -> (Vec<usize>, Vec<usize>) {
    if fraction == 0.0 {
        return ((0..raw.len()).collect(), Vec::new());
    }
    let mut counts = vec![0usize; num_classes];
    for s in raw {
        counts[s.label] += 1;
    }
    let keep: Vec<usize> = counts
        .iter()
        .map(|&c| c - (fraction * c as f64).floor() as usize)
        .collect();
    let mut seen = vec![0usize; num_classes];
    let mut stream_idx = Vec::with_capacity(raw.len());
    let mut validation_idx = Vec::new();
    for (i, s) in raw.iter().enumerate() {
        if seen[s.label] < keep[s.label] {
            stream_idx.push(i);
        } else {
            validation_idx.push(i);
        }
        seen[s.label] += 1;
    }
    (stream_idx, validation_idx)
}
