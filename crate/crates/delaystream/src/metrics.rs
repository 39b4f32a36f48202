//! Online-accuracy accounting, delay-gap and recovery arithmetic, per-batch
//! accuracy traces, and backward transfer on the held-out validation set.
//!
//! Online accuracy is the cumulative prequential mean: the running fraction
//! of correct next-batch predictions, each scored before the model could
//! train on anything from that batch's step. All accuracies cross this API
//! as fractions in `[0, 1]`; rendering as percent is a display concern.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Classifier, ModelError};
use crate::stream::LabeledSample;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("step {got} is not after previous step {prev}")]
    NonMonotoneStep { prev: u64, got: u64 },
    #[error("batch total must be >= 1")]
    ZeroTotal,
    #[error("{name} = {value} is outside [0, 1]; accuracies cross this API as fractions")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("recovery is undefined when the accuracy gap is zero")]
    ZeroGap,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Identity of a run, echoed through traces and summaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEcho {
    pub delay: u64,
    pub budget: u32,
    pub method: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: u64,
    pub correct: u64,
    pub total: u64,
    /// Cumulative prequential accuracy up to and including step `t`.
    pub online_accuracy: f64,
}

/// Per-step budget usage, for auditing the accounting of each method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BudgetRecord {
    pub used: u32,
    pub supervised: u32,
    pub adaptation: u32,
}

/// The full record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub config: RunEcho,
    pub per_step: Vec<StepRecord>,
    /// Predicted labels per step, in batch order.
    pub predictions: Vec<Vec<usize>>,
    /// Budget usage per step, aligned with `per_step`.
    pub budget: Vec<BudgetRecord>,
    cum_correct: u64,
    cum_total: u64,
}

impl RunTrace {
    pub fn new(config: RunEcho) -> Self {
        RunTrace {
            config,
            per_step: Vec::new(),
            predictions: Vec::new(),
            budget: Vec::new(),
            cum_correct: 0,
            cum_total: 0,
        }
    }

    /// Fold one evaluated batch into the cumulative online accuracy.
    pub fn record(&mut self, t: u64, correct: u64, total: u64) -> Result<(), MetricsError> {
        if total == 0 {
            return Err(MetricsError::ZeroTotal);
        }
        if let Some(last) = self.per_step.last() {
            if t <= last.t {
                return Err(MetricsError::NonMonotoneStep { prev: last.t, got: t });
            }
        }
        self.cum_correct += correct;
        self.cum_total += total;
        self.per_step.push(StepRecord {
            t,
            correct,
            total,
            online_accuracy: self.cum_correct as f64 / self.cum_total as f64,
        });
        Ok(())
    }

    /// Online accuracy at the last recorded step (0 for an empty trace).
    pub fn final_online_accuracy(&self) -> f64 {
        self.per_step.last().map_or(0.0, |s| s.online_accuracy)
    }
}

/// Non-cumulative per-step accuracy, `(t, correct/total)`.
pub fn per_batch_accuracy_trace(trace: &RunTrace) -> Vec<(u64, f64)> {
    trace
        .per_step
        .iter()
        .map(|s| (s.t, s.correct as f64 / s.total as f64))
        .collect()
}

fn check_fraction(name: &'static str, value: f64) -> Result<(), MetricsError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(MetricsError::OutOfRange { name, value });
    }
    Ok(())
}

/// Accuracy gap caused by the delay: `G_d = acc_naive_d - acc_naive_0`.
/// Negative when the delay hurts.
pub fn compute_gap(acc_naive_d: f64, acc_naive_0: f64) -> Result<f64, MetricsError> {
    check_fraction("acc_naive_d", acc_naive_d)?;
    check_fraction("acc_naive_0", acc_naive_0)?;
    Ok(acc_naive_d - acc_naive_0)
}

/// Fraction of the gap a method closes:
/// `R_d = (acc_method_d - acc_naive_d) / |G_d|`. Undefined for a zero gap.
pub fn compute_recovery(
    acc_method_d: f64,
    acc_naive_d: f64,
    gap: f64,
) -> Result<f64, MetricsError> {
    check_fraction("acc_method_d", acc_method_d)?;
    check_fraction("acc_naive_d", acc_naive_d)?;
    if gap == 0.0 {
        return Err(MetricsError::ZeroGap);
    }
    Ok((acc_method_d - acc_naive_d) / gap.abs())
}

/// Top-1 accuracy of the final model over the whole time-ordered validation
/// set.
pub fn backward_transfer(
    classifier: &Classifier,
    validation: &[LabeledSample],
) -> Result<f64, MetricsError> {
    if validation.is_empty() {
        return Err(MetricsError::EmptyValidation);
    }
    let inputs: Vec<Vec<f64>> = validation.iter().map(|v| v.features.clone()).collect();
    let pred = classifier.predict(&inputs)?;
    let correct = pred
        .labels
        .iter()
        .zip(validation)
        .filter(|(&p, v)| p == v.label)
        .count();
    Ok(correct as f64 / validation.len() as f64)
}

/// Per-run summary persisted next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub d: u64,
    #[serde(rename = "C")]
    pub c: u32,
    pub method: String,
    pub seed: u64,
    pub final_online_acc: f64,
    pub backward_transfer: Option<f64>,
}

/// Trace export: `t,correct,total,online_acc,batch_acc`.
pub fn write_trace_csv<W: Write>(trace: &RunTrace, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "t,correct,total,online_acc,batch_acc")?;
    for s in &trace.per_step {
        let batch_acc = s.correct as f64 / s.total as f64;
        writeln!(
            w,
            "{},{},{},{},{}",
            s.t, s.correct, s.total, s.online_accuracy, batch_acc
        )?;
    }
    Ok(())
}

pub fn write_summary_json<W: Write>(summary: &RunSummary, w: &mut W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, summary)?;
    writeln!(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Classifier, Layer, Params};
    use crate::rng::component_rng;
    use rand::Rng;

    fn echo() -> RunEcho {
        RunEcho {
            delay: 0,
            budget: 1,
            method: "naive".to_string(),
            seed: 0,
        }
    }

    #[test]
    fn online_accuracy_trace_example() {
        let mut trace = RunTrace::new(echo());
        let corrects = [1, 0, 1, 1];
        for (i, &c) in corrects.iter().enumerate() {
            trace.record(i as u64 + 1, c, 1).unwrap();
        }
        let accs: Vec<f64> = trace.per_step.iter().map(|s| s.online_accuracy).collect();
        assert!((accs[0] - 1.0).abs() < 1e-15);
        assert!((accs[1] - 0.5).abs() < 1e-15);
        assert!((accs[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((accs[3] - 0.75).abs() < 1e-15);
        assert_eq!(trace.final_online_accuracy(), 0.75);
    }

    #[test]
    fn all_correct_stays_at_one() {
        let mut trace = RunTrace::new(echo());
        for t in 1..=50 {
            trace.record(t, 8, 8).unwrap();
        }
        assert!(trace.per_step.iter().all(|s| s.online_accuracy == 1.0));
    }

    #[test]
    fn non_monotone_step_is_rejected() {
        let mut trace = RunTrace::new(echo());
        trace.record(3, 1, 2).unwrap();
        assert!(matches!(
            trace.record(3, 1, 2),
            Err(MetricsError::NonMonotoneStep { prev: 3, got: 3 })
        ));
        assert!(trace.record(2, 1, 2).is_err());
        assert!(matches!(trace.record(4, 0, 0), Err(MetricsError::ZeroTotal)));
    }

    #[test]
    fn random_predictor_concentrates_at_half() {
        // Binomial concentration: 10^4 coin-flip predictions on a balanced
        // 2-class stream land within 0.02 of 0.5.
        let mut rng = component_rng(13, "metrics");
        let mut trace = RunTrace::new(echo());
        for t in 1..=10_000u64 {
            let truth: usize = rng.gen_range(0..2);
            let guess: usize = rng.gen_range(0..2);
            trace.record(t, u64::from(truth == guess), 1).unwrap();
        }
        assert!((trace.final_online_accuracy() - 0.5).abs() < 0.02);
    }

    #[test]
    fn online_accuracy_is_a_convex_combination_of_batch_accuracies() {
        let mut rng = component_rng(14, "metrics");
        let mut trace = RunTrace::new(echo());
        for t in 1..=200u64 {
            trace.record(t, rng.gen_range(0..=16), 16).unwrap();
        }
        let batch = per_batch_accuracy_trace(&trace);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, s) in trace.per_step.iter().enumerate() {
            lo = lo.min(batch[i].1);
            hi = hi.max(batch[i].1);
            assert!(
                s.online_accuracy >= lo - 1e-12 && s.online_accuracy <= hi + 1e-12,
                "online accuracy left the prefix envelope at t={}",
                s.t
            );
        }
    }

    #[test]
    fn per_batch_trace_is_not_cumulative() {
        let mut trace = RunTrace::new(echo());
        trace.record(1, 1, 1).unwrap();
        trace.record(2, 0, 1).unwrap();
        let batch = per_batch_accuracy_trace(&trace);
        assert_eq!(batch, vec![(1, 1.0), (2, 0.0)]);
        // Identical to online accuracy at t = 1.
        assert_eq!(batch[0].1, trace.per_step[0].online_accuracy);
    }

    #[test]
    fn gap_matches_reported_values() {
        // 11.7% at d=100 vs 20.2% at d=0 gives a -8.5 point gap.
        let g = compute_gap(0.117, 0.202).unwrap();
        assert!((g + 0.085).abs() < 1e-12);
        assert_eq!(compute_gap(0.3, 0.3).unwrap(), 0.0);
        // A -4.4 point drop for the smallest delay.
        let g10 = compute_gap(0.158, 0.202).unwrap();
        assert!((g10 + 0.044).abs() < 1e-12);
        assert!(compute_gap(1.2, 0.1).is_err());
    }

    #[test]
    fn recovery_reference_points() {
        // No improvement => 0.
        assert_eq!(compute_recovery(0.4, 0.4, -0.1).unwrap(), 0.0);
        // Closing the whole gap => 1.
        let r = compute_recovery(0.25, 0.2, -0.05).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        // Back-solved from a reported 33% recovery with G = -4.5 points.
        let r = compute_recovery(0.173, 0.158, -0.045).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 0.01);
        assert!(matches!(
            compute_recovery(0.3, 0.2, 0.0),
            Err(MetricsError::ZeroGap)
        ));
    }

    #[test]
    fn recovery_is_affine_in_method_accuracy() {
        let gap = -0.08f64;
        let naive = 0.5;
        let r0 = compute_recovery(0.5, naive, gap).unwrap();
        let slope = (compute_recovery(0.58, naive, gap).unwrap() - r0) / 0.08;
        assert!((slope - 1.0 / gap.abs()).abs() < 1e-9);
    }

    fn constant_classifier(dim: usize, classes: usize) -> Classifier {
        // Zero weights: always predicts class 0 via the argmax tie-break.
        Classifier {
            arch: Arch::Linear,
            input_dim: dim,
            num_classes: classes,
            params: Params {
                layers: vec![Layer {
                    rows: classes,
                    cols: dim,
                    w: vec![0.0; classes * dim],
                    b: vec![0.0; classes],
                }],
            },
        }
    }

    fn validation_balanced() -> Vec<LabeledSample> {
        (0..10)
            .map(|i| LabeledSample {
                id: i,
                origin_index: i,
                features: vec![if i % 2 == 0 { 1.0 } else { -1.0 }, 0.5],
                label: (i % 2) as usize,
            })
            .collect()
    }

    #[test]
    fn backward_transfer_reference_cases() {
        let val = validation_balanced();
        // Constant class-0 classifier on a balanced 2-class set: 0.5.
        let constant = constant_classifier(2, 2);
        let acc = backward_transfer(&constant, &val).unwrap();
        assert!((acc - 0.5).abs() < 1e-15);

        // A perfect classifier: +1 on feature 0 for class 0.
        let mut perfect = constant_classifier(2, 2);
        perfect.params.layers[0].w = vec![1.0, 0.0, -1.0, 0.0];
        assert_eq!(backward_transfer(&perfect, &val).unwrap(), 1.0);

        assert!(matches!(
            backward_transfer(&constant, &[]),
            Err(MetricsError::EmptyValidation)
        ));
    }

    #[test]
    fn trace_csv_format() {
        let mut trace = RunTrace::new(echo());
        trace.record(1, 1, 2).unwrap();
        trace.record(2, 2, 2).unwrap();
        let mut out = Vec::new();
        write_trace_csv(&trace, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "t,correct,total,online_acc,batch_acc\n1,1,2,0.5,0.5\n2,2,2,0.75,1\n"
        );
    }

    #[test]
    fn summary_json_field_names() {
        let summary = RunSummary {
            d: 5,
            c: 2,
            method: "iwms".to_string(),
            seed: 3,
            final_online_acc: 0.625,
            backward_transfer: None,
        };
        let mut out = Vec::new();
        write_summary_json(&summary, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("\"C\": 2"), "{text}");
        assert!(text.contains("\"final_online_acc\": 0.625"), "{text}");
        let parsed: RunSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, summary);
    }
}
