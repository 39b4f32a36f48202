//! Synthetic non-stationary sample generators.
//!
//! Every generator is a pure function of `(spec, seed, step)`: each step gets
//! its own derived RNG, so a step's samples never depend on how many other
//! steps were generated.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{standard_normal, sub_seed};

/// A labeled sample as produced by a generator, before the stream hides labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub features: Vec<f64>,
    pub label: usize,
}

fn default_radius() -> f64 {
    1.0
}

/// Gaussian classes whose means sit on a circle in the first two coordinates
/// and rotate by `angular_velocity` radians per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotatingGaussians {
    pub num_classes: usize,
    pub dim: usize,
    /// Isotropic noise scale.
    pub noise: f64,
    /// Radians per step.
    pub angular_velocity: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
}

/// Stationary Gaussian classes whose means all translate along the first
/// coordinate at `shift_step` (boundary inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbruptShift {
    pub num_classes: usize,
    pub dim: usize,
    pub noise: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub shift_step: u64,
    pub shift_magnitude: f64,
}

/// Stationary Gaussian classes with labels arriving in constant runs of
/// `burst_len` consecutive samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelBurst {
    pub num_classes: usize,
    pub dim: usize,
    pub noise: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub burst_len: usize,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("step-{step}")))
}

fn class_mean(dim: usize, num_classes: usize, radius: f64, class: usize, angle_offset: f64) -> Vec<f64> {
    let angle = std::f64::consts::TAU * class as f64 / num_classes as f64 + angle_offset;
    let mut mean = vec![0.0; dim];
    mean[0] = radius * angle.cos();
    mean[1] = radius * angle.sin();
    mean
}

fn noisy(mean: Vec<f64>, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.into_iter()
        .map(|m| m + noise * standard_normal(rng))
        .collect()
}

/// `count` samples of the rotating mixture at time `step`, labels i.i.d. uniform.
pub fn gen_rotating_gaussians(
    spec: &RotatingGaussians,
    seed: u64,
    step: u64,
    count: usize,
) -> Vec<RawSample> {
    let mut rng = step_rng(seed, step);
    (0..count)
        .map(|_| {
            let label = rng.gen_range(0..spec.num_classes);
            let mean = class_mean(
                spec.dim,
                spec.num_classes,
                spec.radius,
                label,
                spec.angular_velocity * step as f64,
            );
            RawSample {
                features: noisy(mean, spec.noise, &mut rng),
                label,
            }
        })
        .collect()
}

/// `count` samples of the shifted mixture at time `step`.
pub fn gen_abrupt_shift(spec: &AbruptShift, seed: u64, step: u64, count: usize) -> Vec<RawSample> {
    let mut rng = step_rng(seed, step);
    let shift = if step >= spec.shift_step {
        spec.shift_magnitude
    } else {
        0.0
    };
    (0..count)
        .map(|_| {
            let label = rng.gen_range(0..spec.num_classes);
            let mut mean = class_mean(spec.dim, spec.num_classes, spec.radius, label, 0.0);
            mean[0] += shift;
            RawSample {
                features: noisy(mean, spec.noise, &mut rng),
                label,
            }
        })
        .collect()
}

/// `count` samples at time `step` with labels constant over runs of
/// `burst_len` consecutive samples (runs span step boundaries).
pub fn gen_label_burst(spec: &LabelBurst, seed: u64, step: u64, count: usize) -> Vec<RawSample> {
    let mut rng = step_rng(seed, step);
    (0..count)
        .map(|i| {
            let global = step.saturating_sub(1) * count as u64 + i as u64;
            let run = global / spec.burst_len as u64;
            // Run labels come from a stable hash so any step can be generated
            // without replaying the ones before it.
            let label = (sub_seed(seed, &format!("burst-{run}")) % spec.num_classes as u64) as usize;
            let mean = class_mean(spec.dim, spec.num_classes, spec.radius, label, 0.0);
            RawSample {
                features: noisy(mean, spec.noise, &mut rng),
                label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotating(noise: f64, omega: f64) -> RotatingGaussians {
        RotatingGaussians {
            num_classes: 4,
            dim: 5,
            noise,
            angular_velocity: omega,
            radius: 1.0,
        }
    }

    #[test]
    fn rotating_mean_starts_on_x_axis() {
        // sigma = 0, t = 0, class 0 => features are exactly (1, 0, 0, ...)
        let spec = rotating(0.0, 0.3);
        for sample in gen_rotating_gaussians(&spec, 9, 0, 64) {
            if sample.label == 0 {
                assert!((sample.features[0] - 1.0).abs() < 1e-12);
                assert!(sample.features[1].abs() < 1e-12);
                assert!(sample.features[2..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rotating_quarter_turn_after_100_steps() {
        let spec = rotating(0.0, std::f64::consts::PI / 200.0);
        let samples = gen_rotating_gaussians(&spec, 9, 100, 64);
        let class0 = samples.iter().find(|s| s.label == 0).expect("class 0 present");
        assert!(class0.features[0].abs() < 1e-9);
        assert!((class0.features[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rotating_zero_velocity_is_stationary() {
        let spec = rotating(0.0, 0.0);
        let a = gen_rotating_gaussians(&spec, 9, 1, 16);
        let b = gen_rotating_gaussians(&spec, 9, 500, 16);
        // Means never move: every class-0 sample lands on the same point.
        let pa = a.iter().find(|s| s.label == 0).unwrap();
        let pb = b.iter().find(|s| s.label == 0).unwrap();
        assert_eq!(pa.features, pb.features);
    }

    #[test]
    fn abrupt_shift_boundary_is_inclusive() {
        let spec = AbruptShift {
            num_classes: 2,
            dim: 3,
            noise: 0.0,
            radius: 1.0,
            shift_step: 10,
            shift_magnitude: 5.0,
        };
        let before = gen_abrupt_shift(&spec, 3, 9, 8);
        let at = gen_abrupt_shift(&spec, 3, 10, 8);
        let c0_before = before.iter().find(|s| s.label == 0).unwrap();
        let c0_at = at.iter().find(|s| s.label == 0).unwrap();
        assert!((c0_before.features[0] - 1.0).abs() < 1e-12);
        assert!((c0_at.features[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn abrupt_zero_magnitude_is_stationary() {
        let spec = AbruptShift {
            num_classes: 2,
            dim: 3,
            noise: 0.3,
            radius: 1.0,
            shift_step: 5,
            shift_magnitude: 0.0,
        };
        assert_eq!(
            gen_abrupt_shift(&spec, 3, 4, 8),
            gen_abrupt_shift(&spec, 3, 4, 8)
        );
        // Same per-step rng, zero shift: step 5 distribution params match step 5 rerun.
        let a = gen_abrupt_shift(&spec, 3, 5, 8);
        let b = gen_abrupt_shift(&spec, 3, 5, 8);
        assert_eq!(a, b);
    }

    #[test]
    fn burst_labels_form_runs() {
        let spec = LabelBurst {
            num_classes: 4,
            dim: 2,
            noise: 0.1,
            radius: 1.0,
            burst_len: 4,
        };
        let labels: Vec<usize> = gen_label_burst(&spec, 11, 1, 8)
            .iter()
            .map(|s| s.label)
            .collect();
        assert!(labels[0..4].iter().all(|&l| l == labels[0]));
        assert!(labels[4..8].iter().all(|&l| l == labels[4]));
    }

    #[test]
    fn burst_runs_span_step_boundaries() {
        let spec = LabelBurst {
            num_classes: 4,
            dim: 2,
            noise: 0.1,
            radius: 1.0,
            burst_len: 6,
        };
        let s1 = gen_label_burst(&spec, 11, 1, 4);
        let s2 = gen_label_burst(&spec, 11, 2, 4);
        // Global samples 4 and 5 (start of step 2) still belong to run 0.
        assert_eq!(s2[0].label, s1[0].label);
        assert_eq!(s2[1].label, s1[0].label);
    }

    #[test]
    fn burst_autocorrelation_exceeds_iid() {
        // Lag-1 label agreement by direct counting over 10^4 samples.
        let agree = |burst_len: usize| -> f64 {
            let spec = LabelBurst {
                num_classes: 4,
                dim: 2,
                noise: 0.1,
                radius: 1.0,
                burst_len,
            };
            let mut labels = Vec::new();
            for step in 1..=100 {
                labels.extend(gen_label_burst(&spec, 21, step, 100).iter().map(|s| s.label));
            }
            let matches = labels.windows(2).filter(|w| w[0] == w[1]).count();
            matches as f64 / (labels.len() - 1) as f64
        };
        let bursty = agree(8);
        let iid = agree(1);
        assert!(
            bursty > iid + 0.3,
            "lag-1 agreement bursty={bursty} iid={iid}"
        );
    }
}
