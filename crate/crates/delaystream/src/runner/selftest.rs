//! Built-in sanity checks: finite-difference gradient verification and a
//! chi-square test of the importance-weighted sampler.

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::buffer::{cosine, IwmsMode, MemoryBuffer, WEIGHT_FLOOR};
use crate::model::{cross_entropy_backward, entropy_backward, Arch, BudgetLedger, Classifier};
use crate::rng::component_rng;

fn perturbed_loss(
    clf: &Classifier,
    layer: usize,
    weight: usize,
    bias: bool,
    delta: f64,
    inputs: &[Vec<f64>],
    labels: Option<&[usize]>,
) -> f64 {
    let mut c = clf.clone();
    if bias {
        c.params.layers[layer].b[weight] += delta;
    } else {
        c.params.layers[layer].w[weight] += delta;
    }
    let mut ledger = BudgetLedger::new(1);
    match labels {
        Some(ys) => cross_entropy_backward(&c, inputs, ys, &mut ledger).unwrap().0,
        None => entropy_backward(&c, inputs, &mut ledger).unwrap().0,
    }
}

/// Max relative disagreement between analytic and central-difference
/// gradients over one random instance.
fn gradient_discrepancy(seed: u64, use_entropy: bool) -> f64 {
    let mut rng = component_rng(seed, "selftest-grad");
    let dim = rng.gen_range(2..=8);
    let classes = rng.gen_range(2..=5);
    let arch = if seed.is_multiple_of(2) {
        Arch::Mlp {
            hidden: rng.gen_range(2..=8),
        }
    } else {
        Arch::Linear
    };
    let clf = Classifier::init(arch, dim, classes, &mut rng);
    let batch = rng.gen_range(1..=5);
    let inputs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let label_arg = if use_entropy { None } else { Some(&labels[..]) };

    let mut ledger = BudgetLedger::new(1);
    let analytic = if use_entropy {
        entropy_backward(&clf, &inputs, &mut ledger).unwrap().1
    } else {
        cross_entropy_backward(&clf, &inputs, &labels, &mut ledger)
            .unwrap()
            .1
    };

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for li in 0..clf.params.layers.len() {
        for wi in 0..clf.params.layers[li].w.len() {
            let plus = perturbed_loss(&clf, li, wi, false, h, &inputs, label_arg);
            let minus = perturbed_loss(&clf, li, wi, false, -h, &inputs, label_arg);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.layers[li].w[wi];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(0.01));
        }
        for bi in 0..clf.params.layers[li].b.len() {
            let plus = perturbed_loss(&clf, li, bi, true, h, &inputs, label_arg);
            let minus = perturbed_loss(&clf, li, bi, true, -h, &inputs, label_arg);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.layers[li].b[bi];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(0.01));
        }
    }
    worst
}

/// Chi-square p-value of empirical selection frequencies against the
/// analytic clamped-and-floored multinomial weights.
fn sampler_p_value(seed: u64, draws: usize) -> f64 {
    let mut rng = component_rng(seed, "selftest-sampler");
    let dim = 4;
    let candidates = rng.gen_range(3..=8);
    let mut buffer = MemoryBuffer::new(candidates).unwrap();
    let mut cached = Vec::new();
    for id in 0..candidates as u64 {
        let feature: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        buffer
            .insert_labeled(id, feature.clone(), 0, feature.clone(), id)
            .unwrap();
        cached.push(feature);
    }
    let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let weights: Vec<f64> = cached
        .iter()
        .map(|c| cosine(&query, c).max(0.0) + WEIGHT_FLOOR)
        .collect();
    let total: f64 = weights.iter().sum();

    let picks = buffer
        .iwms_select(&[query], &[0], draws, &mut rng, IwmsMode::TwoStage)
        .unwrap();
    let mut counts = vec![0usize; candidates];
    for e in picks {
        counts[e.sample_id as usize] += 1;
    }

    let mut statistic = 0.0;
    for (c, w) in counts.iter().zip(&weights) {
        let expected = draws as f64 * w / total;
        statistic += (*c as f64 - expected).powi(2) / expected;
    }
    let chi = ChiSquared::new((candidates - 1) as f64).expect("df >= 1");
    1.0 - chi.cdf(statistic)
}

/// Run the built-in checks, printing one line per check. Returns true when
/// everything passes.
pub fn run_selftest(verbose: bool) -> bool {
    let mut ok = true;

    let mut worst = 0.0f64;
    for seed in 0..30 {
        worst = worst.max(gradient_discrepancy(seed, false));
        worst = worst.max(gradient_discrepancy(seed, true));
    }
    let grad_ok = worst < 1e-4;
    println!(
        "selftest gradient-check: {} (max rel err {worst:.2e})",
        if grad_ok { "PASS" } else { "FAIL" }
    );
    ok &= grad_ok;

    let mut min_p = 1.0f64;
    for seed in 0..5 {
        let p = sampler_p_value(seed, 20_000);
        if verbose {
            println!("  sampler set {seed}: p = {p:.4}");
        }
        min_p = min_p.min(p);
    }
    let sampler_ok = min_p > 0.001;
    println!(
        "selftest sampler-chi-square: {} (min p {min_p:.4})",
        if sampler_ok { "PASS" } else { "FAIL" }
    );
    ok &= sampler_ok;

    ok
}
