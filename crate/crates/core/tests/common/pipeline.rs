//! Structural checks of the two-step procedure on a reduced benchmark.

use lowshot::data::{split_train_test, SplitSpec};
use lowshot::pipeline::{
    finetune_with_similarity, network_checksum, probabilities, run_two_step, train_fine, LowShotConfig, TwoStepOutcome,
};
use lowshot::tensor::argmax;

use super::{small_synth, tiny_lowshot};

#[derive(Debug)]
pub struct AlgorithmReport {
    pub head_swap_equal: bool,
    pub sets: usize,
    pub fallback_classes: Vec<usize>,
    /// Problems found while re-verifying reference members.
    pub reference_problems: Vec<String>,
    /// Final checksums and per-epoch losses agree for lambda = 0 against
    /// cross-entropy fine-tuning.
    pub lambda_zero_equal: bool,
}

pub fn verify_references(out: &TwoStepOutcome, train: &lowshot::data::Dataset, config: &LowShotConfig) -> Vec<String> {
    let l_s = train.hierarchy().num_fine();
    let probs = probabilities(&out.after_step2, train).unwrap();
    let rows = train.by_id();
    let labels = train.fine_labels().unwrap();
    let mut problems = Vec::new();
    if out.references.sets.len() != config.k {
        problems.push(format!("{} sets, expected {}", out.references.sets.len(), config.k));
    }
    for (si, set) in out.references.sets.iter().enumerate() {
        if set.members.len() != l_s {
            problems.push(format!("set {si} has {} members", set.members.len()));
        }
        let mut ids: Vec<usize> = set.members.iter().map(|m| m.sample_id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != set.members.len() {
            problems.push(format!("set {si} repeats a sample"));
        }
        for (c, m) in set.members.iter().enumerate() {
            if m.class != c {
                problems.push(format!("set {si} slot {c} holds class {}", m.class));
            }
            let Some(&row) = rows.get(&m.sample_id) else {
                problems.push(format!("set {si}: sample {} not in the training set", m.sample_id));
                continue;
            };
            if labels[row] != m.class {
                problems.push(format!("set {si}: sample {} is labelled {}", m.sample_id, labels[row]));
            }
            let p = &probs[row];
            let confident = argmax(p) == m.class && p[m.class] as f64 > config.tau;
            if !confident && !out.references.fallback_classes.contains(&m.class) {
                problems.push(format!("set {si}: sample {} fails argmax / tau without a fallback", m.sample_id));
            }
        }
    }
    problems
}

pub fn algorithm_checks(seed: u64, tau: f64) -> AlgorithmReport {
    let (d_t, d_s) = small_synth(300, 70, seed);
    let (train, _) = split_train_test(&d_s, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
    let config = LowShotConfig { tau, ..tiny_lowshot(seed) };
    let out = run_two_step(&d_t, &train, &config, None, None).unwrap();
    let reference_problems = verify_references(&out, &train, &config);

    // Same epochs and rate for both phases, so the only difference left is
    // the similarity term.
    let zero = LowShotConfig { lambda_sim: 0.0, finetune_lr: None, fine_epochs: config.finetune_epochs, ..config.clone() };
    let mut a = out.after_step2.clone();
    let ra = finetune_with_similarity(&mut a, &train, &out.references.sets, &zero, None).unwrap();
    let mut b = out.after_step2.clone();
    let rb = train_fine(&mut b, &train, &zero, None).unwrap();
    let losses = |r: &lowshot::pipeline::TrainReport| r.epochs.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    let lambda_zero_equal = network_checksum(&a) == network_checksum(&b) && losses(&ra) == losses(&rb);

    AlgorithmReport {
        head_swap_equal: out.head_swap_checksums.0 == out.head_swap_checksums.1,
        sets: out.references.sets.len(),
        fallback_classes: out.references.fallback_classes.clone(),
        reference_problems,
        lambda_zero_equal,
    }
}
