//! One seed of plain / data-level / data+feature-level on the synthetic
//! benchmark, with timings.
//!
//! `cargo run --release --example desk_run -- base e1 e2 e4 lr seed [noise] [finetune_lr] [lambda]`

use std::time::Instant;

use lowshot::data::{split_train_test, synth_generate, ClassHierarchy, SplitSpec, SynthParams};
use lowshot::nn::ArchConfig;
use lowshot::pipeline::{accuracy, cosine_stats, features, run_plain, run_two_step, EvalSet, LowShotConfig, Target};

fn main() {
    let a: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, d: f64| a.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(d);
    let base = num(0, 8.0) as usize;
    let seed = num(5, 0.0) as u64;
    let noise = num(6, lowshot::data::DEFAULT_NOISE as f64) as f32;
    let config = LowShotConfig {
        arch: ArchConfig::with_base_width(base),
        coarse_epochs: num(1, 4.0) as usize,
        fine_epochs: num(2, 30.0) as usize,
        finetune_epochs: num(3, 10.0) as usize,
        base_lr: num(4, 0.05),
        finetune_lr: a.get(7).and_then(|v| v.parse().ok()),
        lambda_sim: num(8, 1.0),
        seed,
        ..LowShotConfig::default()
    };
    let h = ClassHierarchy::stages();
    let (d_t, d_s) = synth_generate(&SynthParams { noise, seed, ..SynthParams::default() }, &h).unwrap();
    let (train, test) = split_train_test(&d_s, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
    let eval = EvalSet { data: &test, target: Target::Fine };
    let t0 = Instant::now();
    let (plain, rp) = run_plain(&train, &config, Some(&test)).unwrap();
    let tp = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let out = run_two_step(&d_t, &train, &config, Some(&test), None).unwrap();
    let tt = t0.elapsed().as_secs_f64();
    let labels = test.fine_labels().unwrap();
    let cs2 = cosine_stats(&features(&out.after_step2.extractor, &test).unwrap(), &labels);
    let cs4 = cosine_stats(&features(&out.model.extractor, &test).unwrap(), &labels);
    let curve = |r: &lowshot::pipeline::TrainReport| {
        r.epochs.iter().map(|e| format!("{:.2}/{:.2}", e.train_loss, e.eval_acc.unwrap_or(f64::NAN))).collect::<Vec<_>>().join(" ")
    };
    println!("plain curve: {}", curve(&rp));
    println!("coarse curve: {}", curve(&out.coarse));
    println!("fine curve: {}", curve(&out.fine));
    println!("finetune curve: {}", curve(&out.finetune));
    println!("pools {:?} fallback {:?}", out.references.pool_sizes, out.references.fallback_classes);
    println!(
        "seed {seed}: plain {:.3}  data {:.3}  data+feature {:.3}  | intra/inter step2 {:.3}/{:.3} step4 {:.3}/{:.3} | {tp:.0}s + {tt:.0}s",
        accuracy(&plain, eval).unwrap(),
        accuracy(&out.after_step2, eval).unwrap(),
        accuracy(&out.model, eval).unwrap(),
        cs2.intra,
        cs2.inter,
        cs4.intra,
        cs4.inter
    );
}
