//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::Path;

use lowshot::data::{synth_generate, ClassHierarchy, Dataset, SynthParams};
use lowshot::nn::ArchConfig;
use lowshot::pipeline::LowShotConfig;
use lowshot::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of the
/// finite-difference stencil.
pub fn kink_free_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

/// `sum(out * r)` for a fixed random `r` matching `out`.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(random_tensor(&shape, &mut rng(seed)));
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

pub fn loss_err(e: lowshot::loss::LossError) -> TensorError {
    match e {
        lowshot::loss::LossError::Tensor(t) => t,
        other => TensorError::InvalidArgument { op: "loss", msg: other.to_string() },
    }
}

pub fn nn_err(e: lowshot::nn::NnError) -> TensorError {
    match e {
        lowshot::nn::NnError::Tensor(t) => t,
        other => TensorError::InvalidArgument { op: "nn", msg: other.to_string() },
    }
}

/// A reduced benchmark: same hierarchy and image size, fewer samples.
pub fn small_synth(n_t: usize, n_s: usize, seed: u64) -> (Dataset, Dataset) {
    let params = SynthParams { n_t, n_s, seed, ..SynthParams::default() };
    synth_generate(&params, &ClassHierarchy::stages()).unwrap()
}

pub fn tiny_lowshot(seed: u64) -> LowShotConfig {
    LowShotConfig {
        arch: ArchConfig::with_base_width(2),
        coarse_epochs: 2,
        fine_epochs: 3,
        finetune_epochs: 2,
        base_lr: 0.05,
        seed,
        ..LowShotConfig::default()
    }
}

/// Every regular file below `dir`, relative path and bytes, sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

pub mod gradients;
pub mod conv;
pub mod losses;
pub mod pipeline;
pub mod experiment;
pub mod interp;
