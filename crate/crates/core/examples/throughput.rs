//! Times one forward/backward pass of the residual network on a batch.
//!
//! `cargo run --release --example throughput -- [base_width] [batch]`

use std::time::Instant;

use lowshot::loss::cross_entropy_batch;
use lowshot::nn::{ArchConfig, ClassifierHead, FeatureExtractor, Mode};
use lowshot::{Tape, Tensor};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let base = args.first().copied().unwrap_or(16);
    let batch = args.get(1).copied().unwrap_or(16);
    let (h, w) = (32, 80);
    let fx = FeatureExtractor::<f32>::new(ArchConfig::with_base_width(base), (h, w), 1).unwrap();
    let head = ClassifierHead::<f32>::new(fx.feature_dim(), 14, 2);
    let x = Tensor::new(&[batch, 1, h, w], (0..batch * h * w).map(|i| ((i * 7919) % 97) as f32 / 97.0).collect()).unwrap();
    let labels: Vec<usize> = (0..batch).map(|i| i % 14).collect();
    let reps = 5;
    let start = Instant::now();
    let mut fwd = 0.0;
    for _ in 0..reps {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let bf = fx.bind(&mut tape, true);
        let bh = head.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let (f, _) = fx.forward(&mut tape, &bf, xv, Mode::Train).unwrap();
        let o = head.forward(&mut tape, &bh, f).unwrap();
        let l = cross_entropy_batch(&mut tape, o, &labels).unwrap();
        fwd += t0.elapsed().as_secs_f64();
        tape.backward(l).unwrap();
    }
    let per = start.elapsed().as_secs_f64() / reps as f64;
    println!(
        "base {base} batch {batch}: {:.1} ms/step ({:.1} ms forward), {:.0} images/s, d = {}",
        per * 1e3,
        fwd / reps as f64 * 1e3,
        batch as f64 / per,
        fx.feature_dim()
    );
}
