//! Exact checks of saliency, GEMs and the Gabor bank.

use lowshot::data::{synth_generate, ClassHierarchy, Image, SynthParams};
use lowshot::gabor::{make_log_gabor_bank, LogGaborParams};
use lowshot::interp::{generate_gem, generate_masked_gem, saliency, Gem, LinearModel};
use lowshot::nn::ClassifierHead;

use super::{random_tensor, rng};

#[derive(Debug, Default)]
pub struct InterpReport {
    /// Largest `|saliency - weight row|` of a random linear model.
    pub linear_saliency_gap: f64,
    pub masked_q0_identical: bool,
    pub gems_in_unit_range: bool,
    pub gabor_filters: usize,
    pub gabor_dc_free: bool,
}

pub fn linear_saliency_gap(seed: u64) -> f64 {
    let (h, w, classes) = (4, 6, 3);
    let mut r = rng(seed);
    let weight = random_tensor(&[classes, h * w], &mut r);
    let bias = random_tensor(&[classes], &mut r);
    let model = LinearModel { head: ClassifierHead::<f64>::from_weights(weight.clone(), bias).unwrap(), input_hw: (h, w) };
    let image = random_tensor(&[h, w], &mut r);
    let mut gap = 0.0f64;
    for c in 0..classes {
        let s = saliency(&model, &image, c).unwrap();
        let row = &weight.data()[c * h * w..(c + 1) * h * w];
        gap = s.gradient.iter().zip(row).map(|(a, b)| (a - b).abs()).fold(gap, f64::max);
    }
    gap
}

/// Synthetic images with four made-up prediction groups.
pub fn test_images() -> (Vec<Image>, Vec<usize>) {
    let p = SynthParams { n_t: 6, n_s: 56, ..SynthParams::default() };
    let (_, d_s) = synth_generate(&p, &ClassHierarchy::stages()).unwrap();
    let images = d_s.samples().iter().map(|s| s.image.clone()).collect();
    let predicted = d_s.samples().iter().map(|s| s.fine.unwrap() % 4).collect();
    (images, predicted)
}

/// Distinct per-pixel scores standing in for saliency magnitudes.
pub fn pseudo_saliency(images: &[Image]) -> Vec<Vec<f64>> {
    images
        .iter()
        .map(|i| i.pixels().iter().enumerate().map(|(k, &v)| (v as f64 - 0.3).abs() + k as f64 * 1e-7).collect())
        .collect()
}

fn bits(g: &Gem) -> Vec<u64> {
    g.values.iter().map(|v| v.to_bits()).collect()
}

pub fn interp_oracles() -> InterpReport {
    let (images, predicted) = test_images();
    let refs: Vec<&Image> = images.iter().collect();
    let sal = pseudo_saliency(&images);
    let mut rep = InterpReport { linear_saliency_gap: linear_saliency_gap(11), masked_q0_identical: true, gems_in_unit_range: true, ..Default::default() };
    for c in 0..4 {
        let plain = generate_gem(&refs, &predicted, c).unwrap();
        let q0 = generate_masked_gem(&refs, &predicted, &sal, c, 0.0).unwrap();
        let q70 = generate_masked_gem(&refs, &predicted, &sal, c, 70.0).unwrap();
        rep.masked_q0_identical &= bits(&plain) == bits(&q0) && plain.count == q0.count;
        for g in [&plain, &q70] {
            rep.gems_in_unit_range &= g.values.iter().all(|v| (0.0..=1.0).contains(v));
        }
    }
    let bank = make_log_gabor_bank((32, 80), &LogGaborParams::default()).unwrap();
    rep.gabor_filters = bank.len();
    rep.gabor_dc_free = bank.filters().iter().all(|f| f.transfer[0] == 0.0);
    rep
}
