//! Saliency maps and class-wise expression maps (GEMs).
//!
//! The saliency of class `i` for an image `x` is the gradient of the
//! pre-softmax logit `o_i` with respect to every pixel; the stored map is
//! its magnitude. A GEM is the pixel-wise mean of all images predicted as
//! one class, min-max normalized to `[0, 1]`. The masked variant first
//! zeroes, per image, every pixel whose saliency falls below that image's
//! own `q`-th percentile.

use crate::data::{Image, DataError};
use crate::nn::{ClassifierHead, Mode, Network, NnError};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::TensorError;

/// Mask percentile used when none is given.
pub const DEFAULT_MASK_PERCENTILE: f64 = 70.0;

#[derive(Debug, thiserror::Error)]
pub enum InterpError {
    #[error("class {class} out of range for {classes} outputs")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("no images are predicted as class {0}")]
    NoSamples(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("percentile {0} outside [0, 100)")]
    BadPercentile(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A model whose logits can be recorded on a tape for an `[n, 1, h, w]`
/// input.
pub trait Differentiable<T: Element> {
    fn num_classes(&self) -> usize;
    fn input_hw(&self) -> (usize, usize);
    /// Eval-mode logits `[n, classes]`; parameters enter as constants.
    fn record_logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, InterpError>;
}

impl<T: Element> Differentiable<T> for Network<T> {
    fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    fn input_hw(&self) -> (usize, usize) {
        self.extractor.input_hw
    }

    fn record_logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, InterpError> {
        let bf = self.extractor.bind(tape, false);
        let bh = self.head.bind(tape, false);
        let (f, _) = self.extractor.forward(tape, &bf, x, Mode::Eval)?;
        Ok(self.head.forward(tape, &bh, f)?)
    }
}

/// `o = W vec(x) + b`: a single linear layer over the flattened pixels.
pub struct LinearModel<T> {
    pub head: ClassifierHead<T>,
    pub input_hw: (usize, usize),
}

impl<T: Element> Differentiable<T> for LinearModel<T> {
    fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    fn record_logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, InterpError> {
        let n = tape.value(x).shape()[0];
        let flat = tape.reshape(x, &[n, self.input_hw.0 * self.input_hw.1])?;
        let bh = self.head.bind(tape, false);
        Ok(self.head.forward(tape, &bh, flat)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T> {
    pub class: usize,
    pub height: usize,
    pub width: usize,
    /// `d o_class / d x`, row-major.
    pub gradient: Vec<T>,
}

impl<T: Element> SaliencyMap<T> {
    /// Per-pixel `|gradient|`.
    pub fn magnitude(&self) -> Vec<T> {
        self.gradient.iter().map(|g| g.abs()).collect()
    }

    /// Magnitudes scaled by their maximum into `[0, 1]` for display.
    pub fn to_image(&self) -> Image {
        let mag = self.magnitude();
        let max = mag.iter().copied().fold(T::zero(), T::max);
        let px = mag
            .iter()
            .map(|&m| if max > T::zero() { (m / max).to_f64_lossy() as f32 } else { 0.0 })
            .collect();
        Image::new(self.height, self.width, px).expect("map matches its shape")
    }
}

/// Gradient of logit `target` with respect to an `h x w` image.
pub fn saliency<T: Element, M: Differentiable<T>>(model: &M, image: &Tensor<T>, target: usize) -> Result<SaliencyMap<T>, InterpError> {
    let classes = model.num_classes();
    if target >= classes {
        return Err(InterpError::ClassOutOfRange { class: target, classes });
    }
    let (h, w) = model.input_hw();
    if image.numel() != h * w {
        return Err(InterpError::ShapeMismatch(format!("image {:?} for a {h}x{w} model", image.shape())));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone().reshape(&[1, 1, h, w])?, true);
    let logits = model.record_logits(&mut tape, x)?;
    let o = tape.gather(logits, &[target], &[])?;
    let grads = tape.backward(o)?;
    let gradient = grads.get(x).expect("input requires grad").data().to_vec();
    Ok(SaliencyMap { class: target, height: h, width: w, gradient })
}

/// Saliency of an 8-bit image under an `f32` network.
pub fn image_saliency(model: &Network<f32>, image: &Image, target: usize) -> Result<SaliencyMap<f32>, InterpError> {
    let t = Tensor::new(&[image.height(), image.width()], image.pixels().to_vec())?;
    saliency(model, &t, target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gem {
    pub class: usize,
    pub height: usize,
    pub width: usize,
    /// Values in `[0, 1]`.
    pub values: Vec<f64>,
    /// Number of images aggregated.
    pub count: usize,
}

impl Gem {
    pub fn to_image(&self) -> Image {
        Image::new(self.height, self.width, self.values.iter().map(|&v| v as f32).collect()).expect("gem matches its shape")
    }
}

/// Mean of the selected planes, then min-max normalized; a constant mean
/// maps to all zeros.
fn aggregate(planes: impl Iterator<Item = Vec<f64>>, class: usize, hw: (usize, usize)) -> Result<Gem, InterpError> {
    let mut sum = vec![0.0; hw.0 * hw.1];
    let mut count = 0;
    for p in planes {
        for (s, v) in sum.iter_mut().zip(&p) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(InterpError::NoSamples(class));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo { mean.iter().map(|v| (v - lo) / (hi - lo)).collect() } else { vec![0.0; mean.len()] };
    Ok(Gem { class, height: hw.0, width: hw.1, values, count })
}

fn check_images(images: &[&Image], predicted: &[usize]) -> Result<(usize, usize), InterpError> {
    if images.len() != predicted.len() {
        return Err(InterpError::ShapeMismatch(format!("{} images, {} predictions", images.len(), predicted.len())));
    }
    let hw = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    if images.iter().any(|i| (i.height(), i.width()) != hw) {
        return Err(InterpError::ShapeMismatch("images differ in size".into()));
    }
    Ok(hw)
}

pub fn generate_gem(images: &[&Image], predicted: &[usize], target: usize) -> Result<Gem, InterpError> {
    let hw = check_images(images, predicted)?;
    let planes = images
        .iter()
        .zip(predicted)
        .filter(|(_, &p)| p == target)
        .map(|(img, _)| img.pixels().iter().map(|&v| v as f64).collect());
    aggregate(planes, target, hw)
}

/// Smallest value such that at least `100 - q` percent of `values` are
/// greater or equal: the sorted element at rank `floor(q n / 100)`.
pub fn percentile_threshold(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * sorted.len() as f64).floor() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// `saliency >= its own q-th percentile`, per pixel.
pub fn saliency_mask(saliency: &[f64], q: f64) -> Result<Vec<bool>, InterpError> {
    if !(0.0..100.0).contains(&q) {
        return Err(InterpError::BadPercentile(q));
    }
    if saliency.is_empty() {
        return Ok(Vec::new());
    }
    let t = percentile_threshold(saliency, q);
    Ok(saliency.iter().map(|&s| s >= t).collect())
}

/// GEM over images masked by their own saliency maps (magnitudes).
pub fn generate_masked_gem(
    images: &[&Image],
    predicted: &[usize],
    saliencies: &[Vec<f64>],
    target: usize,
    q: f64,
) -> Result<Gem, InterpError> {
    let hw = check_images(images, predicted)?;
    if saliencies.len() != images.len() || saliencies.iter().any(|s| s.len() != hw.0 * hw.1) {
        return Err(InterpError::ShapeMismatch("one saliency map per image, matching its size".into()));
    }
    if !(0.0..100.0).contains(&q) {
        return Err(InterpError::BadPercentile(q));
    }
    let mut planes = Vec::new();
    for ((img, &p), s) in images.iter().zip(predicted).zip(saliencies) {
        if p != target {
            continue;
        }
        let mask = saliency_mask(s, q)?;
        planes.push(img.pixels().iter().zip(&mask).map(|(&v, &m)| if m { v as f64 } else { 0.0 }).collect());
    }
    aggregate(planes.into_iter(), target, hw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(px: &[f32]) -> Image {
        Image::new(1, px.len(), px.to_vec()).unwrap()
    }

    #[test]
    fn single_image_gem_is_that_image_normalized() {
        let a = img(&[0.2, 0.4, 0.6]);
        let g = generate_gem(&[&a], &[3], 3).unwrap();
        assert_eq!(g.count, 1);
        for (v, e) in g.values.iter().zip([0.0, 0.5, 1.0]) {
            assert!((v - e).abs() < 1e-6);
        }
    }

    #[test]
    fn complementary_images_give_zero_gem() {
        let a = img(&[0.0, 0.25, 1.0]);
        let b = img(&[1.0, 0.75, 0.0]);
        let g = generate_gem(&[&a, &b], &[0, 0], 0).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_class_is_an_error() {
        let a = img(&[0.1, 0.2]);
        assert!(matches!(generate_gem(&[&a], &[1], 0), Err(InterpError::NoSamples(0))));
    }

    #[test]
    fn median_keeps_upper_half() {
        let s: Vec<f64> = (0..7).map(|v| v as f64).collect();
        let m = saliency_mask(&s, 50.0).unwrap();
        assert_eq!(m.iter().filter(|&&k| k).count(), 4);
        let c = saliency_mask(&[2.0; 5], 90.0).unwrap();
        assert!(c.iter().all(|&k| k));
    }
}
