//! Log-Gabor filter-bank baseline: a bank of frequency-domain band-pass
//! filters, pooled response magnitudes and multinomial logistic regression.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::data::Image;
use crate::loss::{softmax, ProbabilityVector};

#[derive(Debug, thiserror::Error)]
pub enum GaborError {
    #[error("invalid filter parameters: {0}")]
    InvalidParams(String),
    #[error("image is {got:?}, the bank expects {expected:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{0}")]
    InvalidInput(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogGaborParams {
    pub scales: usize,
    pub orientations: usize,
    /// Centre frequency of the finest scale in cycles per pixel; each further
    /// scale halves it.
    pub max_frequency: f64,
    /// `sigma_f / f_s`, the radial bandwidth ratio.
    pub sigma_ratio: f64,
    /// Angular spread in radians.
    pub sigma_theta: f64,
    pub pool: usize,
}

impl Default for LogGaborParams {
    fn default() -> Self {
        LogGaborParams { scales: 4, orientations: 6, max_frequency: 0.25, sigma_ratio: 0.65, sigma_theta: PI / 12.0, pool: 8 }
    }
}

impl LogGaborParams {
    pub fn center_frequency(&self, scale: usize) -> f64 {
        self.max_frequency / 2f64.powi(scale as i32)
    }

    pub fn orientation_angle(&self, orientation: usize) -> f64 {
        orientation as f64 * PI / self.orientations as f64
    }
}

/// One real, non-negative transfer function on the `h x w` FFT grid.
#[derive(Clone, Debug)]
pub struct LogGaborFilter {
    /// Zero-based scale, finest first.
    pub scale: usize,
    pub orientation: usize,
    pub transfer: Vec<f64>,
}

/// Filters in scale-major, orientation-minor order. Orientation angles give
/// the direction of the passed frequency vector, normal to the stripes.
pub struct LogGaborBank {
    pub params: LogGaborParams,
    height: usize,
    width: usize,
    filters: Vec<LogGaborFilter>,
    fft_h: Arc<dyn Fft<f64>>,
    fft_w: Arc<dyn Fft<f64>>,
    ifft_h: Arc<dyn Fft<f64>>,
    ifft_w: Arc<dyn Fft<f64>>,
}

/// Signed frequency of FFT bin `i` out of `n`, in cycles per sample.
fn bin_frequency(i: usize, n: usize) -> f64 {
    if i < n.div_ceil(2) {
        i as f64 / n as f64
    } else {
        i as f64 / n as f64 - 1.0
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

pub fn make_log_gabor_bank(image_hw: (usize, usize), params: &LogGaborParams) -> Result<LogGaborBank, GaborError> {
    let (h, w) = image_hw;
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(GaborError::InvalidParams(format!("image shape {h}x{w} must be even-sized")));
    }
    if params.scales == 0 || params.orientations == 0 || params.pool == 0 {
        return Err(GaborError::InvalidParams("scales, orientations and pool must be positive".into()));
    }
    if !(params.sigma_ratio > 0.0 && params.sigma_ratio < 1.0 && params.sigma_theta > 0.0) {
        return Err(GaborError::InvalidParams(format!(
            "bandwidth ratio {} and angular spread {} out of range",
            params.sigma_ratio, params.sigma_theta
        )));
    }
    let log_ratio_sq = 2.0 * params.sigma_ratio.ln().powi(2);
    let angle_sq = 2.0 * params.sigma_theta.powi(2);
    let mut filters = Vec::with_capacity(params.scales * params.orientations);
    for s in 0..params.scales {
        let fs = params.center_frequency(s);
        if !(fs > 0.0 && fs < 0.5) {
            return Err(GaborError::InvalidParams(format!("centre frequency {fs} outside (0, 0.5)")));
        }
        for o in 0..params.orientations {
            let theta_o = params.orientation_angle(o);
            let mut transfer = vec![0.0; h * w];
            for v in 0..h {
                let fy = bin_frequency(v, h);
                for u in 0..w {
                    let fx = bin_frequency(u, w);
                    let f = (fx * fx + fy * fy).sqrt();
                    if f == 0.0 {
                        continue;
                    }
                    let radial = (-(f / fs).ln().powi(2) / log_ratio_sq).exp();
                    let d = wrap_angle(fy.atan2(fx) - theta_o);
                    transfer[v * w + u] = radial * (-(d * d) / angle_sq).exp();
                }
            }
            filters.push(LogGaborFilter { scale: s, orientation: o, transfer });
        }
    }
    let mut planner = FftPlanner::new();
    Ok(LogGaborBank {
        params: params.clone(),
        height: h,
        width: w,
        filters,
        fft_h: planner.plan_fft_forward(h),
        fft_w: planner.plan_fft_forward(w),
        ifft_h: planner.plan_fft_inverse(h),
        ifft_w: planner.plan_fft_inverse(w),
    })
}

impl LogGaborBank {
    pub fn filters(&self) -> &[LogGaborFilter] {
        &self.filters
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn feature_len(&self) -> usize {
        let p = self.params.pool;
        self.filters.len() * (self.height / p) * (self.width / p)
    }

    /// In-place 2-D transform; the inverse is scaled by `1 / (h w)`.
    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (row_fft, col_fft) = if inverse { (&self.ifft_w, &self.ifft_h) } else { (&self.fft_w, &self.fft_h) };
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        let mut col = vec![Complex64::default(); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        if inverse {
            let scale = 1.0 / (h * w) as f64;
            for v in buf.iter_mut() {
                *v *= scale;
            }
        }
    }

    fn check(&self, image: &Image) -> Result<(), GaborError> {
        let got = (image.height(), image.width());
        if got != (self.height, self.width) {
            return Err(GaborError::ShapeMismatch { expected: (self.height, self.width), got });
        }
        Ok(())
    }

    /// Complex circular-convolution response of every filter.
    pub fn responses(&self, image: &Image) -> Result<Vec<Vec<Complex64>>, GaborError> {
        self.check(image)?;
        let mut spectrum: Vec<Complex64> = image.pixels().iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        self.fft2(&mut spectrum, false);
        Ok(self
            .filters
            .iter()
            .map(|f| {
                let mut buf: Vec<Complex64> = spectrum.iter().zip(&f.transfer).map(|(s, &g)| s * g).collect();
                self.fft2(&mut buf, true);
                buf
            })
            .collect())
    }

    /// Spatial kernel of filter `i`: the inverse transform of its transfer
    /// function.
    pub fn spatial_kernel(&self, i: usize) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = self.filters[i].transfer.iter().map(|&g| Complex64::new(g, 0.0)).collect();
        self.fft2(&mut buf, true);
        buf
    }

    /// Direct circular convolution with the spatial kernel of filter `i`.
    pub fn response_naive(&self, image: &Image, i: usize) -> Result<Vec<Complex64>, GaborError> {
        self.check(image)?;
        let (h, w) = (self.height, self.width);
        let k = self.spatial_kernel(i);
        let px = image.pixels();
        let mut out = vec![Complex64::default(); h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = Complex64::default();
                for a in 0..h {
                    for b in 0..w {
                        acc += k[((y + h - a) % h) * w + (x + w - b) % w] * px[a * w + b] as f64;
                    }
                }
                out[y * w + x] = acc;
            }
        }
        Ok(out)
    }
}

/// Average of non-overlapping `p x p` windows; partial windows are dropped.
pub fn avg_pool(values: &[f64], h: usize, w: usize, p: usize) -> Vec<f64> {
    let (oh, ow) = (h / p, w / p);
    let inv = 1.0 / (p * p) as f64;
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for y in oy * p..(oy + 1) * p {
                for x in ox * p..(ox + 1) * p {
                    acc += values[y * w + x];
                }
            }
            out[oy * ow + ox] = acc * inv;
        }
    }
    out
}

/// Pooled response magnitudes of every filter, concatenated in bank order.
pub fn gabor_features(image: &Image, bank: &LogGaborBank) -> Result<Vec<f64>, GaborError> {
    let (h, w) = bank.image_hw();
    let mut out = Vec::with_capacity(bank.feature_len());
    for r in bank.responses(image)? {
        let mag: Vec<f64> = r.iter().map(|c| c.norm()).collect();
        out.extend(avg_pool(&mag, h, w, bank.params.pool));
    }
    Ok(out)
}

/// Features of many images, computed in parallel, in input order.
pub fn gabor_features_batch(images: &[&Image], bank: &LogGaborBank) -> Result<Vec<Vec<f64>>, GaborError> {
    images.par_iter().map(|img| gabor_features(img, bank)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig { l2: 1e-3, learning_rate: 0.1, epochs: 60, batch_size: 32, seed: 0 }
    }
}

/// Multinomial logistic regression on z-scored inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub classes: usize,
    pub dim: usize,
    /// `classes x dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Every input column was constant, so only the class priors were
    /// learnt.
    pub degenerate: bool,
}

impl LinearClassifier {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((&v, &m), &s)| (v - m) * s).collect();
        (0..self.classes)
            .map(|c| self.bias[c] + self.weights[c * self.dim..(c + 1) * self.dim].iter().zip(&z).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> ProbabilityVector<f64> {
        softmax(&self.logits(x)).expect("finite logits")
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        self.predict_proba(x).argmax()
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Minimizes mean softmax cross-entropy plus `l2/2 |W|^2` by seeded
/// minibatch gradient descent.
pub fn train_linear_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    config: &LinearConfig,
) -> Result<LinearClassifier, GaborError> {
    let n = features.len();
    if n == 0 || n != labels.len() || classes < 2 {
        return Err(GaborError::InvalidInput(format!("{n} feature rows, {} labels, {classes} classes", labels.len())));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(GaborError::InvalidInput("feature rows differ in length".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(GaborError::LabelOutOfRange { label, classes });
    }
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let mut informative = false;
    for s in scale.iter_mut() {
        if *s > 1e-24 {
            *s = 1.0 / s.sqrt();
            informative = true;
        } else {
            *s = 0.0;
        }
    }
    if !informative {
        log::warn!("every feature column is constant; the classifier only learns class priors");
    }
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(&scale).map(|((&v, &m), &s)| (v - m) * s).collect())
        .collect();

    let mut weights = vec![0.0; classes * dim];
    let mut bias = vec![0.0; classes];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate / (1.0 + epoch as f64 * 0.05);
        for chunk in order.chunks(batch) {
            let mut gw = vec![0.0; classes * dim];
            let mut gb = vec![0.0; classes];
            for &i in chunk {
                let logits: Vec<f64> = (0..classes)
                    .map(|c| bias[c] + weights[c * dim..(c + 1) * dim].iter().zip(&z[i]).map(|(w, v)| w * v).sum::<f64>())
                    .collect();
                let p = softmax(&logits).expect("finite logits").into_vec();
                for c in 0..classes {
                    let d = p[c] - if c == labels[i] { 1.0 } else { 0.0 };
                    gb[c] += d;
                    for (g, v) in gw[c * dim..(c + 1) * dim].iter_mut().zip(&z[i]) {
                        *g += d * v;
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for (w, g) in weights.iter_mut().zip(&gw) {
                *w -= lr * (g * inv + config.l2 * *w);
            }
            for (b, g) in bias.iter_mut().zip(&gb) {
                *b -= lr * g * inv;
            }
        }
    }
    Ok(LinearClassifier { classes, dim, weights, bias, mean, scale, degenerate: !informative })
}

/// Class probabilities of one image under the full baseline.
pub fn predict_baseline(
    image: &Image,
    bank: &LogGaborBank,
    classifier: &LinearClassifier,
) -> Result<ProbabilityVector<f64>, GaborError> {
    let f = gabor_features(image, bank)?;
    if f.len() != classifier.dim {
        return Err(GaborError::InvalidInput(format!("{} features, classifier expects {}", f.len(), classifier.dim)));
    }
    Ok(classifier.predict_proba(&f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bank_has_twenty_four_dc_free_filters() {
        let bank = make_log_gabor_bank((32, 80), &LogGaborParams::default()).unwrap();
        assert_eq!(bank.len(), 24);
        assert!(bank.filters().iter().all(|f| f.transfer[0] == 0.0));
    }

    #[test]
    fn odd_shape_is_rejected() {
        assert!(make_log_gabor_bank((31, 80), &LogGaborParams::default()).is_err());
    }

    #[test]
    fn full_size_feature_length() {
        let bank = make_log_gabor_bank((128, 320), &LogGaborParams::default()).unwrap();
        assert_eq!(bank.feature_len(), 15360);
    }

    #[test]
    fn constant_image_has_zero_features() {
        let bank = make_log_gabor_bank((16, 16), &LogGaborParams::default()).unwrap();
        let img = Image::new(16, 16, vec![0.6; 256]).unwrap();
        let f = gabor_features(&img, &bank).unwrap();
        assert!(f.iter().all(|&v| v.abs() < 1e-12), "{:?}", f.iter().cloned().fold(0.0, f64::max));
    }
}
