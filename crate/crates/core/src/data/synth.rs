//! Synthetic coarse/fine benchmark.
//!
//! Every coarse class places a bright soft-edged blob layout on a dark
//! canvas; every fine class fills the blob with vertical stripes of its own
//! spatial frequency. Frequencies rise monotonically through the fine
//! classes in hierarchy order, so neighbouring classes are the hardest to
//! tell apart and each coarse range also covers a frequency band. Samples
//! jitter the blob position, stripe phase and frequency, then receive
//! additive Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{ClassHierarchy, DataError, Dataset, Image, LabeledSample};

/// Noise standard deviation at which raw pixels separate the coarse classes
/// but not the fine ones.
pub const DEFAULT_NOISE: f32 = 0.25;

const BACKGROUND: f32 = 0.15;
const BLOB_LEVEL: f32 = 0.45;
const STRIPE_AMPLITUDE: f32 = 0.3;
const EDGE_SOFTNESS: f32 = 0.08;
const LOW_FREQUENCY: f32 = 0.08;
const HIGH_FREQUENCY: f32 = 0.30;
const FREQUENCY_JITTER: f32 = 0.03;
const POSITION_JITTER: f32 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub n_t: usize,
    pub n_s: usize,
    pub image_hw: (usize, usize),
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { n_t: 3000, n_s: 280, image_hw: (32, 80), noise: DEFAULT_NOISE, seed: 0 }
    }
}

/// Everything that determines one noiseless image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleParams {
    pub coarse: usize,
    /// Stripe frequency in cycles per pixel.
    pub frequency: f32,
    pub phase: f32,
    /// Blob offset in pixels.
    pub offset: (f32, f32),
}

/// Ellipses `(cx, cy, rx, ry)` in canvas-relative units.
fn layout(coarse: usize) -> Vec<[f32; 4]> {
    match coarse {
        0 => vec![[0.50, 0.50, 0.30, 0.34]],
        1 => vec![[0.28, 0.50, 0.20, 0.50]],
        2 => vec![[0.72, 0.50, 0.20, 0.50]],
        3 => vec![[0.50, 0.28, 0.42, 0.24]],
        4 => vec![[0.50, 0.72, 0.42, 0.24]],
        5 => vec![[0.18, 0.50, 0.14, 0.36], [0.82, 0.50, 0.14, 0.36]],
        c => {
            let t = (c as f32 * 0.618_034).fract();
            vec![[0.2 + 0.6 * t, 0.5, 0.2, 0.5]]
        }
    }
}

/// Frequency "levels": each fine class gets one, and each coarse class
/// without fine classes gets one of its own, all in hierarchy order.
struct Levels {
    fine: Vec<usize>,
    coarse_only: Vec<Option<usize>>,
    count: usize,
}

impl Levels {
    fn new(h: &ClassHierarchy) -> Self {
        let mut fine = vec![0; h.num_fine()];
        let mut coarse_only = vec![None; h.num_coarse()];
        let mut next = 0;
        for c in 0..h.num_coarse() {
            let fines = h.fines_of(c);
            if fines.is_empty() {
                coarse_only[c] = Some(next);
                next += 1;
            }
            for f in fines {
                fine[f] = next;
                next += 1;
            }
        }
        Levels { fine, coarse_only, count: next }
    }

    fn frequency(&self, level: usize) -> f32 {
        let t = if self.count > 1 { level as f32 / (self.count - 1) as f32 } else { 0.0 };
        LOW_FREQUENCY * (HIGH_FREQUENCY / LOW_FREQUENCY).powf(t)
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Draws an image for `params`; `noise = 0` makes it a pure function of
/// `params`.
pub fn render(params: &SampleParams, image_hw: (usize, usize), noise: f32, rng: &mut impl Rng) -> Image {
    let (h, w) = image_hw;
    let ellipses = layout(params.coarse);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise level");
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f32 + 0.5 - params.offset.0, y as f32 + 0.5 - params.offset.1);
            let mask = ellipses
                .iter()
                .map(|&[cx, cy, rx, ry]| {
                    let dx = (px - cx * w as f32) / (rx * w as f32);
                    let dy = (py - cy * h as f32) / (ry * h as f32);
                    sigmoid((1.0 - (dx * dx + dy * dy).sqrt()) / EDGE_SOFTNESS)
                })
                .fold(0.0f32, f32::max);
            let stripe = (std::f32::consts::TAU * params.frequency * x as f32 + params.phase).sin();
            let mut v = BACKGROUND + mask * (BLOB_LEVEL - BACKGROUND + STRIPE_AMPLITUDE * stripe);
            if noise > 0.0 {
                v += normal.sample(rng);
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(h, w, pixels).expect("dimensions match")
}

fn draw_params(coarse: usize, level: usize, levels: &Levels, rng: &mut impl Rng) -> SampleParams {
    let jitter = 1.0 + rng.gen_range(-FREQUENCY_JITTER..=FREQUENCY_JITTER);
    SampleParams {
        coarse,
        frequency: levels.frequency(level) * jitter,
        phase: rng.gen_range(0.0..std::f32::consts::TAU),
        offset: (
            rng.gen_range(-POSITION_JITTER..=POSITION_JITTER),
            rng.gen_range(-POSITION_JITTER..=POSITION_JITTER),
        ),
    }
}

/// Generates `(D_t, D_s)`: `n_t` coarse-only samples balanced over coarse
/// classes, and `n_s` fully labelled samples balanced over fine classes.
/// `D_t` ids run `0..n_t`, `D_s` ids `n_t..n_t + n_s`.
pub fn synth_generate(params: &SynthParams, hierarchy: &ClassHierarchy) -> Result<(Dataset, Dataset), DataError> {
    let (l_t, l_s) = (hierarchy.num_coarse(), hierarchy.num_fine());
    if params.n_s / l_s < 4 {
        return Err(DataError::InvalidArgument(format!(
            "{} fine-labelled samples give fewer than 4 per class over {l_s} classes",
            params.n_s
        )));
    }
    if params.n_t < l_t || params.image_hw.0 == 0 || params.image_hw.1 == 0 || !params.noise.is_finite() {
        return Err(DataError::InvalidArgument(format!("unusable generator parameters {params:?}")));
    }
    let levels = Levels::new(hierarchy);
    let sample_rng = |id: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(id as u64);
        rng
    };
    let coarse_samples: Vec<LabeledSample> = (0..params.n_t)
        .into_par_iter()
        .map(|id| {
            let mut rng = sample_rng(id);
            let coarse = id % l_t;
            let fines = hierarchy.fines_of(coarse);
            let level = match levels.coarse_only[coarse] {
                Some(level) => level,
                None => levels.fine[fines[rng.gen_range(0..fines.len())]],
            };
            let p = draw_params(coarse, level, &levels, &mut rng);
            LabeledSample { id, image: render(&p, params.image_hw, params.noise, &mut rng), coarse, fine: None }
        })
        .collect();
    let fine_samples: Vec<LabeledSample> = (0..params.n_s)
        .into_par_iter()
        .map(|j| {
            let id = params.n_t + j;
            let mut rng = sample_rng(id);
            let fine = j % l_s;
            let coarse = hierarchy.coarse_of(fine).expect("fine class in range");
            let p = draw_params(coarse, levels.fine[fine], &levels, &mut rng);
            LabeledSample { id, image: render(&p, params.image_hw, params.noise, &mut rng), coarse, fine: Some(fine) }
        })
        .collect();
    Ok((
        Dataset::new(hierarchy.clone(), coarse_samples)?,
        Dataset::new(hierarchy.clone(), fine_samples)?,
    ))
}
