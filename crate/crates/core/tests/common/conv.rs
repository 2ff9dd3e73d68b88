//! Randomized optimized-vs-direct convolution cases.

use lowshot::nn::{conv2d, conv2d_naive, ConvLayerSpec};
use lowshot::Tape;
use rand::Rng;

use super::{random_tensor, rng};

#[derive(Clone, Copy, Debug)]
pub struct ConvCase {
    pub batch: usize,
    pub spec: ConvLayerSpec,
    pub hw: (usize, usize),
    pub bias: bool,
}

/// Channels up to 8, spatial up to 16, strides {1, 2}, paddings {0, 1},
/// kernels 1 to 3.
pub fn random_cases(count: usize, seed: u64) -> Vec<ConvCase> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let k = r.gen_range(1..=3);
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=1);
        let hw = (r.gen_range(1..=16), r.gen_range(1..=16));
        if hw.0 + 2 * pad < k || hw.1 + 2 * pad < k {
            continue;
        }
        let spec = ConvLayerSpec::new(r.gen_range(1..=8), r.gen_range(1..=8), k, stride, pad);
        out.push(ConvCase { batch: r.gen_range(1..=3), spec, hw, bias: r.gen_bool(0.5) });
    }
    out
}

/// `None` when the tape convolution equals the direct loops bit for bit.
pub fn mismatch(case: &ConvCase, seed: u64) -> Option<String> {
    let s = case.spec;
    let mut r = rng(seed);
    let x = random_tensor(&[case.batch, s.in_channels, case.hw.0, case.hw.1], &mut r);
    let w = random_tensor(&s.weight_shape(), &mut r);
    let b = case.bias.then(|| random_tensor(&[s.out_channels], &mut r));
    let expected = conv2d_naive(&x, &s, &w, b.as_ref()).unwrap();
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x), tape.constant(w));
    let bv = b.map(|b| tape.constant(b));
    let y = conv2d(&mut tape, xv, &s, wv, bv).unwrap();
    let got = tape.value(y);
    if got.shape() != expected.shape() {
        return Some(format!("{case:?}: shape {:?} vs {:?}", got.shape(), expected.shape()));
    }
    let bad = got.data().iter().zip(expected.data()).position(|(a, b)| a.to_bits() != b.to_bits());
    bad.map(|i| format!("{case:?}: element {i} differs ({} vs {})", got.data()[i], expected.data()[i]))
}
