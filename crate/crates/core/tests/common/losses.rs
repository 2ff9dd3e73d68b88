//! Value-level loss invariants over random inputs.

use lowshot::loss::{cosine_sim, cross_entropy, normalize_sims, similarity_loss, softmax};
use rand::Rng;

use super::rng;

#[derive(Debug, Default)]
pub struct LossReport {
    pub profiles: usize,
    /// Violations of `-1 < L_S < 1/(l_s - 1)`.
    pub out_of_range: usize,
    /// Largest `|L_S - (-SIM_y + (1 - SIM_y)/(l_s - 1))|`.
    pub max_algebraic_gap: f64,
    /// Largest `|sum softmax - 1|`.
    pub max_sum_gap: f64,
    /// Largest change of a softmax entry under a constant logit shift.
    pub max_shift_gap: f64,
    pub perfect_ce: f64,
}

/// Draws `profiles` similarity profiles, half from raw cosines in
/// `[-1, 1]` and half from cosines of random feature vectors.
pub fn loss_invariants(profiles: usize, seed: u64) -> LossReport {
    let mut r = rng(seed);
    let mut rep = LossReport { profiles, ..LossReport::default() };
    for i in 0..profiles {
        let l_s = r.gen_range(2..=20);
        let sims: Vec<f64> = if i % 2 == 0 {
            (0..l_s).map(|_| r.gen_range(-1.0..=1.0)).collect()
        } else {
            let d = r.gen_range(2..=16);
            let f: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            (0..l_s)
                .map(|_| {
                    let g: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
                    cosine_sim(&f, &g).unwrap()
                })
                .collect()
        };
        let label = r.gen_range(0..l_s);
        let profile = normalize_sims(&sims).unwrap();
        let ls = similarity_loss(&profile, label).unwrap();
        let upper = 1.0 / (l_s - 1) as f64;
        if !(ls > -1.0 && ls < upper) {
            rep.out_of_range += 1;
        }
        let sy = profile.normalized[label];
        rep.max_algebraic_gap = rep.max_algebraic_gap.max((ls - (-sy + (1.0 - sy) / (l_s - 1) as f64)).abs());

        let logits: Vec<f64> = (0..l_s).map(|_| r.gen_range(-30.0..30.0)).collect();
        let p = softmax(&logits).unwrap();
        rep.max_sum_gap = rep.max_sum_gap.max((p.values().iter().sum::<f64>() - 1.0).abs());
        let shift = r.gen_range(-100.0..100.0);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.values().iter().zip(q.values()) {
            rep.max_shift_gap = rep.max_shift_gap.max((a - b).abs());
        }
    }
    let perfect = softmax(&[800.0, 0.0, 0.0, 0.0]).unwrap();
    rep.perfect_ce = cross_entropy(&perfect, 0).unwrap();
    rep
}
