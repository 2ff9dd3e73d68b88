mod common;

use common::losses::loss_invariants;
use lowshot::loss::{cross_entropy, normalize_sims, similarity_loss, softmax};
use proptest::prelude::*;

#[test]
fn ten_thousand_profiles_respect_the_bounds() {
    let rep = loss_invariants(10_000, 7);
    assert_eq!(rep.out_of_range, 0);
    assert!(rep.max_algebraic_gap < 1e-9, "{rep:?}");
    assert!(rep.max_sum_gap < 1e-6, "{rep:?}");
    assert!(rep.max_shift_gap < 1e-6, "{rep:?}");
    assert_eq!(rep.perfect_ce, 0.0);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..30)) {
        let p = softmax(&logits).unwrap();
        prop_assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_ignores_shifts(logits in prop::collection::vec(-20.0f64..20.0, 2..16), c in -500.0f64..500.0) {
        let p = softmax(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.values().iter().zip(q.values()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_loss_bounds(sims in prop::collection::vec(-1.0f64..=1.0, 2..24), pick in any::<prop::sample::Index>()) {
        let label = pick.index(sims.len());
        let l = similarity_loss(&normalize_sims(&sims).unwrap(), label).unwrap();
        prop_assert!(l > -1.0 && l < 1.0 / (sims.len() - 1) as f64);
    }

    #[test]
    fn raising_the_label_similarity_lowers_the_loss(
        sims in prop::collection::vec(-1.0f64..0.5, 2..12),
        pick in any::<prop::sample::Index>(),
        bump in 0.01f64..0.5,
    ) {
        let label = pick.index(sims.len());
        let before = similarity_loss(&normalize_sims(&sims).unwrap(), label).unwrap();
        let mut raised = sims.clone();
        raised[label] += bump;
        let after = similarity_loss(&normalize_sims(&raised).unwrap(), label).unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn cross_entropy_is_non_negative(logits in prop::collection::vec(-40.0f64..40.0, 1..20), pick in any::<prop::sample::Index>()) {
        let p = softmax(&logits).unwrap();
        let ce = cross_entropy(&p, pick.index(logits.len())).unwrap();
        prop_assert!(ce >= 0.0);
    }
}
