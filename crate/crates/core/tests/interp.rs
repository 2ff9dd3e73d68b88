mod common;

use common::interp::{pseudo_saliency, test_images};
use lowshot::data::Image;
use lowshot::gabor::{make_log_gabor_bank, LogGaborParams};
use lowshot::interp::{generate_gem, generate_masked_gem, saliency, saliency_mask, LinearModel};
use lowshot::nn::ClassifierHead;
use lowshot::Tensor;
use proptest::prelude::*;

#[test]
fn linear_saliency_is_the_weight_row() {
    for seed in 0..5 {
        let gap = common::interp::linear_saliency_gap(seed);
        assert!(gap <= 1e-12, "seed {seed}: {gap}");
    }
}

#[test]
fn gem_oracles() {
    let rep = common::interp::interp_oracles();
    assert!(rep.masked_q0_identical);
    assert!(rep.gems_in_unit_range);
}

#[test]
fn gems_reach_both_ends_of_the_range() {
    let (images, predicted) = test_images();
    let refs: Vec<&Image> = images.iter().collect();
    let sal = pseudo_saliency(&images);
    for c in 0..4 {
        for g in [generate_gem(&refs, &predicted, c).unwrap(), generate_masked_gem(&refs, &predicted, &sal, c, 70.0).unwrap()] {
            assert_eq!(g.values.iter().copied().fold(0.0, f64::max), 1.0);
            assert_eq!(g.values.iter().copied().fold(1.0, f64::min), 0.0);
        }
    }
}

#[test]
fn out_of_range_class_is_an_error() {
    let mut rng = common::rng(1);
    let model = LinearModel { head: ClassifierHead::<f64>::from_weights(common::random_tensor(&[2, 6], &mut rng), Tensor::zeros(&[2])).unwrap(), input_hw: (2, 3) };
    assert!(saliency(&model, &common::random_tensor(&[2, 3], &mut rng), 2).is_err());
}

#[test]
fn percentile_must_be_below_one_hundred() {
    assert!(saliency_mask(&[1.0, 2.0], 100.0).is_err());
    assert!(saliency_mask(&[1.0, 2.0], -1.0).is_err());
}

#[test]
fn gabor_bank_has_twenty_four_dc_free_filters() {
    let bank = make_log_gabor_bank((32, 80), &LogGaborParams::default()).unwrap();
    assert_eq!(bank.len(), 24);
    let mut seen = Vec::new();
    for f in bank.filters() {
        assert_eq!(f.transfer[0], 0.0);
        assert!(f.transfer.iter().all(|&v| v >= 0.0));
        seen.push((f.scale, f.orientation));
    }
    seen.dedup();
    assert_eq!(seen.len(), 24);
}

proptest! {
    #[test]
    fn mask_keeps_at_least_the_upper_share(values in prop::collection::vec(0.0f64..1.0, 1..60), q in 0.0f64..99.9) {
        let mask = saliency_mask(&values, q).unwrap();
        let kept = mask.iter().filter(|&&m| m).count();
        prop_assert!(kept as f64 >= (1.0 - q / 100.0) * values.len() as f64 - 1.0);
        let min_kept = values.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        for (v, m) in values.iter().zip(&mask) {
            if !m {
                prop_assert!(*v < min_kept);
            }
        }
    }

    #[test]
    fn linear_saliency_ignores_the_image(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let weight = common::random_tensor(&[2, 6], &mut rng);
        let model = LinearModel { head: ClassifierHead::<f64>::from_weights(weight, Tensor::zeros(&[2])).unwrap(), input_hw: (2, 3) };
        let a = saliency(&model, &common::random_tensor(&[2, 3], &mut rng), 1).unwrap();
        let b = saliency(&model, &common::random_tensor(&[2, 3], &mut rng), 1).unwrap();
        prop_assert_eq!(a.gradient, b.gradient);
    }
}
