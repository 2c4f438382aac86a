mod common;

use common::pairwise_auroc;
use hyperad::metrics::auroc;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_labeling_matches_the_pairwise_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for n in 2..=12usize {
        // few distinct values so ties are common
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..4u8)))
            .collect();
        for bits in 0u32..(1 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos == 0 || pos == n {
                assert!(auroc(&scores, &labels).is_err());
                continue;
            }
            let got = auroc(&scores, &labels).unwrap();
            let want = pairwise_auroc(&scores, &labels);
            assert!(
                (got - want).abs() <= 1e-12,
                "n {n} bits {bits:b}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn constant_scores_give_one_half() {
    for n in 2..40usize {
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
        assert_eq!(auroc(&vec![0.7f64; n], &labels).unwrap(), 0.5);
    }
}

proptest! {
    #[test]
    fn positive_integer_scaling_keeps_auroc(
        raw in proptest::collection::vec((-50i32..50, 0u8..2), 2..60),
        scale in 1i32..1000,
        shift in -1000i32..1000,
    ) {
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| f64::from(s)).collect();
        let labels: Vec<u8> = raw.iter().map(|&(_, l)| l).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let moved: Vec<f64> = scores.iter().map(|s| s * f64::from(scale) + f64::from(shift)).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&moved, &labels).unwrap());
    }

    #[test]
    fn f32_and_f64_agree(raw in proptest::collection::vec((-1.0f32..1.0, 0u8..2), 2..60)) {
        let s32: Vec<f32> = raw.iter().map(|&(s, _)| s).collect();
        let s64: Vec<f64> = s32.iter().map(|&s| f64::from(s)).collect();
        let labels: Vec<u8> = raw.iter().map(|&(_, l)| l).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        prop_assert_eq!(auroc(&s32, &labels).unwrap(), auroc(&s64, &labels).unwrap());
    }
}
