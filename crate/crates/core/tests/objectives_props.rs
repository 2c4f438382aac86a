mod common;

use common::{gaussian, unit_rows};
use hyperad::feature_io::MaskGrid;
use hyperad::objectives::{loss_eam, loss_seg, loss_struct, loss_tri, loss_v2t, LossWeights};
use hyperad::reasoning::NodeScores;
use hyperad::semantic::build_repository;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn alignment_terms_are_nonnegative(seed in any::<u64>(), n in 1usize..20, d in 2usize..8, tau in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let repo = build_repository(unit_rows(gaussian(&mut rng, (2, d))), unit_rows(gaussian(&mut rng, (3, d))), 0.2).unwrap();
        let patches = gaussian(&mut rng, (n, d));
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        prop_assert!(loss_v2t(&patches, &labels, &repo, tau).unwrap() >= 0.0);
        prop_assert!(loss_tri(&patches, &labels, &repo, 0.1).unwrap() >= 0.0);
        prop_assert!(loss_eam(&patches, &repo).unwrap() >= 0.0);
    }

    #[test]
    fn seg_term_is_nonnegative(
        h in 1usize..8, w in 1usize..8,
        vals in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0u8..2), 64),
    ) {
        let at = |y: usize, x: usize| vals[(y * w + x) % vals.len()];
        let m_star = Array2::from_shape_fn((h, w), |(y, x)| at(y, x).0);
        let m_txt = Array2::from_shape_fn((h, w), |(y, x)| at(y, x).1);
        let mask = MaskGrid::new(Array2::from_shape_fn((h, w), |(y, x)| at(y, x).2)).unwrap();
        prop_assert!(loss_seg(&m_star, &mask, &m_txt, &LossWeights::default()).unwrap() >= 0.0);
    }

    #[test]
    fn struct_term_is_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_instance(&mut rng, 12, true);
        let hg = inst.graph();
        let n = hg.n_visual();
        let l = hyperad::hypergraph::laplacian(&hg).unwrap();
        let s = gaussian(&mut rng, (n, 1)).column(0).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y: Vec<u8> = (0..n).map(|i| u8::from(s[i] > 0.5)).collect();
        let scores = NodeScores::new(s).unwrap();
        prop_assert!(loss_struct(&scores, &y, &l, &LossWeights::default()).unwrap() >= 0.0);
    }
}

#[test]
fn struct_term_rejects_an_indefinite_operator() {
    let l = ndarray::array![[1.0, 0.0], [0.0, -1.0]];
    let scores = NodeScores::new(Array1::from(vec![0.1, 0.9])).unwrap();
    assert!(loss_struct(&scores, &[0, 1], &l, &LossWeights::default()).is_err());
}

#[test]
fn perfect_masks_leave_only_the_focal_floor() {
    // a map equal to the mask scores dice 0 and no background penalty
    let mask = MaskGrid::new(ndarray::array![[0, 1], [1, 0]]).unwrap();
    let m_star: Array2<f64> = ndarray::array![[0.0, 1.0], [1.0, 0.0]];
    let loss = loss_seg(&m_star, &mask, &m_star, &LossWeights::default()).unwrap();
    assert!(loss.abs() < 1e-6, "{loss}");
}
