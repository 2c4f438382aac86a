use hyperad::feature_io::{
    generate_synthetic_task, load_manifest, read_feature_grid, read_mask, read_prompt_bank,
    write_feature_grid, write_mask, FeatureGrid, MaskGrid, SynthConfig, Task, HELDOUT_MANIFEST,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = FeatureGrid<f32>> {
    (1usize..5, 1usize..5, 1usize..7, any::<bool>()).prop_flat_map(|(h, w, d, with_global)| {
        (
            proptest::collection::vec(-1e3f32..1e3, h * w * d),
            proptest::collection::vec(-1e3f32..1e3, d),
        )
            .prop_map(move |(tokens, global)| {
                let tokens = Array2::from_shape_vec((h * w, d), tokens).unwrap();
                let global = with_global.then(|| Array1::from(global));
                FeatureGrid::new(tokens, h, w, global).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_grid_round_trips(grid in grid_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.h2vf");
        write_feature_grid(&grid, &path).unwrap();
        let back: FeatureGrid<f32> = read_feature_grid(&path).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn mask_round_trips(h in 1usize..9, w in 1usize..9, bits in proptest::collection::vec(0u8..2, 64)) {
        let values = Array2::from_shape_fn((h, w), |(y, x)| bits[(y * w + x) % bits.len()]);
        let mask = MaskGrid::new(values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.h2vm");
        write_mask(&mask, &path).unwrap();
        prop_assert_eq!(read_mask(&path).unwrap(), mask);
    }
}

fn task_bytes(seed: u64, cfg: &SynthConfig) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_task(cfg, seed, dir.path()).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn generator_is_deterministic_per_seed() {
    let cfg = SynthConfig {
        n_query: 4,
        n_heldout: 2,
        ..SynthConfig::default()
    };
    let a = task_bytes(11, &cfg);
    assert_eq!(a, task_bytes(11, &cfg));
    let b = task_bytes(12, &cfg);
    let support = |files: &[(String, Vec<u8>)]| {
        files
            .iter()
            .find(|(n, _)| n == "support_000.h2vf")
            .unwrap()
            .1
            .clone()
    };
    assert_ne!(support(&a), support(&b));
}

#[test]
fn masks_cover_exactly_the_shifted_patches() {
    // Without noise every token is `u` or `u + shift·v`, and the abnormal
    // templates equal `v`, so the shifted patches can be read off directly.
    let cfg = SynthConfig {
        n_query: 12,
        n_heldout: 6,
        noise: 0.0,
        template_noise: 0.0,
        h_p: 6,
        w_p: 5,
        resolution: Some((18, 25)),
        ..SynthConfig::default()
    };
    for seed in 0..4 {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_task(&cfg, seed, dir.path()).unwrap();
        let (bank, _) = read_prompt_bank::<f64>(&dir.path().join("prompts.h2vf")).unwrap();
        let v = bank.abnormal().row(0).to_owned();
        for name in ["manifest.json", HELDOUT_MANIFEST] {
            let m = load_manifest(&dir.path().join(name)).unwrap();
            let task = Task::<f64>::load(&m).unwrap();
            let mut seen_anomalous = false;
            for (q, entry) in task.queries.iter().zip(&m.queries) {
                let mask = q.mask.as_ref().unwrap();
                let (h, w) = mask.shape();
                let shifted: Vec<bool> = q
                    .grid
                    .tokens()
                    .rows()
                    .into_iter()
                    .map(|t| t.dot(&v) > 0.5)
                    .collect();
                for ((y, x), &px) in mask.values().indexed_iter() {
                    let node = (y * cfg.h_p / h) * cfg.w_p + x * cfg.w_p / w;
                    assert_eq!(px == 1, shifted[node], "seed {seed} pixel ({y}, {x})");
                }
                assert_eq!(entry.image_label, u8::from(!mask.is_empty()));
                assert_eq!(q.label, entry.image_label);
                seen_anomalous |= q.label == 1;
            }
            assert!(seen_anomalous);
        }
    }
}
