mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reductions_hold_exactly() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, ok) in common::reduction_identities(&mut rng) {
            assert!(ok, "seed {seed}: {name}");
        }
    }
}
