mod common;

use common::{check_spectrum, random_instance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fuzzed_laplacians_are_symmetric_psd_and_contractive() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst = (0.0f64, f64::INFINITY, 0.0f64);
    for case in 0..1000 {
        let inst = random_instance(&mut rng, 16, case % 3 == 0);
        let r = check_spectrum(&inst, &mut rng);
        assert!(
            r.asymmetry < 1e-10,
            "case {case}: asymmetry {}",
            r.asymmetry
        );
        assert!(r.min_form >= -1e-8, "case {case}: form {}", r.min_form);
        assert!(r.radius <= 1.0 + 1e-8, "case {case}: radius {}", r.radius);
        worst = (
            worst.0.max(r.asymmetry),
            worst.1.min(r.min_form),
            worst.2.max(r.radius),
        );
    }
    eprintln!(
        "asymmetry {:.2e}  min form {:.3e}  radius {:.12}",
        worst.0, worst.1, worst.2
    );
}
