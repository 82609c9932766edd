mod oracles;

use oracles::{grad_instance, max_gradient_error};

#[test]
fn backprop_matches_central_differences() {
    for smoothing in [0.0, 0.1] {
        for seed in 0..20 {
            let inst = grad_instance(seed, smoothing);
            let err = max_gradient_error(&inst, 1e-3, 1e-6);
            assert!(err <= 1e-3, "seed {seed} smoothing {smoothing}: relative error {err:e}");
        }
    }
}
