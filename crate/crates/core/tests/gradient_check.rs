//! Hand-written backward passes against central finite differences.

mod support;

use deltafix_core::change_builder::Variant;
use deltafix_core::encoder::EncoderConfig;
use support::gradcheck::worst_relative_error;

#[test]
fn backward_matches_finite_differences_for_every_variant() {
    let cfg = EncoderConfig {
        vocab_size: 20,
        dim: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        max_len: 16,
    };
    for variant in Variant::ALL {
        for seed in 0..2 {
            let w = worst_relative_error(variant, cfg, seed, 1e-5, 1e-6);
            assert!(w.rel <= 1e-4, "{variant} seed {seed}: {:e} at {}", w.rel, w.at);
        }
    }
}
