mod support;

use support::masking::{mismatches, small_networks};

#[test]
fn weight_zero_enrollment_is_exactly_inert() {
    for (i, cfg) in small_networks().iter().enumerate() {
        assert_eq!(mismatches(cfg, 100 + i as u64, 20), 0, "{}", cfg.kind());
    }
}
