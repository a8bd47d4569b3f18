#![no_main]

use jigmil::data::parse_csv_bag;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((centroids, features)) = parse_csv_bag(data, None) {
        assert_eq!(centroids.len(), features.rows());
        assert!(features.data().iter().all(|v| v.is_finite()));
    }
});
