#![no_main]

use libfuzzer_sys::fuzz_target;
use lidar_uda::dataset::decode_points;

fuzz_target!(|data: &[u8]| {
    if let Ok(record) = decode_points(data) {
        assert_eq!(record.points.len(), record.labels.len());
    }
});
