#![no_main]

use libfuzzer_sys::fuzz_target;
use lidar_uda::trainer::parse_pl_labels;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_pl_labels(text);
    }
});
