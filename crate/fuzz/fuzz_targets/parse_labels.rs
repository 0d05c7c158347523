#![no_main]

use libfuzzer_sys::fuzz_target;
use lidar_uda::dataset::{decode_labels, encode_labels};

fuzz_target!(|data: &[u8]| {
    if data.len() < 3 {
        return;
    }
    let (h, w, c) = (data[0] as usize % 17, data[1] as usize % 17, data[2] as usize % 12);
    if let Ok(labels) = decode_labels(&data[3..], h, w, c) {
        assert_eq!(encode_labels(&labels), &data[3..]);
    }
});
