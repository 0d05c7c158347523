#![no_main]

use libfuzzer_sys::fuzz_target;
use lidar_uda::dataset::{decode_ppm, encode_ppm};

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = decode_ppm(data) {
        let again = decode_ppm(&encode_ppm(&image)).expect("re-encoded image decodes");
        assert_eq!(again, image);
    }
});
