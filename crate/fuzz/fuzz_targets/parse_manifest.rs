#![no_main]

use libfuzzer_sys::fuzz_target;
use lidar_uda::dataset::decode_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(manifest) = decode_manifest(text) {
            assert_eq!(decode_manifest(&manifest.to_text()).expect("round trip"), manifest);
        }
    }
});
