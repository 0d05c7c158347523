#![no_main]

use libfuzzer_sys::fuzz_target;
use lidar_uda::snapshot::{decode_snapshot, encode_snapshot};

fuzz_target!(|data: &[u8]| {
    if let Ok(snapshot) = decode_snapshot(data) {
        let bytes = encode_snapshot(&snapshot).expect("decoded snapshot encodes");
        assert_eq!(decode_snapshot(&bytes).expect("round trip"), snapshot);
    }
});
