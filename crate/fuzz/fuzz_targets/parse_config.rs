#![no_main]

use libfuzzer_sys::fuzz_target;
use lidar_uda::config::Config;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = Config::from_text(text) {
            let again = Config::from_text(&config.to_text()).expect("echo parses");
            assert_eq!(again.hash(), config.hash());
        }
    }
});
