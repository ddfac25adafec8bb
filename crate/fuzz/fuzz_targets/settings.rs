#![no_main]

use libfuzzer_sys::fuzz_target;
use propcare::io;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(settings) = io::parse_settings(text) {
            for s in &settings {
                let _ = s.parse::<f64>();
                let _ = s.parse_bool();
            }
        }
    }
});
