#![no_main]

use libfuzzer_sys::fuzz_target;
use propcare::nn::DenseNet;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = DenseNet::from_json(text);
    }
});
