#![no_main]

use libfuzzer_sys::fuzz_target;
use propcare::propcare::PropCareModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = PropCareModel::from_json(text);
    }
});
