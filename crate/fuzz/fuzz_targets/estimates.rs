#![no_main]

use libfuzzer_sys::fuzz_target;
use propcare::io;

fuzz_target!(|data: &[u8]| {
    let _ = io::read_estimates_any(data);
});
