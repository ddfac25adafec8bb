#![no_main]

use libfuzzer_sys::fuzz_target;
use propcare::io;

fuzz_target!(|data: &[u8]| {
    if let [u, i, rest @ ..] = data {
        let _ = io::read_rankings(rest, usize::from(*u % 16), usize::from(*i % 16));
    }
});
