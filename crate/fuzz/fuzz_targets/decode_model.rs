#![no_main]

use libfuzzer_sys::fuzz_target;
use lhc_core::checkpoint::{decode_model, encode_model};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_model(data) {
        // Anything accepted must re-encode to a stable byte stream.
        let bytes = encode_model(&model);
        let again = decode_model(&bytes).expect("re-decode");
        assert_eq!(encode_model(&again), bytes);
    }
});
