#![no_main]

use libfuzzer_sys::fuzz_target;
use lhc_core::checkpoint::{decode_layer_segment, encode_layer_segment};

fuzz_target!(|data: &[u8]| {
    if let Ok(seg) = decode_layer_segment(data) {
        if let Ok(layer) = seg.into_layer(1, 1) {
            let _ = layer.topology_masks();
            let mut out = Vec::new();
            encode_layer_segment(&layer, &mut out);
            decode_layer_segment(&out).expect("re-decode");
        }
    }
});
