#![no_main]

use libfuzzer_sys::fuzz_target;
use lhc_core::data::parse_cifar10;

fuzz_target!(|data: &[u8]| {
    let cap = data.first().map(|&b| b as usize % 4);
    for cap in [None, cap] {
        if let Ok(ds) = parse_cifar10(data, cap) {
            assert!(ds.labels().iter().all(|&l| l < 10));
            assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
});
