#![no_main]

use libfuzzer_sys::fuzz_target;
use lhc_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text, &[]) {
        // Display output must parse back to the same config.
        let again = RunConfig::parse(&cfg.to_string(), &[]).expect("re-parse");
        assert_eq!(again.to_string(), cfg.to_string());
    }
});
