#![no_main]

use libfuzzer_sys::fuzz_target;

// `--set key=value` overrides go through the same key table as the file
// parser but on a live config; they must never panic either.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mut cfg = fedsim_core::Config::default();
        for pair in text.split('\n') {
            let _ = cfg.apply_override(pair);
        }
        // whatever sequence of overrides was applied, numeric fields stay finite
        let _ = cfg.to_key_values();
    }
});
