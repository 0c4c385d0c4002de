#![no_main]

use libfuzzer_sys::fuzz_target;

// The config parser must never panic on any input; it either produces a
// validated Config or an error naming the offending key.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        match fedsim_core::Config::parse_str(text) {
            Ok(cfg) => {
                // a parsed config always re-validates and round-trips its keys
                assert!(cfg.validate().is_ok());
                let _ = cfg.to_key_values();
            }
            Err(err) => {
                let _ = err.to_string();
            }
        }
    }
});
