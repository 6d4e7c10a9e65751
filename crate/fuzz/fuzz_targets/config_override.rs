#![no_main]

use libfuzzer_sys::fuzz_target;
use stpr_core::runconfig::RunConfig;

// One `key=value` override per line, applied to the default config.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut cfg = RunConfig::default();
    for line in text.lines() {
        if cfg.apply_override(line).is_err() {
            return;
        }
    }
    let _ = cfg.validate();
});
