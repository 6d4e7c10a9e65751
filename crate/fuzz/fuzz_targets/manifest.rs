#![no_main]

use libfuzzer_sys::fuzz_target;
use stpr_core::rundir::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::parse(text) {
        let again = Manifest::parse(&m.to_json()).expect("re-serialized manifest parses");
        assert_eq!(again.config_hash, m.config_hash);
    }
});
