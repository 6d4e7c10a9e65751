#![no_main]

use libfuzzer_sys::fuzz_target;
use stpr_core::rundir::{accuracy_matrix_csv, parse_accuracy_matrix};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_accuracy_matrix(text) {
        let csv = accuracy_matrix_csv(&m).expect("parsed matrix re-serializes");
        assert_eq!(parse_accuracy_matrix(&csv).expect("round trip"), m);
    }
});
