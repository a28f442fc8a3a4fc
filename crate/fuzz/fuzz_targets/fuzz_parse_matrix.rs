//! Fuzz the cost-matrix CSV parser used by the sinkhorn subcommand.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ot_admm::io::parse_matrix_str(text);
    }
});
