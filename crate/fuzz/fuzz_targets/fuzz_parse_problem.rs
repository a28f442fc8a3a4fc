//! Fuzz the problem-file parser.
//!
//! The parser must reject malformed input with a positioned error and never
//! panic, whatever the bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ot_admm::io::parse_problem_str(text);
    }
});
