#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = enkbf_lab::fuzzing::parse_config(data);
});
