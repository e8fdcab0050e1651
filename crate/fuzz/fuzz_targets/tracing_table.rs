#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = echoguide_core::ingest::parse_tracing_table(data);
});
