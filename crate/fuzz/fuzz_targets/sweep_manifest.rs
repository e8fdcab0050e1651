#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = echoguide_core::ingest::parse_sweep_manifest_str(text) {
            let json = echoguide_core::ingest::serialize_sweep_manifest(&entries).unwrap();
            assert_eq!(echoguide_core::ingest::parse_sweep_manifest_str(&json).unwrap(), entries);
        }
    }
});
