#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(msg) = echoguide_core::protocol::parse_client_message(text) {
            let json = serde_json::to_string(&msg).unwrap();
            assert_eq!(echoguide_core::protocol::parse_client_message(&json).unwrap(), msg);
        }
    }
});
