#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = echoguide_core::frame::decode_png(data) {
        let png = echoguide_core::frame::encode_png(&frame).unwrap();
        let again = echoguide_core::frame::decode_png(&png).unwrap();
        assert_eq!(again.to_u8(), frame.to_u8());
    }
});
