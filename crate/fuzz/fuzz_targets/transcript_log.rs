#![no_main]
use libfuzzer_sys::fuzz_target;
use vlf_core::protocol::{parse_transcript_log, write_transcript_log};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = parse_transcript_log(text) {
            let again = write_transcript_log(&records).unwrap();
            assert_eq!(parse_transcript_log(&again).unwrap(), records);
        }
    }
});
