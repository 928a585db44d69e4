#![no_main]
use libfuzzer_sys::fuzz_target;
use vlf_core::net::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok((params, extra)) = decode_checkpoint(data) {
        assert!(params.is_finite());
        let again = encode_checkpoint(&params, &extra).unwrap();
        decode_checkpoint(&again).unwrap();
    }
});
