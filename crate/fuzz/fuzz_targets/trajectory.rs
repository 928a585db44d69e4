#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(t) = vlf_core::channel::parse_fading_trajectory(text) {
            // a parsed trajectory re-serializes to something parseable
            vlf_core::channel::parse_fading_trajectory(&t.to_text()).unwrap();
        }
    }
});
