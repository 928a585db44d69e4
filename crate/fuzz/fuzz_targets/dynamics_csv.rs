#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = vlf_core::eval::parse_dynamics_csv(data);
});
