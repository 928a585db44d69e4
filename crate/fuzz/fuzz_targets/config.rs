#![no_main]
use libfuzzer_sys::fuzz_target;
use vlf_cli::config::{parse_config, Overrides};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config(text, &Overrides::default(), None) {
            let manifest = cfg.manifest().unwrap();
            assert_eq!(parse_config(&manifest, &Overrides::default(), None).unwrap(), cfg);
        }
    }
});
