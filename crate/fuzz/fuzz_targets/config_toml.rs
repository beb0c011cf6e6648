#![no_main]

use libfuzzer_sys::fuzz_target;
use qfm_core::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = TrainConfig::from_toml(text) {
        let back = TrainConfig::from_toml(&cfg.to_toml()).expect("serialized config parses");
        assert_eq!(back, cfg);
    }
});
