#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use qfm_core::data::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = parse_manifest(text, Path::new("/nonexistent"), "fuzz.csv") {
        if let Some((lo, hi)) = m.meta.label_range {
            for y in m.samples.iter().filter_map(|s| s.score) {
                assert!(lo <= y && y <= hi);
            }
        }
    }
});
