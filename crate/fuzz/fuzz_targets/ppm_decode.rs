#![no_main]

use libfuzzer_sys::fuzz_target;
use qfm_core::data::ppm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = ppm::decode(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bytes = ppm::encode(&img).expect("re-encode");
        let back = ppm::decode(&bytes).expect("decode re-encoded");
        assert_eq!(back.shape(), img.shape());
    }
});
