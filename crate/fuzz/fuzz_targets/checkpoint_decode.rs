#![no_main]

use libfuzzer_sys::fuzz_target;
use qfm_tensor::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = checkpoint::decode(data) {
        // anything that decodes must survive a round trip unchanged
        let bytes = checkpoint::encode(&ck.params, &ck.meta).expect("re-encode");
        let again = checkpoint::decode(&bytes).expect("decode re-encoded");
        assert_eq!(again.meta, ck.meta);
        assert_eq!(again.params.len(), ck.params.len());
    }
    let _ = qfm_core::Model::from_checkpoint_bytes(data);
});
