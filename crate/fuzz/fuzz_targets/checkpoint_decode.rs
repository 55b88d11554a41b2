#![no_main]

use farskip_core::model::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((model, meta)) = checkpoint::decode(data) {
        // anything that decodes must re-encode and decode to the same model
        let bytes = checkpoint::encode(&model, meta).expect("decoded model re-encodes");
        let (again, _) = checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert!(again.params.bit_eq(&model.params));
    }
});
