#![no_main]

use libfuzzer_sys::fuzz_target;
use vmf_core::model::{checkpoint, Model};

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = checkpoint::decode(data) {
        // Anything that decodes must re-encode to the same bytes.
        let again = checkpoint::encode(&entries).expect("decoded entries encode");
        assert_eq!(again, data);
    }
    if let Ok(model) = Model::<f32>::from_bytes(data) {
        let bytes = model.to_bytes().expect("loaded model encodes");
        assert_eq!(bytes.len(), model.checkpoint_len());
    }
});
