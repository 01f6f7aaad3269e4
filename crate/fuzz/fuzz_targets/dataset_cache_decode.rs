#![no_main]

use libfuzzer_sys::fuzz_target;
use vmf_core::harness::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = Dataset::from_bytes(data) {
        let bytes = d.to_bytes().expect("loaded dataset encodes");
        let again = Dataset::from_bytes(&bytes).expect("re-encoded dataset decodes");
        assert_eq!(again.labels, d.labels);
        assert_eq!(again.clips, d.clips);
    }
});
