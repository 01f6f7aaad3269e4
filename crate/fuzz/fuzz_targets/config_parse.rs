#![no_main]

use libfuzzer_sys::fuzz_target;
use vmf_core::model::ModelConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ModelConfig::parse(text) {
        let again = ModelConfig::parse(&cfg.to_text()).expect("canonical text parses");
        assert_eq!(again, cfg);
        let _ = cfg.validate();
    }
});
