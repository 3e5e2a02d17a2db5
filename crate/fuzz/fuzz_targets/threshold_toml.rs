#![no_main]

use libfuzzer_sys::fuzz_target;
use qdetect_core::threshold::ThresholdModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = ThresholdModel::from_toml_str(text) {
            let again = ThresholdModel::from_toml_str(&m.to_toml()).expect("reparse");
            assert_eq!(again.to_toml(), m.to_toml());
        }
    }
});
