#![no_main]

use libfuzzer_sys::fuzz_target;
use qdetect_core::eval::ResultRecord;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(r) = ResultRecord::from_toml_str(text) {
            let again = ResultRecord::from_toml_str(&r.to_toml()).expect("reparse");
            assert_eq!(again.to_toml(), r.to_toml());
        }
    }
});
