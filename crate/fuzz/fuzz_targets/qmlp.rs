#![no_main]

use libfuzzer_sys::fuzz_target;
use qdetect_core::polymlp::PolyMlpModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = PolyMlpModel::from_bytes(data) {
        let bytes = m.to_bytes();
        let again = PolyMlpModel::from_bytes(&bytes).expect("serialized model parses");
        assert_eq!(again.to_bytes(), bytes);
    }
});
