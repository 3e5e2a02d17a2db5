#![no_main]

use libfuzzer_sys::fuzz_target;
use qdetect_core::dataset::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::from_bytes(data) {
        let bytes = ds.to_bytes().expect("parsed dataset serializes");
        let again = Dataset::from_bytes(&bytes).expect("serialized dataset parses");
        assert_eq!(again.to_bytes().unwrap(), bytes);
    }
});
