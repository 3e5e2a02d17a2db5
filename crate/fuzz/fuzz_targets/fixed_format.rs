#![no_main]

use libfuzzer_sys::fuzz_target;
use qdetect_core::fixedpoint::FixedFormat;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(f) = text.parse::<FixedFormat>() {
            assert_eq!(f.to_string().parse::<FixedFormat>().unwrap(), f);
            assert!(f.fraction_bits() < f.total_bits());
        }
    }
});
