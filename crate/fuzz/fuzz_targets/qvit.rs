#![no_main]

use libfuzzer_sys::fuzz_target;
use qdetect_core::vit::{AnyVitModel, FixedVitModel, VitModel};

fuzz_target!(|data: &[u8]| {
    match AnyVitModel::from_bytes(data) {
        Ok(AnyVitModel::Float(m)) => {
            let bytes = m.to_bytes();
            assert_eq!(VitModel::from_bytes(&bytes).expect("reparse").to_bytes(), bytes);
        }
        Ok(AnyVitModel::Fixed(m)) => {
            let bytes = m.to_bytes();
            assert_eq!(FixedVitModel::from_bytes(&bytes).expect("reparse").to_bytes(), bytes);
        }
        Err(_) => {}
    }
});
