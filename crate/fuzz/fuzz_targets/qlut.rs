#![no_main]

use libfuzzer_sys::fuzz_target;
use qdetect_core::polymlp::LutNetwork;

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = LutNetwork::from_bytes(data) {
        let bytes = net.to_bytes();
        let again = LutNetwork::from_bytes(&bytes).expect("serialized network parses");
        assert_eq!(again.to_bytes(), bytes);
        let _ = net.netlist();
        let zeros = vec![0u16; net.n_inputs];
        let _ = net.eval_lut(&zeros);
    }
});
