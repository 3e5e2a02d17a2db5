#![no_main]

use libfuzzer_sys::fuzz_target;
use qdetect_core::timingsim::TimingTrace;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(trace) = TimingTrace::from_text(text) {
            let rendered = trace.to_text();
            let again = TimingTrace::from_text(&rendered).expect("reparse");
            assert_eq!(again.to_text(), rendered);
        }
    }
});
