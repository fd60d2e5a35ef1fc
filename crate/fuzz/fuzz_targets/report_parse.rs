#![no_main]

use libfuzzer_sys::fuzz_target;
use suap_core::report;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = report::parse_report(data) {
        if let Ok(text) = report::report_to_string(&r) {
            assert_eq!(report::parse_report(text.as_bytes()).expect("written report parses"), r);
        }
    }
});
