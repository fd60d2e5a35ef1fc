#![no_main]

use libfuzzer_sys::fuzz_target;
use suap_core::tensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = tensor::decode(data) {
        // anything that decodes must re-encode to the same bytes
        let bytes = tensor::encode(&t).expect("decoded tensor re-encodes");
        assert_eq!(bytes, data);
        let _ = t.to_array3();
    }
});
