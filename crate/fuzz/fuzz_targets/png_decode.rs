#![no_main]

use libfuzzer_sys::fuzz_target;
use suap_core::scene;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = scene::decode_png(data) {
        assert!(frame.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
