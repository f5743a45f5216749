#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((w, h, px)) = vmfnet::data::read_png(data) {
        assert_eq!(px.len(), w * h);
    }
});
