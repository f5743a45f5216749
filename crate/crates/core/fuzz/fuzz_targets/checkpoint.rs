#![no_main]

use libfuzzer_sys::fuzz_target;
use vmfnet::checkpoint::ModelState;

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = ModelState::<f32>::from_bytes(data) {
        // Anything accepted must survive a round trip unchanged.
        let bytes = state.to_bytes();
        assert_eq!(ModelState::<f32>::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
});
