#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use vmfnet::data::Manifest;

fuzz_target!(|data: &[u8]| {
    let _ = Manifest::from_json(data, Path::new("manifest.json"));
});
