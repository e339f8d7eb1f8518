#![no_main]

use ductms::training::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Manifest::parse(data) {
        assert_eq!(Manifest::parse(m.to_json().as_bytes()).expect("re-parse"), m);
    }
});
