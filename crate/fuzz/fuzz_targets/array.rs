#![no_main]

use ductms::io::{decode_array, encode_array};
use libfuzzer_sys::fuzz_target;

// Input layout mirrors the files on disk: sidecar JSON line, then payload.
fuzz_target!(|data: &[u8]| {
    let cut = data.iter().position(|&b| b == b'\n').map_or(data.len(), |i| i + 1);
    let (sidecar, payload) = data.split_at(cut);
    if let Ok((t, units)) = decode_array(sidecar, payload) {
        let (s, p) = encode_array(&t, units);
        assert_eq!(decode_array(&s, &p).expect("round trip"), (t, units));
    }
});
