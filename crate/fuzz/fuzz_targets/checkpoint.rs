#![no_main]

use libfuzzer_sys::fuzz_target;
use tensor::ParamStore;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = ParamStore::from_bytes(data) {
        // Whatever decodes must re-encode to an equivalent store.
        let again = ParamStore::from_bytes(&store.to_bytes()).expect("re-encoded checkpoint decodes");
        assert_eq!(again, store);
    }
});
