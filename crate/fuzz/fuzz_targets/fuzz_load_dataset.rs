//! Drives the binary dataset decoder with arbitrary bytes. Accepted inputs
//! must survive an encode/decode round trip unchanged.

#![no_main]

use cbet::playdata::{decode_dataset, encode_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = decode_dataset(data) {
        let bytes = encode_dataset(&ds);
        let again = decode_dataset(&bytes).expect("re-encoded dataset must decode");
        assert_eq!(again, ds);
    }
});
