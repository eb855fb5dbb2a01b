//! Drives the checkpoint decoder with arbitrary bytes. Accepted inputs must
//! re-encode into something the decoder accepts again.

#![no_main]

use cbet::nn::checkpoint::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ckpt);
        decode_checkpoint(&bytes).expect("re-encoded checkpoint must decode");
    }
});
