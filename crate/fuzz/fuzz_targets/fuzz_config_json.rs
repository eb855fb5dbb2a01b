//! Drives the JSON config parsers with arbitrary text: the train config and
//! the checkpoint sidecar. Accepted configs must round-trip exactly.

#![no_main]

use cbet::trainer::{CheckpointMeta, TrainConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<TrainConfig>(data) {
        let text = serde_json::to_string(&cfg).expect("parsed config serializes");
        let again: TrainConfig = serde_json::from_str(&text).expect("round trip parses");
        assert_eq!(again, cfg);
    }
    let _ = serde_json::from_slice::<CheckpointMeta>(data);
});
