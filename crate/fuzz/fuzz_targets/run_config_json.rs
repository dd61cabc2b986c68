#![no_main]

use libfuzzer_sys::fuzz_target;
use vital::synthgen::GenConfig;
use vital_cli::{AblateRunConfig, FingerprintInput, SweepRunConfig, TrainRunConfig};

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<GenConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_slice::<TrainRunConfig>(data) {
        let _ = c.train.validate(&c.model);
    }
    if let Ok(c) = serde_json::from_slice::<SweepRunConfig>(data) {
        let _ = c.grid.points();
    }
    if let Ok(c) = serde_json::from_slice::<AblateRunConfig>(data) {
        let _ = c.train.validate(&c.model);
    }
    let _ = serde_json::from_slice::<FingerprintInput>(data);
});
