#![no_main]

use libfuzzer_sys::fuzz_target;
use vital::train_eval::ModelBundle;
use vital::vit::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    let Ok(checkpoint) = decode(data) else {
        return;
    };
    let bytes = encode(&checkpoint).expect("decoded checkpoint encodes");
    assert_eq!(decode(&bytes).expect("re-decodes"), checkpoint);
    let _ = ModelBundle::from_checkpoint(checkpoint);
});
