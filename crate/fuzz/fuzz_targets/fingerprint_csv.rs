#![no_main]

use libfuzzer_sys::fuzz_target;
use vital::fingerprint::{read_dataset, write_dataset};

fuzz_target!(|data: &[u8]| {
    let Ok(dataset) = read_dataset(data) else {
        return;
    };
    // Anything accepted must survive a write/read cycle unchanged.
    let mut out = Vec::new();
    write_dataset(&dataset, &mut out).expect("accepted dataset writes");
    let again = read_dataset(out.as_slice()).expect("written dataset reads");
    assert_eq!(again, dataset);
    for r in dataset.records() {
        let _ = r.reduce();
    }
});
