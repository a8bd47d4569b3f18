#![no_main]

use jigmil::data::{decode_bag, encode_bag};
use jigmil::PatchBag;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((centroids, features)) = decode_bag(data, None) else {
        return;
    };
    let bag = PatchBag {
        slide_id: String::new(),
        patient_id: String::new(),
        label: 0,
        centroids,
        features,
    };
    // Every accepted input is canonical.
    assert_eq!(encode_bag(&bag).expect("decoded bag re-encodes"), data);
});
