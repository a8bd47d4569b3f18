#![no_main]

use jigmil::ModelParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(model) = ModelParams::from_bytes(data) else {
        return;
    };
    let bytes = model.to_bytes().expect("decoded model re-encodes");
    assert_eq!(ModelParams::from_bytes(&bytes).expect("re-encoded model decodes"), model);
});
