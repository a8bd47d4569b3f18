#![no_main]

use jigmil::data::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(manifest) = Manifest::parse(text) {
        let again = serde_json::to_string(&manifest).expect("manifest serializes");
        assert_eq!(Manifest::parse(&again).expect("serialized manifest parses"), manifest);
    }
});
