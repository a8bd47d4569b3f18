#![no_main]

use jigmil::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = TrainConfig::parse(text) {
        let again = TrainConfig::parse(&config.to_json()).expect("serialized config parses");
        assert_eq!(again, config);
    }
});
