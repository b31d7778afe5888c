#![no_main]

use gaq::dgp::{identify_reference, TrueModel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = TrueModel::from_json_str(text) {
        let json = serde_json::to_string(&model).unwrap();
        assert_eq!(TrueModel::from_json_str(&json).unwrap(), model);
        let _ = identify_reference(&model);
    }
});
