#![no_main]

use gaq::{Dataset, FitConfigFile};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = FitConfigFile::from_json_str(text) {
        let rows = [vec![0.1, 0.2], vec![0.5, 0.9], vec![0.8, 0.4], vec![0.3, 0.6]];
        let ds = Dataset::from_rows(&rows, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        if let Ok(cfg) = file.resolve(&ds) {
            cfg.check().unwrap();
            let _ = gaq::validate(&cfg, &ds);
        }
    }
});
