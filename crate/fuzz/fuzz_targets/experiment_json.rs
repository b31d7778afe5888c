#![no_main]

use gaq::harness::Experiment;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(exp) = Experiment::from_json_str(text) {
        assert!(exp.replications >= 2);
        assert!(exp.n_list.windows(2).all(|w| w[0] < w[1]));
        for &n in &exp.n_list {
            assert!(exp.bandwidth(n) > 0.0);
        }
    }
});
