#![no_main]

use gaq::harness::{read_records, summarize};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_records(data) {
        if let Ok(summary) = summarize(&records) {
            let _ = summary.checks();
            let _ = summary.to_text();
        }
    }
});
