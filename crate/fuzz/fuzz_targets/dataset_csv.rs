#![no_main]

use gaq::{Dataset, EstimationBox};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::from_csv_reader(data) {
        assert!(ds.d() >= 2);
        assert_eq!(ds.x().len(), ds.n() * ds.d());
        let mut out = Vec::new();
        ds.to_csv_writer(&mut out).unwrap();
        let again = Dataset::from_csv_reader(out.as_slice()).unwrap();
        assert_eq!(again.x(), ds.x());
        assert_eq!(again.y(), ds.y());
        let _ = EstimationBox::from_data(&ds);
    }
});
