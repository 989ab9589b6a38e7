#![no_main]

use libfuzzer_sys::fuzz_target;
use rislab_core::io::{decode_dataset, encode_record};

// The record layout is bijective: re-encoding anything that decoded must be
// a fixed point.
fuzz_target!(|data: &[u8]| {
    if let Ok((header, records)) = decode_dataset(data) {
        assert_eq!(header.count as usize, records.len());
        for rec in &records {
            let bytes = encode_record(rec);
            let back = rislab_core::io::decode_record(&bytes).expect("re-decode");
            assert_eq!(encode_record(&back), bytes);
        }
    }
});
