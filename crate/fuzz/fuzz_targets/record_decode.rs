#![no_main]

use libfuzzer_sys::fuzz_target;
use rislab_core::io::{decode_record, encode_record};

// decode_record enforces exact consumption, so encode(decode(x)) == x.
fuzz_target!(|data: &[u8]| {
    if let Ok(rec) = decode_record(data) {
        assert_eq!(encode_record(&rec), data);
    }
});
