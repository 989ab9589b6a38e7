#![no_main]

use libfuzzer_sys::fuzz_target;
use rislab_core::io::{decode_fingerprint_db, encode_fingerprint_db};

fuzz_target!(|data: &[u8]| {
    if let Ok(db) = decode_fingerprint_db(data) {
        let canonical = encode_fingerprint_db(&db);
        let back = decode_fingerprint_db(&canonical).expect("canonical form decodes");
        assert_eq!(encode_fingerprint_db(&back), canonical);
    }
});
