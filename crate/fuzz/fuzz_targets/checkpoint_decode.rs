#![no_main]

use libfuzzer_sys::fuzz_target;
use rislab_core::io::{decode_checkpoint, encode_checkpoint};

// Accepted snapshots must re-encode into a stable canonical form.
fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        let canonical = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&canonical).expect("canonical form decodes");
        assert_eq!(encode_checkpoint(&back), canonical);
    }
});
