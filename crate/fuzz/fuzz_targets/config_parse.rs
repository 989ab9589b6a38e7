#![no_main]

use libfuzzer_sys::fuzz_target;
use rislab_core::config::RunConfig;

// Accepted configs must survive a serialize -> parse -> digest round trip.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_json(text) {
        let json = serde_json::to_string(&cfg).expect("validated config serializes");
        let back = RunConfig::from_json(&json).expect("round trip stays valid");
        assert_eq!(back.digest(), cfg.digest());
    }
});
