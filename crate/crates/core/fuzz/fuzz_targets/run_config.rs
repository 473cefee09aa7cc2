#![no_main]

use libfuzzer_sys::fuzz_target;
use robust_risk::config::parse_run_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = parse_run_config(data) {
        // A config that parses builds its family and survives a round trip.
        c.family().expect("validated family builds");
        let text = serde_json::to_vec(&c).unwrap();
        let _ = parse_run_config(&text);
    }
});
