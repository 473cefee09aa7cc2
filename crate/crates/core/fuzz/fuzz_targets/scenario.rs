#![no_main]

use libfuzzer_sys::fuzz_target;
use robust_risk::scenario::parse_scenario;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = parse_scenario(data) {
        let n = s.space.n();
        assert!(s.positions.values().all(|x| x.n() == n));
        assert!(s.measures.values().all(|q| q.density().len() == n));
    }
});
