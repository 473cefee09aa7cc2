#![no_main]

use libfuzzer_sys::fuzz_target;
use robust_risk::report::parse_report;

fuzz_target!(|data: &[u8]| {
    let data = if data.len() > 256 * 1024 { &data[..256 * 1024] } else { data };
    if let Ok(r) = parse_report(data) {
        let again = parse_report(&r.to_json()).expect("emitted report re-parses");
        assert_eq!(again.to_json(), r.to_json());
    }
});
