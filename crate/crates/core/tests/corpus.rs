use std::fs;
use std::path::PathBuf;

use robust_risk::config::parse_run_config;
use robust_risk::report::parse_report;
use robust_risk::scenario::parse_scenario;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_stem().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn scenario_seeds() {
    for (name, bytes) in seeds("scenario") {
        let ok = parse_scenario(&bytes).is_ok();
        assert_eq!(
            ok,
            !matches!(name.as_str(), "bad_probs" | "duplicate"),
            "{name}"
        );
    }
}

#[test]
fn run_config_seeds_parse_and_build() {
    for (name, bytes) in seeds("run_config") {
        let cfg = parse_run_config(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.family().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn report_seeds_round_trip() {
    for (name, bytes) in seeds("report") {
        let r = parse_report(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(r.to_json(), bytes, "{name}");
    }
}
