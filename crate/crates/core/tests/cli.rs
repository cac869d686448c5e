use std::path::Path;
use std::process::{Command, Output};

fn kff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kff"))
        .args(args)
        .output()
        .unwrap()
}

fn certified() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data/certified")
        .to_string_lossy()
        .into_owned()
}

#[test]
fn verify_passes_on_shipped_scenario() {
    let out = kff(&["verify", "--scenario", &certified()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));
}

#[test]
fn oversized_match_radius_breaks_a_hypothesis() {
    let out = kff(&["verify", "--scenario", &certified(), "--gamma-d", "1000"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("hypothesis violated"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(kff(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        kff(&["gradcheck", "--configs", "many"]).status.code(),
        Some(2)
    );
}

#[test]
fn run_from_saved_scenario_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let res = kff(&[
        "run",
        "--seed",
        "1",
        "--scenario",
        &certified(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with(kff::harness::METRICS_HEADER));
    assert!(out.join("summary.json").exists());
    assert!(out.join("pools/final.json").exists());
    let loaded = kff::pools::PoolSnapshot::load(&out.join("pools/final.json")).unwrap();
    assert!(!loaded.domain_pool.is_empty());
}

#[test]
fn empty_stream_is_reported_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("sc");
    std::fs::create_dir(&sc).unwrap();
    for f in ["certificate.json", "model.json", "source.csv"] {
        std::fs::copy(Path::new(&certified()).join(f), sc.join(f)).unwrap();
    }
    let header = std::fs::read_to_string(Path::new(&certified()).join("stream.csv")).unwrap();
    std::fs::write(
        sc.join("stream.csv"),
        format!("{}\n", header.lines().next().unwrap()),
    )
    .unwrap();
    let out = dir.path().join("out");
    let res = kff(&[
        "run",
        "--seed",
        "0",
        "--scenario",
        sc.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("zero batches"), "{err}");
}

#[test]
fn sweep_writes_one_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let res = kff(&[
        "sweep",
        "--seed",
        "0",
        "--scenario",
        &certified(),
        "--param",
        "steps",
        "--values",
        "1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    for v in ["1", "2"] {
        assert!(out.join(format!("steps_{v}_metrics.csv")).exists());
        assert!(out.join(format!("steps_{v}_summary.json")).exists());
    }
    let bad = kff(&[
        "sweep",
        "--seed",
        "0",
        "--scenario",
        &certified(),
        "--param",
        "nope",
        "--values",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
