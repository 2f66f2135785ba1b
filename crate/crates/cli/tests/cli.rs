use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn diffsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffsim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn calibrate_zipf_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffsim(
        dir.path(),
        &[
            "calibrate-zipf",
            "--items",
            "46",
            "--top",
            "0.11",
            "--mass",
            "0.98",
            "--format",
            "json",
        ],
    );
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["top_count"], 5);
    assert!((v["achieved_mass"].as_f64().unwrap() - 0.98).abs() < 1e-6);
}

#[test]
fn gen_trace_then_run_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffsim(
        dir.path(),
        &[
            "gen-trace",
            "service-a",
            "-o",
            "trace.csv",
            "--max-requests",
            "20",
            "--seed",
            "4",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 21);

    fs::write(
        dir.path().join("s.json"),
        r#"{"trace": {"file": "trace.csv"}, "policies": ["SerialColocated", "CaaS+AsyncLoRA"]}"#,
    )
    .unwrap();
    let o = diffsim(
        dir.path(),
        &["run", "s.json", "--out-dir", "out", "--format", "json"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("CaaS+AsyncLoRA"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["metadata"]["schema_version"], 1);
    assert_eq!(report["policies"].as_array().unwrap().len(), 2);
    assert!(!dir.path().join("out/report.csv").exists());
}

#[test]
fn sweep_cache_writes_csvs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("s.json"),
        r#"{"trace": {"spec": {"max_requests": 30}}, "policies": ["CaaS"]}"#,
    )
    .unwrap();
    let o = diffsim(
        dir.path(),
        &[
            "sweep-cache",
            "s.json",
            "--capacities",
            "0,6144",
            "--out-dir",
            "sweep",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep/cache_sweep_controlnet.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn bench_merge_reports_both_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffsim(
        dir.path(),
        &[
            "bench-merge",
            "--h1",
            "64",
            "--h2",
            "48",
            "--rank",
            "4",
            "--format",
            "csv",
        ],
    );
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("h1,h2,rank,in_place_ms"));
    assert!(lines.next().unwrap().starts_with("64,48,4,"));
}

#[test]
fn exit_codes_by_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        diffsim(dir.path(), &["run", "missing.json"]).status.code(),
        Some(4)
    );

    fs::write(
        dir.path().join("bad.json"),
        r#"{"trace": {"preset": "service-a"}, "policies": ["Nope"]}"#,
    )
    .unwrap();
    let o = diffsim(dir.path(), &["run", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("policies[0]"));

    assert_eq!(
        diffsim(
            dir.path(),
            &[
                "calibrate-zipf",
                "--items",
                "3",
                "--top",
                "0.5",
                "--mass",
                "0.9"
            ]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(diffsim(dir.path(), &["frobnicate"]).status.code(), Some(2));

    fs::write(
        dir.path().join("t.csv"),
        "request_id,arrival_ms,controlnet_ids,lora_ids,lora_sizes_mib\n0,0,0,,\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("tiny.json"),
        r#"{"trace": {"file": "t.csv"}, "policies": ["SerialColocated"], "cluster": {"warm_controlnets": [0]}, "profile": {"steps_reference": 50}}"#,
    )
    .unwrap();
    assert_eq!(
        diffsim(dir.path(), &["run", "tiny.json", "--out-dir", "o"])
            .status
            .code(),
        Some(0)
    );
}
