use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn edgeflow() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_edgeflow"));
    c.env_remove("BENCH_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    edgeflow().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn unknown_preset_is_a_config_error() {
    let o = run(&["bench", "--preset", "nope"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn missing_report_is_a_config_error() {
    assert_eq!(code(&run(&["analyze", "--in", "missing.csv"])), 2);
}

#[test]
fn bad_override_and_seed_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "bench",
        "--preset",
        "in-vehicle",
        "--override",
        "no_such_key=1",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 2);
    let o = run(&[
        "bench",
        "--preset",
        "in-vehicle",
        "--override",
        "rate_hz=-3",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 2);
    let o = edgeflow()
        .args(["bench", "--preset", "in-vehicle", "--out", out])
        .env("BENCH_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_or_invalid_configs_exit_2() {
    assert_eq!(code(&run(&["broker", "--config", "/nonexistent.yaml"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("b.yaml");
    std::fs::write(&f, "listener: {port: 0}\nbogus: 1\n").unwrap();
    assert_eq!(code(&run(&["broker", "--config", f.to_str().unwrap()])), 2);
    let v = dir.path().join("v.yaml");
    std::fs::write(&v, "broker: {host: h}\nclient: {id: vehicle}\n").unwrap();
    assert_eq!(code(&run(&["vehicle", "--config", v.to_str().unwrap()])), 2);
}

#[test]
fn usage_errors_are_nonzero() {
    let o = run(&["bench"]);
    assert_ne!(code(&o), 0);
    assert!(!o.stderr.is_empty());
}

#[test]
fn gen_scan_writes_reference_scan() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("scan.cscn");
    let o = run(&[
        "gen-scan",
        "--preset",
        "paper-ref",
        "--out",
        f.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let scan = edgeflow::scanmodel::load_scan(&f).unwrap();
    assert_eq!(scan.serialized_len(), 1206 * 150 + 16);
    assert_eq!(scan.valid_returns(), 49_016);
    assert_eq!(
        code(&run(&[
            "gen-scan",
            "--preset",
            "other",
            "--out",
            f.to_str().unwrap()
        ])),
        2
    );
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn analyze_reproduces_the_report_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "bench",
        "--preset",
        "in-vehicle",
        "--override",
        "sample_count=200",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json_file(&dir.path().join("in-vehicle.json"));
    assert_eq!(report["report_version"], 1);
    assert_eq!(report["samples_reported"], 200);
    assert!(dir.path().join("in-vehicle_ecdf.csv").is_file());
    let csv = dir.path().join("in-vehicle.csv");
    let o = run(&["analyze", "--in", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary, report["summary"]);
}

#[test]
fn series_presets_write_one_report_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "bench",
        "--preset",
        "qos-sweep",
        "--override",
        "sample_count=50",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for q in 0..3 {
        assert!(dir.path().join(format!("qos-sweep-qos-{q}.json")).is_file());
    }
}

#[test]
fn bench_seed_makes_runs_repeatable() {
    let csv_with = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = edgeflow()
            .args([
                "bench",
                "--preset",
                "paper-bridged",
                "--override",
                "mode=sim",
            ])
            .args([
                "--override",
                "sample_count=100",
                "--out",
                dir.path().to_str().unwrap(),
            ])
            .env("BENCH_SEED", seed)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(dir.path().join("paper-bridged.csv")).unwrap()
    };
    let a = csv_with("11");
    assert_eq!(a, csv_with("11"));
    assert_ne!(a, csv_with("12"));
}

#[test]
fn too_many_lost_samples_abort_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "bench",
        "--preset",
        "paper-bridged",
        "--override",
        "mode=sim",
        "--override",
        "sample_count=100",
        "--override",
        "shaper.drop_probability=0.5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bridged_preset_runs_live_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "bench",
        "--preset",
        "paper-bridged",
        "--override",
        "sample_count=30",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json_file(&dir.path().join("paper-bridged.json"));
    assert_eq!(report["config"]["mode"], "live");
    assert_eq!(report["samples_reported"], 30);
}

#[test]
fn broker_cloud_and_vehicle_processes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(
        p("broker.yaml"),
        "listener: {host: 127.0.0.1, port: 0}\nauth:\n  - {username: admin, password: password}\n",
    )
    .unwrap();
    let mut broker = Killed(
        edgeflow()
            .args(["broker", "--config", p("broker.yaml").to_str().unwrap()])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap(),
    );
    let mut first = String::new();
    BufReader::new(broker.0.stdout.take().unwrap())
        .read_line(&mut first)
        .unwrap();
    let listening: Value = serde_json::from_str(&first).unwrap();
    let port = listening["listening"]
        .as_str()
        .unwrap()
        .rsplit(':')
        .next()
        .unwrap()
        .to_string();

    let endpoint =
        format!("broker: {{host: 127.0.0.1, port: {port}, user: admin, pass: password}}\n");
    std::fs::write(
        p("cloud.yaml"),
        format!("{endpoint}client: {{id: cloud}}\nbridge:\n  mqtt2bus:\n    - {{mqtt_topic: points, bus_topic: /points, qos: 1}}\n  bus2mqtt:\n    - {{bus_topic: /objects, mqtt_topic: objects, qos: 1}}\n"),
    )
    .unwrap();
    std::fs::write(
        p("vehicle.yaml"),
        format!("{endpoint}client: {{id: vehicle}}\nbridge:\n  bus2mqtt:\n    - {{bus_topic: /points, mqtt_topic: points, qos: 1}}\n  mqtt2bus:\n    - {{mqtt_topic: objects, bus_topic: /objects, qos: 1}}\n"),
    )
    .unwrap();
    let scan = p("scan.cscn");
    assert_eq!(
        code(&run(&[
            "gen-scan",
            "--preset",
            "paper-ref",
            "--out",
            scan.to_str().unwrap()
        ])),
        0
    );

    let _cloud = Killed(
        edgeflow()
            .args([
                "cloud",
                "--config",
                p("cloud.yaml").to_str().unwrap(),
                "--detector-delay-ms",
                "5",
            ])
            .stdout(Stdio::null())
            .spawn()
            .unwrap(),
    );
    // the cloud subscription must exist before the first scan goes out
    std::thread::sleep(std::time::Duration::from_millis(500));
    let o = run(&[
        "vehicle",
        "--config",
        p("vehicle.yaml").to_str().unwrap(),
        "--scan",
        scan.to_str().unwrap(),
        "--count",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut ids: Vec<u64> = lines
        .iter()
        .filter_map(|v| v.get("sample_id").and_then(Value::as_u64))
        .collect();
    ids.sort_unstable();
    assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    let status = lines
        .iter()
        .rev()
        .find(|v| v.get("client_id").is_some())
        .unwrap();
    assert_eq!(status["client_id"], "vehicle");
    assert_eq!(status["msgs_out"], 10);
    assert_eq!(status["drops"], 0);
}
