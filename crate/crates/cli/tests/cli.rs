use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn deltacert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltacert"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn defaults_print_a_loadable_config() {
    let o = deltacert(&["defaults"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["sampling"]["points_per_axis"], 5);
    assert_eq!(v["max_retries"], 2);
}

#[test]
fn complexity_csv_spot_values() {
    let o = deltacert(&["complexity", "--dims", "2:2", "--m-to", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "m,compositional,monolithic");
    assert_eq!(lines[1], "1,390625,625");
    assert_eq!(lines[2], "2,781250,390625");
    assert_eq!(lines.len(), 4);
}

#[test]
fn baseline_certifies_the_linear_pair() {
    let net = configs().join("network-two-subsystem.json");
    let o = deltacert(&["baseline", "--network", path_str(&net)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let zeta = v["zeta"].as_f64().unwrap();
    assert!(zeta < 0.0 && zeta > -1.0);
    assert_eq!(v["pass"], true);
}

fn write_certificates(dir: &Path, rho: f64, margin: Option<f64>) -> Vec<String> {
    let net = configs().join("network-two-subsystem.json");
    let o = deltacert(&["baseline", "--network", path_str(&net)]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    v["certificates"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mut c = c.clone();
            c["solution"]["rho"] = rho.into();
            if let Some(m) = margin {
                c["margin"] = m.into();
                c["pass"] = false.into();
            }
            let p = dir.join(format!("c{k}.json"));
            std::fs::write(&p, serde_json::to_string(&c).unwrap()).unwrap();
            p.to_str().unwrap().to_string()
        })
        .collect()
}

#[test]
fn compose_refuses_non_contracting_gains() {
    let dir = tempfile::tempdir().unwrap();
    let certs = write_certificates(dir.path(), 0.5, None);
    let net = configs().join("network-two-subsystem.json");
    let o = deltacert(&["compose", "--network", path_str(&net), "--certificates", &certs[0], &certs[1]]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn compose_rejects_failing_certificates() {
    let dir = tempfile::tempdir().unwrap();
    let certs = write_certificates(dir.path(), 0.001, Some(0.3));
    let net = configs().join("network-two-subsystem.json");
    let o = deltacert(&["compose", "--network", path_str(&net), "--certificates", &certs[0], &certs[1]]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unstable_network_fails_with_margin_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("unstable.json");
    let out = dir.path().join("out");
    let o = deltacert(&["certify", "--config", path_str(&cfg), "--output-dir", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let failure: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("failure.json")).unwrap()).unwrap();
    assert_eq!(failure["diagnosis"]["blocker"], "mu_star");
    assert!(out.join("summary.txt").is_file());
}

#[test]
fn missing_network_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = deltacert(&["certify", "--network", "/nonexistent.json", "--output-dir", path_str(&out)]);
    assert_eq!(o.status.code(), Some(5));
    let failure: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("failure.json")).unwrap()).unwrap();
    assert_eq!(failure["stage"], "config_or_io");
}

#[test]
fn simulate_emits_one_column_per_pair() {
    let net = configs().join("network-ring.json");
    let o = deltacert(&["simulate", "--network", path_str(&net), "--steps", "5", "--pairs", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,distance_0,distance_1");
    assert_eq!(lines.len(), 7);
    let first: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    let last: f64 = lines[6].split(',').nth(1).unwrap().parse().unwrap();
    assert!(last < first);
}

#[test]
fn sample_then_solve() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds.jsonl");
    let net = configs().join("network-two-subsystem.json");
    let o = deltacert(&[
        "sample", "--network", path_str(&net), "--points-per-axis", "3", "--normalize", "--out", path_str(&ds),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = deltacert(&["solve", "--dataset", path_str(&ds), "--gamma-grid", "0.9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["gamma"], 0.9);
    assert!(v["mu_star"].as_f64().is_some());
}
