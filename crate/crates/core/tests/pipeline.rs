use std::fs;
use std::path::Path;

use deltacert::dynamics::description::NetworkDescription;
use deltacert::pipeline::{run_pipeline, Blocker, RunConfig, RunStatus};
use deltacert::sampling::SamplingScheme;
use deltacert::scenario::SopConfig;

const UNSTABLE: &str = r#"{
  "subsystems": [
    {"id": 0, "n": 2, "p": 0, "kind": "linear",
     "params": {"a": [[1.2, 0.1], [0.0, 0.9]], "b": [[], []]}}
  ],
  "edges": []
}"#;

fn config(dir: &Path, network: &str) -> RunConfig {
    let net = dir.join("network.json");
    fs::write(&net, network).unwrap();
    RunConfig {
        network: net,
        sampling: SamplingScheme::Grid { points_per_axis: 5 },
        sop: SopConfig {
            gamma_grid: vec![0.9],
            ..SopConfig::default()
        },
        output_dir: dir.join("out"),
        ..RunConfig::default()
    }
}

fn snapshot(out: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![("failure.json".to_string(), fs::read(out.join("failure.json")).unwrap())];
    let mut certs: Vec<_> = fs::read_dir(out.join("certificates"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    certs.sort();
    for p in certs {
        files.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
    }
    files
}

#[test]
fn unstable_subsystem_is_rejected_with_mu_star_blocker() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), UNSTABLE);
    let out = run_pipeline(&cfg).unwrap();
    assert_eq!(out.status, RunStatus::MarginFailure);
    assert_eq!(out.exit_code(), 2);
    assert!(out.certificate.is_none());
    let attempt = out.last_attempt();
    assert_eq!(attempt.diagnosis.as_ref().unwrap().blocker, Blocker::MuStar);
    assert_eq!(attempt.subsystems[0].records, 5usize.pow(4) - 1);
    assert_eq!(out.attempts.len(), 1, "no retry when mu* is non-negative");
    let failure: serde_json::Value =
        serde_json::from_slice(&fs::read(cfg.output_dir.join("failure.json")).unwrap()).unwrap();
    assert_eq!(failure["exit_code"], 2);
    assert!(cfg.output_dir.join("datasets/subsystem_0.jsonl").is_file());
    assert!(cfg.output_dir.join("run.json").is_file());
}

#[test]
fn repeated_runs_write_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), UNSTABLE);
    run_pipeline(&cfg).unwrap();
    let first = snapshot(&cfg.output_dir);
    run_pipeline(&cfg).unwrap();
    let second = snapshot(&cfg.output_dir);
    assert_eq!(first.len(), 2);
    assert_eq!(first, second);
}

#[test]
fn shared_dynamics_certifies_one_representative_per_signature() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &NetworkDescription::ring(6).to_json());
    cfg.shared_dynamics = true;
    cfg.sampling = SamplingScheme::Grid { points_per_axis: 3 };
    cfg.max_retries = 0;
    let out = run_pipeline(&cfg).unwrap();
    let attempt = out.last_attempt();
    assert_eq!(attempt.subsystems.len(), 1);
    assert_eq!(attempt.subsystems[0].members, (0..6).collect::<Vec<_>>());
}

#[test]
fn missing_network_is_a_config_error() {
    let cfg = RunConfig {
        network: "/nonexistent/network.json".into(),
        ..RunConfig::default()
    };
    assert!(run_pipeline(&cfg).is_err());
}
