//! End-to-end certification run: data collection through composition, with
//! automatic densification and on-disk artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use crate::certify::{check_subsystem, compose, validate_network, NetworkCertificate, SubsystemCertificate, ValidationReport};
use crate::dynamics::description::NetworkDescription;
use crate::dynamics::{BlackBoxSubsystem, NetworkDef};
use crate::error::{Error, Result};
use crate::lipschitz::{estimate_constants, LipschitzConfig, LipschitzEstimate};
use crate::sampling::{collect, estimate_dispersion, normalize, save_dataset, DispersionEstimate, SamplingScheme};
use crate::scenario::{solve_sop, LyapunovTemplate, SopConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: PathBuf,
    /// Replace the network by a ring of this many copies of its first subsystem.
    pub m: Option<usize>,
    pub sampling: SamplingScheme,
    pub bound: f64,
    pub seed: u64,
    pub sop: SopConfig,
    pub lipschitz: LipschitzConfig,
    pub output_dir: PathBuf,
    pub conservative_epsilon: bool,
    pub shared_dynamics: bool,
    pub test_points_per_axis: Option<usize>,
    pub max_retries: usize,
    pub validation_samples: usize,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: PathBuf::from("network.json"),
            m: None,
            sampling: SamplingScheme::Grid { points_per_axis: 5 },
            bound: 1.0,
            seed: 0,
            sop: SopConfig::default(),
            lipschitz: LipschitzConfig::default(),
            output_dir: PathBuf::from("deltacert-out"),
            conservative_epsilon: true,
            shared_dynamics: false,
            test_points_per_axis: None,
            max_retries: 2,
            validation_samples: 10_000,
            jobs: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative network paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if cfg.network.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.network = dir.join(&cfg.network);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.network.is_file() {
            return Err(Error::InvalidArgument(format!(
                "network description {} does not exist",
                self.network.display()
            )));
        }
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::InvalidArgument("bound must be positive".into()));
        }
        match self.sampling {
            SamplingScheme::Grid { points_per_axis } if points_per_axis < 2 => {
                return Err(Error::InvalidArgument("points_per_axis must be at least 2".into()))
            }
            SamplingScheme::UniformRandom { count: 0 } => {
                return Err(Error::InvalidArgument("random sample count must be positive".into()))
            }
            _ => {}
        }
        if self.m == Some(0) || self.jobs == Some(0) {
            return Err(Error::InvalidArgument("m and jobs must be positive".into()));
        }
        if matches!(self.test_points_per_axis, Some(t) if t < 2) {
            return Err(Error::InvalidArgument("test_points_per_axis must be at least 2".into()));
        }
        self.sop.validate()?;
        self.lipschitz.validate()
    }

    pub fn description(&self) -> Result<NetworkDescription> {
        let desc = NetworkDescription::load(&self.network)?;
        match self.m {
            Some(m) => desc.resized_ring(m),
            None => Ok(desc),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pass,
    MarginFailure,
    CompositionFailure,
    SopInfeasible,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Pass => 0,
            RunStatus::MarginFailure => 2,
            RunStatus::CompositionFailure => 3,
            RunStatus::SopInfeasible => 4,
        }
    }
}

/// The quantity that blocked certification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blocker {
    /// `μ* ≥ 0`: no covering argument can close the margin.
    MuStar,
    /// Even the plain grid dispersion leaves `l·ε > −μ*`.
    Lipschitz,
    /// Only the conservative covering radius breaks the margin.
    Epsilon,
    Zeta,
    Sop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub blocker: Blocker,
    pub subsystems: Vec<usize>,
    pub detail: String,
}

/// Everything learned about one distinct subsystem in one attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemRun {
    pub representative: usize,
    pub members: Vec<usize>,
    pub signature: String,
    pub records: usize,
    pub dataset_hash: String,
    pub dataset_file: PathBuf,
    pub dispersion: DispersionEstimate,
    pub lipschitz: Option<LipschitzEstimate>,
    pub certificate: Option<SubsystemCertificate>,
    pub sop_error: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub sampling: SamplingScheme,
    pub status: RunStatus,
    pub zeta: Option<f64>,
    pub diagnosis: Option<Diagnosis>,
    pub subsystems: Vec<SubsystemRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub datasets: BTreeMap<usize, String>,
    pub sampling: SamplingScheme,
    pub attempts: usize,
}

/// Network certificate file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateArtifact {
    pub certificate: NetworkCertificate,
    pub validation: ValidationReport,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureArtifact {
    pub stage: RunStatus,
    pub exit_code: i32,
    pub diagnosis: Option<Diagnosis>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub status: RunStatus,
    pub certificate: Option<NetworkCertificate>,
    pub validation: Option<ValidationReport>,
    pub attempts: Vec<Attempt>,
    pub summary: String,
}

impl PipelineOutcome {
    pub fn exit_code(&self) -> i32 {
        self.status.exit_code()
    }

    pub fn last_attempt(&self) -> &Attempt {
        self.attempts.last().expect("at least one attempt")
    }
}

/// Groups of subsystem positions that share one certificate.
pub fn group_subsystems(net: &NetworkDef, shared: bool) -> Vec<Vec<usize>> {
    if !shared {
        return (0..net.m()).map(|i| vec![i]).collect();
    }
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, s) in net.subsystems().iter().enumerate() {
        let key = format!("{}|{}|{}", s.n, s.p, s.signature);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups.into_iter().map(|(_, m)| m).collect()
}

fn run_subsystem(
    sub: &BlackBoxSubsystem,
    members: Vec<usize>,
    scheme: SamplingScheme,
    cfg: &RunConfig,
    dataset_dir: &Path,
) -> Result<SubsystemRun> {
    let start = Instant::now();
    let raw = collect(sub, scheme, cfg.bound, cfg.seed)?;
    let ds = normalize(&raw)?;
    let dataset_file = dataset_dir.join(format!("subsystem_{}.jsonl", sub.id));
    save_dataset(&ds, &dataset_file)?;
    let dataset_hash = ds.content_hash();
    let dispersion = estimate_dispersion(&ds, cfg.test_points_per_axis)?;
    let template = LyapunovTemplate::full_quadratic(sub.n);
    let mut run = SubsystemRun {
        representative: sub.id,
        members,
        signature: sub.signature.clone(),
        records: ds.len(),
        dataset_hash: dataset_hash.clone(),
        dataset_file,
        dispersion,
        lipschitz: None,
        certificate: None,
        sop_error: None,
        seconds: 0.0,
    };
    match solve_sop(&ds, &template, &cfg.sop) {
        Ok(solution) => {
            let lip = estimate_constants(&solution, sub, &cfg.lipschitz)?;
            let eps = if cfg.conservative_epsilon {
                dispersion.epsilon_conservative
            } else {
                dispersion.epsilon
            };
            let mut cert = check_subsystem(sub.id, solution, eps, lip.l);
            cert.dataset_hash = Some(dataset_hash);
            run.lipschitz = Some(lip);
            run.certificate = Some(cert);
        }
        Err(Error::SopInfeasible(reason)) => run.sop_error = Some(reason),
        Err(e) => return Err(e),
    }
    run.seconds = start.elapsed().as_secs_f64();
    info!(subsystem = sub.id, seconds = run.seconds, "subsystem stage finished");
    Ok(run)
}

fn diagnose_margin(runs: &[SubsystemRun]) -> Diagnosis {
    let failing: Vec<&SubsystemRun> = runs
        .iter()
        .filter(|r| r.certificate.as_ref().is_some_and(|c| !c.pass))
        .collect();
    let classify = |r: &SubsystemRun| {
        let c = r.certificate.as_ref().expect("filtered");
        if c.solution.mu_star >= 0.0 {
            Blocker::MuStar
        } else if c.l * r.dispersion.epsilon > -c.solution.mu_star {
            Blocker::Lipschitz
        } else {
            Blocker::Epsilon
        }
    };
    let blocker = failing
        .iter()
        .map(|r| classify(r))
        .min_by_key(|b| match b {
            Blocker::MuStar => 0,
            Blocker::Lipschitz => 1,
            _ => 2,
        })
        .unwrap_or(Blocker::Epsilon);
    let mut detail = String::new();
    for r in &failing {
        let c = r.certificate.as_ref().expect("filtered");
        let _ = write!(
            detail,
            "subsystem {}: mu_star = {:.6e}, l = {:.6}, epsilon = {:.6} (grid {:.6}), margin = {:.6e}; ",
            r.representative, c.solution.mu_star, c.l, c.epsilon, r.dispersion.epsilon, c.margin
        );
    }
    Diagnosis {
        blocker,
        subsystems: failing.iter().flat_map(|r| r.members.clone()).collect(),
        detail: detail.trim_end_matches("; ").to_string(),
    }
}

struct AttemptResult {
    attempt: Attempt,
    certificate: Option<NetworkCertificate>,
}

fn run_attempt(
    net: &NetworkDef,
    groups: &[Vec<usize>],
    scheme: SamplingScheme,
    cfg: &RunConfig,
    dataset_dir: &Path,
) -> Result<AttemptResult> {
    let runs: Vec<SubsystemRun> = groups
        .par_iter()
        .map(|members| {
            let rep = &net.subsystems()[members[0]];
            run_subsystem(rep, members.clone(), scheme, cfg, dataset_dir)
        })
        .collect::<Result<_>>()?;
    let mut attempt = Attempt {
        sampling: scheme,
        status: RunStatus::Pass,
        zeta: None,
        diagnosis: None,
        subsystems: runs,
    };
    let infeasible: Vec<usize> = attempt
        .subsystems
        .iter()
        .filter(|r| r.sop_error.is_some())
        .flat_map(|r| r.members.clone())
        .collect();
    if !infeasible.is_empty() {
        attempt.status = RunStatus::SopInfeasible;
        attempt.diagnosis = Some(Diagnosis {
            blocker: Blocker::Sop,
            subsystems: infeasible,
            detail: attempt
                .subsystems
                .iter()
                .filter_map(|r| r.sop_error.clone())
                .collect::<Vec<_>>()
                .join("; "),
        });
        return Ok(AttemptResult {
            attempt,
            certificate: None,
        });
    }
    if attempt
        .subsystems
        .iter()
        .any(|r| !r.certificate.as_ref().expect("solved").pass)
    {
        attempt.status = RunStatus::MarginFailure;
        attempt.diagnosis = Some(diagnose_margin(&attempt.subsystems));
        return Ok(AttemptResult {
            attempt,
            certificate: None,
        });
    }
    let mut certs: Vec<Option<SubsystemCertificate>> = vec![None; net.m()];
    for r in &attempt.subsystems {
        let c = r.certificate.as_ref().expect("solved");
        for &i in &r.members {
            let mut ci = c.clone();
            ci.id = i;
            certs[i] = Some(ci);
        }
    }
    let certs: Vec<SubsystemCertificate> = certs.into_iter().map(|c| c.expect("every member covered")).collect();
    match compose(&certs, net.topology()) {
        Ok(nc) => {
            attempt.zeta = Some(nc.zeta);
            Ok(AttemptResult {
                attempt,
                certificate: Some(nc),
            })
        }
        Err(Error::CompositionRefused { zeta, columns }) => {
            attempt.status = RunStatus::CompositionFailure;
            attempt.zeta = Some(zeta);
            attempt.diagnosis = Some(Diagnosis {
                blocker: Blocker::Zeta,
                detail: format!("zeta = {zeta:.6e} outside (-1, 0)"),
                subsystems: columns,
            });
            Ok(AttemptResult {
                attempt,
                certificate: None,
            })
        }
        Err(e) => Err(e),
    }
}

/// Densifying cannot help once `μ*` is non-negative or the SOP is infeasible.
fn worth_retrying(attempt: &Attempt) -> bool {
    match attempt.status {
        RunStatus::Pass | RunStatus::SopInfeasible => false,
        RunStatus::CompositionFailure => true,
        RunStatus::MarginFailure => attempt
            .diagnosis
            .as_ref()
            .is_some_and(|d| d.blocker != Blocker::MuStar),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn summarize(outcome_status: RunStatus, attempts: &[Attempt], cert: Option<&NetworkCertificate>, validation: Option<&ValidationReport>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "status: {:?} (exit code {})", outcome_status, outcome_status.exit_code());
    for (k, a) in attempts.iter().enumerate() {
        let _ = writeln!(s, "attempt {} with {:?}: {:?}", k + 1, a.sampling, a.status);
        for r in &a.subsystems {
            let _ = write!(
                s,
                "  subsystem {} (x{}) records={} eps={:.4} eps_cons={:.4}",
                r.representative,
                r.members.len(),
                r.records,
                r.dispersion.epsilon,
                r.dispersion.epsilon_conservative
            );
            match &r.certificate {
                Some(c) => {
                    let _ = writeln!(
                        s,
                        " gamma={} rho={:.4e} mu*={:.4e} l={:.4} margin={:.4e} pass={} [{:.1}s]",
                        c.solution.gamma, c.solution.rho, c.solution.mu_star, c.l, c.margin, c.pass, r.seconds
                    );
                }
                None => {
                    let _ = writeln!(s, " SOP infeasible [{:.1}s]", r.seconds);
                }
            }
        }
        if let Some(d) = &a.diagnosis {
            let _ = writeln!(s, "  blocked by {:?}: {}", d.blocker, d.detail);
        }
    }
    if let Some(c) = cert {
        let _ = writeln!(
            s,
            "network: zeta={:.6} gamma_net={:.6} alpha_lo={:.6} alpha_hi={:.6}",
            c.zeta, c.gamma_net, c.alpha_lo_net, c.alpha_hi_net
        );
    }
    if let Some(v) = validation {
        let _ = writeln!(s, "validation: {} samples, {} violations", v.samples, v.violations);
    }
    s
}

/// Runs the pipeline and writes its artifacts under `cfg.output_dir`.
/// Configuration and I/O problems are returned as errors; certification
/// outcomes, including failures, are reported through [`PipelineOutcome`].
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    match cfg.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(|| run_inner(cfg)),
        None => run_inner(cfg),
    }
}

fn run_inner(cfg: &RunConfig) -> Result<PipelineOutcome> {
    let net = cfg.description()?.build()?;
    let groups = group_subsystems(&net, cfg.shared_dynamics);
    let out = &cfg.output_dir;
    let dataset_dir = out.join("datasets");
    let cert_dir = out.join("certificates");
    fs::create_dir_all(&dataset_dir)?;
    fs::create_dir_all(&cert_dir)?;
    let config_sha256 = sha256_hex(serde_json::to_string(cfg)?.as_bytes());

    let mut scheme = cfg.sampling;
    let mut attempts = Vec::new();
    let mut certificate = None;
    for k in 0..=cfg.max_retries {
        info!(attempt = k + 1, ?scheme, "certification attempt");
        let res = run_attempt(&net, &groups, scheme, cfg, &dataset_dir)?;
        let retry = worth_retrying(&res.attempt);
        certificate = res.certificate;
        attempts.push(res.attempt);
        if !retry {
            break;
        }
        let d = net
            .subsystems()
            .iter()
            .map(|s| 2 * (s.n + s.p))
            .max()
            .unwrap_or(1);
        scheme = scheme.densified(d);
    }
    let last = attempts.last().expect("ran once");
    let status = last.status;
    for r in &last.subsystems {
        if let Some(c) = &r.certificate {
            write_json(&cert_dir.join(format!("subsystem_{}.json", r.representative)), c)?;
        }
    }
    let provenance = Provenance {
        config_sha256,
        datasets: last
            .subsystems
            .iter()
            .map(|r| (r.representative, r.dataset_hash.clone()))
            .collect(),
        sampling: last.sampling,
        attempts: attempts.len(),
    };
    let validation = match &certificate {
        Some(nc) => {
            let report = validate_network(nc, &net, cfg.validation_samples, cfg.seed)?;
            write_json(
                &out.join("network_certificate.json"),
                &CertificateArtifact {
                    certificate: nc.clone(),
                    validation: report.clone(),
                    provenance: provenance.clone(),
                },
            )?;
            Some(report)
        }
        None => {
            write_json(
                &out.join("failure.json"),
                &FailureArtifact {
                    stage: status,
                    exit_code: status.exit_code(),
                    diagnosis: last.diagnosis.clone(),
                    provenance: provenance.clone(),
                },
            )?;
            None
        }
    };
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    write_json(
        &out.join("run.json"),
        &serde_json::json!({ "created_unix": created, "config": cfg, "attempts": attempts }),
    )?;
    let summary = summarize(status, &attempts, certificate.as_ref(), validation.as_ref());
    fs::write(out.join("summary.txt"), &summary)?;
    Ok(PipelineOutcome {
        status,
        certificate,
        validation,
        attempts,
        summary,
    })
}
