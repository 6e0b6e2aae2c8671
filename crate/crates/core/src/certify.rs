//! Subsystem margin checks, small-gain composition and network validation.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dynamics::{NetworkDef, NetworkTopology};
use crate::error::{Error, Result};
use crate::scenario::{LyapunovTemplate, SopSolution};
use crate::vecops::random_unit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemCertificate {
    pub id: usize,
    pub solution: SopSolution,
    pub epsilon: f64,
    pub l: f64,
    pub margin: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
}

/// `margin = μ* + l·ε`; the certificate passes iff the margin is non-positive.
/// Expects `epsilon ≥ 0` and `l ≥ 0`.
pub fn check_subsystem(id: usize, solution: SopSolution, epsilon: f64, l: f64) -> SubsystemCertificate {
    let margin = solution.mu_star + l * epsilon;
    SubsystemCertificate {
        id,
        solution,
        epsilon,
        l,
        margin,
        pass: margin <= 0.0,
        dataset_hash: None,
    }
}

/// Diagonal `Γ` and the edge-sparse coupling table `Δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaDelta {
    pub gamma_hat: Vec<f64>,
    /// `(i, j, δᵢⱼ)` for every edge where subsystem `i` reads `j`.
    pub delta: Vec<(usize, usize, f64)>,
}

impl GammaDelta {
    pub fn m(&self) -> usize {
        self.gamma_hat.len()
    }

    pub fn delta_at(&self, i: usize, j: usize) -> f64 {
        self.delta
            .iter()
            .filter(|&&(a, b, _)| a == i && b == j)
            .map(|&(_, _, v)| v)
            .sum()
    }

    /// Column sums of `−Γ + Δ`.
    pub fn zeta_vector(&self) -> Vec<f64> {
        let mut z: Vec<f64> = self.gamma_hat.iter().map(|g| -g).collect();
        for &(_, j, v) in &self.delta {
            z[j] += v;
        }
        z
    }
}

fn check_topology(certs: &[SubsystemCertificate], topology: &NetworkTopology) -> Result<()> {
    if certs.len() != topology.m() {
        return Err(Error::DimensionMismatch {
            context: "certificates vs topology",
            expected: topology.m(),
            actual: certs.len(),
        });
    }
    Ok(())
}

pub fn assemble_gamma_delta(certs: &[SubsystemCertificate], topology: &NetworkTopology) -> Result<GammaDelta> {
    check_topology(certs, topology)?;
    if let Some(c) = certs.iter().find(|c| !c.pass) {
        return Err(Error::FailingCertificate {
            id: c.id,
            margin: c.margin,
        });
    }
    for c in certs {
        let s = &c.solution;
        if !(s.gamma > 0.0 && s.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "subsystem {} has gamma {} outside (0, 1)",
                c.id, s.gamma
            )));
        }
        if !(s.alpha_lo > 0.0) || s.rho < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "subsystem {} needs alpha_lo > 0 and rho >= 0",
                c.id
            )));
        }
    }
    let gamma_hat = certs.iter().map(|c| 1.0 - c.solution.gamma).collect();
    let mut delta = Vec::new();
    for (i, sources) in topology.edges.iter().enumerate() {
        for &j in sources {
            delta.push((i, j, certs[i].solution.rho / certs[j].solution.alpha_lo));
        }
    }
    Ok(GammaDelta { gamma_hat, delta })
}

/// A vector that serializes as `{"uniform": v, "len": n}` when all entries
/// are bit-identical and as a plain array otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ZetaVector(pub Vec<f64>);

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ZetaRepr {
    Uniform { uniform: f64, len: usize },
    Full(Vec<f64>),
}

impl Serialize for ZetaVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = &self.0;
        if v.len() > 1 && v.iter().all(|z| z.to_bits() == v[0].to_bits()) {
            ZetaRepr::Uniform {
                uniform: v[0],
                len: v.len(),
            }
            .serialize(s)
        } else {
            ZetaRepr::Full(v.clone()).serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for ZetaVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match ZetaRepr::deserialize(d)? {
            ZetaRepr::Uniform { uniform, len } => ZetaVector(vec![uniform; len]),
            ZetaRepr::Full(v) => ZetaVector(v),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkCertificate {
    pub zeta_vector: ZetaVector,
    pub zeta: f64,
    pub gamma_net: f64,
    pub alpha_lo_net: f64,
    pub alpha_hi_net: f64,
    pub certificates: Vec<SubsystemCertificate>,
    pub pass: bool,
}

pub fn compose(certs: &[SubsystemCertificate], topology: &NetworkTopology) -> Result<NetworkCertificate> {
    let gd = assemble_gamma_delta(certs, topology)?;
    let z = gd.zeta_vector();
    let zeta = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if zeta >= 0.0 {
        let columns = (0..z.len()).filter(|&j| z[j] >= 0.0).collect();
        return Err(Error::CompositionRefused { zeta, columns });
    }
    if zeta <= -1.0 {
        let columns = (0..z.len()).filter(|&j| z[j] <= -1.0).collect();
        return Err(Error::CompositionRefused { zeta, columns });
    }
    Ok(NetworkCertificate {
        zeta_vector: ZetaVector(z),
        zeta,
        gamma_net: 1.0 + zeta,
        alpha_lo_net: certs.iter().map(|c| c.solution.alpha_lo).fold(f64::INFINITY, f64::min),
        alpha_hi_net: certs.iter().map(|c| c.solution.alpha_hi).fold(f64::NEG_INFINITY, f64::max),
        certificates: certs.to_vec(),
        pass: true,
    })
}

/// The composed function `V(x, x′) = Σᵢ Sᵢ(qᵢ, xᵢ, x′ᵢ)` with parsed templates.
#[derive(Clone, Debug)]
pub struct CompositeV {
    parts: Vec<(LyapunovTemplate, Vec<f64>)>,
    offsets: Vec<usize>,
}

impl CompositeV {
    pub fn new(solutions: &[&SopSolution]) -> Result<Self> {
        let mut parts = Vec::with_capacity(solutions.len());
        let mut offsets = vec![0];
        for s in solutions {
            let t = s.template()?;
            if t.r() != s.q.len() {
                return Err(Error::DimensionMismatch {
                    context: "template basis vs coefficients",
                    expected: t.r(),
                    actual: s.q.len(),
                });
            }
            offsets.push(offsets.last().unwrap() + t.n);
            parts.push((t, s.q.clone()));
        }
        Ok(Self { parts, offsets })
    }

    pub fn from_certificate(cert: &NetworkCertificate) -> Result<Self> {
        let sols: Vec<&SopSolution> = cert.certificates.iter().map(|c| &c.solution).collect();
        Self::new(&sols)
    }

    pub fn n(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn eval(&self, x: &[f64], xp: &[f64]) -> Result<f64> {
        for v in [x, xp] {
            if v.len() != self.n() {
                return Err(Error::DimensionMismatch {
                    context: "global state for V",
                    expected: self.n(),
                    actual: v.len(),
                });
            }
        }
        let mut total = 0.0;
        for (i, (t, q)) in self.parts.iter().enumerate() {
            let (a, b) = (self.offsets[i], self.offsets[i + 1]);
            let dx: Vec<f64> = x[a..b].iter().zip(&xp[a..b]).map(|(u, v)| u - v).collect();
            let phi = t.features(&dx);
            total += q.iter().zip(&phi).map(|(c, f)| c * f).sum::<f64>();
        }
        Ok(total)
    }
}

pub fn evaluate_v(cert: &NetworkCertificate, x: &[f64], xp: &[f64]) -> Result<f64> {
    CompositeV::from_certificate(cert)?.eval(x, xp)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    LowerBound,
    UpperBound,
    Decrease,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Offender {
    pub sample: usize,
    pub condition: Condition,
    pub excess: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub max_lower_violation: f64,
    pub max_upper_violation: f64,
    pub max_decrease_violation: f64,
    pub violations: usize,
    pub worst: Vec<Offender>,
    pub pass: bool,
}

const SCALES: [f64; 3] = [1.0, 10.0, 100.0];
const REL_TOL: f64 = 1e-6;
const WORST_KEPT: usize = 5;

struct SampleOutcome {
    raw: [f64; 3],
    excess: [f64; 3],
    scale: f64,
}

/// Samples global pairs on the pair sphere at scales 1, 10 and 100 and checks
/// the bound and decrease conditions of `v` with the given constants.
pub fn check_network_conditions(
    v: &CompositeV,
    net: &NetworkDef,
    alpha_lo: f64,
    alpha_hi: f64,
    gamma: f64,
    sample_count: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if v.n() != net.n() {
        return Err(Error::DimensionMismatch {
            context: "composite V vs network state",
            expected: net.n(),
            actual: v.n(),
        });
    }
    let n = net.n();
    let outcomes: Vec<SampleOutcome> = (0..sample_count)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let u = random_unit(&mut rng, 2 * n);
            let scale = *SCALES.choose(&mut rng).expect("non-empty");
            let x: Vec<f64> = u[..n].iter().map(|c| c * scale).collect();
            let xp: Vec<f64> = u[n..].iter().map(|c| c * scale).collect();
            let val = v.eval(&x, &xp)?;
            let ndx: f64 = x.iter().zip(&xp).map(|(a, b)| (a - b) * (a - b)).sum();
            let next = v.eval(&net.step(&x)?, &net.step(&xp)?)?;
            let raw = [alpha_lo * ndx - val, val - alpha_hi * ndx, next - gamma * val];
            let tol = [
                REL_TOL * (1.0 + val.abs()),
                REL_TOL * (1.0 + val.abs()),
                REL_TOL * (1.0 + val.abs().max(next.abs())),
            ];
            let excess = [raw[0] - tol[0], raw[1] - tol[1], raw[2] - tol[2]];
            Ok(SampleOutcome { raw, excess, scale })
        })
        .collect::<Result<_>>()?;
    let conditions = [Condition::LowerBound, Condition::UpperBound, Condition::Decrease];
    let mut max_raw = [f64::NEG_INFINITY; 3];
    let mut offenders = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        for c in 0..3 {
            max_raw[c] = max_raw[c].max(o.raw[c]);
            if o.excess[c] > 0.0 {
                offenders.push(Offender {
                    sample: k,
                    condition: conditions[c],
                    excess: o.excess[c],
                    scale: o.scale,
                });
            }
        }
    }
    let violations = offenders.len();
    offenders.sort_by(|a, b| b.excess.total_cmp(&a.excess));
    offenders.truncate(WORST_KEPT);
    let clean = |m: f64| if m.is_finite() { m } else { 0.0 };
    Ok(ValidationReport {
        samples: sample_count,
        max_lower_violation: clean(max_raw[0]),
        max_upper_violation: clean(max_raw[1]),
        max_decrease_violation: clean(max_raw[2]),
        violations,
        worst: offenders,
        pass: violations == 0,
    })
}

/// Empirical check of the network certificate's bound and decrease conditions.
pub fn validate_network(
    cert: &NetworkCertificate,
    net: &NetworkDef,
    sample_count: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if !cert.pass {
        return Err(Error::Precondition("network certificate does not pass".into()));
    }
    let v = CompositeV::from_certificate(cert)?;
    check_network_conditions(
        &v,
        net,
        cert.alpha_lo_net,
        cert.alpha_hi_net,
        cert.gamma_net,
        sample_count,
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub m: usize,
    pub compositional: f64,
    pub monolithic: f64,
}

fn checked_pow(base: u64, exp: usize) -> Option<u64> {
    base.checked_pow(u32::try_from(exp).ok()?)
}

fn count(base: u64, exp: usize) -> f64 {
    checked_pow(base, exp).map_or_else(|| (base as f64).powf(exp as f64), |c| c as f64)
}

/// Data requirements per network size. Subsystem `i` has dimensions
/// `dims[i % dims.len()]` given as `(n, p)`. Counts are exact while they fit
/// in 64 bits and fall back to floating point beyond, reaching infinity only
/// past the `f64` range.
pub fn complexity_report(
    dims: &[(usize, usize)],
    points_per_axis: usize,
    m_range: impl IntoIterator<Item = usize>,
) -> Result<Vec<ComplexityRow>> {
    if points_per_axis < 2 {
        return Err(Error::InvalidArgument("points_per_axis must be at least 2".into()));
    }
    if dims.is_empty() {
        return Err(Error::InvalidArgument("at least one subsystem shape is required".into()));
    }
    let base = points_per_axis as u64;
    Ok(m_range
        .into_iter()
        .map(|m| {
            let mut exact = Some(0u64);
            let mut approx = 0.0;
            let mut total_n = 0usize;
            for i in 0..m {
                let (n, p) = dims[i % dims.len()];
                total_n += n;
                exact = exact.and_then(|c| c.checked_add(checked_pow(base, 2 * (n + p))?));
                approx += count(base, 2 * (n + p));
            }
            ComplexityRow {
                m,
                compositional: exact.map_or(approx, |c| c as f64),
                monolithic: count(base, 2 * total_n),
            }
        })
        .collect())
}

pub fn complexity_csv(rows: &[ComplexityRow]) -> String {
    let mut out = String::from("m,compositional,monolithic\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.m, r.compositional, r.monolithic));
    }
    out
}
