//! Model-based reference path for linear subsystems.
//!
//! Each `Pᵢ` is designed from a scaled Stein equation, checked against the
//! matrix inequality `(1+θ)AᵀPA ⪯ γ̄P`, and turned into a quadratic storage
//! function whose constants feed the same composition as the data-driven path.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::certify::{check_subsystem, compose, NetworkCertificate, SubsystemCertificate};
use crate::dynamics::builtin::LinearOracle;
use crate::dynamics::description::{NetworkDescription, SubsystemKind};
use crate::dynamics::NetworkTopology;
use crate::error::{Error, Result};
use crate::scenario::{LyapunovTemplate, SopSolution, TemplateJson};

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const LMI_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSubsystem {
    pub a_matrix: DMatrix<f64>,
    pub b_matrix: DMatrix<f64>,
}

fn from_rows(rows: &[Vec<f64>], cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c])
}

impl LinearSubsystem {
    pub fn new(a_matrix: DMatrix<f64>, b_matrix: DMatrix<f64>) -> Result<Self> {
        let n = a_matrix.nrows();
        if n == 0 || a_matrix.ncols() != n || b_matrix.nrows() != n {
            return Err(Error::InvalidArgument(
                "A must be square and B must have as many rows as A".into(),
            ));
        }
        if a_matrix.iter().chain(b_matrix.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("matrix entries must be finite".into()));
        }
        Ok(Self { a_matrix, b_matrix })
    }

    pub fn from_oracle(o: &LinearOracle) -> Result<Self> {
        Self::new(from_rows(&o.a, o.n()), from_rows(&o.b, o.p()))
    }

    pub fn n(&self) -> usize {
        self.a_matrix.nrows()
    }

    pub fn p(&self) -> usize {
        self.b_matrix.ncols()
    }
}

/// Linear subsystems and topology of a description whose subsystems are all
/// of kind `linear`.
pub fn linear_network(desc: &NetworkDescription) -> Result<(Vec<LinearSubsystem>, NetworkTopology)> {
    let subs = desc
        .subsystems
        .iter()
        .map(|s| {
            if s.kind != SubsystemKind::Linear {
                return Err(Error::InvalidArgument(format!(
                    "subsystem {} is not linear; the model-based path needs A and B",
                    s.id
                )));
            }
            let o: LinearOracle = serde_json::from_value(s.params.clone())
                .map_err(|e| Error::InvalidArgument(format!("linear params of {}: {e}", s.id)))?;
            LinearSubsystem::from_oracle(&LinearOracle::new(o.a, o.b)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let net = desc.build()?;
    Ok((subs, net.topology().clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidArgument("symmetric matrix must be square".into()));
        }
        let scale = m.amax().max(1.0);
        for r in 0..m.nrows() {
            for c in r + 1..m.ncols() {
                if (m[(r, c)] - m[(c, r)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not symmetric at ({r}, {c})"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    fn symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        Self((m + t) * 0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: DMatrix<f64>,
}

const JACOBI_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition.
pub fn sym_eigen(m: &SymMatrix) -> SymEigen {
    let n = m.n();
    let mut a = m.0.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let total = a.norm();
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| a[(r, c)] * a[(r, c)])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * total * 1e-2 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    SymEigen {
        values: order.iter().map(|&i| a[(i, i)]).collect(),
        vectors: DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]),
    }
}

fn lambda_min(m: &SymMatrix) -> f64 {
    sym_eigen(m).values[0]
}

fn lambda_max(m: &SymMatrix) -> f64 {
    *sym_eigen(m).values.last().expect("non-empty")
}

fn require_pd(p: &SymMatrix) -> Result<()> {
    let lo = lambda_min(p);
    if !(lo > 0.0) {
        return Err(Error::Precondition(format!(
            "matrix is not positive definite (smallest eigenvalue {lo:.3e})"
        )));
    }
    Ok(())
}

/// Spectral radius from the norms of repeated squares, `‖M^(2^k)‖^(1/2^k)`.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    let first = m.norm();
    if first == 0.0 {
        return 0.0;
    }
    let mut cur = m / first;
    let mut log_norm = first.ln();
    let mut power = 1.0_f64;
    for _ in 0..50 {
        let sq = &cur * &cur;
        let c = sq.norm();
        if c == 0.0 {
            return 0.0;
        }
        log_norm = 2.0 * log_norm + c.ln();
        power *= 2.0;
        cur = sq / c;
    }
    (log_norm / power).exp()
}

const STEIN_MAX_ITERATIONS: usize = 1_000_000;
const STEIN_STEP_TOL: f64 = 1e-12;
const STEIN_RESIDUAL_TOL: f64 = 1e-9;

/// Solves `(1+θ)AᵀPA − γ̄P = −Q` by the fixed point
/// `P ← ((1+θ)/γ̄)AᵀPA + Q/γ̄` started at `Q/γ̄`.
pub fn solve_scaled_stein(a: &DMatrix<f64>, theta: f64, gamma_bar: f64, q: &SymMatrix) -> Result<SymMatrix> {
    if !(gamma_bar > 0.0 && gamma_bar < 1.0) {
        return Err(Error::InvalidArgument("gamma_bar must lie in (0, 1)".into()));
    }
    if !(theta > 0.0) {
        return Err(Error::InvalidArgument("theta must be positive".into()));
    }
    if a.nrows() != q.n() || a.ncols() != q.n() {
        return Err(Error::DimensionMismatch {
            context: "A vs Q",
            expected: q.n(),
            actual: a.nrows(),
        });
    }
    require_pd(q)?;
    let k = (1.0 + theta) / gamma_bar;
    let radius = spectral_radius(&(a * k.sqrt()));
    if radius >= 1.0 {
        return Err(Error::Precondition(format!(
            "spectral radius of sqrt((1+theta)/gamma_bar)*A is {radius:.6} >= 1"
        )));
    }
    let qs = q.as_matrix() / gamma_bar;
    let at = a.transpose();
    let mut p = qs.clone();
    for _ in 0..STEIN_MAX_ITERATIONS {
        let next = (&at * &p * a) * k + &qs;
        let change = (&next - &p).norm();
        p = next;
        if change <= STEIN_STEP_TOL * p.norm().max(1.0) {
            break;
        }
    }
    let p = SymMatrix::symmetrized(p);
    let residual = ((&at * p.as_matrix() * a) * (1.0 + theta) - p.as_matrix() * gamma_bar + q.as_matrix()).norm();
    if residual > STEIN_RESIDUAL_TOL * q.as_matrix().norm() {
        return Err(Error::Numerical(format!("Stein residual {residual:.3e} did not converge")));
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmiCheck {
    pub pass: bool,
    pub margin: f64,
}

/// `margin = λ_min(γ̄P − (1+θ)AᵀPA)`; passes when `margin ≥ −1e-9`.
pub fn verify_lmi(p: &SymMatrix, a: &DMatrix<f64>, theta: f64, gamma_bar: f64) -> Result<LmiCheck> {
    require_pd(p)?;
    if a.nrows() != p.n() || a.ncols() != p.n() {
        return Err(Error::DimensionMismatch {
            context: "A vs P",
            expected: p.n(),
            actual: a.nrows(),
        });
    }
    let m = p.as_matrix() * gamma_bar - (a.transpose() * p.as_matrix() * a) * (1.0 + theta);
    let margin = lambda_min(&SymMatrix::symmetrized(m));
    Ok(LmiCheck {
        pass: margin >= -LMI_TOL,
        margin,
    })
}

/// `(1 + 1/θ)·λ_max(BᵀPB)`.
pub fn rho_from(p: &SymMatrix, b: &DMatrix<f64>, theta: f64) -> Result<f64> {
    require_pd(p)?;
    if !(theta > 0.0) {
        return Err(Error::InvalidArgument("theta must be positive".into()));
    }
    if b.nrows() != p.n() {
        return Err(Error::DimensionMismatch {
            context: "B vs P",
            expected: p.n(),
            actual: b.nrows(),
        });
    }
    if b.ncols() == 0 {
        return Ok(0.0);
    }
    let m = SymMatrix::symmetrized(b.transpose() * p.as_matrix() * b);
    Ok((1.0 + 1.0 / theta) * lambda_max(&m).max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearDesign {
    pub p: SymMatrix,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub gamma_bar: f64,
    pub rho: f64,
    pub lmi_margin: f64,
}

/// Constants of a given `P`, refusing it when the inequality fails.
pub fn design_from_p(p: SymMatrix, sys: &LinearSubsystem, theta: f64, gamma_bar: f64) -> Result<LinearDesign> {
    let lmi = verify_lmi(&p, &sys.a_matrix, theta, gamma_bar)?;
    if !lmi.pass {
        return Err(Error::Validation(format!(
            "matrix inequality fails with margin {:.3e}",
            lmi.margin
        )));
    }
    let eig = sym_eigen(&p);
    Ok(LinearDesign {
        alpha_lo: eig.values[0],
        alpha_hi: *eig.values.last().expect("non-empty"),
        rho: rho_from(&p, &sys.b_matrix, theta)?,
        p,
        gamma_bar,
        lmi_margin: lmi.margin,
    })
}

/// Designs `P` with `Q = I`.
pub fn design_subsystem(sys: &LinearSubsystem, theta: f64, gamma_bar: f64) -> Result<LinearDesign> {
    let q = SymMatrix(DMatrix::identity(sys.n(), sys.n()));
    let p = solve_scaled_stein(&sys.a_matrix, theta, gamma_bar, &q)?;
    design_from_p(p, sys, theta, gamma_bar)
}

/// Quadratic storage `(x−x′)ᵀP(x−x′)` expressed in the full quadratic template.
pub fn design_certificate(id: usize, d: &LinearDesign) -> SubsystemCertificate {
    let t = LyapunovTemplate::full_quadratic(d.p.n());
    let pm = d.p.as_matrix();
    let q = t
        .basis
        .iter()
        .map(|&(a, b)| if a == b { pm[(a - 1, a - 1)] } else { 2.0 * pm[(a - 1, b - 1)] })
        .collect();
    let solution = SopSolution {
        q,
        alpha_lo: d.alpha_lo,
        alpha_hi: d.alpha_hi,
        gamma: d.gamma_bar,
        rho: d.rho,
        mu_star: 0.0,
        phi_star: 0.0,
        template: TemplateJson::from(&t),
    };
    check_subsystem(id, solution, 0.0, 0.0)
}

pub fn compose_designs(designs: &[LinearDesign], topology: &NetworkTopology) -> Result<NetworkCertificate> {
    let certs: Vec<_> = designs
        .iter()
        .enumerate()
        .map(|(i, d)| design_certificate(i, d))
        .collect();
    compose(&certs, topology)
}

pub fn model_based_certify(
    subsystems: &[LinearSubsystem],
    topology: &NetworkTopology,
    theta: f64,
    gamma_bar: f64,
) -> Result<NetworkCertificate> {
    let designs = subsystems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            design_subsystem(s, theta, gamma_bar).map_err(|e| match e {
                Error::Precondition(m) => Error::Precondition(format!("design of subsystem {i}: {m}")),
                Error::Validation(m) => Error::Validation(format!("design of subsystem {i}: {m}")),
                Error::Numerical(m) => Error::Numerical(format!("design of subsystem {i}: {m}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    compose_designs(&designs, topology)
}
