//! Closed-form example systems.
//!
//! These are the only places where the maps are written down explicitly. The
//! certification path receives them as [`BlackBoxSubsystem`]s and cannot see
//! the formulas.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{assemble_network, BlackBoxSubsystem, NetworkDef, NetworkTopology, StepOracle};
use crate::error::{Error, Result};

/// `x⁺ = A x + B w` with row-major matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearOracle {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl LinearOracle {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        let n = a.len();
        if n == 0 || a.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("A must be a non-empty square matrix".into()));
        }
        if b.len() != n {
            return Err(Error::InvalidArgument("B must have as many rows as A".into()));
        }
        let p = b.first().map_or(0, Vec::len);
        if b.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidArgument("B rows have unequal lengths".into()));
        }
        if a.iter().chain(&b).flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("matrix entries must be finite".into()));
        }
        Ok(Self { a, b })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn p(&self) -> usize {
        self.b.first().map_or(0, Vec::len)
    }
}

impl StepOracle for LinearOracle {
    fn step(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        Ok((0..self.n())
            .map(|r| {
                let ax: f64 = self.a[r].iter().zip(x).map(|(a, v)| a * v).sum();
                let bw: f64 = self.b[r].iter().zip(w).map(|(b, v)| b * v).sum();
                ax + bw
            })
            .collect())
    }
}

/// Coefficients of the two-state nonlinear ring subsystem
///
/// ```text
/// x1⁺ = a11·x1 − c·‖x‖ − b1·w1
/// x2⁺ = a22·x2 − a21·x1 − b2·w2
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingParams {
    pub a11: f64,
    pub c: f64,
    pub b1: f64,
    pub a22: f64,
    pub a21: f64,
    pub b2: f64,
}

impl Default for RingParams {
    fn default() -> Self {
        Self {
            a11: 0.8,
            c: 0.1,
            b1: 0.02,
            a22: 0.9,
            a21: 0.1,
            b2: 0.03,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RingOracle(pub RingParams);

impl StepOracle for RingOracle {
    fn step(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let k = &self.0;
        let r = x[0].hypot(x[1]);
        Ok(vec![
            k.a11 * x[0] - k.c * r - k.b1 * w[0],
            k.a22 * x[1] - k.a21 * x[0] - k.b2 * w[1],
        ])
    }
}

pub fn linear_subsystem(id: usize, oracle: LinearOracle) -> BlackBoxSubsystem {
    let signature = format!(
        "linear:{}",
        serde_json::to_string(&oracle).expect("matrices serialize")
    );
    let (n, p) = (oracle.n(), oracle.p());
    BlackBoxSubsystem::new(id, n, p, Arc::new(oracle))
        .expect("validated dimensions")
        .with_signature(signature)
}

pub fn ring_subsystem_with(id: usize, params: RingParams) -> BlackBoxSubsystem {
    let signature = format!(
        "ring:{}",
        serde_json::to_string(&params).expect("params serialize")
    );
    BlackBoxSubsystem::new(id, 2, 2, Arc::new(RingOracle(params)))
        .expect("fixed dimensions")
        .with_signature(signature)
}

pub fn ring_subsystem(id: usize) -> BlackBoxSubsystem {
    ring_subsystem_with(id, RingParams::default())
}

/// `m` copies of the nonlinear subsystem, each reading its predecessor.
pub fn ring_network(m: usize) -> Result<NetworkDef> {
    let subs = (0..m).map(ring_subsystem).collect();
    assemble_network(subs, NetworkTopology::ring(m)?)
}

pub const A1: [[f64; 2]; 2] = [[0.1, 0.2], [0.3, -0.1]];
pub const B1: [[f64; 2]; 2] = [[0.01, 0.0], [0.0, 0.02]];
pub const A2: [[f64; 2]; 2] = [[-0.4, 0.1], [0.6, 0.5]];
pub const B2: [[f64; 2]; 2] = [[0.04, 0.0], [0.0, 0.03]];

fn rows(m: [[f64; 2]; 2], sign: f64) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.iter().map(|v| sign * v).collect()).collect()
}

/// The two linear subsystems in negative feedback. The feedback sign is
/// carried by the first subsystem's input matrix, so that the wiring itself is
/// the plain `w_ij = x_j` substitution.
pub fn two_subsystem_oracles() -> [LinearOracle; 2] {
    [
        LinearOracle::new(rows(A1, 1.0), rows(B1, -1.0)).expect("valid"),
        LinearOracle::new(rows(A2, 1.0), rows(B2, 1.0)).expect("valid"),
    ]
}

pub fn two_subsystem_network() -> NetworkDef {
    let [o1, o2] = two_subsystem_oracles();
    assemble_network(
        vec![linear_subsystem(0, o1), linear_subsystem(1, o2)],
        NetworkTopology::new(vec![vec![1], vec![0]]).expect("valid"),
    )
    .expect("consistent dimensions")
}

/// `[[A1, −B1], [B2, A2]]`, the one-step map of the feedback loop.
pub fn coupled_two_subsystem_matrix() -> [[f64; 4]; 4] {
    let mut a = [[0.0; 4]; 4];
    for r in 0..2 {
        for c in 0..2 {
            a[r][c] = A1[r][c];
            a[r][c + 2] = -B1[r][c];
            a[r + 2][c] = B2[r][c];
            a[r + 2][c + 2] = A2[r][c];
        }
    }
    a
}
