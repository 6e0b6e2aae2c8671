//! Black-box subsystems, their interconnection into networks, and trajectory
//! simulation.
//!
//! Subsystems are opaque step callbacks behind [`StepOracle`]. The library never
//! inspects a map symbolically; the closed forms in [`builtin`] exist to drive
//! tests and case studies and are only reachable through the same oracle
//! interface.

pub mod builtin;
pub mod description;
pub mod external;

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::vecops::{dist, norm, scaled};

/// One evaluation of an unknown map `f(x, w)`.
///
/// Implementations must be callable from several threads at once.
pub trait StepOracle: Send + Sync {
    fn step(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>>;
}

struct FnOracle<F>(F);

impl<F> StepOracle for FnOracle<F>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync,
{
    fn step(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        Ok((self.0)(x, w))
    }
}

#[derive(Clone)]
pub struct BlackBoxSubsystem {
    pub id: usize,
    pub n: usize,
    pub p: usize,
    /// Identity of the dynamics. Subsystems with equal signatures are assumed
    /// to share the same map.
    pub signature: String,
    oracle: Arc<dyn StepOracle>,
}

impl fmt::Debug for BlackBoxSubsystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlackBoxSubsystem")
            .field("id", &self.id)
            .field("n", &self.n)
            .field("p", &self.p)
            .field("signature", &self.signature)
            .finish_non_exhaustive()
    }
}

impl BlackBoxSubsystem {
    pub fn new(id: usize, n: usize, p: usize, oracle: Arc<dyn StepOracle>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "state dimension must be positive".into(),
            ));
        }
        Ok(Self {
            id,
            n,
            p,
            signature: format!("anonymous#{id}"),
            oracle,
        })
    }

    pub fn from_fn<F>(id: usize, n: usize, p: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self::new(id, n, p, Arc::new(FnOracle(f)))
    }

    pub fn with_signature(mut self, signature: impl Into<String>) -> Self {
        self.signature = signature.into();
        self
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn step(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        step_subsystem(self, x, w)
    }
}

/// Evaluates `f_i(x, w)` after checking dimensions on both sides of the call.
pub fn step_subsystem(sub: &BlackBoxSubsystem, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if x.len() != sub.n {
        return Err(Error::DimensionMismatch {
            context: "subsystem state",
            expected: sub.n,
            actual: x.len(),
        });
    }
    if w.len() != sub.p {
        return Err(Error::DimensionMismatch {
            context: "subsystem input",
            expected: sub.p,
            actual: w.len(),
        });
    }
    let out = sub.oracle.step(x, w)?;
    if out.len() != sub.n {
        return Err(Error::DimensionMismatch {
            context: "oracle output",
            expected: sub.n,
            actual: out.len(),
        });
    }
    Ok(out)
}

/// Wiring of a network: `edges[i]` lists, in order, the subsystems whose states
/// are stacked to form the internal input of subsystem `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NetworkTopology {
    pub edges: Vec<Vec<usize>>,
}

impl NetworkTopology {
    pub fn new(edges: Vec<Vec<usize>>) -> Result<Self> {
        let m = edges.len();
        for (i, sources) in edges.iter().enumerate() {
            for &j in sources {
                if j == i {
                    return Err(Error::InvalidArgument(format!(
                        "self-edge on subsystem {i}"
                    )));
                }
                if j >= m {
                    return Err(Error::InvalidArgument(format!(
                        "edge ({i}, {j}) references a subsystem outside 0..{m}"
                    )));
                }
            }
        }
        Ok(Self { edges })
    }

    /// Subsystem `i` reads the state of `i - 1`, with index 0 reading `m - 1`.
    pub fn ring(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument("a ring needs at least two subsystems".into()));
        }
        Self::new((0..m).map(|i| vec![(i + m - 1) % m]).collect())
    }

    pub fn decoupled(m: usize) -> Self {
        Self {
            edges: vec![Vec::new(); m],
        }
    }

    /// Every subsystem reads every other one in increasing index order.
    pub fn complete(m: usize) -> Self {
        Self {
            edges: (0..m)
                .map(|i| (0..m).filter(|&j| j != i).collect())
                .collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }
}

/// An assembled interconnection. Immutable once built.
#[derive(Clone, Debug)]
pub struct NetworkDef {
    subsystems: Vec<BlackBoxSubsystem>,
    topology: NetworkTopology,
    offsets: Vec<usize>,
    n: usize,
}

pub fn assemble_network(
    subsystems: Vec<BlackBoxSubsystem>,
    topology: NetworkTopology,
) -> Result<NetworkDef> {
    if subsystems.len() != topology.m() {
        return Err(Error::DimensionMismatch {
            context: "topology size",
            expected: subsystems.len(),
            actual: topology.m(),
        });
    }
    // Re-run the structural checks in case the topology was built by hand.
    let topology = NetworkTopology::new(topology.edges)?;
    for (i, sources) in topology.edges.iter().enumerate() {
        let fed: usize = sources.iter().map(|&j| subsystems[j].n).sum();
        if fed != subsystems[i].p {
            return Err(Error::InvalidArgument(format!(
                "subsystem {i} expects an input of length {} but its sources provide {fed}",
                subsystems[i].p
            )));
        }
    }
    let mut offsets = Vec::with_capacity(subsystems.len() + 1);
    let mut acc = 0;
    for s in &subsystems {
        offsets.push(acc);
        acc += s.n;
    }
    offsets.push(acc);
    Ok(NetworkDef {
        subsystems,
        topology,
        offsets,
        n: acc,
    })
}

impl NetworkDef {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.subsystems.len()
    }

    pub fn subsystems(&self) -> &[BlackBoxSubsystem] {
        &self.subsystems
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    /// Slice of the global state owned by subsystem `i`.
    pub fn block<'a>(&self, x: &'a [f64], i: usize) -> &'a [f64] {
        &x[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn block_offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Internal input of subsystem `i` assembled from the global state.
    pub fn input_of(&self, x: &[f64], i: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.subsystems[i].p);
        for &j in &self.topology.edges[i] {
            w.extend_from_slice(self.block(x, j));
        }
        w
    }

    fn step_block(&self, x: &[f64], i: usize) -> Result<Vec<f64>> {
        let w = self.input_of(x, i);
        step_subsystem(&self.subsystems[i], self.block(x, i), &w)
    }

    pub fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        step_network(self, x)
    }
}

const PARALLEL_STEP_THRESHOLD: usize = 256;

/// One step of the interconnected map `x ↦ f(x)`.
pub fn step_network(net: &NetworkDef, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != net.n {
        return Err(Error::DimensionMismatch {
            context: "network state",
            expected: net.n,
            actual: x.len(),
        });
    }
    let blocks: Vec<Vec<f64>> = if net.m() >= PARALLEL_STEP_THRESHOLD {
        (0..net.m())
            .into_par_iter()
            .map(|i| net.step_block(x, i))
            .collect::<Result<_>>()?
    } else {
        (0..net.m())
            .map(|i| net.step_block(x, i))
            .collect::<Result<_>>()?
    };
    Ok(blocks.concat())
}

pub fn simulate(net: &NetworkDef, x0: &[f64], k_max: usize) -> Result<Vec<Vec<f64>>> {
    if x0.len() != net.n {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: net.n,
            actual: x0.len(),
        });
    }
    let mut traj = Vec::with_capacity(k_max + 1);
    traj.push(x0.to_vec());
    for k in 0..k_max {
        let next = step_network(net, &traj[k])?;
        traj.push(next);
    }
    Ok(traj)
}

/// Euclidean distance between two simulated trajectories at every step.
pub fn divergence_series(
    net: &NetworkDef,
    x0: &[f64],
    x0_prime: &[f64],
    k_max: usize,
) -> Result<Vec<f64>> {
    let a = simulate(net, x0, k_max)?;
    let b = simulate(net, x0_prime, k_max)?;
    Ok(a.iter().zip(&b).map(|(u, v)| dist(u, v)).collect())
}

/// Two independent initial states drawn uniformly from `[-bound, bound]^n`.
pub fn random_initial_pair(n: usize, bound: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<f64>>();
    let a = draw();
    (a, draw())
}

#[derive(Clone, Debug, Serialize)]
pub struct HomogeneityReport {
    pub samples: usize,
    pub max_deviation: f64,
    pub pass: bool,
}

/// Samples `f(ηx, ηw)` against `η f(x, w)` on random points of `[-1, 1]^{n+p}`.
pub fn check_homogeneity(
    sub: &BlackBoxSubsystem,
    sample_count: usize,
    eta_set: &[f64],
    tol: f64,
    seed: u64,
) -> Result<HomogeneityReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if eta_set.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidArgument("scaling factors must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..sample_count {
        let x: Vec<f64> = (0..sub.n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let w: Vec<f64> = (0..sub.p).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let fx = sub.step(&x, &w)?;
        for &eta in eta_set {
            let scaled_out = sub.step(&scaled(&x, eta), &scaled(&w, eta))?;
            let expected = scaled(&fx, eta);
            let dev = dist(&scaled_out, &expected) / (1.0_f64).max(norm(&expected));
            worst = worst.max(dev);
        }
    }
    Ok(HomogeneityReport {
        samples: sample_count,
        max_deviation: worst,
        pass: worst <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::builtin;

    #[test]
    fn ring_subsystem_step_matches_hand_arithmetic() {
        let sub = builtin::ring_subsystem(0);
        let y = sub.step(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((y[0] - 0.7).abs() < 1e-15);
        assert!((y[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn homogeneous_subsystem_maps_zero_to_zero() {
        let sub = builtin::ring_subsystem(0);
        assert_eq!(sub.step(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_subsystem_one_step() {
        let net = builtin::two_subsystem_network();
        let y = net.subsystems()[0].step(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((y[0] - 0.1).abs() < 1e-15 && (y[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let sub = builtin::ring_subsystem(0);
        assert!(matches!(
            sub.step(&[1.0], &[0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            sub.step(&[1.0, 0.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn oracle_returning_wrong_length_is_caught() {
        let sub = BlackBoxSubsystem::from_fn(0, 2, 0, |_, _| vec![1.0]).unwrap();
        assert!(sub.step(&[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn self_edges_and_bad_dimensions_are_rejected() {
        assert!(NetworkTopology::new(vec![vec![0]]).is_err());
        let a = builtin::ring_subsystem(0);
        let b = builtin::ring_subsystem(1);
        // ring subsystems need p = 2 but receive nothing
        let err = assemble_network(vec![a, b], NetworkTopology::decoupled(2));
        assert!(err.is_err());
    }

    #[test]
    fn single_subsystem_without_inputs_steps_like_the_subsystem() {
        let sub = BlackBoxSubsystem::from_fn(0, 2, 0, |x, _| vec![0.5 * x[0], x[0] - x[1]]).unwrap();
        let net = assemble_network(vec![sub.clone()], NetworkTopology::decoupled(1)).unwrap();
        let x = [0.3, -1.2];
        assert_eq!(net.step(&x).unwrap(), sub.step(&x, &[]).unwrap());
    }

    #[test]
    fn two_subsystem_network_matches_coupled_block_matrix() {
        let net = builtin::two_subsystem_network();
        let a = builtin::coupled_two_subsystem_matrix();
        let x = [0.3, -0.7, 1.1, 0.25];
        let y = net.step(&x).unwrap();
        for r in 0..4 {
            let expect: f64 = (0..4).map(|c| a[r][c] * x[c]).sum();
            assert!((y[r] - expect).abs() < 1e-15, "row {r}");
        }
        let e1 = net.step(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let want = [0.1, 0.3, 0.04, 0.0];
        for (u, v) in e1.iter().zip(want) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn network_blocks_agree_with_subsystem_steps() {
        let net = builtin::ring_network(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..net.n()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = net.step(&x).unwrap();
        for i in 0..net.m() {
            let w = net.block(&x, (i + net.m() - 1) % net.m()).to_vec();
            let yi = net.subsystems()[i].step(net.block(&x, i), &w).unwrap();
            assert_eq!(net.block(&y, i), &yi[..]);
        }
    }

    #[test]
    fn simulate_horizon_zero_returns_initial_state() {
        let net = builtin::two_subsystem_network();
        let t = simulate(&net, &[1.0, 2.0, 3.0, 4.0], 0).unwrap();
        assert_eq!(t, vec![vec![1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn simulate_one_step() {
        let net = builtin::two_subsystem_network();
        let t = simulate(&net, &[1.0, 0.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(t.len(), 2);
        assert!(dist(&t[1], &[0.1, 0.3, 0.04, 0.0]) < 1e-15);
    }

    #[test]
    fn identical_initial_states_never_diverge() {
        let net = builtin::ring_network(3).unwrap();
        let x0 = vec![1.0, -2.0, 0.5, 4.0, 3.0, -1.0];
        let s = divergence_series(&net, &x0, &x0, 20).unwrap();
        assert!(s.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn ring_trajectory_shrinks() {
        let net = builtin::ring_network(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-250.0..250.0)).collect();
        let t = simulate(&net, &x0, 100).unwrap();
        assert!(norm(&t[100]) < norm(&t[0]));
    }

    #[test]
    fn two_subsystem_divergence_decreases_after_transient() {
        let net = builtin::two_subsystem_network();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = divergence_series(&net, &a, &b, 40).unwrap();
        assert!(s[5..].iter().all(|&d| d < s[0]));
    }

    #[test]
    fn homogeneity_check_on_ring_at_unit_point_is_exact() {
        let sub = builtin::ring_subsystem(0);
        let y2 = sub.step(&[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((y2[0] - 1.4).abs() < 1e-15 && (y2[1] + 0.2).abs() < 1e-15);
        let rep = check_homogeneity(&sub, 50, &[0.5, 2.0, 10.0], 1e-12, 1).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn homogeneity_check_flags_affine_oracle() {
        let sub = BlackBoxSubsystem::from_fn(0, 1, 0, |x, _| vec![x[0] + 1.0]).unwrap();
        let rep = check_homogeneity(&sub, 10, &[2.0], 1e-6, 3).unwrap();
        assert!(!rep.pass);
        assert!(rep.max_deviation > 1e-6);
    }

    #[test]
    fn homogeneity_rejects_nonpositive_parameters() {
        let sub = builtin::ring_subsystem(0);
        assert!(check_homogeneity(&sub, 1, &[0.0], 1e-9, 0).is_err());
        assert!(check_homogeneity(&sub, 1, &[1.0], 0.0, 0).is_err());
    }
}
