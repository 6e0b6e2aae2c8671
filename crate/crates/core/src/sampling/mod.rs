//! Sample collection, projection onto the unit sphere, dispersion, and
//! dataset persistence.
//!
//! A record is a pair point `(x, w, x′, w′)` in `R^{2(n+p)}` together with the
//! two oracle outputs `f(x, w)` and `f(x′, w′)`. Records are stored flat with
//! stride `4n + 2p` in the order `x, w, x′, w′, fx, fx′`.

mod dispersion;
mod io;

pub use dispersion::{
    default_test_points_per_axis, dispersion_against, estimate_dispersion, sphere_test_grid,
    DispersionEstimate,
};
pub use io::{load_dataset, save_dataset};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::BlackBoxSubsystem;
use crate::error::{Error, Result};
use crate::vecops::{checked_grid_size, grid_axis, grid_digits, norm};

/// Tolerance on the unit-norm invariant of normalized records.
pub const UNIT_NORM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum SamplingScheme {
    Grid { points_per_axis: usize },
    UniformRandom { count: usize },
}

impl SamplingScheme {
    /// Number of pair-space points the scheme enumerates in dimension `d`,
    /// before the all-zero point is dropped.
    pub fn raw_count(&self, d: usize) -> Option<usize> {
        match *self {
            SamplingScheme::Grid { points_per_axis } => checked_grid_size(points_per_axis, d),
            SamplingScheme::UniformRandom { count } => Some(count),
        }
    }

    /// A scheme with at least twice as many points.
    pub fn densified(&self, d: usize) -> Self {
        match *self {
            SamplingScheme::Grid { points_per_axis } => {
                let target = checked_grid_size(points_per_axis, d).map(|c| c.saturating_mul(2));
                let mut t = points_per_axis + 1;
                while let (Some(target), Some(c)) = (target, checked_grid_size(t, d)) {
                    if c >= target {
                        break;
                    }
                    t += 1;
                }
                SamplingScheme::Grid { points_per_axis: t }
            }
            SamplingScheme::UniformRandom { count } => SamplingScheme::UniformRandom {
                count: count.saturating_mul(2),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMeta {
    pub scheme: Option<SamplingScheme>,
    pub bound: f64,
    pub seed: u64,
    /// Pair-space points enumerated, including any skipped zero point.
    pub enumerated: usize,
    pub skipped_zero: usize,
}

impl Default for SamplingMeta {
    fn default() -> Self {
        Self {
            scheme: None,
            bound: 1.0,
            seed: 0,
            enumerated: 0,
            skipped_zero: 0,
        }
    }
}

/// An owned record, used for construction and serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub xp: Vec<f64>,
    pub wp: Vec<f64>,
    pub fx: Vec<f64>,
    pub fxp: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct RecordView<'a> {
    pub x: &'a [f64],
    pub w: &'a [f64],
    pub xp: &'a [f64],
    pub wp: &'a [f64],
    pub fx: &'a [f64],
    pub fxp: &'a [f64],
    /// The concatenation `(x, w, x′, w′)`.
    pub pair: &'a [f64],
}

impl RecordView<'_> {
    pub fn to_owned(&self) -> RawRecord {
        RawRecord {
            x: self.x.to_vec(),
            w: self.w.to_vec(),
            xp: self.xp.to_vec(),
            wp: self.wp.to_vec(),
            fx: self.fx.to_vec(),
            fxp: self.fxp.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: usize,
    pub n: usize,
    pub p: usize,
    pub normalized: bool,
    pub meta: SamplingMeta,
    data: Vec<f64>,
}

impl Dataset {
    pub fn new(id: usize, n: usize, p: usize, meta: SamplingMeta) -> Self {
        Self {
            id,
            n,
            p,
            normalized: false,
            meta,
            data: Vec::new(),
        }
    }

    /// Builds a dataset and enforces the unit-norm invariant when `normalized`.
    pub fn from_records(
        id: usize,
        n: usize,
        p: usize,
        normalized: bool,
        meta: SamplingMeta,
        records: &[RawRecord],
    ) -> Result<Self> {
        let mut ds = Self::new(id, n, p, meta);
        for r in records {
            ds.push(r)?;
        }
        ds.normalized = normalized;
        ds.validate()?;
        Ok(ds)
    }

    pub fn stride(&self) -> usize {
        4 * self.n + 2 * self.p
    }

    pub fn pair_dim(&self) -> usize {
        2 * (self.n + self.p)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, r: &RawRecord) -> Result<()> {
        let (n, p) = (self.n, self.p);
        for (len, want, what) in [
            (r.x.len(), n, "record x"),
            (r.w.len(), p, "record w"),
            (r.xp.len(), n, "record x'"),
            (r.wp.len(), p, "record w'"),
            (r.fx.len(), n, "record fx"),
            (r.fxp.len(), n, "record fx'"),
        ] {
            if len != want {
                return Err(Error::DimensionMismatch {
                    context: what,
                    expected: want,
                    actual: len,
                });
            }
        }
        for part in [&r.x, &r.w, &r.xp, &r.wp, &r.fx, &r.fxp] {
            self.data.extend_from_slice(part);
        }
        Ok(())
    }

    pub fn record(&self, i: usize) -> RecordView<'_> {
        let (n, p) = (self.n, self.p);
        let s = &self.data[i * self.stride()..(i + 1) * self.stride()];
        let (pair, rest) = s.split_at(2 * (n + p));
        let (x, tail) = pair.split_at(n);
        let (w, tail) = tail.split_at(p);
        let (xp, wp) = tail.split_at(n);
        let (fx, fxp) = rest.split_at(n);
        RecordView {
            x,
            w,
            xp,
            wp,
            fx,
            fxp,
            pair,
        }
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = RecordView<'_>> + '_ {
        (0..self.len()).map(move |i| self.record(i))
    }

    /// Checks the unit-norm invariant if the dataset claims to be normalized.
    pub fn validate(&self) -> Result<()> {
        if !self.normalized {
            return Ok(());
        }
        for (i, r) in self.records().enumerate() {
            let dev = (norm(r.pair) - 1.0).abs();
            if !(dev <= UNIT_NORM_TOL) {
                return Err(Error::Validation(format!(
                    "record {i} of normalized dataset has pair norm off by {dev:e}"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the dataset's file representation, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        io::write_to(self, &mut HashWriter(&mut hasher)).expect("hashing cannot fail");
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn from_flat(id: usize, n: usize, p: usize, meta: SamplingMeta, data: Vec<f64>) -> Self {
        Self {
            id,
            n,
            p,
            normalized: false,
            meta,
            data,
        }
    }
}

struct HashWriter<'a>(&'a mut Sha256);

impl std::io::Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn evaluate_record(sub: &BlackBoxSubsystem, pair: &[f64], index: usize) -> Result<Vec<f64>> {
    let (n, p) = (sub.n, sub.p);
    let (x, rest) = pair.split_at(n);
    let (w, rest) = rest.split_at(p);
    let (xp, wp) = rest.split_at(n);
    let wrap = |e: Error| Error::Oracle {
        index,
        reason: e.to_string(),
    };
    let fx = sub.step(x, w).map_err(wrap)?;
    let fxp = sub.step(xp, wp).map_err(wrap)?;
    let mut out = Vec::with_capacity(pair.len() + 2 * n);
    out.extend_from_slice(pair);
    out.extend_from_slice(&fx);
    out.extend_from_slice(&fxp);
    Ok(out)
}

/// Samples pair space `[-bound, bound]^{2(n+p)}` and evaluates the oracle at
/// both halves of every point. The all-zero pair point is skipped.
pub fn collect(
    sub: &BlackBoxSubsystem,
    scheme: SamplingScheme,
    bound: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::InvalidArgument("sampling bound must be positive".into()));
    }
    let d = 2 * (sub.n + sub.p);
    let points: Vec<Vec<f64>> = match scheme {
        SamplingScheme::Grid { points_per_axis } => {
            if points_per_axis < 2 {
                return Err(Error::InvalidArgument("grid needs at least 2 points per axis".into()));
            }
            let total = checked_grid_size(points_per_axis, d).ok_or_else(|| {
                Error::InvalidArgument(format!("{points_per_axis}^{d} grid points overflow"))
            })?;
            let axis = grid_axis(points_per_axis, bound);
            (0..total)
                .into_par_iter()
                .map_init(
                    || vec![0usize; d],
                    |digits, idx| {
                        grid_digits(idx, points_per_axis, digits);
                        digits.iter().map(|&k| axis[k]).collect()
                    },
                )
                .collect()
        }
        SamplingScheme::UniformRandom { count } => {
            if count < 2 {
                return Err(Error::InvalidArgument("random sampling needs count >= 2".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| (0..d).map(|_| rng.random_range(-bound..=bound)).collect())
                .collect()
        }
    };
    let enumerated = points.len();
    let kept: Vec<&Vec<f64>> = points.iter().filter(|v| v.iter().any(|&c| c != 0.0)).collect();
    let skipped_zero = enumerated - kept.len();
    let rows = kept
        .par_iter()
        .enumerate()
        .map(|(i, pair)| evaluate_record(sub, pair, i))
        .collect::<Result<Vec<_>>>()?;
    let meta = SamplingMeta {
        scheme: Some(scheme),
        bound,
        seed,
        enumerated,
        skipped_zero,
    };
    Ok(Dataset::from_flat(sub.id, sub.n, sub.p, meta, rows.concat()))
}

/// Divides all six blocks of every record by the norm of its pair point.
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    let stride = ds.stride();
    let d = ds.pair_dim();
    let mut data = ds.data.clone();
    for (i, chunk) in data.chunks_mut(stride).enumerate() {
        let c = norm(&chunk[..d]);
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::ZeroNormRecord(i));
        }
        chunk.iter_mut().for_each(|v| *v /= c);
    }
    let mut out = Dataset::from_flat(ds.id, ds.n, ds.p, ds.meta.clone(), data);
    out.normalized = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::builtin;
    use crate::vecops::dist;
    use proptest::prelude::*;

    fn scalar_sub() -> BlackBoxSubsystem {
        BlackBoxSubsystem::from_fn(0, 1, 1, |x, w| vec![0.5 * x[0] + 0.1 * w[0]]).unwrap()
    }

    #[test]
    fn ring_grid_count_skips_only_the_zero_point() {
        let sub = builtin::ring_subsystem(0);
        let ds = collect(&sub, SamplingScheme::Grid { points_per_axis: 5 }, 1.0, 0).unwrap();
        assert_eq!(ds.len(), 390_624);
        assert_eq!(ds.meta.enumerated, 390_625);
        assert_eq!(ds.meta.skipped_zero, 1);
    }

    #[test]
    fn two_point_grid_in_one_dimension() {
        let sub = BlackBoxSubsystem::from_fn(0, 1, 0, |x, _| vec![x[0]]).unwrap();
        let ds = collect(&sub, SamplingScheme::Grid { points_per_axis: 2 }, 1.0, 0).unwrap();
        assert_eq!(ds.len(), 4);
        let pairs: Vec<Vec<f64>> = ds.records().map(|r| r.pair.to_vec()).collect();
        for want in [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]] {
            assert!(pairs.contains(&want.to_vec()));
        }
    }

    #[test]
    fn random_collection_is_reproducible() {
        let sub = builtin::ring_subsystem(0);
        let s = SamplingScheme::UniformRandom { count: 1000 };
        let a = collect(&sub, s, 1.0, 42).unwrap();
        let b = collect(&sub, s, 1.0, 42).unwrap();
        assert_eq!(a, b);
        let c = collect(&sub, s, 1.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn collect_rejects_bad_arguments() {
        let sub = scalar_sub();
        assert!(collect(&sub, SamplingScheme::Grid { points_per_axis: 1 }, 1.0, 0).is_err());
        assert!(collect(&sub, SamplingScheme::Grid { points_per_axis: 3 }, 0.0, 0).is_err());
        assert!(collect(&sub, SamplingScheme::UniformRandom { count: 1 }, 1.0, 0).is_err());
    }

    #[test]
    fn oracle_failure_carries_record_index() {
        let sub = BlackBoxSubsystem::from_fn(0, 1, 0, |_, _| vec![]).unwrap();
        let err = collect(&sub, SamplingScheme::Grid { points_per_axis: 2 }, 1.0, 0).unwrap_err();
        assert!(matches!(err, Error::Oracle { .. }));
    }

    #[test]
    fn normalize_hand_example() {
        let r = RawRecord {
            x: vec![3.0],
            w: vec![0.0],
            xp: vec![0.0],
            wp: vec![4.0],
            fx: vec![1.5],
            fxp: vec![0.4],
        };
        let ds = Dataset::from_records(0, 1, 1, false, SamplingMeta::default(), &[r]).unwrap();
        let nd = normalize(&ds).unwrap();
        let v = nd.record(0);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(v.x[0], 0.6) && close(v.w[0], 0.0));
        assert!(close(v.xp[0], 0.0) && close(v.wp[0], 0.8));
        assert!(close(v.fx[0], 0.3) && close(v.fxp[0], 0.08));
        assert!(nd.normalized);
    }

    #[test]
    fn unit_record_is_unchanged() {
        let r = RawRecord {
            x: vec![0.6],
            w: vec![],
            xp: vec![0.8],
            wp: vec![],
            fx: vec![0.1],
            fxp: vec![0.2],
        };
        let ds = Dataset::from_records(0, 1, 0, false, SamplingMeta::default(), &[r.clone()]).unwrap();
        let nd = normalize(&ds).unwrap();
        let back = nd.record(0).to_owned();
        assert!(dist(&back.x, &r.x) < 1e-15 && dist(&back.fxp, &r.fxp) < 1e-15);
    }

    #[test]
    fn zero_norm_record_is_rejected_with_index() {
        let mk = |v: f64| RawRecord {
            x: vec![v],
            w: vec![],
            xp: vec![v],
            wp: vec![],
            fx: vec![0.0],
            fxp: vec![0.0],
        };
        let ds = Dataset::from_records(0, 1, 0, false, SamplingMeta::default(), &[mk(1.0), mk(0.0)])
            .unwrap();
        assert!(matches!(normalize(&ds), Err(Error::ZeroNormRecord(1))));
    }

    #[test]
    fn normalized_outputs_match_oracle_at_normalized_inputs() {
        let sub = builtin::ring_subsystem(0);
        let raw = collect(&sub, SamplingScheme::UniformRandom { count: 200 }, 7.0, 5).unwrap();
        let nd = normalize(&raw).unwrap();
        for r in nd.records() {
            let fx = sub.step(r.x, r.w).unwrap();
            let fxp = sub.step(r.xp, r.wp).unwrap();
            assert!(dist(&fx, r.fx) < 1e-12 && dist(&fxp, r.fxp) < 1e-12);
        }
    }

    #[test]
    fn normalization_is_scale_invariant_for_grids() {
        let sub = builtin::ring_subsystem(0);
        let s = SamplingScheme::Grid { points_per_axis: 3 };
        let a = normalize(&collect(&sub, s, 1.0, 0).unwrap()).unwrap();
        let b = normalize(&collect(&sub, s, 2.0, 0).unwrap()).unwrap();
        assert_eq!(a.len(), b.len());
        for (u, v) in a.records().zip(b.records()) {
            assert!(dist(u.pair, v.pair) < 1e-12);
        }
    }

    #[test]
    fn densified_grid_at_least_doubles() {
        let s = SamplingScheme::Grid { points_per_axis: 5 }.densified(8);
        assert_eq!(s, SamplingScheme::Grid { points_per_axis: 6 });
        let s = SamplingScheme::Grid { points_per_axis: 2 }.densified(1);
        assert_eq!(s, SamplingScheme::Grid { points_per_axis: 4 });
        assert_eq!(
            SamplingScheme::UniformRandom { count: 10 }.densified(3),
            SamplingScheme::UniformRandom { count: 20 }
        );
    }

    #[test]
    fn content_hash_changes_with_data() {
        let sub = scalar_sub();
        let a = collect(&sub, SamplingScheme::Grid { points_per_axis: 3 }, 1.0, 0).unwrap();
        let b = collect(&sub, SamplingScheme::Grid { points_per_axis: 3 }, 2.0, 0).unwrap();
        assert_eq!(a.content_hash(), a.clone().content_hash());
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(seed in 0u64..1000, bound in 0.1f64..100.0) {
            let sub = scalar_sub();
            let raw = collect(&sub, SamplingScheme::UniformRandom { count: 20 }, bound, seed).unwrap();
            let once = normalize(&raw).unwrap();
            let twice = normalize(&once).unwrap();
            for (u, v) in once.records().zip(twice.records()) {
                prop_assert!(dist(u.pair, v.pair) < 1e-12);
                prop_assert!(dist(u.fx, v.fx) < 1e-12);
            }
            prop_assert!(twice.validate().is_ok());
        }
    }
}
