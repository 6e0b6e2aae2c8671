use std::collections::HashSet;

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::vecops::{checked_grid_size, grid_axis, grid_digits, norm, scaled};

/// Budget on the number of test points used when no resolution is given.
const DEFAULT_TEST_BUDGET: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionEstimate {
    pub epsilon: f64,
    pub epsilon_conservative: f64,
    pub test_set_size: usize,
    /// Spacing of the ambient test grid.
    pub grid_resolution: f64,
}

/// Largest even resolution whose grid in dimension `d` fits the default budget.
pub fn default_test_points_per_axis(d: usize) -> usize {
    let mut t = 2;
    while checked_grid_size(t + 2, d).is_some_and(|c| c <= DEFAULT_TEST_BUDGET) {
        t += 2;
    }
    t
}

/// The ambient grid `[-1, 1]^d` with `t` points per axis, zero point removed,
/// projected radially onto the unit sphere.
pub fn sphere_test_grid(d: usize, t: usize) -> Result<Vec<Vec<f64>>> {
    if t < 2 {
        return Err(Error::InvalidArgument("test grid needs at least 2 points per axis".into()));
    }
    let total = checked_grid_size(t, d)
        .ok_or_else(|| Error::InvalidArgument(format!("{t}^{d} test points overflow")))?;
    let axis = grid_axis(t, 1.0);
    Ok((0..total)
        .into_par_iter()
        .map_init(
            || vec![0usize; d],
            |digits, idx| {
                grid_digits(idx, t, digits);
                let v: Vec<f64> = digits.iter().map(|&k| axis[k]).collect();
                let r = norm(&v);
                (r > 0.0).then(|| scaled(&v, 1.0 / r))
            },
        )
        .flatten_iter()
        .collect())
}

fn build_tree(ds: &Dataset) -> KdTree<f64, (), Vec<f64>> {
    let d = ds.pair_dim();
    let mut seen = HashSet::new();
    let mut tree = KdTree::with_capacity(d, 64);
    for r in ds.records() {
        let key: Vec<u64> = r.pair.iter().map(|v| (v + 0.0).to_bits()).collect();
        if seen.insert(key) {
            tree.add(r.pair.to_vec(), ()).expect("finite coordinates");
        }
    }
    tree
}

/// Largest distance from any of `test_points` to its nearest dataset point.
pub fn dispersion_against(ds: &Dataset, test_points: &[Vec<f64>]) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(bad) = test_points.iter().find(|t| t.len() != ds.pair_dim()) {
        return Err(Error::DimensionMismatch {
            context: "dispersion test point",
            expected: ds.pair_dim(),
            actual: bad.len(),
        });
    }
    let tree = build_tree(ds);
    let worst_sq = test_points
        .par_iter()
        .map(|t| {
            tree.nearest(t, 1, &squared_euclidean)
                .map(|hits| hits[0].0)
                .map_err(|e| Error::Numerical(format!("nearest-neighbour query: {e:?}")))
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    Ok(worst_sq.sqrt())
}

/// Dispersion of a normalized dataset over a projected test grid.
///
/// The conservative value adds the covering radius of the projected test grid
/// itself. A sphere point lies within `δ = √d·s/2` of some ambient grid point
/// of norm at least `1 − δ`, and radial projection is `1/(1 − δ)`-Lipschitz
/// outside that ball, so the projected grid covers the sphere to `δ/(1 − δ)`.
pub fn estimate_dispersion(
    ds: &Dataset,
    test_points_per_axis: Option<usize>,
) -> Result<DispersionEstimate> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !ds.normalized {
        return Err(Error::NotNormalized);
    }
    let d = ds.pair_dim();
    let t = test_points_per_axis.unwrap_or_else(|| default_test_points_per_axis(d));
    let grid = sphere_test_grid(d, t)?;
    let epsilon = dispersion_against(ds, &grid)?;
    let spacing = 2.0 / (t - 1) as f64;
    let delta = (d as f64).sqrt() * spacing / 2.0;
    let h = if delta < 1.0 { delta / (1.0 - delta) } else { 2.0 };
    Ok(DispersionEstimate {
        epsilon,
        epsilon_conservative: (epsilon + h).min(2.0),
        test_set_size: grid.len(),
        grid_resolution: spacing,
    })
}
