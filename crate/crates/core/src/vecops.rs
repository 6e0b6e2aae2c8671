//! Small dense-vector helpers shared across modules.

use rand::Rng;
use rand_distr::StandardNormal;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}

pub fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|a| a * s).collect()
}

/// Uniform sample on the unit sphere in `R^dim`.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let r = norm(&v);
        if r > 1e-12 {
            return scaled(&v, 1.0 / r);
        }
    }
}

/// Decode `index` as a mixed-radix number with `dim` digits of base `base`.
pub(crate) fn grid_digits(mut index: usize, base: usize, out: &mut [usize]) {
    for d in out.iter_mut() {
        *d = index % base;
        index /= base;
    }
}

/// Coordinates of a regular grid with `points` values spanning `[-bound, bound]`.
pub(crate) fn grid_axis(points: usize, bound: f64) -> Vec<f64> {
    (0..points)
        .map(|k| {
            let t = k as f64 / (points - 1) as f64;
            let v = -bound + 2.0 * bound * t;
            // Center value of odd grids must be an exact zero.
            if points % 2 == 1 && k == points / 2 {
                0.0
            } else {
                v
            }
        })
        .collect()
}

pub(crate) fn checked_grid_size(points: usize, dim: usize) -> Option<usize> {
    points.checked_pow(u32::try_from(dim).ok()?)
}
