//! Lipschitz constants of the certified expressions, estimated from sampled
//! slopes with an extreme-value fit.
//!
//! Each batch draws `phi` close pairs on a sphere and keeps the largest slope
//! `|g(u) − g(v)| / ‖u − v‖`. The `sigma` batch maxima are fitted with a reverse
//! Weibull law, whose finite upper endpoint (the location) estimates the
//! constant.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::BlackBoxSubsystem;
use crate::error::{Error, Result};
use crate::scenario::SopSolution;
use crate::vecops::{dist, norm, random_unit, scaled};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LipschitzConfig {
    pub lambda: f64,
    pub phi: usize,
    pub sigma: usize,
    pub seed: u64,
    pub safety_factor: f64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            phi: 500,
            sigma: 100,
            seed: 0,
            safety_factor: 1.1,
        }
    }
}

impl LipschitzConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument("lambda must be positive".into()));
        }
        if self.phi == 0 || self.sigma == 0 {
            return Err(Error::InvalidArgument("phi and sigma must be at least 1".into()));
        }
        if !(self.safety_factor >= 1.0) || !self.safety_factor.is_finite() {
            return Err(Error::InvalidArgument("safety factor must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeibullFit {
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
    /// Kolmogorov-Smirnov distance between the fit and the sample.
    pub fit_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l: f64,
    pub config: LipschitzConfig,
}

const MAX_REDRAWS: usize = 10_000;
const MIN_SEPARATION: f64 = 1e-12;

/// A uniform point on the unit sphere in `R^dim` and a second point within
/// `lambda` of it, obtained by a uniform perturbation in the `lambda`-ball
/// followed by radial projection.
pub fn sample_close_pair<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let u = random_unit(rng, dim);
    for _ in 0..MAX_REDRAWS {
        let radius = lambda * rng.random::<f64>().powf(1.0 / dim as f64);
        let dir = random_unit(rng, dim);
        let moved: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + radius * b).collect();
        let r = norm(&moved);
        if r == 0.0 {
            continue;
        }
        let v = scaled(&moved, 1.0 / r);
        let d = dist(&u, &v);
        if d > MIN_SEPARATION && d <= lambda {
            return Ok((u, v));
        }
    }
    Err(Error::Numerical(format!(
        "no pair within {lambda} found on the sphere in R^{dim} after {MAX_REDRAWS} draws"
    )))
}

/// Largest slope of `g` over `phi` close pairs.
pub fn batch_max_slope<G, R>(g: &G, dim: usize, lambda: f64, phi: usize, rng: &mut R) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<f64> + ?Sized,
    R: Rng + ?Sized,
{
    let mut best = 0.0_f64;
    for _ in 0..phi {
        let (u, v) = sample_close_pair(rng, dim, lambda)?;
        let slope = (g(&u)? - g(&v)?).abs() / dist(&u, &v);
        best = best.max(slope);
    }
    Ok(best)
}

fn batch_rng(seed: u64, stream: u64, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | batch as u64);
    rng
}

/// The `sigma` batch maxima, each batch on its own deterministic stream.
pub fn batch_maxima<G>(g: &G, dim: usize, cfg: &LipschitzConfig, stream: u64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<f64> + Sync + ?Sized,
{
    cfg.validate()?;
    (0..cfg.sigma)
        .into_par_iter()
        .map(|b| {
            let mut rng = batch_rng(cfg.seed, stream, b);
            batch_max_slope(g, dim, cfg.lambda, cfg.phi, &mut rng)
        })
        .collect()
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Two-parameter Weibull fit of `z > 0` with shape constrained to `k ≥ 1`.
/// Returns `(scale, shape, log-likelihood)`.
fn weibull_mle(z: &[f64]) -> (f64, f64, f64) {
    let n = z.len() as f64;
    let zmax = z.iter().copied().fold(0.0, f64::max);
    let zs: Vec<f64> = z.iter().map(|v| v / zmax).collect();
    let logs: Vec<f64> = zs.iter().map(|v| v.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / n;
    // Increasing in k; its root is the unconstrained shape estimate.
    let profile = |k: f64| {
        let (mut a, mut b) = (0.0, 0.0);
        for (v, l) in zs.iter().zip(&logs) {
            let p = v.powf(k);
            a += p * l;
            b += p;
        }
        a / b - 1.0 / k - mean_log
    };
    let k = if profile(1.0) >= 0.0 {
        1.0
    } else {
        let mut hi = 2.0;
        while profile(hi) < 0.0 && hi < 1e4 {
            hi *= 2.0;
        }
        let mut lo = hi / 2.0;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if profile(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let mean_pow = zs.iter().map(|v| v.powf(k)).sum::<f64>() / n;
    let scale_s = mean_pow.powf(1.0 / k);
    let ll_s = n * k.ln() - n * k * scale_s.ln() + (k - 1.0) * logs.iter().sum::<f64>()
        - zs.iter().map(|v| (v / scale_s).powf(k)).sum::<f64>();
    (scale_s * zmax, k, ll_s - n * zmax.ln())
}

fn profile_at(y: &[f64], loc: f64) -> (f64, f64, f64) {
    let z: Vec<f64> = y.iter().map(|v| loc - v).collect();
    weibull_mle(&z)
}

fn ks_distance(sorted: &[f64], fit: &WeibullFit) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let f = (-((fit.location - y) / fit.scale).powf(fit.shape)).exp();
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

const LOCATION_GRID: usize = 400;

/// Profile-likelihood fit of `F(θ) = exp(−((location − θ)/scale)^shape)`.
///
/// Candidate locations lie on a grid over `(max, max + 3·IQR]`; the best grid
/// point is refined by golden-section search between its neighbours. Equal
/// inputs return their common value with zero scale.
pub fn fit_reverse_weibull(maxima: &[f64]) -> Result<WeibullFit> {
    if maxima.len() < 3 {
        return Err(Error::InvalidArgument(
            "reverse Weibull fit needs at least 3 maxima".into(),
        ));
    }
    if maxima.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("maxima must be finite".into()));
    }
    let mut sorted = maxima.to_vec();
    sorted.sort_by(f64::total_cmp);
    let top = sorted[sorted.len() - 1];
    let bottom = sorted[0];
    if top - bottom <= 1e-14 * top.abs().max(1.0) {
        return Ok(WeibullFit {
            location: top,
            scale: 0.0,
            shape: 1.0,
            fit_residual: 0.0,
        });
    }
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let span = 3.0 * if iqr > 0.0 { iqr } else { top - bottom };
    let step = span / LOCATION_GRID as f64;
    let (mut best_k, mut best_ll) = (1, f64::NEG_INFINITY);
    for k in 1..=LOCATION_GRID {
        let ll = profile_at(&sorted, top + step * k as f64).2;
        if ll > best_ll {
            best_ll = ll;
            best_k = k;
        }
    }
    // Golden-section refinement on the bracket around the best grid point.
    let ll_at = |loc: f64| profile_at(&sorted, loc).2;
    let mut a = top + step * (best_k as f64 - 1.0).max(1e-3);
    let mut b = top + step * (best_k + 1).min(LOCATION_GRID) as f64;
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if ll_at(c) >= ll_at(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let refined = 0.5 * (a + b);
    let location = if ll_at(refined) >= best_ll {
        refined
    } else {
        top + step * best_k as f64
    };
    let (scale, shape, _) = profile_at(&sorted, location);
    let mut fit = WeibullFit {
        location,
        scale,
        shape,
        fit_residual: 0.0,
    };
    fit.fit_residual = ks_distance(&sorted, &fit);
    Ok(fit)
}

/// Fitted location of the batch maxima of `g`, or the largest maximum when
/// there are too few batches to fit.
pub fn estimate_lipschitz<G>(g: &G, dim: usize, cfg: &LipschitzConfig, stream: u64) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<f64> + Sync + ?Sized,
{
    let maxima = batch_maxima(g, dim, cfg, stream)?;
    if maxima.len() < 3 {
        return Ok(maxima.iter().copied().fold(0.0, f64::max));
    }
    Ok(fit_reverse_weibull(&maxima)?.location.max(0.0))
}

/// Estimates the constants of the lower-bound, upper-bound and decay
/// expressions of a scenario solution. The first two live on the sphere of
/// `(x, x′)`; the decay expression lives on the full pair sphere and calls the
/// oracle.
pub fn estimate_constants(
    sol: &SopSolution,
    sub: &BlackBoxSubsystem,
    cfg: &LipschitzConfig,
) -> Result<LipschitzEstimate> {
    cfg.validate()?;
    let t = sol.template()?;
    if t.n != sub.n {
        return Err(Error::DimensionMismatch {
            context: "template vs subsystem state dimension",
            expected: sub.n,
            actual: t.n,
        });
    }
    let (n, p) = (sub.n, sub.p);
    let s_of = |x: &[f64], xp: &[f64]| -> f64 {
        t.basis
            .iter()
            .zip(&sol.q)
            .map(|(&(a, b), q)| q * (x[a - 1] - xp[a - 1]) * (x[b - 1] - xp[b - 1]))
            .sum()
    };
    let dx_sq = |x: &[f64], xp: &[f64]| -> f64 { x.iter().zip(xp).map(|(a, b)| (a - b) * (a - b)).sum() };
    let g1 = |u: &[f64]| -> Result<f64> {
        let (x, xp) = u.split_at(n);
        Ok(sol.alpha_lo * dx_sq(x, xp) - s_of(x, xp))
    };
    let g2 = |u: &[f64]| -> Result<f64> {
        let (x, xp) = u.split_at(n);
        Ok(s_of(x, xp) - sol.alpha_hi * dx_sq(x, xp))
    };
    let g3 = |u: &[f64]| -> Result<f64> {
        let (x, rest) = u.split_at(n);
        let (w, rest) = rest.split_at(p);
        let (xp, wp) = rest.split_at(n);
        let fx = sub.step(x, w)?;
        let fxp = sub.step(xp, wp)?;
        Ok(s_of(&fx, &fxp) - sol.gamma * s_of(x, xp) - sol.rho * dx_sq(w, wp))
    };
    let l1 = estimate_lipschitz(&g1, 2 * n, cfg, 1)?;
    let l2 = estimate_lipschitz(&g2, 2 * n, cfg, 2)?;
    let l3 = estimate_lipschitz(&g3, 2 * (n + p), cfg, 3)?;
    Ok(LipschitzEstimate {
        l1,
        l2,
        l3,
        l: cfg.safety_factor * l1.max(l2).max(l3),
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{LyapunovTemplate, TemplateJson};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Weibull};

    fn linear_g(c: Vec<f64>) -> impl Fn(&[f64]) -> Result<f64> + Sync {
        move |u: &[f64]| Ok(c.iter().zip(u).map(|(a, b)| a * b).sum())
    }

    #[test]
    fn pairs_respect_the_distance_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in [2, 3, 8] {
            for _ in 0..200 {
                let (u, v) = sample_close_pair(&mut rng, dim, 0.05).unwrap();
                let d = dist(&u, &v);
                assert!(d > 0.0 && d <= 0.05);
                assert!((norm(&u) - 1.0).abs() < 1e-12 && (norm(&v) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_sphere_has_no_close_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_close_pair(&mut rng, 1, 0.1).is_err());
    }

    #[test]
    fn constant_function_has_zero_slope() {
        let g = |_: &[f64]| Ok(3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(batch_max_slope(&g, 3, 0.05, 100, &mut rng).unwrap(), 0.0);
        let cfg = LipschitzConfig {
            phi: 50,
            sigma: 10,
            ..LipschitzConfig::default()
        };
        assert_eq!(estimate_lipschitz(&g, 3, &cfg, 0).unwrap(), 0.0);
    }

    #[test]
    fn linear_function_batch_max_approaches_norm() {
        let g = linear_g(vec![3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let few = batch_max_slope(&g, 2, 0.05, 10, &mut rng).unwrap();
        let many = batch_max_slope(&g, 2, 0.05, 5000, &mut rng).unwrap();
        assert!(few <= 5.0 + 1e-9 && many <= 5.0 + 1e-9);
        assert!(many > 4.95);
    }

    #[test]
    fn squared_coordinate_batch_max_is_at_most_two() {
        let g = |u: &[f64]| Ok(u[0] * u[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = batch_max_slope(&g, 2, 0.01, 5000, &mut rng).unwrap();
        // max |d/dt cos²t| = |sin 2t| ≤ 1 along the circle
        assert!(m <= 2.0 && m > 0.95, "{m}");
    }

    #[test]
    fn degenerate_fit_returns_common_value() {
        let fit = fit_reverse_weibull(&[2.5; 10]).unwrap();
        assert_eq!(fit.location, 2.5);
        assert_eq!(fit.scale, 0.0);
    }

    #[test]
    fn fit_rejects_short_or_non_finite_input() {
        assert!(fit_reverse_weibull(&[1.0, 2.0]).is_err());
        assert!(fit_reverse_weibull(&[1.0, f64::NAN, 2.0]).is_err());
    }

    #[test]
    fn fit_recovers_location_of_simulated_sample() {
        let w = Weibull::new(1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample: Vec<f64> = (0..1000).map(|_| 5.0 - w.sample(&mut rng)).collect();
        let fit = fit_reverse_weibull(&sample).unwrap();
        assert!((fit.location - 5.0).abs() <= 0.25, "{fit:?}");
        assert!(fit.fit_residual < 0.1);
    }

    #[test]
    fn fitted_linear_constant_is_close_to_norm() {
        let g = linear_g(vec![3.0, 4.0]);
        let cfg = LipschitzConfig {
            phi: 500,
            sigma: 50,
            seed: 6,
            ..LipschitzConfig::default()
        };
        let l = estimate_lipschitz(&g, 2, &cfg, 0).unwrap();
        assert!((4.5..=5.5).contains(&l), "{l}");
    }

    #[test]
    fn estimates_are_deterministic() {
        let g = linear_g(vec![1.0, -2.0, 0.5]);
        let cfg = LipschitzConfig {
            phi: 100,
            sigma: 20,
            seed: 9,
            ..LipschitzConfig::default()
        };
        assert_eq!(
            estimate_lipschitz(&g, 3, &cfg, 0).unwrap(),
            estimate_lipschitz(&g, 3, &cfg, 0).unwrap()
        );
    }

    fn scalar_solution(gamma: f64, rho: f64) -> SopSolution {
        SopSolution {
            q: vec![1.0],
            alpha_lo: 1.0,
            alpha_hi: 1.0,
            gamma,
            rho,
            mu_star: 0.0,
            phi_star: 0.0,
            template: TemplateJson::from(&LyapunovTemplate::full_quadratic(1)),
        }
    }

    /// Largest slope over random pairs separated by `h` along a random
    /// tangent direction.
    fn brute_force_slope(g: impl Fn(&[f64]) -> f64, dim: usize, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        let mut best = 0.0_f64;
        for _ in 0..pairs {
            let u = random_unit(&mut rng, dim);
            let d = random_unit(&mut rng, dim);
            let dot: f64 = u.iter().zip(&d).map(|(a, b)| a * b).sum();
            let t: Vec<f64> = d.iter().zip(&u).map(|(a, b)| a - dot * b).collect();
            let tn = norm(&t);
            let moved: Vec<f64> = u.iter().zip(&t).map(|(a, b)| a + h * b / tn).collect();
            let v = scaled(&moved, 1.0 / norm(&moved));
            best = best.max((g(&u) - g(&v)).abs() / dist(&u, &v));
        }
        best
    }

    #[test]
    fn decay_expression_of_scalar_contraction() {
        // f = 0.5x, S = (Δx)², γ = 0.9, ρ = 0: g₃ = −0.65(Δx)² on the circle.
        let sub = BlackBoxSubsystem::from_fn(0, 1, 0, |x, _| vec![0.5 * x[0]]).unwrap();
        let est = estimate_constants(&scalar_solution(0.9, 0.0), &sub, &LipschitzConfig::default()).unwrap();
        let brute = brute_force_slope(|u| -0.65 * (u[0] - u[1]).powi(2), 2, 1_000_000, 7);
        assert!((brute - 1.3).abs() < 1e-3, "{brute}");
        assert!((est.l3 - brute).abs() <= 0.15 * brute, "{est:?} vs {brute}");
        assert!(est.l >= est.l1.max(est.l2).max(est.l3));
    }

    #[test]
    fn decay_expression_of_identity_at_unit_rate() {
        // f(x, w) = x with γ = 1 leaves g₃ = −ρ(Δw)².
        let rho = 0.3;
        let sub = BlackBoxSubsystem::from_fn(0, 1, 1, |x, _| vec![x[0]]).unwrap();
        let est = estimate_constants(&scalar_solution(1.0, rho), &sub, &LipschitzConfig::default()).unwrap();
        let brute = brute_force_slope(|u| -rho * (u[1] - u[3]).powi(2), 4, 1_000_000, 8);
        assert!((est.l3 - brute).abs() <= 0.15 * brute, "{est:?} vs {brute}");
    }

    #[test]
    fn config_validation() {
        assert!(LipschitzConfig { lambda: 0.0, ..Default::default() }.validate().is_err());
        assert!(LipschitzConfig { sigma: 0, ..Default::default() }.validate().is_err());
        assert!(LipschitzConfig { safety_factor: 0.9, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn location_dominates_sample(v in prop::collection::vec(-10.0f64..10.0, 3..60)) {
            let fit = fit_reverse_weibull(&v).unwrap();
            let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fit.location >= top);
            prop_assert!(fit.scale >= 0.0 && fit.shape >= 1.0);
        }
    }
}
