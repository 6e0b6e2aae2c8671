//! Scenario linear program for quadratic incremental Lyapunov candidates.
//!
//! For a fixed decay rate `γ` the program over `(q, α̲, ᾱ, ρ, μ, φ)` is
//!
//! ```text
//! minimize   μ + φ
//! subject to α̲‖Δx‖² − S(q, x, x′)                          ≤ μ   per record
//!            S(q, x, x′) − ᾱ‖Δx‖²                          ≤ μ   per record
//!            S(q, fx, fx′) − γ S(q, x, x′) − ρ‖Δw‖²        ≤ μ   per record
//!            ρ / (1 − γ)                                   ≤ φ
//! ```
//!
//! with box bounds on every variable. The robust counterpart over the whole
//! sphere cannot be solved without the dynamics; its constraint functions are
//! exposed through [`constraint_residuals`] and reused by the audit.
//!
//! Rows are generated lazily: a cutting-plane loop solves on a subset, scans
//! all records for violations, and adds the worst row of each batch.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::lp::{solve_lp_with, LpOptions, LpProblem, LpStatus};
use crate::sampling::{Dataset, RecordView};

/// Quadratic basis `p_j = (x_a − x′_a)(x_b − x′_b)` with 1-based `(a, b)`, `a ≤ b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LyapunovTemplate {
    pub n: usize,
    pub basis: Vec<(usize, usize)>,
}

impl LyapunovTemplate {
    pub fn new(n: usize, basis: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 || basis.is_empty() {
            return Err(Error::InvalidArgument("template needs n > 0 and a non-empty basis".into()));
        }
        if let Some(&(a, b)) = basis.iter().find(|&&(a, b)| !(1 <= a && a <= b && b <= n)) {
            return Err(Error::InvalidArgument(format!(
                "basis monomial ({a}, {b}) must satisfy 1 <= a <= b <= {n}"
            )));
        }
        Ok(Self { n, basis })
    }

    /// All `n(n+1)/2` monomials in the order `(1,1), (1,2), …, (n,n)`.
    pub fn full_quadratic(n: usize) -> Self {
        let basis = (1..=n).flat_map(|a| (a..=n).map(move |b| (a, b))).collect();
        Self { n, basis }
    }

    pub fn r(&self) -> usize {
        self.basis.len()
    }

    /// Basis values at the difference `dx = x − x′`.
    pub fn features(&self, dx: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|&(a, b)| dx[a - 1] * dx[b - 1]).collect()
    }

    fn eval_diff(&self, q: &[f64], dx: &[f64]) -> f64 {
        self.basis
            .iter()
            .zip(q)
            .map(|(&(a, b), qj)| qj * dx[a - 1] * dx[b - 1])
            .sum()
    }
}

pub fn evaluate_template(t: &LyapunovTemplate, q: &[f64], x: &[f64], xp: &[f64]) -> Result<f64> {
    if q.len() != t.r() {
        return Err(Error::DimensionMismatch {
            context: "template coefficients",
            expected: t.r(),
            actual: q.len(),
        });
    }
    for v in [x, xp] {
        if v.len() != t.n {
            return Err(Error::DimensionMismatch {
                context: "template state",
                expected: t.n,
                actual: v.len(),
            });
        }
    }
    let dx: Vec<f64> = x.iter().zip(xp).map(|(a, b)| a - b).collect();
    Ok(t.eval_diff(q, &dx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SopConfig {
    pub gamma_grid: Vec<f64>,
    pub q_bound: f64,
    pub alpha_hi_bound: f64,
    pub rho_bound: f64,
    pub mu_bound: f64,
    pub phi_bound: f64,
    pub feasibility_tol: f64,
}

impl Default for SopConfig {
    fn default() -> Self {
        Self {
            gamma_grid: (1..=9).map(|k| k as f64 / 10.0).collect(),
            q_bound: 100.0,
            alpha_hi_bound: 100.0,
            rho_bound: 100.0,
            mu_bound: 100.0,
            phi_bound: 1000.0,
            feasibility_tol: 1e-9,
        }
    }
}

impl SopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_grid.is_empty() {
            return Err(Error::InvalidArgument("gamma grid is empty".into()));
        }
        if let Some(g) = self.gamma_grid.iter().find(|&&g| !(g > 0.0 && g < 1.0)) {
            return Err(Error::InvalidArgument(format!("gamma {g} is outside (0, 1)")));
        }
        let finite = [
            self.q_bound,
            self.alpha_hi_bound,
            self.rho_bound,
            self.mu_bound,
            self.phi_bound,
            self.feasibility_tol,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite
            || !(self.q_bound > 0.0)
            || !(self.alpha_hi_bound >= 1.0)
            || !(self.rho_bound >= 0.0)
            || !(self.mu_bound > 0.0)
            || !(self.phi_bound >= 0.0)
            || !(self.feasibility_tol > 0.0)
        {
            return Err(Error::InvalidArgument("SOP bounds out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SopSolution {
    pub q: Vec<f64>,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub gamma: f64,
    pub rho: f64,
    pub mu_star: f64,
    pub phi_star: f64,
    pub template: TemplateJson,
}

/// Serialized template shape: `{n, basis: [[a, b], …]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateJson {
    pub n: usize,
    pub basis: Vec<[usize; 2]>,
}

impl From<&LyapunovTemplate> for TemplateJson {
    fn from(t: &LyapunovTemplate) -> Self {
        Self {
            n: t.n,
            basis: t.basis.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }
}

impl TryFrom<&TemplateJson> for LyapunovTemplate {
    type Error = Error;

    fn try_from(t: &TemplateJson) -> Result<Self> {
        LyapunovTemplate::new(t.n, t.basis.iter().map(|&[a, b]| (a, b)).collect())
    }
}

impl SopSolution {
    pub fn template(&self) -> Result<LyapunovTemplate> {
        LyapunovTemplate::try_from(&self.template)
    }

    pub fn objective(&self) -> f64 {
        self.mu_star + self.phi_star
    }

    /// `S(q, x, x′)` using the embedded template.
    pub fn evaluate(&self, x: &[f64], xp: &[f64]) -> Result<f64> {
        evaluate_template(&self.template()?, &self.q, x, xp)
    }
}

/// Left-hand sides of the three per-record constraints, without the `μ` term.
pub fn constraint_residuals(t: &LyapunovTemplate, sol: &SopSolution, r: &RecordView<'_>) -> [f64; 3] {
    let dx: Vec<f64> = r.x.iter().zip(r.xp).map(|(a, b)| a - b).collect();
    let df: Vec<f64> = r.fx.iter().zip(r.fxp).map(|(a, b)| a - b).collect();
    let ndx: f64 = dx.iter().map(|v| v * v).sum();
    let ndw: f64 = r.w.iter().zip(r.wp).map(|(a, b)| (a - b) * (a - b)).sum();
    let s = t.eval_diff(&sol.q, &dx);
    let sf = t.eval_diff(&sol.q, &df);
    [
        sol.alpha_lo * ndx - s,
        s - sol.alpha_hi * ndx,
        sf - sol.gamma * s - sol.rho * ndw,
    ]
}

/// Worst constraint left-hand side over all records, evaluated independently
/// of the solver. A sound solution has this at most `μ*`.
pub fn scenario_audit(ds: &Dataset, t: &LyapunovTemplate, sol: &SopSolution) -> f64 {
    (0..ds.len())
        .into_par_iter()
        .map(|i| {
            constraint_residuals(t, sol, &ds.record(i))
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Per-record features `[p(Δx) (r), p(Δf) (r), ‖Δx‖², ‖Δw‖²]`.
struct Features {
    r: usize,
    data: Vec<f64>,
}

impl Features {
    fn new(ds: &Dataset, t: &LyapunovTemplate) -> Self {
        let r = t.r();
        let data = (0..ds.len())
            .into_par_iter()
            .flat_map_iter(|i| {
                let rec = ds.record(i);
                let dx: Vec<f64> = rec.x.iter().zip(rec.xp).map(|(a, b)| a - b).collect();
                let df: Vec<f64> = rec.fx.iter().zip(rec.fxp).map(|(a, b)| a - b).collect();
                let ndx: f64 = dx.iter().map(|v| v * v).sum();
                let ndw: f64 = rec.w.iter().zip(rec.wp).map(|(a, b)| (a - b) * (a - b)).sum();
                let mut f = t.features(&dx);
                f.extend(t.features(&df));
                f.push(ndx);
                f.push(ndw);
                f
            })
            .collect();
        Self { r, data }
    }

    fn stride(&self) -> usize {
        2 * self.r + 2
    }

    fn len(&self) -> usize {
        self.data.len() / self.stride()
    }

    fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.stride()..(i + 1) * self.stride()]
    }

    /// Coefficient row of constraint `kind` at record `i`, in the form `a·v ≤ 0`.
    fn row(&self, i: usize, kind: usize, gamma: f64) -> Vec<f64> {
        let r = self.r;
        let f = self.get(i);
        let (pdx, rest) = f.split_at(r);
        let (pdf, norms) = rest.split_at(r);
        let mut a = vec![0.0; r + 5];
        match kind {
            0 => {
                a[..r].iter_mut().zip(pdx).for_each(|(c, p)| *c = -p);
                a[r] = norms[0];
            }
            1 => {
                a[..r].copy_from_slice(pdx);
                a[r + 1] = -norms[0];
            }
            _ => {
                a[..r]
                    .iter_mut()
                    .zip(pdx.iter().zip(pdf))
                    .for_each(|(c, (px, pf))| *c = pf - gamma * px);
                a[r + 2] = -norms[1];
            }
        }
        a[r + 3] = -1.0;
        a
    }

    /// Constraint values `a·v` for the three kinds at record `i`.
    fn values(&self, i: usize, v: &[f64], gamma: f64) -> [f64; 3] {
        let r = self.r;
        let f = self.get(i);
        let (pdx, rest) = f.split_at(r);
        let (pdf, norms) = rest.split_at(r);
        let q = &v[..r];
        let s: f64 = q.iter().zip(pdx).map(|(a, b)| a * b).sum();
        let sf: f64 = q.iter().zip(pdf).map(|(a, b)| a * b).sum();
        let (alo, ahi, rho, mu) = (v[r], v[r + 1], v[r + 2], v[r + 3]);
        [
            alo * norms[0] - s - mu,
            s - ahi * norms[0] - mu,
            sf - gamma * s - rho * norms[1] - mu,
        ]
    }
}

const SCAN_BATCHES: usize = 64;
const MAX_ROUNDS: usize = 10_000;

fn variable_names(r: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=r).map(|j| format!("q{j}")).collect();
    names.extend(["alpha_lo", "alpha_hi", "rho", "mu", "phi"].map(String::from));
    names
}

fn base_problem(r: usize, gamma: f64, cfg: &SopConfig) -> Result<LpProblem> {
    let mut lower = vec![-cfg.q_bound; r];
    let mut upper = vec![cfg.q_bound; r];
    lower.extend([1.0, 1.0, 0.0, -cfg.mu_bound, 0.0]);
    upper.extend([
        cfg.alpha_hi_bound,
        cfg.alpha_hi_bound,
        cfg.rho_bound,
        cfg.mu_bound,
        cfg.phi_bound,
    ]);
    let mut lp = LpProblem::new(variable_names(r), lower, upper)?;
    let mut global = vec![0.0; r + 5];
    global[r + 2] = 1.0 / (1.0 - gamma);
    global[r + 4] = -1.0;
    lp.add_row(&global, 0.0)?;
    let mut c = vec![0.0; r + 5];
    c[r + 3] = 1.0;
    c[r + 4] = 1.0;
    lp.set_objective(c)?;
    Ok(lp)
}

fn check_inputs(ds: &Dataset, t: &LyapunovTemplate, cfg: &SopConfig) -> Result<()> {
    cfg.validate()?;
    if !ds.normalized {
        return Err(Error::NotNormalized);
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if t.n != ds.n {
        return Err(Error::DimensionMismatch {
            context: "template vs dataset state dimension",
            expected: ds.n,
            actual: t.n,
        });
    }
    Ok(())
}

/// The full program at a fixed `γ`, with every scenario row materialized.
pub fn build_sop(
    ds: &Dataset,
    t: &LyapunovTemplate,
    gamma: f64,
    cfg: &SopConfig,
) -> Result<LpProblem> {
    check_inputs(ds, t, cfg)?;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} is outside (0, 1)")));
    }
    let feats = Features::new(ds, t);
    let mut lp = base_problem(t.r(), gamma, cfg)?;
    for i in 0..feats.len() {
        for kind in 0..3 {
            lp.add_row(&feats.row(i, kind, gamma), 0.0)?;
        }
    }
    Ok(lp)
}

struct CutResult {
    status: LpStatus,
    values: Vec<f64>,
    rows: HashSet<usize>,
    rounds: usize,
}

/// Solves `lp` (whose scenario rows are exactly `rows`) against all records
/// by adding violated rows until none exceeds the tolerance.
fn cutting_plane(
    feats: &Features,
    gamma: f64,
    mut lp: LpProblem,
    mut rows: HashSet<usize>,
    tol: f64,
) -> Result<CutResult> {
    let opts = LpOptions {
        tol,
        ..LpOptions::default()
    };
    let n = feats.len();
    let chunk = n.div_ceil(SCAN_BATCHES).max(1);
    let mut basis: Option<Vec<usize>> = None;
    for round in 0..MAX_ROUNDS {
        let sol = solve_lp_with(&lp, &opts, basis.as_deref())?;
        if sol.status == LpStatus::Infeasible {
            return Ok(CutResult {
                status: LpStatus::Infeasible,
                values: sol.values,
                rows,
                rounds: round,
            });
        }
        let v = &sol.values;
        let worst: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .chunks(chunk)
            .filter_map(|idx| {
                let mut best: Option<(usize, f64)> = None;
                for i in idx {
                    for (kind, val) in feats.values(i, v, gamma).into_iter().enumerate() {
                        let key = 3 * i + kind;
                        if val > tol
                            && !rows.contains(&key)
                            && best.is_none_or(|(_, b)| val > b)
                        {
                            best = Some((key, val));
                        }
                    }
                }
                best
            })
            .collect();
        if worst.is_empty() {
            return Ok(CutResult {
                status: LpStatus::Optimal,
                values: sol.values,
                rows,
                rounds: round,
            });
        }
        for (key, _) in worst {
            lp.add_row(&feats.row(key / 3, key % 3, gamma), 0.0)?;
            rows.insert(key);
        }
        basis = Some(sol.basis);
    }
    Err(Error::Numerical(format!(
        "cutting-plane loop did not settle in {MAX_ROUNDS} rounds"
    )))
}

/// Outcome of the first-stage program at one grid value.
#[derive(Clone, Debug, Serialize)]
pub struct GammaOutcome {
    pub gamma: f64,
    pub status: LpStatus,
    /// `μ + φ` after polishing, when optimal.
    pub objective: Option<f64>,
    #[serde(skip)]
    solution: Option<SopSolution>,
    #[serde(skip)]
    rows: HashSet<usize>,
}

impl GammaOutcome {
    pub fn solution(&self) -> Option<&SopSolution> {
        self.solution.as_ref()
    }
}

/// Raises `μ` to the audited worst residual and `φ` to `ρ/(1 − γ)` so the
/// returned point satisfies every scenario row exactly.
fn polish(
    feats: &Features,
    t: &LyapunovTemplate,
    gamma: f64,
    v: &[f64],
) -> SopSolution {
    let r = t.r();
    let mut probe = v.to_vec();
    probe[r + 3] = 0.0;
    let worst = (0..feats.len())
        .into_par_iter()
        .map(|i| feats.values(i, &probe, gamma).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let rho = v[r + 2].max(0.0);
    SopSolution {
        q: v[..r].to_vec(),
        alpha_lo: v[r],
        alpha_hi: v[r + 1],
        gamma,
        rho,
        mu_star: v[r + 3].max(worst),
        phi_star: v[r + 4].max(rho / (1.0 - gamma)),
        template: t.into(),
    }
}

fn stage_one(feats: &Features, t: &LyapunovTemplate, gamma: f64, cfg: &SopConfig) -> Result<GammaOutcome> {
    let lp = base_problem(t.r(), gamma, cfg)?;
    let cut = cutting_plane(feats, gamma, lp, HashSet::new(), cfg.feasibility_tol)?;
    debug!(gamma, rounds = cut.rounds, rows = cut.rows.len(), "first stage");
    Ok(match cut.status {
        LpStatus::Optimal => {
            let sol = polish(feats, t, gamma, &cut.values);
            GammaOutcome {
                gamma,
                status: LpStatus::Optimal,
                objective: Some(sol.objective()),
                solution: Some(sol),
                rows: cut.rows,
            }
        }
        LpStatus::Infeasible => GammaOutcome {
            gamma,
            status: LpStatus::Infeasible,
            objective: None,
            solution: None,
            rows: cut.rows,
        },
    })
}

/// First-stage program at a single `γ`.
pub fn solve_sop_at(
    ds: &Dataset,
    t: &LyapunovTemplate,
    gamma: f64,
    cfg: &SopConfig,
) -> Result<GammaOutcome> {
    check_inputs(ds, t, cfg)?;
    stage_one(&Features::new(ds, t), t, gamma, cfg)
}

#[derive(Clone, Debug, Serialize)]
pub struct SopReport {
    pub solution: SopSolution,
    pub per_gamma: Vec<GammaOutcome>,
}

pub fn solve_sop(ds: &Dataset, t: &LyapunovTemplate, cfg: &SopConfig) -> Result<SopSolution> {
    Ok(solve_sop_report(ds, t, cfg)?.solution)
}

/// Grid search over `γ` followed by the second stage that minimizes `μ`
/// among points whose `μ + φ` stays within tolerance of the best value.
pub fn solve_sop_report(ds: &Dataset, t: &LyapunovTemplate, cfg: &SopConfig) -> Result<SopReport> {
    check_inputs(ds, t, cfg)?;
    let feats = Features::new(ds, t);
    let mut grid = cfg.gamma_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let per_gamma = grid
        .par_iter()
        .map(|&g| stage_one(&feats, t, g, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut best: Option<&GammaOutcome> = None;
    for o in &per_gamma {
        let Some(obj) = o.objective else { continue };
        if best.is_none_or(|b| obj < b.objective.expect("optimal") - cfg.feasibility_tol) {
            best = Some(o);
        }
    }
    let Some(best) = best else {
        let statuses = per_gamma
            .iter()
            .map(|o| format!("gamma={}: {:?}", o.gamma, o.status))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::SopInfeasible(statuses));
    };
    let first = best.solution.clone().expect("optimal outcome has a solution");

    let r = t.r();
    let gamma = best.gamma;
    let mut lp = base_problem(r, gamma, cfg)?;
    let mut c = vec![0.0; r + 5];
    c[r + 3] = 1.0;
    lp.set_objective(c.clone())?;
    let mut cap = vec![0.0; r + 5];
    cap[r + 3] = 1.0;
    cap[r + 4] = 1.0;
    lp.add_row(&cap, first.objective() + cfg.feasibility_tol)?;
    let mut keys: Vec<usize> = best.rows.iter().copied().collect();
    keys.sort_unstable();
    for &key in &keys {
        lp.add_row(&feats.row(key / 3, key % 3, gamma), 0.0)?;
    }
    let cut = cutting_plane(&feats, gamma, lp, best.rows.clone(), cfg.feasibility_tol)?;
    let solution = match cut.status {
        LpStatus::Optimal => {
            let second = polish(&feats, t, gamma, &cut.values);
            if second.mu_star <= first.mu_star {
                second
            } else {
                first
            }
        }
        LpStatus::Infeasible => first,
    };
    debug!(gamma, mu = solution.mu_star, phi = solution.phi_star, "scenario program solved");
    Ok(SopReport {
        solution,
        per_gamma,
    })
}
