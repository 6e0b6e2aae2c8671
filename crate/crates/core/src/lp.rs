//! Dense dual simplex for small linear programs with many inequality rows.
//!
//! Problems have the form `min cᵀv` subject to `G v ≤ h` and finite box bounds
//! `l ≤ v ≤ u`. Bounds are handled as ordinary rows: for variable `j`, row id
//! `2j` is `v_j ≤ u_j` and row id `2j + 1` is `−v_j ≤ −l_j`. User rows follow
//! with ids starting at `2K`, where `K` is the number of variables.
//!
//! A basis is a set of `K` active row ids. Choosing, for every variable, the
//! upper bound when `c_j ≤ 0` and the lower bound otherwise gives a dual
//! feasible start, so no phase one is needed. Each iteration enters the row
//! with the most negative normalized slack and leaves by the dual ratio test;
//! after a run of degenerate pivots the rules switch to smallest-index choices.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LpProblem {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub objective: Vec<f64>,
    coeffs: Vec<f64>,
    rhs: Vec<f64>,
}

impl LpProblem {
    pub fn new(names: Vec<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let k = names.len();
        if k == 0 || lower.len() != k || upper.len() != k {
            return Err(Error::InvalidArgument(
                "variable names and bounds must be non-empty and of equal length".into(),
            ));
        }
        for j in 0..k {
            if !lower[j].is_finite() || !upper[j].is_finite() || lower[j] > upper[j] {
                return Err(Error::InvalidArgument(format!(
                    "variable {} needs finite bounds with lower <= upper",
                    names[j]
                )));
            }
        }
        Ok(Self {
            objective: vec![0.0; k],
            names,
            lower,
            upper,
            coeffs: Vec::new(),
            rhs: Vec::new(),
        })
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    /// Number of user rows, not counting bounds.
    pub fn num_rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn var(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Appends `a·v ≤ b` and returns its user-row index.
    pub fn add_row(&mut self, a: &[f64], b: f64) -> Result<usize> {
        if a.len() != self.num_vars() {
            return Err(Error::DimensionMismatch {
                context: "LP row",
                expected: self.num_vars(),
                actual: a.len(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(Error::InvalidArgument("LP row entries must be finite".into()));
        }
        self.coeffs.extend_from_slice(a);
        self.rhs.push(b);
        Ok(self.rhs.len() - 1)
    }

    pub fn row(&self, i: usize) -> (&[f64], f64) {
        let k = self.num_vars();
        (&self.coeffs[i * k..(i + 1) * k], self.rhs[i])
    }

    pub fn set_objective(&mut self, c: Vec<f64>) -> Result<()> {
        if c.len() != self.num_vars() {
            return Err(Error::DimensionMismatch {
                context: "LP objective",
                expected: self.num_vars(),
                actual: c.len(),
            });
        }
        self.objective = c;
        Ok(())
    }

    /// Largest violation of any row or bound at `v` (zero when feasible).
    pub fn max_violation(&self, v: &[f64]) -> f64 {
        (0..self.total_rows())
            .map(|id| -self.slack(id, v))
            .fold(0.0, f64::max)
    }

    pub fn objective_value(&self, v: &[f64]) -> f64 {
        self.objective.iter().zip(v).map(|(c, x)| c * x).sum()
    }

    fn total_rows(&self) -> usize {
        2 * self.num_vars() + self.num_rows()
    }

    fn row_rhs(&self, id: usize) -> f64 {
        let k = self.num_vars();
        if id < 2 * k {
            let j = id / 2;
            if id % 2 == 0 {
                self.upper[j]
            } else {
                -self.lower[j]
            }
        } else {
            self.rhs[id - 2 * k]
        }
    }

    fn row_dot(&self, id: usize, v: &[f64]) -> f64 {
        let k = self.num_vars();
        if id < 2 * k {
            let j = id / 2;
            if id % 2 == 0 {
                v[j]
            } else {
                -v[j]
            }
        } else {
            self.row(id - 2 * k).0.iter().zip(v).map(|(a, b)| a * b).sum()
        }
    }

    fn row_into(&self, id: usize, out: &mut [f64]) {
        let k = self.num_vars();
        if id < 2 * k {
            out.fill(0.0);
            out[id / 2] = if id % 2 == 0 { 1.0 } else { -1.0 };
        } else {
            out.copy_from_slice(self.row(id - 2 * k).0);
        }
    }

    fn row_norm(&self, id: usize) -> f64 {
        let k = self.num_vars();
        if id < 2 * k {
            1.0
        } else {
            self.row(id - 2 * k).0.iter().map(|a| a * a).sum::<f64>().sqrt()
        }
    }

    fn slack(&self, id: usize, v: &[f64]) -> f64 {
        self.row_rhs(id) - self.row_dot(id, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LpStatus {
    Optimal,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Final basic point. For infeasible problems this is the last iterate.
    pub values: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Active row ids at termination, usable as a warm start.
    pub basis: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct LpOptions {
    /// Rows with slack above `-tol` count as satisfied.
    pub tol: f64,
    pub max_iterations: usize,
    /// Consecutive degenerate pivots tolerated before switching to Bland's rule.
    pub degenerate_limit: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iterations: 200_000,
            degenerate_limit: 50,
        }
    }
}

pub fn solve_lp(problem: &LpProblem) -> Result<LpSolution> {
    solve_lp_with(problem, &LpOptions::default(), None)
}

fn cold_basis(problem: &LpProblem) -> Vec<usize> {
    problem
        .objective
        .iter()
        .enumerate()
        .map(|(j, &c)| if c <= 0.0 { 2 * j } else { 2 * j + 1 })
        .collect()
}

struct Factored {
    v: Vec<f64>,
    lambda: Vec<f64>,
    lu_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

fn factor(problem: &LpProblem, basis: &[usize]) -> Result<Factored> {
    let k = problem.num_vars();
    let mut g = DMatrix::<f64>::zeros(k, k);
    let mut row = vec![0.0; k];
    for (r, &id) in basis.iter().enumerate() {
        problem.row_into(id, &mut row);
        for c in 0..k {
            g[(r, c)] = row[c];
        }
    }
    let h = DVector::from_iterator(k, basis.iter().map(|&id| problem.row_rhs(id)));
    let lu = g.clone().lu();
    let v = lu
        .solve(&h)
        .ok_or_else(|| Error::Numerical(format!("singular basis {basis:?}")))?;
    let lu_t = g.transpose().lu();
    let neg_c = DVector::from_iterator(k, problem.objective.iter().map(|c| -c));
    let lambda = lu_t
        .solve(&neg_c)
        .ok_or_else(|| Error::Numerical(format!("singular basis {basis:?}")))?;
    Ok(Factored {
        v: v.iter().copied().collect(),
        lambda: lambda.iter().copied().collect(),
        lu_t,
    })
}

fn basis_is_usable(problem: &LpProblem, basis: &[usize], tol: f64) -> bool {
    let total = problem.total_rows();
    if basis.len() != problem.num_vars() || basis.iter().any(|&id| id >= total) {
        return false;
    }
    let mut sorted = basis.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != basis.len() {
        return false;
    }
    match factor(problem, basis) {
        Ok(f) => f.lambda.iter().all(|&l| l >= -tol.max(1e-12)),
        Err(_) => false,
    }
}

/// Solves `problem`, optionally starting from a dual feasible basis such as
/// the one returned by an earlier solve of the same problem with fewer rows.
pub fn solve_lp_with(
    problem: &LpProblem,
    opts: &LpOptions,
    warm: Option<&[usize]>,
) -> Result<LpSolution> {
    let k = problem.num_vars();
    let total = problem.total_rows();
    let mut basis = match warm {
        Some(b) if basis_is_usable(problem, b, opts.tol) => b.to_vec(),
        _ => cold_basis(problem),
    };
    let mut in_basis = vec![false; total];
    for &id in &basis {
        in_basis[id] = true;
    }
    let mut degenerate_run = 0usize;
    let mut a_e = vec![0.0; k];
    for iteration in 0..opts.max_iterations {
        let f = factor(problem, &basis)?;
        let bland = degenerate_run >= opts.degenerate_limit;

        let mut entering: Option<(usize, f64)> = None;
        for id in 0..total {
            if in_basis[id] {
                continue;
            }
            let s = problem.slack(id, &f.v);
            if s >= -opts.tol {
                continue;
            }
            if bland {
                entering = Some((id, s));
                break;
            }
            let score = s / problem.row_norm(id);
            if entering.is_none_or(|(_, best)| score < best) {
                entering = Some((id, score));
            }
        }
        let Some((e, _)) = entering else {
            return Ok(LpSolution {
                status: LpStatus::Optimal,
                objective: problem.objective_value(&f.v),
                values: f.v,
                iterations: iteration,
                basis,
            });
        };

        problem.row_into(e, &mut a_e);
        let d = f
            .lu_t
            .solve(&DVector::from_column_slice(&a_e))
            .ok_or_else(|| Error::Numerical("singular basis in ratio test".into()))?;
        let dmax = d.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let piv_tol = 1e-11 * dmax.max(1.0);
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..k {
            if d[r] <= piv_tol {
                continue;
            }
            let t = f.lambda[r].max(0.0) / d[r];
            let better = match leave {
                None => true,
                Some((lr, lt)) => {
                    if bland {
                        t < lt - 1e-15 || (t <= lt + 1e-15 && basis[r] < basis[lr])
                    } else {
                        t < lt - 1e-15 || (t <= lt + 1e-15 && d[r] > d[lr])
                    }
                }
            };
            if better {
                leave = Some((r, t));
            }
        }
        let Some((r, t)) = leave else {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                objective: f64::NAN,
                values: f.v,
                iterations: iteration,
                basis,
            });
        };
        degenerate_run = if t <= 1e-14 { degenerate_run + 1 } else { 0 };
        in_basis[basis[r]] = false;
        in_basis[e] = true;
        basis[r] = e;
    }
    Err(Error::Numerical(format!(
        "dual simplex did not converge in {} iterations",
        opts.max_iterations
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("v{j}")).collect()
    }

    #[test]
    fn small_program_with_known_vertex() {
        // variables q, rho, mu, phi
        let mut lp = LpProblem::new(
            vec!["q".into(), "rho".into(), "mu".into(), "phi".into()],
            vec![-10.0, 0.0, -10.0, 0.0],
            vec![10.0, 10.0, 10.0, 10.0],
        )
        .unwrap();
        lp.add_row(&[-1.0, 0.0, -1.0, 0.0], -1.0).unwrap();
        lp.add_row(&[1.0, 0.0, -1.0, 0.0], 3.0).unwrap();
        lp.add_row(&[0.0, 10.0, 0.0, -1.0], 0.0).unwrap();
        lp.set_objective(vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let s = solve_lp(&lp).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        let want = [2.0, 0.0, -1.0, 0.0];
        for (a, b) in s.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{:?}", s.values);
        }
        assert!((s.objective + 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_objective_returns_feasible_point() {
        let mut lp = LpProblem::new(names(2), vec![-1.0; 2], vec![1.0; 2]).unwrap();
        lp.add_row(&[1.0, 1.0], 0.5).unwrap();
        let s = solve_lp(&lp).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_eq!(s.objective, 0.0);
        assert!(lp.max_violation(&s.values) <= 1e-9);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let mut lp = LpProblem::new(names(1), vec![-2.0], vec![2.0]).unwrap();
        lp.add_row(&[1.0], -1.0).unwrap();
        lp.add_row(&[-1.0], -1.0).unwrap();
        lp.set_objective(vec![1.0]).unwrap();
        assert_eq!(solve_lp(&lp).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn rejects_infinite_bounds_and_bad_rows() {
        assert!(LpProblem::new(names(1), vec![f64::NEG_INFINITY], vec![1.0]).is_err());
        assert!(LpProblem::new(names(1), vec![2.0], vec![1.0]).is_err());
        let mut lp = LpProblem::new(names(2), vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert!(lp.add_row(&[1.0], 0.0).is_err());
        assert!(lp.add_row(&[f64::NAN, 0.0], 0.0).is_err());
    }

    #[test]
    fn warm_start_after_adding_rows_reaches_same_optimum() {
        let mut lp = LpProblem::new(names(2), vec![-5.0; 2], vec![5.0; 2]).unwrap();
        lp.set_objective(vec![-1.0, -2.0]).unwrap();
        lp.add_row(&[1.0, 1.0], 4.0).unwrap();
        let first = solve_lp(&lp).unwrap();
        lp.add_row(&[1.0, 3.0], 6.0).unwrap();
        let warm = solve_lp_with(&lp, &LpOptions::default(), Some(&first.basis)).unwrap();
        let cold = solve_lp(&lp).unwrap();
        assert!((warm.objective - cold.objective).abs() < 1e-9);
        assert!((cold.objective + 5.0).abs() < 1e-9, "{:?}", cold.values);
    }

    #[test]
    fn degenerate_vertex_terminates() {
        // Many rows through the same optimal vertex (1, 1).
        let mut lp = LpProblem::new(names(2), vec![-3.0; 2], vec![3.0; 2]).unwrap();
        lp.set_objective(vec![-1.0, -1.0]).unwrap();
        for k in 0..40 {
            let t = k as f64 / 39.0;
            lp.add_row(&[t, 1.0 - t], 1.0).unwrap();
        }
        let s = solve_lp(&lp).unwrap();
        assert!((s.objective + 2.0).abs() < 1e-9);
    }

    /// Optimal value by enumerating every vertex of a 2-variable problem.
    fn brute_force_2d(lp: &LpProblem) -> Option<f64> {
        let total = lp.total_rows();
        let mut best: Option<f64> = None;
        let mut a = vec![0.0; 2];
        let mut b = vec![0.0; 2];
        for i in 0..total {
            for j in (i + 1)..total {
                lp.row_into(i, &mut a);
                lp.row_into(j, &mut b);
                let det = a[0] * b[1] - a[1] * b[0];
                if det.abs() < 1e-12 {
                    continue;
                }
                let (hi, hj) = (lp.row_rhs(i), lp.row_rhs(j));
                let v = [(hi * b[1] - a[1] * hj) / det, (a[0] * hj - hi * b[0]) / det];
                if lp.max_violation(&v) <= 1e-9 {
                    let o = lp.objective_value(&v);
                    best = Some(best.map_or(o, |b: f64| b.min(o)));
                }
            }
        }
        best
    }

    proptest! {
        #[test]
        fn matches_vertex_enumeration_in_two_dimensions(
            rows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -2.0f64..4.0), 0..12),
            c in (-2.0f64..2.0, -2.0f64..2.0),
        ) {
            let mut lp = LpProblem::new(names(2), vec![-4.0; 2], vec![4.0; 2]).unwrap();
            lp.set_objective(vec![c.0, c.1]).unwrap();
            for (a0, a1, h) in rows {
                lp.add_row(&[a0, a1], h).unwrap();
            }
            let s = solve_lp(&lp).unwrap();
            match brute_force_2d(&lp) {
                Some(best) => {
                    prop_assert_eq!(s.status, LpStatus::Optimal);
                    prop_assert!((s.objective - best).abs() <= 1e-7 * (1.0 + best.abs()));
                    prop_assert!(lp.max_violation(&s.values) <= 1e-8);
                }
                None => prop_assert_eq!(s.status, LpStatus::Infeasible),
            }
        }
    }
}
