//! Dense convex QP solver for the market-clearing problem.
//!
//! Solves `min ½xᵀQx + qᵀx  s.t.  Ax ≤ u` with Q positive definite using the
//! Goldfarb-Idnani dual active-set method: start at the unconstrained minimum,
//! repeatedly add the most violated constraint, and take partial dual steps
//! (dropping blocking constraints) until it can be satisfied. Problem sizes
//! here are tens of rows, so every iteration refactors dense matrices rather
//! than maintaining incremental QR factors.
//!
//! The solver certifies its answer with KKT residuals. Activity of a
//! constraint is decided by [`classify_active`], not by the solver's internal
//! working set: interior duals and working sets can be ambiguous near
//! degenerate points, the slack-based classifier is the single source of
//! truth.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::netmodel::MarketQp;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("Q is not positive definite")]
    NotPositiveDefinite,
    #[error("problem is infeasible (dual unbounded at constraint row {row})")]
    Infeasible { row: usize },
    #[error("active-set working matrix became singular")]
    SingularWorkingSet,
    #[error(
        "no convergence after {iterations} iterations (stationarity {stationarity:.3e}, \
         primal infeasibility {primal:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        stationarity: f64,
        primal: f64,
    },
}

/// Solver knobs. Defaults suit the small, well-scaled problems produced by
/// `netmodel`.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Absolute-plus-relative feasibility tolerance for violation checks.
    pub feas_tol: f64,
    /// Relative active-set classification tolerance.
    pub active_tol: f64,
    /// Iteration cap for the active-set loop.
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-9,
            active_tol: 1e-7,
            max_iter: 2000,
        }
    }
}

/// KKT residuals certifying a solution.
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    /// ‖Qx + q + Aᵀµ‖∞
    pub stationarity: f64,
    /// max violation of Ax ≤ u (0 when feasible)
    pub primal: f64,
    /// max(0, −min µ)
    pub dual: f64,
    /// max |µᵢ·slackᵢ|
    pub complementarity: f64,
}

/// Primal-dual solution with the classified active set.
#[derive(Debug, Clone)]
pub struct PrimalDualSolution {
    /// Dispatch stacked with shed.
    pub x: DVector<f64>,
    /// One dual per constraint row, ≥ 0 up to tolerance.
    pub mu: DVector<f64>,
    /// Row indices judged active, ascending.
    pub active_set: Vec<usize>,
    /// Active rows whose dual is also near zero (weakly active).
    pub degenerate: Vec<usize>,
    pub objective: f64,
    pub residuals: KktResiduals,
}

/// Solves the market QP at a given perturbation.
pub fn solve(
    qp: &MarketQp,
    xi: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<PrimalDualSolution, SolveError> {
    let u = qp.rhs(xi);
    let mut sol = solve_raw(&qp.q_mat, &qp.q_vec, &qp.a_mat, &u, opts)?;
    let (active, degenerate) = classify_active_raw(&sol.x, &sol.mu, &qp.a_mat, &u, opts.active_tol);
    sol.active_set = active;
    sol.degenerate = degenerate;
    Ok(sol)
}

/// Classifies constraint activity from slacks: row i is active iff
/// `slack ≤ tol·(1 + |rhsᵢ|)`. Active rows whose dual is near zero are
/// additionally reported as degenerate. The returned list is sorted ascending.
pub fn classify_active(
    sol: &PrimalDualSolution,
    qp: &MarketQp,
    xi: &DVector<f64>,
    tol: f64,
) -> (Vec<usize>, Vec<usize>) {
    let u = qp.rhs(xi);
    classify_active_raw(&sol.x, &sol.mu, &qp.a_mat, &u, tol)
}

fn classify_active_raw(
    x: &DVector<f64>,
    mu: &DVector<f64>,
    a: &DMatrix<f64>,
    u: &DVector<f64>,
    tol: f64,
) -> (Vec<usize>, Vec<usize>) {
    let ax = a * x;
    let mu_scale = 1.0 + mu.amax();
    let mut active = Vec::new();
    let mut degenerate = Vec::new();
    for i in 0..a.nrows() {
        let slack = u[i] - ax[i];
        if slack <= tol * (1.0 + u[i].abs()) {
            active.push(i);
            if mu[i].abs() <= tol * mu_scale {
                degenerate.push(i);
            }
        }
    }
    (active, degenerate)
}

/// Goldfarb-Idnani dual active-set on raw matrices.
pub fn solve_raw(
    q_mat: &DMatrix<f64>,
    q_vec: &DVector<f64>,
    a_mat: &DMatrix<f64>,
    u: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<PrimalDualSolution, SolveError> {
    let m = a_mat.nrows();
    let chol = q_mat
        .clone()
        .cholesky()
        .ok_or(SolveError::NotPositiveDefinite)?;

    // Unconstrained minimum.
    let mut x = -chol.solve(q_vec);
    let mut working: Vec<usize> = Vec::new();
    let mut mu_w: Vec<f64> = Vec::new();

    // Row norms for scale-aware violation comparison.
    let row_norm: Vec<f64> = (0..m).map(|i| a_mat.row(i).norm().max(1e-12)).collect();

    let mut iterations = 0usize;
    'outer: loop {
        // Most violated constraint, normalized by the row norm.
        let ax = a_mat * &x;
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..m {
            if working.contains(&i) {
                continue;
            }
            let viol = (ax[i] - u[i]) / row_norm[i];
            let thresh = opts.feas_tol * (1.0 + u[i].abs() / row_norm[i]);
            if viol > thresh && pick.is_none_or(|(_, v)| viol > v) {
                pick = Some((i, viol));
            }
        }
        let Some((p, _)) = pick else {
            break 'outer;
        };
        let a_p = a_mat.row(p).transpose();
        let mut mu_p = 0.0f64;

        loop {
            iterations += 1;
            if iterations > opts.max_iter {
                let res = residuals_of(
                    q_mat,
                    q_vec,
                    a_mat,
                    u,
                    &x,
                    &full_mu(m, &working, &mu_w, p, mu_p),
                );
                return Err(SolveError::NonConvergence {
                    iterations,
                    stationarity: res.stationarity,
                    primal: res.primal,
                });
            }

            // Step directions: z in primal space, r in the working duals.
            let qinv_ap = chol.solve(&a_p);
            let (z, r) = if working.is_empty() {
                (qinv_ap.clone(), DVector::zeros(0))
            } else {
                let at = a_mat.select_rows(working.iter());
                let qinv_att = solve_many(&chol, &at.transpose());
                let m_small = &at * &qinv_att;
                let rhs = &at * &qinv_ap;
                let r = m_small
                    .clone()
                    .cholesky()
                    .map(|c| c.solve(&rhs))
                    .or_else(|| m_small.lu().solve(&rhs))
                    .ok_or(SolveError::SingularWorkingSet)?;
                (&qinv_ap - &qinv_att * &r, r)
            };

            let ztap = a_p.dot(&z);
            let viol = a_p.dot(&x) - u[p];
            let t2 = if ztap > 1e-13 * (1.0 + a_p.dot(&qinv_ap).abs()) {
                viol / ztap
            } else {
                f64::INFINITY
            };
            let mut t1 = f64::INFINITY;
            let mut blocking = usize::MAX;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 1e-13 {
                    let ratio = mu_w[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        blocking = k;
                    }
                }
            }
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(SolveError::Infeasible { row: p });
            }
            if t > 0.0 {
                x -= t * &z;
                for (k, rk) in r.iter().enumerate() {
                    mu_w[k] -= t * rk;
                }
                mu_p += t;
            }
            if t2 <= t1 {
                working.push(p);
                mu_w.push(mu_p);
                continue 'outer;
            }
            // Partial step: the blocking working constraint leaves.
            working.remove(blocking);
            mu_w.remove(blocking);
        }
    }

    let mu = full_mu(m, &working, &mu_w, usize::MAX, 0.0);
    let objective = 0.5 * (q_mat * &x).dot(&x) + q_vec.dot(&x);
    let residuals = residuals_of(q_mat, q_vec, a_mat, u, &x, &mu);
    Ok(PrimalDualSolution {
        x,
        mu,
        active_set: Vec::new(),
        degenerate: Vec::new(),
        objective,
        residuals,
    })
}

fn full_mu(
    m: usize,
    working: &[usize],
    mu_w: &[f64],
    extra_row: usize,
    extra: f64,
) -> DVector<f64> {
    let mut mu = DVector::zeros(m);
    for (&i, &v) in working.iter().zip(mu_w.iter()) {
        mu[i] = v.max(0.0);
    }
    if extra_row != usize::MAX {
        mu[extra_row] = extra.max(0.0);
    }
    mu
}

fn solve_many(chol: &Cholesky<f64, Dyn>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = rhs.clone();
    for mut col in out.column_iter_mut() {
        let solved = chol.solve(&col.clone_owned());
        col.copy_from(&solved);
    }
    out
}

fn residuals_of(
    q_mat: &DMatrix<f64>,
    q_vec: &DVector<f64>,
    a_mat: &DMatrix<f64>,
    u: &DVector<f64>,
    x: &DVector<f64>,
    mu: &DVector<f64>,
) -> KktResiduals {
    let stat = (q_mat * x + q_vec + a_mat.transpose() * mu).amax();
    let ax = a_mat * x;
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..a_mat.nrows() {
        let slack = u[i] - ax[i];
        primal = primal.max(-slack);
        comp = comp.max((mu[i] * slack).abs());
    }
    let dual = mu.iter().fold(0.0f64, |acc, &v| acc.max(-v));
    KktResiduals {
        stationarity: stat,
        primal: primal.max(0.0),
        dual,
        complementarity: comp,
    }
}

impl PrimalDualSolution {
    /// Checks the KKT certificate at the stated tolerances.
    pub fn kkt_ok(&self, q_vec_scale: f64) -> bool {
        let stat_tol = 1e-6 * (1.0 + q_vec_scale);
        self.residuals.stationarity <= stat_tol
            && self.residuals.primal <= 1e-6 * (1.0 + q_vec_scale)
            && self.residuals.dual <= 1e-8
            && self.residuals.complementarity <= 1e-5 * (1.0 + q_vec_scale)
    }
}
