//! Multi-parametric decomposition of the market QP.
//!
//! For an active set Ã, B̃, b̃ at a perturbation ξ̂ the KKT conditions give an
//! affine dual map µ̃(ξ) = Dξ + d and primal map x(ξ) = Pξ + p with
//!
//! ```text
//! D = −(Ã Q⁻¹ Ãᵀ)⁻¹ B̃            d = −(Ã Q⁻¹ Ãᵀ)⁻¹ (b̃ + Ã Q⁻¹ q)
//! P = −Q⁻¹ Ãᵀ D                  p = −Q⁻¹ q − Q⁻¹ Ãᵀ d
//! ```
//!
//! valid over the critical region `{ξ : (ĀP − B̄)ξ < b̄ − Āp, Dξ + d ≥ 0}`.
//! A [`RegionAtlas`] collects the regions of one market structure discovered
//! by sampling: solve, classify, construct, skipping samples already covered.
//! Point location serves the online detector, constructing regions on the fly
//! for perturbations outside every cached region.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{MarketQp, StructureId};
use crate::qpsolve::{self, PrimalDualSolution, SolveError, SolverOptions};

#[derive(Debug, Error)]
pub enum MppError {
    #[error("solver failed while constructing a region: {0}")]
    Solve(#[from] SolveError),
    #[error("degenerate active set {active:?} at sample {sample:?}: {reason}")]
    DegenerateRegion {
        active: Vec<usize>,
        sample: Vec<f64>,
        reason: String,
    },
    #[error("region cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("region cache parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("region cache was built for a different problem (hash {found}, expected {expected})")]
    HashMismatch { found: String, expected: String },
    #[error("region cache version {0} is not supported")]
    Version(u32),
}

/// One critical region: an active set together with its affine primal/dual
/// maps and the polyhedron over which they stay optimal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalRegion {
    pub id: u32,
    /// Classified active rows (region identity), ascending.
    pub active_set: Vec<usize>,
    /// Linearly independent subset of `active_set` actually used in the maps.
    pub kept_rows: Vec<usize>,
    /// Dual map µ̃(ξ) = Dξ + d over the kept rows.
    pub d_mat: DMatrix<f64>,
    pub d_vec: DVector<f64>,
    /// Primal map x(ξ) = Pξ + p.
    pub p_mat: DMatrix<f64>,
    pub p_vec: DVector<f64>,
    /// Region polyhedron Hξ ≤ h; rows are normalized to unit Euclidean norm.
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
    /// Rows originating from the strict primal-feasibility family.
    pub strict: Vec<bool>,
    /// Λ columns restricted to the kept active rows.
    pub lambda_tilde: DMatrix<f64>,
    /// True when dependent active rows had to be dropped.
    pub degenerate: bool,
    /// The perturbation that generated the region.
    pub seed_xi: DVector<f64>,
}

impl CriticalRegion {
    /// Membership test: Hξ ≤ h + tol on every row (strict rows use the same
    /// tolerance; ties on shared facets are resolved by lookup order).
    pub fn contains(&self, xi: &DVector<f64>, tol: f64) -> bool {
        let hx = &self.h_mat * xi;
        for i in 0..self.h_vec.len() {
            if hx[i] > self.h_vec[i] + tol {
                return false;
            }
        }
        true
    }

    /// Primal solution from the affine map.
    pub fn x_at(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.p_mat * xi + &self.p_vec
    }

    /// Active-row duals from the affine map.
    pub fn duals_at(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.d_mat * xi + &self.d_vec
    }

    /// LMPs from the affine map: λ(ξ) = Λ̃(Dξ + d).
    pub fn lmp_at(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.lambda_tilde * self.duals_at(xi)
    }
}

/// Policy for samples whose active set defeats region construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    /// Propagate the error with the offending sample attached.
    #[default]
    Fail,
    /// Record the sample as quarantined and continue.
    Quarantine,
}

/// Knobs for atlas construction and point location.
#[derive(Debug, Clone, Copy)]
pub struct AtlasBuildOptions {
    pub solver: SolverOptions,
    /// Membership/facet tie-break tolerance for `contains`.
    pub region_tol: f64,
    /// Relative threshold for dropping dependent active rows.
    pub rank_tol: f64,
    /// Map self-check tolerance at the generating point.
    pub verify_tol: f64,
    pub on_degenerate: DegeneratePolicy,
}

impl Default for AtlasBuildOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            region_tol: 1e-8,
            rank_tol: 1e-9,
            verify_tol: 1e-6,
            on_degenerate: DegeneratePolicy::Fail,
        }
    }
}

/// Constructs the critical region containing ξ by solving the QP, classifying
/// the active set, and assembling the affine maps and polyhedron.
pub fn region_from_point(
    qp: &MarketQp,
    xi: &DVector<f64>,
    opts: &AtlasBuildOptions,
) -> Result<CriticalRegion, MppError> {
    let sol = qpsolve::solve(qp, xi, &opts.solver)?;
    region_from_solution(qp, xi, &sol, opts)
}

fn region_from_solution(
    qp: &MarketQp,
    xi: &DVector<f64>,
    sol: &PrimalDualSolution,
    opts: &AtlasBuildOptions,
) -> Result<CriticalRegion, MppError> {
    let active = sol.active_set.clone();
    fn degen(active: &[usize], xi: &DVector<f64>, reason: String) -> MppError {
        MppError::DegenerateRegion {
            active: active.to_vec(),
            sample: xi.iter().copied().collect(),
            reason,
        }
    }
    let degen_err = |reason: String| degen(&sol.active_set, xi, reason);

    let chol = qp
        .q_mat
        .clone()
        .cholesky()
        .ok_or_else(|| degen_err("Q not positive definite".into()))?;
    let qinv_q = chol.solve(&qp.q_vec);

    // Independent subset of the active rows, earliest-first. At degenerate
    // vertices that subset may carry a negative dual: ban the worst row,
    // reselect an independent subset (letting a previously dependent row
    // enter in its place), and repeat until the basis is dual feasible.
    let mut banned: Vec<usize> = Vec::new();
    let (kept, a_t, d_mat, d_vec) = loop {
        let candidates: Vec<usize> = active
            .iter()
            .copied()
            .filter(|i| !banned.contains(i))
            .collect();
        let kept = independent_rows(&qp.a_mat, &candidates, opts.rank_tol);
        if kept.is_empty() || banned.len() > active.len() {
            return Err(degen_err("no dual-feasible active basis found".into()));
        }
        let a_t = qp.a_mat.select_rows(kept.iter());
        let b_t = qp.b_mat.select_rows(kept.iter());
        let bv_t = DVector::from_iterator(kept.len(), kept.iter().map(|&i| qp.b_vec[i]));
        let qinv_at = solve_cols(&chol, &a_t.transpose());
        let m_small = &a_t * &qinv_at;
        let m_chol = m_small
            .clone()
            .cholesky()
            .ok_or_else(|| degen_err("Ã Q⁻¹ Ãᵀ is singular".into()))?;
        let d_mat = -m_chol.solve(&b_t);
        let d_vec = -m_chol.solve(&(&bv_t + &a_t * &qinv_q));
        let duals = &d_mat * xi + &d_vec;
        let (worst_k, worst) =
            duals
                .iter()
                .enumerate()
                .fold((0usize, f64::INFINITY), |acc, (k, &v)| {
                    if v < acc.1 {
                        (k, v)
                    } else {
                        acc
                    }
                });
        if worst >= -1e-7 * (1.0 + duals.amax()) {
            break (kept, a_t, d_mat, d_vec);
        }
        banned.push(kept[worst_k]);
    };
    let degenerate = kept.len() < active.len();

    let p_mat = -solve_cols(&chol, &(a_t.transpose() * &d_mat));
    let p_vec = -&qinv_q - solve_cols(&chol, &a_t.transpose()) * &d_vec;

    // Self-check at the generating point.
    let x_map = &p_mat * xi + &p_vec;
    let scale = 1.0 + sol.x.amax();
    if (&x_map - &sol.x).amax() > opts.verify_tol * scale {
        return Err(degen_err(format!(
            "affine map misses the solver solution by {:.3e} at the generating point",
            (&x_map - &sol.x).amax()
        )));
    }

    // Polyhedron: strict primal-feasibility rows on inactive constraints,
    // dual-feasibility rows on kept active constraints.
    let inactive: Vec<usize> = (0..qp.n_rows()).filter(|i| !active.contains(i)).collect();
    let dim_xi = qp.dim_xi();
    let n_rows = inactive.len() + kept.len();
    let mut h_mat = DMatrix::zeros(n_rows, dim_xi);
    let mut h_vec = DVector::zeros(n_rows);
    let mut strict = vec![false; n_rows];
    for (r, &i) in inactive.iter().enumerate() {
        let a_row = qp.a_mat.row(i);
        let hp = a_row * &p_mat - qp.b_mat.row(i);
        let rhs = qp.b_vec[i] - (a_row * &p_vec)[0];
        for c in 0..dim_xi {
            h_mat[(r, c)] = hp[c];
        }
        h_vec[r] = rhs;
        strict[r] = true;
    }
    for k in 0..kept.len() {
        let r = inactive.len() + k;
        for c in 0..dim_xi {
            h_mat[(r, c)] = -d_mat[(k, c)];
        }
        h_vec[r] = d_vec[k];
    }
    // Normalize rows so the membership tolerance is scale-free.
    for r in 0..n_rows {
        let norm = h_mat.row(r).norm();
        if norm > 1e-300 {
            for c in 0..dim_xi {
                h_mat[(r, c)] /= norm;
            }
            h_vec[r] /= norm;
        }
    }

    let lambda_tilde = qp.lambda.select_columns(kept.iter());

    let region = CriticalRegion {
        id: 0,
        active_set: active,
        kept_rows: kept,
        d_mat,
        d_vec,
        p_mat,
        p_vec,
        h_mat,
        h_vec,
        strict,
        lambda_tilde,
        degenerate,
        seed_xi: xi.clone(),
    };
    if !region.contains(xi, opts.region_tol.max(1e-7)) {
        return Err(degen_err("generating point fails region membership".into()));
    }
    Ok(region)
}

/// Greedy selection of linearly independent rows of `a` (restricted to
/// `rows`), earliest-first, by Gram-Schmidt with a relative residual
/// threshold.
fn independent_rows(a: &DMatrix<f64>, rows: &[usize], rank_tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for &i in rows {
        let mut v = a.row(i).transpose();
        let norm0 = v.norm();
        if norm0 <= 1e-300 {
            continue;
        }
        for b in &basis {
            let proj = b.dot(&v);
            v -= proj * b;
        }
        if v.norm() > rank_tol.sqrt() * norm0 {
            kept.push(i);
            basis.push(&v / v.norm());
        }
    }
    kept
}

fn solve_cols(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = rhs.clone();
    for mut col in out.column_iter_mut() {
        let s = chol.solve(&col.clone_owned());
        col.copy_from(&s);
    }
    out
}

/// A finite collection of critical regions for one market structure, with
/// most-recently-hit-first lookup and online discovery.
#[derive(Debug, Clone)]
pub struct RegionAtlas {
    qp: MarketQp,
    regions: Vec<CriticalRegion>,
    /// Lookup order: indices into `regions`, most recently hit first.
    order: Vec<usize>,
    /// Samples quarantined during construction.
    quarantined: Vec<DVector<f64>>,
    opts: AtlasBuildOptions,
}

impl RegionAtlas {
    pub fn new(qp: MarketQp, opts: AtlasBuildOptions) -> Self {
        Self {
            qp,
            regions: Vec::new(),
            order: Vec::new(),
            quarantined: Vec::new(),
            opts,
        }
    }

    pub fn qp(&self) -> &MarketQp {
        &self.qp
    }

    pub fn structure(&self) -> StructureId {
        self.qp.structure
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> &[CriticalRegion] {
        &self.regions
    }

    pub fn region(&self, id: u32) -> Option<&CriticalRegion> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn quarantined(&self) -> &[DVector<f64>] {
        &self.quarantined
    }

    /// Builds the atlas over a sample set: for each sample in order, skip it
    /// when an existing region covers it, otherwise solve, classify and add
    /// the new region. Membership filtering of the remaining samples runs in
    /// parallel between insertions.
    pub fn build(&mut self, samples: &[DVector<f64>]) -> Result<(), MppError> {
        let mut pending: Vec<&DVector<f64>> = samples.iter().collect();
        while !pending.is_empty() {
            let uncovered: Vec<&DVector<f64>> = pending
                .par_iter()
                .filter(|xi| self.find(xi).is_none())
                .copied()
                .collect();
            let Some((&first, rest)) = uncovered.split_first() else {
                break;
            };
            match region_from_point(&self.qp, first, &self.opts) {
                Ok(region) => {
                    self.insert(region);
                }
                Err(e @ MppError::DegenerateRegion { .. }) => match self.opts.on_degenerate {
                    DegeneratePolicy::Fail => return Err(e),
                    DegeneratePolicy::Quarantine => {
                        log::warn!("quarantining sample {first:?}: {e}");
                        self.quarantined.push(first.clone());
                    }
                },
                Err(e) => return Err(e),
            }
            pending = rest.to_vec();
        }
        Ok(())
    }

    /// First region in lookup order containing ξ, without reordering.
    pub fn find(&self, xi: &DVector<f64>) -> Option<u32> {
        self.order
            .iter()
            .map(|&idx| &self.regions[idx])
            .find(|r| r.contains(xi, self.opts.region_tol))
            .map(|r| r.id)
    }

    /// Returns the region containing ξ, promoting it to the front of the
    /// lookup order. When no cached region contains ξ a new region is
    /// constructed online, appended and returned.
    pub fn locate(&mut self, xi: &DVector<f64>) -> Result<u32, MppError> {
        if let Some(pos) = self
            .order
            .iter()
            .position(|&idx| self.regions[idx].contains(xi, self.opts.region_tol))
        {
            let idx = self.order.remove(pos);
            self.order.insert(0, idx);
            return Ok(self.regions[idx].id);
        }
        log::debug!(
            "online region discovery at ξ = {:?} for structure {}",
            xi.as_slice(),
            self.structure()
        );
        let region = region_from_point(&self.qp, xi, &self.opts)?;
        let id = self.insert(region);
        Ok(id)
    }

    /// Inserts a region unless one with the same active set already exists;
    /// returns the id of the stored region either way.
    fn insert(&mut self, mut region: CriticalRegion) -> u32 {
        if let Some(existing) = self
            .regions
            .iter()
            .find(|r| r.active_set == region.active_set)
        {
            return existing.id;
        }
        let id = self.regions.len() as u32;
        region.id = id;
        self.regions.push(region);
        let idx = self.regions.len() - 1;
        self.order.insert(0, idx);
        id
    }

    /// Writes the atlas to a versioned cache file keyed by the QP content
    /// hash.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), MppError> {
        let cache = CacheFile {
            version: CACHE_VERSION,
            qp_hash: self.qp.content_hash(),
            structure: self.qp.structure,
            regions: self.regions.clone(),
        };
        let text = serde_json::to_string(&cache)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads an atlas from a cache file, verifying the version and that the
    /// cache was produced for exactly this QP.
    pub fn load(
        path: impl AsRef<std::path::Path>,
        qp: MarketQp,
        opts: AtlasBuildOptions,
    ) -> Result<Self, MppError> {
        let text = std::fs::read_to_string(path)?;
        let cache: CacheFile = serde_json::from_str(&text)?;
        if cache.version != CACHE_VERSION {
            return Err(MppError::Version(cache.version));
        }
        let expected = qp.content_hash();
        if cache.qp_hash != expected {
            return Err(MppError::HashMismatch {
                found: cache.qp_hash,
                expected,
            });
        }
        let order: Vec<usize> = (0..cache.regions.len()).collect();
        Ok(Self {
            qp,
            regions: cache.regions,
            order,
            quarantined: Vec::new(),
            opts,
        })
    }
}

const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    qp_hash: String,
    structure: StructureId,
    regions: Vec<CriticalRegion>,
}

/// Uniform sampling plans for atlas construction.
pub mod sampling {
    use nalgebra::DVector;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Grid over the box of the given perturbed dimensions (2-D: an
    /// `n_per_axis`² lattice); unlisted dimensions stay at zero.
    pub fn grid(
        dim_xi: usize,
        perturbed: &[usize],
        bounds: &[f64],
        n_per_axis: usize,
    ) -> Vec<DVector<f64>> {
        assert_eq!(perturbed.len(), bounds.len());
        let mut out = Vec::new();
        let mut idx = vec![0usize; perturbed.len()];
        loop {
            let mut xi = DVector::zeros(dim_xi);
            for (k, &d) in perturbed.iter().enumerate() {
                let frac = if n_per_axis > 1 {
                    idx[k] as f64 / (n_per_axis - 1) as f64
                } else {
                    0.5
                };
                xi[d] = -bounds[k] + 2.0 * bounds[k] * frac;
            }
            out.push(xi);
            // Odometer increment.
            let mut k = 0;
            loop {
                if k == idx.len() {
                    return out;
                }
                idx[k] += 1;
                if idx[k] < n_per_axis {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    /// Uniform random points in the box, seeded for reproducibility.
    pub fn random(
        dim_xi: usize,
        perturbed: &[usize],
        bounds: &[f64],
        n: usize,
        seed: u64,
    ) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut xi = DVector::zeros(dim_xi);
                for (k, &d) in perturbed.iter().enumerate() {
                    xi[d] = rng.random_range(-bounds[k]..=bounds[k]);
                }
                xi
            })
            .collect()
    }

    /// Default plan: a 101-per-axis grid for up to two perturbed dimensions,
    /// 10,000 random points otherwise.
    pub fn default_plan(
        dim_xi: usize,
        perturbed: &[usize],
        bounds: &[f64],
        seed: u64,
    ) -> Vec<DVector<f64>> {
        if perturbed.len() <= 2 {
            grid(dim_xi, perturbed, bounds, 101)
        } else {
            random(dim_xi, perturbed, bounds, 10_000, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{assemble_qp, RowLabel};
    use crate::testcases::{single_bus, three_bus_ring, two_bus};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn opts() -> AtlasBuildOptions {
        AtlasBuildOptions::default()
    }

    #[test]
    fn single_generator_region_matches_hand_kkt() {
        // Active set {balance, shed-lower}; by hand:
        //   D = (0.01, −0.01),  d = (11, 489),  P = (1, 0),  p = (100, 0).
        let qp = assemble_qp(&single_bus()).unwrap();
        let xi = DVector::zeros(1);
        let region = region_from_point(&qp, &xi, &opts()).unwrap();
        let balance = qp.row_of(RowLabel::Balance).unwrap();
        let shed_lower = qp.row_of(RowLabel::ShedLower(0)).unwrap();
        assert_eq!(region.kept_rows, vec![balance, shed_lower]);
        assert_abs_diff_eq!(region.d_mat[(0, 0)], 0.01, epsilon = 1e-10);
        assert_abs_diff_eq!(region.d_mat[(1, 0)], -0.01, epsilon = 1e-10);
        assert_abs_diff_eq!(region.d_vec[0], 11.0, epsilon = 1e-8);
        assert_abs_diff_eq!(region.d_vec[1], 489.0, epsilon = 1e-8);
        assert_abs_diff_eq!(region.p_mat[(0, 0)], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(region.p_mat[(1, 0)], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(region.p_vec[0], 100.0, epsilon = 1e-8);
        assert_abs_diff_eq!(region.p_vec[1], 0.0, epsilon = 1e-10);
        // Dispatch tracks the perturbation additively inside the region.
        let x = region.x_at(&DVector::from_vec(vec![25.0]));
        assert_abs_diff_eq!(x[0], 125.0, epsilon = 1e-8);
    }

    #[test]
    fn map_reproduces_solver_at_generating_point() {
        let qp = assemble_qp(&three_bus_ring()).unwrap();
        let xi = DVector::from_vec(vec![12.0, -7.0]);
        let sol = qpsolve::solve(&qp, &xi, &SolverOptions::default()).unwrap();
        let region = region_from_point(&qp, &xi, &opts()).unwrap();
        assert!((region.x_at(&xi) - &sol.x).amax() < 1e-6);
        // Duals of kept active rows are nonnegative at the optimum.
        let duals = region.duals_at(&xi);
        assert!(duals.iter().all(|&m| m >= -1e-8), "duals {duals:?}");
        assert!(region.contains(&xi, 1e-8));
    }

    #[test]
    fn contains_rejects_other_regions_interior() {
        let qp = assemble_qp(&two_bus()).unwrap();
        // ξ = 0: line congested. ξ = −40: demand 60 < limit 80, uncongested.
        let r_congested = region_from_point(&qp, &DVector::from_vec(vec![0.0]), &opts()).unwrap();
        let r_free = region_from_point(&qp, &DVector::from_vec(vec![-40.0]), &opts()).unwrap();
        assert_ne!(r_congested.active_set, r_free.active_set);
        assert!(!r_congested.contains(&DVector::from_vec(vec![-40.0]), 1e-8));
        assert!(!r_free.contains(&DVector::from_vec(vec![0.0]), 1e-8));
    }

    #[test]
    fn shared_facet_belongs_to_first_in_lookup_order() {
        // The two_bus congestion boundary sits exactly at ξ = −20 (demand 80
        // equals the line limit). Both adjacent regions accept it within
        // tolerance; locate must return the first in lookup order and stay
        // deterministic on repeat.
        let qp = assemble_qp(&two_bus()).unwrap();
        let mut atlas = RegionAtlas::new(qp, opts());
        atlas
            .build(&[DVector::from_vec(vec![0.0]), DVector::from_vec(vec![-40.0])])
            .unwrap();
        assert_eq!(atlas.len(), 2);
        let facet = DVector::from_vec(vec![-20.0]);
        let hits: Vec<u32> = atlas
            .regions()
            .iter()
            .filter(|r| r.contains(&facet, 1e-6))
            .map(|r| r.id)
            .collect();
        assert_eq!(hits.len(), 2, "facet point should satisfy both regions");
        let first = atlas.locate(&facet).unwrap();
        let second = atlas.locate(&facet).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn atlas_of_samples_inside_one_region_has_size_one() {
        let qp = assemble_qp(&single_bus()).unwrap();
        let samples: Vec<DVector<f64>> = (-5..=5)
            .map(|k| DVector::from_vec(vec![k as f64]))
            .collect();
        let mut atlas = RegionAtlas::new(qp, opts());
        atlas.build(&samples).unwrap();
        assert_eq!(atlas.len(), 1);
    }

    #[test]
    fn atlas_covers_every_sample_and_interiors_are_disjoint() {
        let case = three_bus_ring();
        let qp = assemble_qp(&case).unwrap();
        let bounds: Vec<f64> = case.loads.iter().map(|d| d.bound.unwrap()).collect();
        let samples = sampling::grid(qp.dim_xi(), &[0, 1], &bounds, 21);
        let mut atlas = RegionAtlas::new(qp, opts());
        atlas.build(&samples).unwrap();
        assert!(
            atlas.len() > 1,
            "expected several regions, got {}",
            atlas.len()
        );
        for xi in &samples {
            assert!(atlas.find(xi).is_some(), "sample {xi:?} not covered");
        }
        // Seeds are interior grid points; no other region may claim them.
        for r in atlas.regions() {
            for other in atlas.regions() {
                if other.id != r.id {
                    assert!(
                        !other.contains(&r.seed_xi, -1e-9),
                        "region {} interior point claimed by region {}",
                        r.id,
                        other.id
                    );
                }
            }
        }
    }

    #[test]
    fn locate_hits_cache_and_discovers_online() {
        let case = three_bus_ring();
        let qp = assemble_qp(&case).unwrap();
        let mut atlas = RegionAtlas::new(qp, opts());
        atlas.build(&[DVector::zeros(2)]).unwrap();
        let n0 = atlas.len();
        // Cache hit: no growth.
        let id0 = atlas.locate(&DVector::zeros(2)).unwrap();
        assert_eq!(atlas.len(), n0);
        // A far corner lives in a different region: atlas grows by exactly 1.
        let corner = DVector::from_vec(vec![29.0, 19.0]);
        let id1 = atlas.locate(&corner).unwrap();
        assert_eq!(atlas.len(), n0 + 1);
        assert_ne!(id0, id1);
        // Determinism on repeat.
        assert_eq!(atlas.locate(&corner).unwrap(), id1);
        assert_eq!(atlas.len(), n0 + 1);
    }

    #[test]
    fn oracle_equivalence_against_direct_solves() {
        let case = three_bus_ring();
        let qp = assemble_qp(&case).unwrap();
        let mut atlas = RegionAtlas::new(qp.clone(), opts());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let xi = DVector::from_fn(2, |d, _| {
                let b = case.loads[d].bound.unwrap();
                rng.random_range(-b..b)
            });
            let id = atlas.locate(&xi).unwrap();
            let region = atlas.region(id).unwrap();
            let sol = qpsolve::solve(&qp, &xi, &SolverOptions::default()).unwrap();
            assert!(
                (region.x_at(&xi) - &sol.x).amax() < 1e-6,
                "primal mismatch at {xi:?}"
            );
            let lmp_map = region.lmp_at(&xi);
            let lmp_solver = &qp.lambda * &sol.mu;
            assert!(
                (lmp_map - lmp_solver).amax() < 1e-5,
                "lmp mismatch at {xi:?}"
            );
        }
    }

    #[test]
    fn affine_map_is_exact_within_a_region() {
        let case = three_bus_ring();
        let qp = assemble_qp(&case).unwrap();
        let mut atlas = RegionAtlas::new(qp, opts());
        let x1 = DVector::from_vec(vec![2.0, 1.0]);
        let id = atlas.locate(&x1).unwrap();
        let region = atlas.region(id).unwrap().clone();
        // Pick a nearby third point still in the region, then test the midpoint.
        let x3 = DVector::from_vec(vec![4.0, 2.0]);
        assert!(region.contains(&x3, 1e-8));
        let x2 = (&x1 + &x3) * 0.5;
        let mid = region.x_at(&x2);
        let avg = (region.x_at(&x1) + region.x_at(&x3)) * 0.5;
        assert!((mid - avg).amax() < 1e-9);
    }

    #[test]
    fn rebuild_from_same_samples_is_stable() {
        let case = three_bus_ring();
        let qp = assemble_qp(&case).unwrap();
        let bounds: Vec<f64> = case.loads.iter().map(|d| d.bound.unwrap()).collect();
        let samples = sampling::grid(2, &[0, 1], &bounds, 15);
        let mut a1 = RegionAtlas::new(qp.clone(), opts());
        a1.build(&samples).unwrap();
        let mut a2 = RegionAtlas::new(qp, opts());
        a2.build(&samples).unwrap();
        let sets1: Vec<_> = a1.regions().iter().map(|r| r.active_set.clone()).collect();
        let sets2: Vec<_> = a2.regions().iter().map(|r| r.active_set.clone()).collect();
        assert_eq!(sets1, sets2);
    }

    #[test]
    fn cache_round_trip_and_hash_guard() {
        let case = three_bus_ring();
        let qp = assemble_qp(&case).unwrap();
        let mut atlas = RegionAtlas::new(qp.clone(), opts());
        atlas
            .build(&[DVector::zeros(2), DVector::from_vec(vec![25.0, 15.0])])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("atlas.json");
        atlas.save(&path).unwrap();

        let loaded = RegionAtlas::load(&path, qp.clone(), opts()).unwrap();
        assert_eq!(loaded.len(), atlas.len());
        for (a, b) in loaded.regions().iter().zip(atlas.regions()) {
            assert_eq!(a.active_set, b.active_set);
            assert_abs_diff_eq!((&a.p_mat - &b.p_mat).amax(), 0.0, epsilon = 0.0);
        }

        // A different structure must be rejected.
        let other =
            crate::netmodel::apply_outage(&qp, &case, &crate::netmodel::OutageSpec::Line(0))
                .unwrap();
        assert!(matches!(
            RegionAtlas::load(&path, other, opts()),
            Err(MppError::HashMismatch { .. })
        ));
    }

    #[test]
    fn rank_deficient_active_set_is_dropped_and_flagged() {
        // On the two_bus facet ξ = −20 the active set {balance, flow-upper,
        // shed-lower} has three rows in a two-dimensional x space.
        let qp = assemble_qp(&two_bus()).unwrap();
        let xi = DVector::from_vec(vec![-20.0]);
        let region = region_from_point(&qp, &xi, &opts()).unwrap();
        assert!(region.degenerate);
        assert!(region.kept_rows.len() < region.active_set.len());
        // The dropped-row map still reproduces the solver at the point.
        let sol = qpsolve::solve(&qp, &xi, &SolverOptions::default()).unwrap();
        assert!((region.x_at(&xi) - sol.x).amax() < 1e-6);
    }

    #[test]
    fn quarantine_policy_continues_past_degenerate_samples() {
        let qp = assemble_qp(&two_bus()).unwrap();
        let mut o = opts();
        o.verify_tol = 1e-300; // force the self-check to fail on everything
        o.on_degenerate = DegeneratePolicy::Quarantine;
        let mut atlas = RegionAtlas::new(qp, o);
        atlas.build(&[DVector::from_vec(vec![0.0])]).unwrap();
        assert_eq!(atlas.len(), 0);
        assert_eq!(atlas.quarantined().len(), 1);
    }
}
