//! Per-region probabilistic models of observable increments.
//!
//! Inside one critical region the LMP increment is an affine image of the
//! perturbation increment: Δλ = Λ̃D·(ξ_t − ξ_{t−1}). With Wiener demand
//! increments ~ N(0, Σ) this gives a zero-mean Gaussian with covariance
//! (Λ̃D)Σ(Λ̃D)ᵀ; the aggregate-dispatch channel uses 1ᵀP in place of Λ̃D.
//! Those covariances are typically rank deficient (few perturbed loads map
//! into many bus prices), so densities are evaluated on an ε-regularized
//! covariance with the log-determinant normalizer included: the likelihood
//! ratios the detector builds from these densities compare covariances of
//! different shapes, and dropping the normalizers would break their drift
//! signs.
//!
//! Bounded perturbations freeze at the box edge; the adaptive selection rule
//! keeps only components strictly interior to their box at two consecutive
//! steps, dropping the matching map columns (equivalently Σ̂ = SΣSᵀ).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpp::CriticalRegion;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("noise model invalid: {0}")]
    Invalid(String),
    #[error("every perturbation component is frozen; the increment density is degenerate")]
    AllFrozen,
    #[error("covariance regularization failed to produce a positive definite matrix")]
    NotPd,
}

/// Wiener-increment noise model: ξ_t − ξ_{t−1} ~ N(0, Σ) with per-load
/// perturbation bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Covariance of the perturbation increments (MW²), one row/col per load.
    pub sigma: DMatrix<f64>,
    /// Per-load symmetric box `|ξ_i| ≤ bounds[i]` (MW).
    pub bounds: Vec<f64>,
    /// Margin (MW) a component must keep from the box edge to count as
    /// strictly interior.
    pub boundary_tol: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), DensityError> {
        let d = self.sigma.nrows();
        if self.sigma.ncols() != d || self.bounds.len() != d {
            return Err(DensityError::Invalid("dimension mismatch".into()));
        }
        if self.bounds.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(DensityError::Invalid(
                "bounds must be finite and nonnegative".into(),
            ));
        }
        let scale = self.sigma.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (self.sigma[(i, j)] - self.sigma[(j, i)]).abs() > 1e-10 * scale {
                    return Err(DensityError::Invalid("sigma not symmetric".into()));
                }
            }
        }
        // PSD check with a generous shift for roundoff.
        let shifted = &self.sigma + DMatrix::identity(d, d) * (1e-12 * scale);
        if shifted.cholesky().is_none() {
            return Err(DensityError::Invalid(
                "sigma not positive semidefinite".into(),
            ));
        }
        Ok(())
    }

    /// Selection mask: component i is kept iff it sits at least
    /// `boundary_tol` inside its box at both consecutive steps.
    pub fn selection(&self, xi_prev: &DVector<f64>, xi_now: &DVector<f64>) -> Vec<bool> {
        (0..self.bounds.len())
            .map(|i| {
                let lim = self.bounds[i] - self.boundary_tol;
                xi_prev[i].abs() <= lim && xi_now[i].abs() <= lim
            })
            .collect()
    }
}

/// Observable channel the density models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// LMP increments, Δλ ∈ R^{n_bus}.
    Lmp,
    /// Aggregate dispatch increments, Δ(1ᵀx) ∈ R.
    Dispatch,
}

/// How rank-deficient covariances are made evaluable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegularizationMode {
    /// Add ε·I with ε = eps_rel · trace/dim (the default).
    #[default]
    EpsilonIdentity,
    /// Pseudo-inverse on the support subspace; for sensitivity studies.
    SupportPseudoinverse,
}

/// Ready-to-evaluate Gaussian increment density for one region and channel.
#[derive(Debug, Clone)]
pub struct IncrementDensity {
    pub region_id: u32,
    pub channel: Channel,
    /// Covariance before regularization.
    pub covariance: DMatrix<f64>,
    /// Regularized covariance actually used for evaluation.
    pub regularized: DMatrix<f64>,
    /// Cached inverse of the regularized covariance.
    precision: DMatrix<f64>,
    /// −½·log det(2π·regularized).
    pub log_normalizer: f64,
    /// log det of the regularized covariance.
    pub log_det: f64,
    pub dim: usize,
}

/// The affine LMP map of a region: λ(ξ) = (Λ̃D)ξ + Λ̃d. Only columns of Λ
/// for the active rows survive; inactive flow constraints contribute nothing.
pub fn lmp_map(region: &CriticalRegion) -> (DMatrix<f64>, DVector<f64>) {
    (
        &region.lambda_tilde * &region.d_mat,
        &region.lambda_tilde * &region.d_vec,
    )
}

/// Builds the increment density of a region for one channel, applying the
/// adaptive selection mask before forming the covariance.
pub fn increment_covariance(
    region: &CriticalRegion,
    noise: &NoiseModel,
    channel: Channel,
    selection: &[bool],
    eps_rel: f64,
) -> Result<IncrementDensity, DensityError> {
    increment_covariance_with(
        region,
        noise,
        channel,
        selection,
        eps_rel,
        RegularizationMode::EpsilonIdentity,
    )
}

pub fn increment_covariance_with(
    region: &CriticalRegion,
    noise: &NoiseModel,
    channel: Channel,
    selection: &[bool],
    eps_rel: f64,
    mode: RegularizationMode,
) -> Result<IncrementDensity, DensityError> {
    let dim_xi = region.p_mat.ncols();
    if selection.len() != dim_xi {
        return Err(DensityError::Invalid(format!(
            "selection mask length {} != dim ξ {}",
            selection.len(),
            dim_xi
        )));
    }
    let keep: Vec<usize> = (0..dim_xi).filter(|&i| selection[i]).collect();
    if keep.is_empty() {
        return Err(DensityError::AllFrozen);
    }
    let map_full: DMatrix<f64> = match channel {
        Channel::Lmp => &region.lambda_tilde * &region.d_mat,
        Channel::Dispatch => DMatrix::from_fn(1, dim_xi, |_, j| region.p_mat.column(j).sum()),
    };
    let map_sel = map_full.select_columns(keep.iter());
    let sigma_sel = noise
        .sigma
        .select_rows(keep.iter())
        .select_columns(keep.iter());
    let covariance = &map_sel * sigma_sel * map_sel.transpose();
    build_density(region.id, channel, covariance, eps_rel, mode)
}

fn build_density(
    region_id: u32,
    channel: Channel,
    covariance: DMatrix<f64>,
    eps_rel: f64,
    mode: RegularizationMode,
) -> Result<IncrementDensity, DensityError> {
    let k = covariance.nrows();
    match mode {
        RegularizationMode::EpsilonIdentity => {
            let trace = covariance.trace();
            let eps = if trace > 0.0 {
                eps_rel * trace / k as f64
            } else {
                eps_rel
            };
            let regularized = &covariance + DMatrix::identity(k, k) * eps;
            let chol = regularized.clone().cholesky().ok_or(DensityError::NotPd)?;
            let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let precision = chol.inverse();
            let log_normalizer = -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            Ok(IncrementDensity {
                region_id,
                channel,
                covariance,
                regularized,
                precision,
                log_normalizer,
                log_det,
                dim: k,
            })
        }
        RegularizationMode::SupportPseudoinverse => {
            let eig = covariance.clone().symmetric_eigen();
            let max_ev = eig.eigenvalues.amax().max(1e-300);
            let cut = (eps_rel * max_ev).max(1e-300);
            let mut log_det = 0.0;
            let mut rank = 0usize;
            let mut inv_vals = eig.eigenvalues.clone();
            for v in inv_vals.iter_mut() {
                if *v > cut {
                    log_det += v.ln();
                    rank += 1;
                    *v = 1.0 / *v;
                } else {
                    *v = 0.0;
                }
            }
            if rank == 0 {
                return Err(DensityError::NotPd);
            }
            let precision = &eig.eigenvectors
                * DMatrix::from_diagonal(&inv_vals)
                * eig.eigenvectors.transpose();
            let log_normalizer = -0.5 * (rank as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            Ok(IncrementDensity {
                region_id,
                channel,
                covariance: covariance.clone(),
                regularized: covariance,
                precision,
                log_normalizer,
                log_det,
                dim: rank,
            })
        }
    }
}

impl IncrementDensity {
    /// Builds a density directly from a covariance matrix; used for tests and
    /// for channels that are already scalar.
    pub fn from_covariance(
        covariance: DMatrix<f64>,
        eps_rel: f64,
    ) -> Result<IncrementDensity, DensityError> {
        build_density(
            0,
            Channel::Lmp,
            covariance,
            eps_rel,
            RegularizationMode::default(),
        )
    }
}

/// Proper Gaussian log-density of an observed increment:
/// log_normalizer − ½·δᵀ(regularized covariance)⁻¹δ. Always finite.
pub fn log_density(density: &IncrementDensity, delta: &DVector<f64>) -> f64 {
    let quad = (&density.precision * delta).dot(delta);
    density.log_normalizer - 0.5 * quad
}

/// Closed-form KL divergence D(post ‖ nominal) between the zero-mean
/// Gaussians on their regularized covariances:
/// ½[tr(Σ₀⁻¹Σₐ) − k + log(det Σ₀ / det Σₐ)].
pub fn kl_divergence(post: &IncrementDensity, nominal: &IncrementDensity) -> f64 {
    let k = post.regularized.nrows() as f64;
    let trace = (&nominal.precision * &post.regularized).trace();
    0.5 * (trace - k + nominal.log_det - post.log_det)
}
