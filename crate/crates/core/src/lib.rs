//! Outage detection and identification from streams of market-clearing data.
//!
//! The pipeline has two stages. Offline, the real-time market-clearing problem
//! (a convex QP parameterized by demand perturbations) is decomposed into
//! critical regions, each carrying an affine map from perturbations to the
//! primal/dual solution and hence to locational marginal prices. One region
//! atlas is built per market structure: the nominal grid and one variant per
//! hypothesized line or generator outage. Online, streams of demand
//! perturbations and LMPs feed a bank of parallel CuSum statistics, one per
//! hypothesis, whose log-likelihood ratios come from the region-local Gaussian
//! increment densities. An alarm is raised as soon as one statistic exceeds a
//! threshold calibrated to a target average run length.
//!
//! Modules follow the pipeline order:
//!
//! - [`netmodel`]: grid/market data model, PTDF, compact QP assembly, outages
//! - [`qpsolve`]: dense QP solver with KKT certificates and active-set classification
//! - [`mpp`]: critical regions, region atlases, point location
//! - [`densities`]: per-region Gaussian increment densities, KL divergence
//! - [`detector`]: parallel CuSum bank, stopping rule, identification
//! - [`stream`]: synthetic market streams and CSV replay
//! - [`montecarlo`]: ARL threshold calibration and detection-delay benchmarks

pub mod densities;
pub mod detector;
pub mod montecarlo;
pub mod mpp;
pub mod netmodel;
pub mod qpsolve;
pub mod stream;

#[cfg(test)]
pub(crate) mod testcases;

pub use densities::{Channel, DensityError, IncrementDensity, NoiseModel, RegularizationMode};
pub use detector::{
    Alternative, CusumBank, DetectError, DetectionOutcome, DetectorConfig, HypothesisId,
    HypothesisSet, StepTrace,
};
pub use montecarlo::{
    BenchError, CalibrationReport, CalibrationRow, PerformanceReport, PerformanceRow,
};
pub use mpp::{AtlasBuildOptions, CriticalRegion, DegeneratePolicy, MppError, RegionAtlas};
pub use netmodel::{
    Generator, Line, Load, MarketQp, NetError, NetworkCase, OutageModel, OutageSpec, RowLabel,
    StructureId,
};
pub use qpsolve::{KktResiduals, PrimalDualSolution, SolveError, SolverOptions};
pub use stream::{MarketStream, ScenarioSpec, StreamError};

/// Numeric tolerances shared across the pipeline, surfaced so that commands
/// can override any of them from configuration.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Tolerances {
    /// Relative active-set classification tolerance (`qpsolve`).
    pub active_set: f64,
    /// Region membership tolerance, also the facet tie-break tolerance (`mpp`).
    pub region: f64,
    /// Relative covariance regularization: epsilon = eps_rel * trace / dim.
    /// The default keeps the regularized covariance a meaningful fraction of
    /// the per-region increment scale, so likelihood ratios compare
    /// distribution shapes instead of amplifying off-support residuals.
    pub eps_rel: f64,
    /// Margin (MW) a perturbation component must keep from its bound to count
    /// as interior for the adaptive selection rule.
    pub boundary: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            active_set: 1e-7,
            region: 1e-8,
            eps_rel: 0.5,
            boundary: 1e-6,
        }
    }
}
