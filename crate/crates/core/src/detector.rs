//! Parallel CuSum statistics over hypothesized outages.
//!
//! One statistic runs per hypothesis a. At each step the observed LMP
//! increment Δλ_t is scored under the increment densities of the critical
//! regions located at ξ_t in the nominal atlas (i) and in hypothesis a's
//! atlas (j), and the clipped recursion
//!
//! ```text
//! w_t^a = max{0, w_{t−1}^a + log f_j^a(Δλ_t) − log f_i^0(Δλ_t)}
//! ```
//!
//! accumulates the evidence. An alarm is raised as soon as max_a w_t^a ≥ η;
//! the identified outage is the argmax at the crossing. Log-likelihood
//! ratios are computed with the adaptive selection of frozen perturbation
//! components applied to both densities; a step with every component frozen
//! contributes nothing.

use std::collections::HashMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::{
    increment_covariance, log_density, Channel, DensityError, IncrementDensity, NoiseModel,
};
use crate::mpp::{MppError, RegionAtlas};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("region lookup failed: {0}")]
    Mpp(#[from] MppError),
    #[error("density construction failed: {0}")]
    Density(#[from] DensityError),
    #[error("malformed stream at step {step}: {what}")]
    Malformed { step: usize, what: String },
    #[error("hypothesis set invalid: {0}")]
    Config(String),
}

/// Identifier of a hypothesis; 0 is the nominal structure, outage hypotheses
/// are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HypothesisId(pub u32);

impl HypothesisId {
    pub const NOMINAL: HypothesisId = HypothesisId(0);
}

impl std::fmt::Display for HypothesisId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One hypothesized outage: its id, a human-readable label, and the region
/// atlas of the post-outage market structure.
#[derive(Debug, Clone)]
pub struct Alternative {
    pub id: HypothesisId,
    pub label: String,
    pub atlas: RegionAtlas,
}

/// Nominal atlas plus one atlas per hypothesized outage, sharing a noise
/// model.
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    pub nominal: RegionAtlas,
    pub alternatives: Vec<Alternative>,
    pub noise: NoiseModel,
}

impl HypothesisSet {
    pub fn new(
        nominal: RegionAtlas,
        alternatives: Vec<Alternative>,
        noise: NoiseModel,
    ) -> Result<Self, DetectError> {
        noise.validate()?;
        if alternatives.is_empty() {
            return Err(DetectError::Config(
                "at least one outage hypothesis is required".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for alt in &alternatives {
            if alt.id == HypothesisId::NOMINAL || !seen.insert(alt.id) {
                return Err(DetectError::Config(format!(
                    "hypothesis ids must be unique and nonzero, got {}",
                    alt.id
                )));
            }
            if alt.atlas.qp().dim_xi() != nominal.qp().dim_xi()
                || alt.atlas.qp().n_bus != nominal.qp().n_bus
            {
                return Err(DetectError::Config(format!(
                    "atlas for hypothesis {} does not match the nominal problem dimensions",
                    alt.id
                )));
            }
        }
        Ok(Self {
            nominal,
            alternatives,
            noise,
        })
    }

    pub fn ids(&self) -> Vec<HypothesisId> {
        self.alternatives.iter().map(|a| a.id).collect()
    }

    pub fn label_of(&self, id: HypothesisId) -> &str {
        if id == HypothesisId::NOMINAL {
            return "nominal";
        }
        self.alternatives
            .iter()
            .find(|a| a.id == id)
            .map(|a| a.label.as_str())
            .unwrap_or("?")
    }
}

/// The vector of parallel CuSum statistics.
#[derive(Debug, Clone)]
pub struct CusumBank {
    ids: Vec<HypothesisId>,
    /// Current statistics, one per hypothesis, all ≥ 0.
    pub w: Vec<f64>,
    /// Steps processed so far (stream step of the last update).
    pub t: usize,
    /// Stopping threshold η.
    pub eta: f64,
    /// Per-step trace of all statistics, when enabled.
    pub history: Option<Vec<Vec<f64>>>,
}

impl CusumBank {
    pub fn new(ids: Vec<HypothesisId>, eta: f64, record_history: bool) -> Self {
        let n = ids.len();
        Self {
            ids,
            w: vec![0.0; n],
            t: 0,
            eta,
            history: record_history.then(Vec::new),
        }
    }

    pub fn ids(&self) -> &[HypothesisId] {
        &self.ids
    }

    /// Applies the clipped recursion w ← max{0, w + llr} to every statistic
    /// and advances the step counter.
    pub fn update(&mut self, llrs: &[f64]) {
        assert_eq!(llrs.len(), self.w.len(), "one llr per hypothesis");
        for (w, &l) in self.w.iter_mut().zip(llrs) {
            *w = (*w + l).max(0.0);
        }
        self.t += 1;
        if let Some(h) = &mut self.history {
            h.push(self.w.clone());
        }
    }

    /// Stopping rule: alarm iff some statistic has reached η. The identified
    /// hypothesis is the argmax; exact ties resolve to the lowest id with a
    /// logged warning.
    pub fn check_stop(&self) -> DetectionOutcome {
        let mut best: Option<(HypothesisId, f64)> = None;
        let mut tied = false;
        for (id, &w) in self.ids.iter().zip(&self.w) {
            match best {
                None => best = Some((*id, w)),
                Some((_, bw)) if w > bw => {
                    best = Some((*id, w));
                    tied = false;
                }
                Some((bid, bw)) if w == bw && *id != bid => tied = true,
                _ => {}
            }
        }
        let (id, peak) = best.unwrap_or((HypothesisId::NOMINAL, 0.0));
        if peak >= self.eta {
            if tied {
                log::warn!(
                    "simultaneous threshold crossing at t={}; picking hypothesis {id}",
                    self.t
                );
            }
            DetectionOutcome {
                alarm: true,
                tau: Some(self.t),
                identified: id,
                crossing: self.w.clone(),
            }
        } else {
            DetectionOutcome {
                alarm: false,
                tau: None,
                identified: HypothesisId::NOMINAL,
                crossing: self.w.clone(),
            }
        }
    }
}

/// Result of a detection run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub alarm: bool,
    /// Stream step at which the alarm fired.
    pub tau: Option<usize>,
    /// Identified outage; nominal (0) when no alarm fired.
    pub identified: HypothesisId,
    /// Statistics at the crossing (or at the end of the stream).
    pub crossing: Vec<f64>,
}

/// Per-step record of the detector run.
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Stream step (1-based; increments exist from step 2).
    pub t: usize,
    pub llrs: Vec<f64>,
    /// Statistics after the update.
    pub w: Vec<f64>,
    /// True when every perturbation component was frozen and the step
    /// contributed nothing.
    pub degenerate: bool,
}

/// Detector configuration.
#[derive(Debug, Clone, Copy)]
pub struct DetectorConfig {
    /// Stopping threshold η; use `f64::INFINITY` to sweep the whole stream.
    pub eta: f64,
    /// Relative covariance regularization passed through to the densities.
    pub eps_rel: f64,
    /// Record the full per-step statistic history on the bank.
    pub record_history: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            eta: 50.0,
            eps_rel: 0.5,
            record_history: false,
        }
    }
}

/// Memoizes increment densities per (atlas, region, selection mask).
#[derive(Default)]
pub struct DensityCache {
    map: HashMap<(usize, u32, Vec<bool>), IncrementDensity>,
}

impl DensityCache {
    fn get_or_build(
        &mut self,
        atlas_key: usize,
        atlas: &RegionAtlas,
        region_id: u32,
        noise: &NoiseModel,
        selection: &[bool],
        eps_rel: f64,
    ) -> Result<&IncrementDensity, DetectError> {
        let key = (atlas_key, region_id, selection.to_vec());
        if !self.map.contains_key(&key) {
            let region = atlas.region(region_id).expect("region id from this atlas");
            let d = increment_covariance(region, noise, Channel::Lmp, selection, eps_rel)?;
            self.map.insert(key.clone(), d);
        }
        Ok(self.map.get(&key).unwrap())
    }
}

/// Log-likelihood ratio for one hypothesis at one step: locates ξ_t in the
/// nominal and alternative atlases (constructing regions online if needed)
/// and scores Δλ under both increment densities with the selection applied.
pub fn llr(
    hset: &mut HypothesisSet,
    alt_index: usize,
    delta_lmp: &DVector<f64>,
    xi_t: &DVector<f64>,
    selection: &[bool],
    eps_rel: f64,
) -> Result<f64, DetectError> {
    if selection.iter().all(|s| !s) {
        return Ok(0.0);
    }
    let mut cache = DensityCache::default();
    let nom_id = hset.nominal.locate(xi_t)?;
    let ld0 = {
        let d0 = cache.get_or_build(0, &hset.nominal, nom_id, &hset.noise, selection, eps_rel)?;
        log_density(d0, delta_lmp)
    };
    let alt = &mut hset.alternatives[alt_index];
    let alt_id = alt.atlas.locate(xi_t)?;
    let da = cache.get_or_build(
        1 + alt_index,
        &alt.atlas,
        alt_id,
        &hset.noise,
        selection,
        eps_rel,
    )?;
    Ok(log_density(da, delta_lmp) - ld0)
}

/// Runs the full identification loop over a stream of (ξ_t, λ_t) pairs:
/// observe, locate regions, score, update the bank, stop at the first alarm.
/// Returns the outcome and the per-step trace up to the stopping step.
pub fn run_detector(
    hset: &mut HypothesisSet,
    xis: &[DVector<f64>],
    lmps: &[DVector<f64>],
    config: &DetectorConfig,
) -> Result<(DetectionOutcome, Vec<StepTrace>), DetectError> {
    if xis.len() != lmps.len() {
        return Err(DetectError::Malformed {
            step: 0,
            what: format!("{} perturbations vs {} LMP vectors", xis.len(), lmps.len()),
        });
    }
    if xis.len() < 2 {
        return Err(DetectError::Malformed {
            step: 0,
            what: "need at least two steps to form increments".into(),
        });
    }
    let dim_xi = hset.nominal.qp().dim_xi();
    let n_bus = hset.nominal.qp().n_bus;

    let mut bank = CusumBank::new(hset.ids(), config.eta, config.record_history);
    bank.t = 1; // step 1 observed, no increment yet
    let mut cache = DensityCache::default();
    let mut trace = Vec::with_capacity(xis.len() - 1);

    for i in 1..xis.len() {
        let t = i + 1;
        if xis[i].len() != dim_xi || lmps[i].len() != n_bus {
            return Err(DetectError::Malformed {
                step: t,
                what: format!(
                    "expected ξ dim {dim_xi} and λ dim {n_bus}, got {} and {}",
                    xis[i].len(),
                    lmps[i].len()
                ),
            });
        }
        let delta = &lmps[i] - &lmps[i - 1];
        let selection = hset.noise.selection(&xis[i - 1], &xis[i]);
        let degenerate = selection.iter().all(|s| !s);
        let mut llrs = vec![0.0; hset.alternatives.len()];
        if !degenerate {
            let nom_id = hset.nominal.locate(&xis[i])?;
            let ld0 = {
                let d0 = cache.get_or_build(
                    0,
                    &hset.nominal,
                    nom_id,
                    &hset.noise,
                    &selection,
                    config.eps_rel,
                )?;
                log_density(d0, &delta)
            };
            for (k, alt) in hset.alternatives.iter_mut().enumerate() {
                let alt_id = alt.atlas.locate(&xis[i])?;
                let da = cache.get_or_build(
                    1 + k,
                    &alt.atlas,
                    alt_id,
                    &hset.noise,
                    &selection,
                    config.eps_rel,
                )?;
                llrs[k] = log_density(da, &delta) - ld0;
            }
        }
        bank.update(&llrs);
        trace.push(StepTrace {
            t,
            llrs,
            w: bank.w.clone(),
            degenerate,
        });
        let outcome = bank.check_stop();
        if outcome.alarm {
            return Ok((outcome, trace));
        }
    }
    Ok((bank.check_stop(), trace))
}

/// Average per-hypothesis llr over a stream, with standard errors; the drift
/// diagnostics behind the detector's sign guarantees.
pub fn mean_llrs(trace: &[StepTrace], n_hyp: usize) -> Vec<(f64, f64)> {
    let n = trace.len().max(1) as f64;
    (0..n_hyp)
        .map(|k| {
            let mean = trace.iter().map(|s| s.llrs[k]).sum::<f64>() / n;
            let var = trace
                .iter()
                .map(|s| (s.llrs[k] - mean).powi(2))
                .sum::<f64>()
                / n;
            (mean, (var / n).sqrt())
        })
        .collect()
}
