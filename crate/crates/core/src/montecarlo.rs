//! Threshold calibration and detection-performance benchmarking.
//!
//! Calibration runs the detector over nominal trajectories and estimates the
//! average run length to false alarm per threshold; performance evaluation
//! runs outage trajectories and reports detection delay, false/successful
//! detection and identification rates. Both share one trick: the CuSum
//! statistics do not depend on η, so each trajectory is swept once with an
//! infinite threshold and every row of the η table is read off the same
//! trace. Trajectory i uses seed master+i, so different η rows (and different
//! experiments at the same master seed) see common random numbers.
//!
//! Censoring is reported, never hidden: a nominal trajectory that survives
//! t_max contributes min(τ, t_max) to the censored ARL mean and bumps the
//! censored fraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{run_detector, DetectError, DetectorConfig, HypothesisId, HypothesisSet};
use crate::netmodel::NetworkCase;
use crate::stream::{self, ScenarioSpec, StreamError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("simulation failed: {0}")]
    Stream(#[from] StreamError),
    #[error("detector failed: {0}")]
    Detect(#[from] DetectError),
    #[error("benchmark configuration invalid: {0}")]
    Validation(String),
    #[error("target ARL {target} exceeds the largest tabulated ARL {max}; sweep a wider η range")]
    TargetOutOfRange { target: f64, max: f64 },
}

/// One calibration row: ARL-to-false-alarm statistics under nominal
/// operation at a given threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub eta: f64,
    /// Censored mean of min(τ, t_max) in steps.
    pub arl0: f64,
    /// Fraction of trajectories that never alarmed within t_max.
    pub censored_frac: f64,
    /// Fraction of trajectories with an alarm before t_max.
    pub false_alarm_prob: f64,
    pub n_traj: usize,
    pub t_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
    pub master_seed: u64,
}

/// One performance row at a given threshold. Counts partition the
/// trajectories: false detection (τ < T), successful detection
/// (T ≤ τ ≤ horizon) and miss (no alarm). Detection and identification
/// probabilities are conditional on surviving to the change point (τ ≥ T),
/// matching the column definitions of the benchmark table; misses count
/// against both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    pub eta: f64,
    pub n_traj: usize,
    pub n_false: usize,
    pub n_detect: usize,
    pub n_miss: usize,
    /// Successful detections that identified the injected outage.
    pub n_ident: usize,
    /// Mean delay τ − T over successful detections (NaN when none).
    pub avg_delay: f64,
    pub median_delay: f64,
    /// 95% half-width on the average delay.
    pub delay_half_width: f64,
    pub false_detection_prob: f64,
    pub detection_prob: f64,
    pub identification_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub rows: Vec<PerformanceRow>,
    pub true_outage: HypothesisId,
    pub change_point: usize,
    pub horizon: usize,
    pub master_seed: u64,
}

/// First crossing per threshold for one trajectory.
fn crossings(
    step_max: &[(usize, f64, HypothesisId)],
    etas: &[f64],
) -> Vec<(Option<usize>, HypothesisId)> {
    etas.iter()
        .map(|&eta| {
            step_max
                .iter()
                .find(|(_, w, _)| *w >= eta)
                .map(|(t, _, id)| (Some(*t), *id))
                .unwrap_or((None, HypothesisId::NOMINAL))
        })
        .collect()
}

/// Sweeps one trajectory with an infinite threshold and reads off the first
/// crossing for every η.
fn sweep_trajectory(
    case: &NetworkCase,
    spec: &ScenarioSpec,
    proto: &HypothesisSet,
    etas: &[f64],
    eps_rel: f64,
) -> Result<Vec<(Option<usize>, HypothesisId)>, BenchError> {
    let s = stream::simulate(case, spec)?;
    let mut hset = proto.clone();
    let config = DetectorConfig {
        eta: f64::INFINITY,
        eps_rel,
        record_history: false,
    };
    let (_, trace) = run_detector(&mut hset, &s.xis, &s.lmps, &config)?;
    let ids = hset.ids();
    let step_max: Vec<(usize, f64, HypothesisId)> = trace
        .iter()
        .map(|st| {
            let (k, w) =
                st.w.iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |acc, (k, &w)| {
                        if w > acc.1 {
                            (k, w)
                        } else {
                            acc
                        }
                    });
            (st.t, w, ids[k])
        })
        .collect();
    Ok(crossings(&step_max, etas))
}

fn seeded(spec: &ScenarioSpec, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        seed,
        ..spec.clone()
    }
}

/// Estimates ARL₀ and the false-alarm probability per threshold over
/// `n_traj` nominal trajectories of length `t_max`.
pub fn estimate_arl(
    case: &NetworkCase,
    proto: &HypothesisSet,
    nominal_spec: &ScenarioSpec,
    etas: &[f64],
    n_traj: usize,
    t_max: usize,
    eps_rel: f64,
) -> Result<CalibrationReport, BenchError> {
    if nominal_spec.outage.is_some() {
        return Err(BenchError::Validation(
            "ARL estimation requires a scenario without an outage".into(),
        ));
    }
    if n_traj == 0 || etas.is_empty() {
        return Err(BenchError::Validation(
            "need n_traj ≥ 1 and at least one η".into(),
        ));
    }
    let spec = ScenarioSpec {
        horizon: t_max,
        ..nominal_spec.clone()
    };
    let master = spec.seed;
    let per_traj: Vec<Vec<(Option<usize>, HypothesisId)>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            sweep_trajectory(
                case,
                &seeded(&spec, master + i as u64),
                proto,
                etas,
                eps_rel,
            )
        })
        .collect::<Result<_, _>>()?;

    let rows = etas
        .iter()
        .enumerate()
        .map(|(e, &eta)| {
            let mut run_sum = 0.0;
            let mut censored = 0usize;
            let mut alarms = 0usize;
            for traj in &per_traj {
                match traj[e].0 {
                    Some(tau) => {
                        run_sum += tau.min(t_max) as f64;
                        alarms += 1;
                    }
                    None => {
                        run_sum += t_max as f64;
                        censored += 1;
                    }
                }
            }
            CalibrationRow {
                eta,
                arl0: run_sum / n_traj as f64,
                censored_frac: censored as f64 / n_traj as f64,
                false_alarm_prob: alarms as f64 / n_traj as f64,
                n_traj,
                t_max,
            }
        })
        .collect();
    Ok(CalibrationReport {
        rows,
        master_seed: master,
    })
}

/// Conservative-side note attached to a threshold pick.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PickNote {
    /// The target fell between tabulated rows.
    Bracketed,
    /// The target lies below the smallest tabulated ARL; the smallest η is
    /// returned.
    BelowTable,
}

/// Smallest tabulated η whose ARL₀ reaches the target.
pub fn pick_threshold(
    report: &CalibrationReport,
    target_arl: f64,
) -> Result<(f64, PickNote), BenchError> {
    let mut rows: Vec<&CalibrationRow> = report.rows.iter().collect();
    rows.sort_by(|a, b| a.eta.partial_cmp(&b.eta).unwrap());
    if rows.is_empty() {
        return Err(BenchError::Validation("empty calibration report".into()));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.arl0 >= target_arl {
            let note = if i == 0 {
                PickNote::BelowTable
            } else {
                PickNote::Bracketed
            };
            return Ok((row.eta, note));
        }
    }
    let max = rows
        .iter()
        .map(|r| r.arl0)
        .fold(f64::NEG_INFINITY, f64::max);
    Err(BenchError::TargetOutOfRange {
        target: target_arl,
        max,
    })
}

/// Evaluates detection performance per threshold over `n_traj` outage
/// trajectories.
pub fn evaluate(
    case: &NetworkCase,
    proto: &HypothesisSet,
    outage_spec: &ScenarioSpec,
    true_outage: HypothesisId,
    etas: &[f64],
    n_traj: usize,
    eps_rel: f64,
) -> Result<PerformanceReport, BenchError> {
    let Some((_, change)) = outage_spec.outage else {
        return Err(BenchError::Validation(
            "performance evaluation requires a scenario with an outage".into(),
        ));
    };
    if n_traj == 0 || etas.is_empty() {
        return Err(BenchError::Validation(
            "need n_traj ≥ 1 and at least one η".into(),
        ));
    }
    let master = outage_spec.seed;
    let per_traj: Vec<Vec<(Option<usize>, HypothesisId)>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            sweep_trajectory(
                case,
                &seeded(outage_spec, master + i as u64),
                proto,
                etas,
                eps_rel,
            )
        })
        .collect::<Result<_, _>>()?;

    let rows = etas
        .iter()
        .enumerate()
        .map(|(e, &eta)| {
            let mut n_false = 0usize;
            let mut n_detect = 0usize;
            let mut n_miss = 0usize;
            let mut n_ident = 0usize;
            let mut delays: Vec<f64> = Vec::new();
            for traj in &per_traj {
                match traj[e] {
                    (Some(tau), id) => {
                        if tau < change {
                            n_false += 1;
                        } else {
                            n_detect += 1;
                            delays.push((tau - change) as f64);
                            if id == true_outage {
                                n_ident += 1;
                            }
                        }
                    }
                    (None, _) => n_miss += 1,
                }
            }
            let survived = (n_traj - n_false).max(1);
            let (avg, hw) = mean_and_half_width(&delays);
            PerformanceRow {
                eta,
                n_traj,
                n_false,
                n_detect,
                n_miss,
                n_ident,
                avg_delay: avg,
                median_delay: median(&mut delays.clone()),
                delay_half_width: hw,
                false_detection_prob: n_false as f64 / n_traj as f64,
                detection_prob: n_detect as f64 / survived as f64,
                identification_prob: n_ident as f64 / survived as f64,
            }
        })
        .collect();
    Ok(PerformanceReport {
        rows,
        true_outage,
        change_point: change,
        horizon: outage_spec.horizon,
        master_seed: master,
    })
}

/// Sample mean and 95% half-width (1.96·sd/√n); (NaN, NaN) on empty input.
pub fn mean_and_half_width(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// 95% half-width of a binomial proportion.
pub fn proportion_half_width(p: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Asserts a sequence trends upward beyond Monte Carlo noise: consecutive
/// values may not drop by more than the combined half-widths, and the last
/// value must exceed the first by more than theirs.
pub fn trend_up_outside_noise(values: &[f64], half_widths: &[f64]) -> Result<(), String> {
    assert_eq!(values.len(), half_widths.len());
    for i in 1..values.len() {
        let band = nan_zero(half_widths[i - 1]) + nan_zero(half_widths[i]);
        if values[i] < values[i - 1] - band {
            return Err(format!(
                "values[{i}] = {} drops below values[{}] = {} beyond the noise band {band}",
                values[i],
                i - 1,
                values[i - 1]
            ));
        }
    }
    let band = nan_zero(half_widths[0]) + nan_zero(*half_widths.last().unwrap());
    if *values.last().unwrap() <= values[0] + band {
        return Err(format!(
            "no overall increase: first {} vs last {} within band {band}",
            values[0],
            values.last().unwrap()
        ));
    }
    Ok(())
}

/// Downward twin of [`trend_up_outside_noise`].
pub fn trend_down_outside_noise(values: &[f64], half_widths: &[f64]) -> Result<(), String> {
    let negated: Vec<f64> = values.iter().map(|v| -v).collect();
    trend_up_outside_noise(&negated, half_widths)
}

fn nan_zero(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x
    }
}

impl CalibrationReport {
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        let mut out = String::from("eta,arl0,censored_frac,false_alarm_prob,n_traj,t_max\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.eta, r.arl0, r.censored_frac, r.false_alarm_prob, r.n_traj, r.t_max
            ));
        }
        std::fs::write(path, out)
    }
}

impl PerformanceReport {
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        let mut out = String::from(
            "eta,n_traj,n_false,n_detect,n_miss,n_ident,avg_delay,median_delay,\
             delay_half_width,false_detection_prob,detection_prob,identification_prob\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.eta,
                r.n_traj,
                r.n_false,
                r.n_detect,
                r.n_miss,
                r.n_ident,
                r.avg_delay,
                r.median_delay,
                r.delay_half_width,
                r.false_detection_prob,
                r.detection_prob,
                r.identification_prob
            ));
        }
        std::fs::write(path, out)
    }

    /// Aligned text table in the layout of the benchmark table: offline
    /// calibration columns first when available, then the online metrics.
    pub fn format_table(&self, calibration: Option<&CalibrationReport>) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:>6} {:>10} {:>16} {:>11} {:>13} {:>17} {:>13} {:>13}\n",
            "eta",
            "ARL",
            "P(false alarm)%",
            "avg delay",
            "median delay",
            "P(false det)%",
            "P(detect)%",
            "P(ident)%"
        ));
        for r in &self.rows {
            let (arl, pfa) = calibration
                .and_then(|c| c.rows.iter().find(|row| row.eta == r.eta))
                .map(|c| {
                    (
                        format!("{:.1}", c.arl0),
                        format!("{:.1}", 100.0 * c.false_alarm_prob),
                    )
                })
                .unwrap_or_else(|| ("-".into(), "-".into()));
            s.push_str(&format!(
                "{:>6} {:>10} {:>16} {:>11.1} {:>13.1} {:>17.1} {:>13.1} {:>13.1}\n",
                r.eta,
                arl,
                pfa,
                r.avg_delay,
                r.median_delay,
                100.0 * r.false_detection_prob,
                100.0 * r.detection_prob,
                100.0 * r.identification_prob
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::NoiseModel;
    use crate::detector::Alternative;
    use crate::mpp::{AtlasBuildOptions, RegionAtlas};
    use crate::netmodel::{apply_outage, assemble_qp, OutageSpec};
    use crate::testcases::three_bus_ring;
    use nalgebra::DMatrix;

    fn ring_proto(case: &crate::netmodel::NetworkCase) -> HypothesisSet {
        let qp = assemble_qp(case).unwrap();
        let opts = AtlasBuildOptions::default();
        let alternatives = (0..case.n_line())
            .map(|k| Alternative {
                id: HypothesisId(k as u32 + 1),
                label: format!("line{k}"),
                atlas: RegionAtlas::new(
                    apply_outage(&qp, case, &OutageSpec::Line(k)).unwrap(),
                    opts,
                ),
            })
            .collect();
        let noise = NoiseModel {
            sigma: DMatrix::identity(2, 2) * 36.0,
            bounds: vec![30.0, 20.0],
            boundary_tol: 1e-6,
        };
        HypothesisSet::new(RegionAtlas::new(qp, opts), alternatives, noise).unwrap()
    }

    fn nominal_spec() -> ScenarioSpec {
        ScenarioSpec {
            case_ref: "ring3".into(),
            perturbed_loads: vec![0, 1],
            sigma: 6.0,
            horizon: 120,
            outage: None,
            seed: 100,
            outage_model: Default::default(),
        }
    }

    #[test]
    fn unreachable_threshold_reports_full_censoring() {
        let case = three_bus_ring();
        let proto = ring_proto(&case);
        let report = estimate_arl(
            &case,
            &proto,
            &nominal_spec(),
            &[f64::INFINITY],
            8,
            60,
            1e-6,
        )
        .unwrap();
        let row = &report.rows[0];
        assert_eq!(row.arl0, 60.0);
        assert_eq!(row.censored_frac, 1.0);
        assert_eq!(row.false_alarm_prob, 0.0);
    }

    #[test]
    fn arl_is_monotone_in_eta() {
        let case = three_bus_ring();
        let proto = ring_proto(&case);
        let report = estimate_arl(
            &case,
            &proto,
            &nominal_spec(),
            &[0.5, 2.0, 8.0, 32.0],
            12,
            80,
            1e-6,
        )
        .unwrap();
        for w in report.rows.windows(2) {
            assert!(
                w[1].arl0 >= w[0].arl0,
                "ARL must be monotone under common random numbers: {:?}",
                report.rows
            );
        }
    }

    #[test]
    fn reports_are_reproducible() {
        let case = three_bus_ring();
        let proto = ring_proto(&case);
        let r1 = estimate_arl(&case, &proto, &nominal_spec(), &[1.0, 4.0], 6, 50, 1e-6).unwrap();
        let r2 = estimate_arl(&case, &proto, &nominal_spec(), &[1.0, 4.0], 6, 50, 1e-6).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn pick_threshold_boundary_rules() {
        let report = CalibrationReport {
            rows: vec![
                CalibrationRow {
                    eta: 10.0,
                    arl0: 100.0,
                    censored_frac: 0.0,
                    false_alarm_prob: 1.0,
                    n_traj: 10,
                    t_max: 500,
                },
                CalibrationRow {
                    eta: 20.0,
                    arl0: 250.0,
                    censored_frac: 0.0,
                    false_alarm_prob: 0.9,
                    n_traj: 10,
                    t_max: 500,
                },
                CalibrationRow {
                    eta: 30.0,
                    arl0: 400.0,
                    censored_frac: 0.2,
                    false_alarm_prob: 0.7,
                    n_traj: 10,
                    t_max: 500,
                },
            ],
            master_seed: 0,
        };
        // Bracketed target: smallest η with ARL ≥ target.
        let (eta, note) = pick_threshold(&report, 200.0).unwrap();
        assert_eq!(eta, 20.0);
        assert_eq!(note, PickNote::Bracketed);
        // Below the table: smallest η with a conservative-side note.
        let (eta, note) = pick_threshold(&report, 50.0).unwrap();
        assert_eq!(eta, 10.0);
        assert_eq!(note, PickNote::BelowTable);
        // Above the table: range error.
        assert!(matches!(
            pick_threshold(&report, 1000.0),
            Err(BenchError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn immediate_change_has_tiny_delays_and_no_false_detections() {
        let case = three_bus_ring();
        let proto = ring_proto(&case);
        let spec = ScenarioSpec {
            outage: Some((OutageSpec::Line(2), 1)),
            horizon: 150,
            sigma: 8.0,
            ..nominal_spec()
        };
        let report = evaluate(&case, &proto, &spec, HypothesisId(3), &[0.05], 10, 1e-6).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.n_false, 0, "τ ≥ 2 > T = 1 always");
        assert_eq!(row.n_false + row.n_detect + row.n_miss, row.n_traj);
        if row.n_detect > 0 {
            assert!(row.median_delay < 60.0, "median {}", row.median_delay);
        }
    }

    #[test]
    fn evaluate_rejects_nominal_scenario() {
        let case = three_bus_ring();
        let proto = ring_proto(&case);
        assert!(matches!(
            evaluate(
                &case,
                &proto,
                &nominal_spec(),
                HypothesisId(1),
                &[1.0],
                2,
                1e-6
            ),
            Err(BenchError::Validation(_))
        ));
    }

    #[test]
    fn half_width_scales_inverse_sqrt_n() {
        let xs: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let (_, hw1) = mean_and_half_width(&xs);
        let doubled: Vec<f64> = xs.iter().chain(xs.iter()).copied().collect();
        let (_, hw2) = mean_and_half_width(&doubled);
        let ratio = hw2 / hw1;
        assert!((ratio - 1.0 / 2.0f64.sqrt()).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn trend_helpers_respect_noise_bands() {
        trend_up_outside_noise(&[1.0, 2.0, 3.0], &[0.1, 0.1, 0.1]).unwrap();
        // A small dip inside the band passes.
        trend_up_outside_noise(&[1.0, 0.95, 3.0], &[0.1, 0.1, 0.1]).unwrap();
        // A dip beyond the band fails.
        assert!(trend_up_outside_noise(&[1.0, 0.5, 3.0], &[0.1, 0.1, 0.1]).is_err());
        // No overall increase fails.
        assert!(trend_up_outside_noise(&[1.0, 1.0, 1.05], &[0.1, 0.1, 0.1]).is_err());
        trend_down_outside_noise(&[3.0, 2.0, 1.0], &[0.1, 0.1, 0.1]).unwrap();
    }

    #[test]
    fn median_of_even_and_odd_lengths() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
