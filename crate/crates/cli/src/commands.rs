//! Implementations of the five subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use outagewatch_core::detector::{run_detector, DetectorConfig};
use outagewatch_core::montecarlo::{self, CalibrationReport, CalibrationRow};
use outagewatch_core::mpp::RegionAtlas;
use outagewatch_core::stream::{self, ScenarioSpec};

use crate::config::CommonArgs;

pub fn regions(common: &CommonArgs) -> Result<()> {
    let r = common.resolve()?;
    r.write_config_echo("regions")?;
    std::fs::create_dir_all(&r.cache_dir)?;
    let (hset, cache_hits) = r.hypothesis_set(true)?;

    let mut counts = String::from("structure,label,regions,quarantined,from_cache\n");
    let perturbed = r.scenario.perturbed_loads.clone();
    let write_structure =
        |atlas: &RegionAtlas, label: &str, hit: bool, counts: &mut String| -> Result<()> {
            counts.push_str(&format!(
                "{},{},{},{},{}\n",
                atlas.structure(),
                label,
                atlas.len(),
                atlas.quarantined().len(),
                hit
            ));
            if perturbed.len() == 2 {
                let path = r
                    .out_dir
                    .join(format!("polygons-{}.csv", atlas.structure()));
                write_polygons(atlas, &perturbed, &path)?;
            }
            log::info!(
                "structure {} ({label}): {} regions{}",
                atlas.structure(),
                atlas.len(),
                if hit { " [cache]" } else { "" }
            );
            Ok(())
        };
    write_structure(&hset.nominal, "nominal", cache_hits[0], &mut counts)?;
    for (alt, hit) in hset.alternatives.iter().zip(&cache_hits[1..]) {
        write_structure(&alt.atlas, &alt.label, *hit, &mut counts)?;
    }
    std::fs::write(r.out_dir.join("region_counts.csv"), counts)?;
    Ok(())
}

/// Vertex enumeration of each region's polygon restricted to the 2-D
/// perturbed subspace, clipped to the box; vertices are emitted in
/// counter-clockwise order for plotting.
fn write_polygons(atlas: &RegionAtlas, perturbed: &[usize], path: &Path) -> Result<()> {
    let mut out = String::from("region_id,vertex,xi_a,xi_b\n");
    for region in atlas.regions() {
        // Restrict H to the two perturbed coordinates (others are zero).
        let rows: Vec<(f64, f64, f64)> = (0..region.h_vec.len())
            .map(|r| {
                (
                    region.h_mat[(r, perturbed[0])],
                    region.h_mat[(r, perturbed[1])],
                    region.h_vec[r],
                )
            })
            .collect();
        let mut vertices: Vec<(f64, f64)> = Vec::new();
        let n = rows.len();
        for i in 0..n {
            for j in (i + 1)..n {
                let (a1, b1, c1) = rows[i];
                let (a2, b2, c2) = rows[j];
                let det = a1 * b2 - a2 * b1;
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = (c1 * b2 - c2 * b1) / det;
                let y = (a1 * c2 - a2 * c1) / det;
                let feasible = rows.iter().all(|(a, b, c)| a * x + b * y <= c + 1e-6);
                if feasible
                    && vertices
                        .iter()
                        .all(|(vx, vy)| (vx - x).abs() > 1e-6 || (vy - y).abs() > 1e-6)
                {
                    vertices.push((x, y));
                }
            }
        }
        if vertices.len() < 3 {
            continue;
        }
        let cx = vertices.iter().map(|v| v.0).sum::<f64>() / vertices.len() as f64;
        let cy = vertices.iter().map(|v| v.1).sum::<f64>() / vertices.len() as f64;
        vertices.sort_by(|p, q| {
            let ap = (p.1 - cy).atan2(p.0 - cx);
            let aq = (q.1 - cy).atan2(q.0 - cx);
            ap.partial_cmp(&aq).unwrap()
        });
        for (v, (x, y)) in vertices.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", region.id, v, x, y));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn simulate(common: &CommonArgs) -> Result<()> {
    let r = common.resolve()?;
    r.write_config_echo("simulate")?;
    let s = stream::simulate(&r.case, &r.scenario)?;
    let path = r.out_dir.join("stream.csv");
    stream::export_csv(&s, &path)?;
    log::info!(
        "wrote {} steps to {} (scenario hash {}, seed {})",
        s.len(),
        path.display(),
        s.scenario_hash,
        s.seed
    );
    Ok(())
}

pub fn detect(
    common: &CommonArgs,
    stream_path: &Path,
    eta: Option<f64>,
    target_arl: Option<f64>,
    calibration: Option<&Path>,
) -> Result<()> {
    let r = common.resolve()?;
    let eta = match (eta, target_arl) {
        (Some(e), None) => e,
        (None, Some(target)) => {
            let path = calibration.context("--target-arl needs --calibration <calibration.csv>")?;
            let report = read_calibration_csv(path)?;
            let (picked, note) = montecarlo::pick_threshold(&report, target)?;
            log::info!("target ARL {target}: picked η = {picked} ({note:?})");
            picked
        }
        _ => bail!("give exactly one of --eta or --target-arl"),
    };
    r.write_config_echo("detect")?;
    let (mut hset, _) = r.hypothesis_set(false)?;
    let s = stream::replay(stream_path, &r.case)?;
    let config = DetectorConfig {
        eta,
        eps_rel: r.tolerances.eps_rel,
        record_history: false,
    };
    let (outcome, trace) = run_detector(&mut hset, &s.xis, &s.lmps, &config)?;

    // Outcome summary.
    let label = hset.label_of(outcome.identified).to_string();
    let summary = serde_json::json!({
        "eta": eta,
        "alarm": outcome.alarm,
        "tau": outcome.tau,
        "identified": outcome.identified.0,
        "identified_label": label,
        "crossing": outcome.crossing,
    });
    std::fs::write(
        r.out_dir.join("outcome.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    // Per-step trace: t, xi, lmp, one statistic per hypothesis, alarm flag.
    let mut csv = String::from("t");
    for i in 1..=r.case.n_load() {
        csv.push_str(&format!(",xi_{i}"));
    }
    for i in 1..=r.case.n_bus() {
        csv.push_str(&format!(",lmp_{i}"));
    }
    for alt in &hset.alternatives {
        csv.push_str(&format!(",w_{}", alt.label.replace([':', ','], "_")));
    }
    csv.push_str(",alarm\n");
    for st in &trace {
        let idx = st.t - 1;
        csv.push_str(&st.t.to_string());
        for v in s.xis[idx].iter() {
            csv.push_str(&format!(",{v}"));
        }
        for v in s.lmps[idx].iter() {
            csv.push_str(&format!(",{v}"));
        }
        for w in &st.w {
            csv.push_str(&format!(",{w}"));
        }
        let alarmed = outcome.alarm && Some(st.t) == outcome.tau;
        csv.push_str(if alarmed { ",1\n" } else { ",0\n" });
    }
    std::fs::write(r.out_dir.join("trace.csv"), csv)?;

    if outcome.alarm {
        log::info!(
            "ALARM at step {} — identified {} ({})",
            outcome.tau.unwrap(),
            outcome.identified.0,
            label
        );
    } else {
        log::info!("no alarm over {} steps", s.len());
    }
    Ok(())
}

pub fn calibrate(
    common: &CommonArgs,
    etas: &[f64],
    n_traj: usize,
    t_max: usize,
    target_arl: Option<f64>,
) -> Result<()> {
    let r = common.resolve()?;
    if n_traj == 0 {
        bail!("--trajectories must be at least 1");
    }
    r.write_config_echo("calibrate")?;
    let (hset, _) = r.hypothesis_set(true)?;
    let nominal_spec = ScenarioSpec {
        outage: None,
        ..r.scenario.clone()
    };
    let report = montecarlo::estimate_arl(
        &r.case,
        &hset,
        &nominal_spec,
        etas,
        n_traj,
        t_max,
        r.tolerances.eps_rel,
    )?;
    report.write_csv(r.out_dir.join("calibration.csv"))?;
    for row in &report.rows {
        log::info!(
            "η = {:>6}: ARL₀ = {:.1} (censored {:.1}%), P(false alarm) = {:.1}%",
            row.eta,
            row.arl0,
            100.0 * row.censored_frac,
            100.0 * row.false_alarm_prob
        );
    }
    if let Some(target) = target_arl {
        let (eta, note) = montecarlo::pick_threshold(&report, target)?;
        std::fs::write(
            r.out_dir.join("chosen_eta.txt"),
            format!("target_arl {target}\neta {eta}\nnote {note:?}\n"),
        )?;
        log::info!("target ARL {target}: η = {eta} ({note:?})");
    }
    Ok(())
}

pub fn bench(common: &CommonArgs, etas: &[f64], n_traj: usize, t_max: usize) -> Result<()> {
    let r = common.resolve()?;
    let Some((outage, change)) = r.scenario.outage else {
        bail!("bench needs a scenario with an outage");
    };
    let true_id = r
        .true_hypothesis()
        .context("the scenario outage must be among the hypotheses")?;
    r.write_config_echo("bench")?;
    let (hset, _) = r.hypothesis_set(true)?;

    // Offline columns: ARL under nominal operation (same seeds).
    let nominal_spec = ScenarioSpec {
        outage: None,
        ..r.scenario.clone()
    };
    let calibration = montecarlo::estimate_arl(
        &r.case,
        &hset,
        &nominal_spec,
        etas,
        n_traj,
        t_max,
        r.tolerances.eps_rel,
    )?;
    calibration.write_csv(r.out_dir.join("calibration.csv"))?;

    // Online columns: detection performance on the outage scenario.
    let report = montecarlo::evaluate(
        &r.case,
        &hset,
        &r.scenario,
        true_id,
        etas,
        n_traj,
        r.tolerances.eps_rel,
    )?;
    report.write_csv(r.out_dir.join("performance.csv"))?;
    let table = report.format_table(Some(&calibration));
    std::fs::write(r.out_dir.join("table.txt"), &table)?;
    log::info!(
        "outage {:?} at T={change}, true hypothesis {} ({}):\n{table}",
        outage,
        true_id.0,
        hset.label_of(true_id)
    );
    Ok(())
}

pub(crate) fn read_calibration_csv(path: &Path) -> Result<CalibrationReport> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading calibration report {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!(
                "calibration CSV line {} has {} fields, expected 6",
                i + 1,
                f.len()
            );
        }
        rows.push(CalibrationRow {
            eta: f[0].parse()?,
            arl0: f[1].parse()?,
            censored_frac: f[2].parse()?,
            false_alarm_prob: f[3].parse()?,
            n_traj: f[4].parse()?,
            t_max: f[5].parse()?,
        });
    }
    Ok(CalibrationReport {
        rows,
        master_seed: 0,
    })
}
