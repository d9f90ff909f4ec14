//! Shared fixtures for the pipeline benchmarks: the bundled PJM 5-bus case,
//! its compact QP, a built nominal atlas, and a ready hypothesis set.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use outagewatch_core::densities::NoiseModel;
use outagewatch_core::detector::{Alternative, HypothesisId, HypothesisSet};
use outagewatch_core::mpp::{sampling, AtlasBuildOptions, DegeneratePolicy, RegionAtlas};
use outagewatch_core::netmodel::{apply_outage, assemble_qp, MarketQp, NetworkCase, OutageSpec};

pub fn case5() -> NetworkCase {
    NetworkCase::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../cases/case5_pjm.toml"
    ))
    .expect("bundled case parses")
}

pub fn case5_qp() -> MarketQp {
    assemble_qp(&case5()).unwrap()
}

pub fn atlas_options() -> AtlasBuildOptions {
    AtlasBuildOptions {
        on_degenerate: DegeneratePolicy::Quarantine,
        ..AtlasBuildOptions::default()
    }
}

/// Nominal atlas over the case's perturbation box (loads 1 and 2 perturbed).
pub fn nominal_atlas() -> RegionAtlas {
    let case = case5();
    let qp = assemble_qp(&case).unwrap();
    let bounds: Vec<f64> = [0, 1]
        .iter()
        .map(|&i| case.loads[i].bound.unwrap())
        .collect();
    let samples = sampling::grid(case.n_load(), &[0, 1], &bounds, 41);
    let mut atlas = RegionAtlas::new(qp, atlas_options());
    atlas.build(&samples).unwrap();
    atlas
}

/// Full six-line hypothesis set with σ = 8 MW noise on loads 1 and 2.
pub fn hypothesis_set() -> HypothesisSet {
    let case = case5();
    let qp = assemble_qp(&case).unwrap();
    let bounds: Vec<f64> = case.loads.iter().map(|l| l.bound.unwrap()).collect();
    let box2: Vec<f64> = vec![bounds[0], bounds[1]];
    let samples = sampling::grid(case.n_load(), &[0, 1], &box2, 41);
    let build = |qp: MarketQp| {
        let mut a = RegionAtlas::new(qp, atlas_options());
        a.build(&samples).unwrap();
        a
    };
    let alternatives = (0..case.n_line())
        .map(|k| Alternative {
            id: HypothesisId(k as u32 + 1),
            label: format!("line{}", k + 1),
            atlas: build(apply_outage(&qp, &case, &OutageSpec::Line(k)).unwrap()),
        })
        .collect();
    let mut sigma = DMatrix::zeros(case.n_load(), case.n_load());
    sigma[(0, 0)] = 64.0;
    sigma[(1, 1)] = 64.0;
    let noise = NoiseModel {
        sigma,
        bounds,
        boundary_tol: 1e-6,
    };
    HypothesisSet::new(build(qp), alternatives, noise).unwrap()
}

/// Uniform perturbations inside the box, seeded.
pub fn sample_points(n: usize, seed: u64) -> Vec<DVector<f64>> {
    let case = case5();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut xi = DVector::zeros(case.n_load());
            for d in 0..2 {
                let b = case.loads[d].bound.unwrap();
                xi[d] = rng.random_range(-b..b);
            }
            xi
        })
        .collect()
}
