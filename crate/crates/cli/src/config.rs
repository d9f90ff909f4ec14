//! Shared command configuration: paths, seeds, tolerances, hypothesis lists,
//! and the machinery to resolve them into cases, scenarios and atlases.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use outagewatch_core::densities::NoiseModel;
use outagewatch_core::detector::{Alternative, HypothesisId, HypothesisSet};
use outagewatch_core::mpp::{sampling, AtlasBuildOptions, DegeneratePolicy, RegionAtlas};
use outagewatch_core::netmodel::{self, NetworkCase, OutageSpec};
use outagewatch_core::qpsolve::SolverOptions;
use outagewatch_core::stream::ScenarioSpec;
use outagewatch_core::Tolerances;

/// Environment variable naming the default atlas-cache directory.
pub const CACHE_ENV: &str = "OUTAGEWATCH_CACHE";

#[derive(Args, Clone, Debug)]
pub struct CommonArgs {
    /// Network case file (TOML).
    #[arg(long)]
    pub case: PathBuf,
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory (created if absent).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Atlas cache directory; defaults to $OUTAGEWATCH_CACHE, then
    /// `<out>/atlas-cache`.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Hypothesized outages, e.g. "line:1,line:b1-b5,gen:2" (1-based
    /// indices); default: every single-line outage that keeps the network
    /// connected.
    #[arg(long)]
    pub hypotheses: Option<String>,
    /// Active-set classification tolerance.
    #[arg(long, default_value_t = 1e-7)]
    pub active_set_tol: f64,
    /// Region membership tolerance.
    #[arg(long, default_value_t = 1e-8)]
    pub region_tol: f64,
    /// Relative covariance regularization for the detector densities.
    #[arg(long, default_value_t = 0.5)]
    pub eps_rel: f64,
    /// Selection-rule boundary margin (MW).
    #[arg(long, default_value_t = 1e-6)]
    pub boundary_tol: f64,
    /// Recompute the PTDF on the reduced topology for line outages instead
    /// of the default constraint-row deletion.
    #[arg(long)]
    pub physical_ptdf: bool,
}

/// Everything a command needs, resolved and validated.
pub struct Resolved {
    pub case: NetworkCase,
    pub scenario: ScenarioSpec,
    pub hypotheses: Vec<(OutageSpec, String)>,
    pub tolerances: Tolerances,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<Resolved> {
        let case = NetworkCase::load(&self.case)
            .with_context(|| format!("loading case {}", self.case.display()))?;
        let mut scenario = ScenarioSpec::load(&self.scenario, &case)
            .with_context(|| format!("loading scenario {}", self.scenario.display()))?;
        if let Some(seed) = self.seed {
            scenario.seed = seed;
        }
        if self.physical_ptdf {
            scenario.outage_model = netmodel::OutageModel::PhysicalPtdf;
        }
        let hypotheses = match &self.hypotheses {
            Some(spec) => parse_hypotheses(spec, &case)?,
            None => default_hypotheses(&case),
        };
        if hypotheses.is_empty() {
            bail!("no valid outage hypotheses for this case");
        }
        let tolerances = Tolerances {
            active_set: self.active_set_tol,
            region: self.region_tol,
            eps_rel: self.eps_rel,
            boundary: self.boundary_tol,
        };
        let out_dir = self.out.clone();
        std::fs::create_dir_all(&out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))?;
        let cache_dir = self
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| out_dir.join("atlas-cache"));
        Ok(Resolved {
            case,
            scenario,
            hypotheses,
            tolerances,
            out_dir,
            cache_dir,
        })
    }
}

/// Every single-line outage that keeps the graph connected.
fn default_hypotheses(case: &NetworkCase) -> Vec<(OutageSpec, String)> {
    (0..case.n_line())
        .filter_map(|k| {
            let spec = OutageSpec::Line(k);
            spec.validate(case).ok()?;
            Some((spec, line_label(case, k)))
        })
        .collect()
}

fn line_label(case: &NetworkCase, k: usize) -> String {
    let l = &case.lines[k];
    format!("line:{}-{}", case.buses[l.from], case.buses[l.to])
}

/// Parses "line:3,line:b1-b5,gen:2" (1-based indices, or line endpoints by
/// bus name).
fn parse_hypotheses(spec: &str, case: &NetworkCase) -> Result<Vec<(OutageSpec, String)>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (kind, rest) = item
            .split_once(':')
            .with_context(|| format!("hypothesis `{item}` is not kind:element"))?;
        let outage = match kind {
            "line" => {
                if let Ok(idx) = rest.parse::<usize>() {
                    if idx == 0 || idx > case.n_line() {
                        bail!("line index {idx} out of range 1..={}", case.n_line());
                    }
                    OutageSpec::Line(idx - 1)
                } else if let Some((a, b)) = rest.split_once('-') {
                    let ia = case
                        .bus_index(a)
                        .with_context(|| format!("unknown bus `{a}`"))?;
                    let ib = case
                        .bus_index(b)
                        .with_context(|| format!("unknown bus `{b}`"))?;
                    let k = case
                        .line_between(ia, ib)
                        .with_context(|| format!("no line between {a} and {b}"))?;
                    OutageSpec::Line(k)
                } else {
                    bail!("cannot parse line reference `{rest}`");
                }
            }
            "gen" | "generator" => {
                let idx: usize = rest
                    .parse()
                    .with_context(|| format!("bad generator `{rest}`"))?;
                if idx == 0 || idx > case.n_gen() {
                    bail!("generator index {idx} out of range 1..={}", case.n_gen());
                }
                OutageSpec::Generator(idx - 1)
            }
            other => bail!("unknown hypothesis kind `{other}`"),
        };
        outage
            .validate(case)
            .with_context(|| format!("hypothesis `{item}` is not applicable"))?;
        let label = match outage {
            OutageSpec::Line(k) => line_label(case, k),
            OutageSpec::Generator(g) => format!("gen:{}", case.buses[case.generators[g].bus]),
        };
        out.push((outage, label));
    }
    Ok(out)
}

impl Resolved {
    pub fn atlas_options(&self, on_degenerate: DegeneratePolicy) -> AtlasBuildOptions {
        AtlasBuildOptions {
            solver: SolverOptions {
                active_tol: self.tolerances.active_set,
                ..SolverOptions::default()
            },
            region_tol: self.tolerances.region,
            rank_tol: 1e-9,
            verify_tol: 1e-6,
            on_degenerate,
        }
    }

    pub fn noise_model(&self) -> NoiseModel {
        let d = self.case.n_load();
        let bounds = self.scenario.resolved_bounds(&self.case);
        let mut sigma = nalgebra::DMatrix::zeros(d, d);
        for &i in &self.scenario.perturbed_loads {
            sigma[(i, i)] = self.scenario.sigma * self.scenario.sigma;
        }
        NoiseModel {
            sigma,
            bounds,
            boundary_tol: self.tolerances.boundary,
        }
    }

    pub fn atlas_cache_path(&self, qp: &netmodel::MarketQp) -> PathBuf {
        self.cache_dir
            .join(format!("{}-{}.json", qp.structure, qp.content_hash()))
    }

    /// Atlas samples over the perturbation box: a grid for up to two
    /// perturbed loads, seeded random points otherwise.
    pub fn atlas_samples(&self) -> Vec<nalgebra::DVector<f64>> {
        let bounds_all = self.scenario.resolved_bounds(&self.case);
        let perturbed = &self.scenario.perturbed_loads;
        let bounds: Vec<f64> = perturbed.iter().map(|&i| bounds_all[i]).collect();
        sampling::default_plan(self.case.n_load(), perturbed, &bounds, self.scenario.seed)
    }

    /// Builds or loads the atlas for one QP, saving fresh builds to cache.
    /// Returns the atlas and whether it came from cache.
    pub fn atlas_for(
        &self,
        qp: &netmodel::MarketQp,
        build_if_missing: bool,
    ) -> Result<(RegionAtlas, bool)> {
        let path = self.atlas_cache_path(qp);
        let opts = self.atlas_options(DegeneratePolicy::Quarantine);
        if path.exists() {
            let atlas = RegionAtlas::load(&path, qp.clone(), opts)
                .with_context(|| format!("loading atlas cache {}", path.display()))?;
            return Ok((atlas, true));
        }
        if !build_if_missing {
            bail!(
                "no atlas cache for structure `{}` at {}; run `outagewatch regions` first",
                qp.structure,
                path.display()
            );
        }
        let mut atlas = RegionAtlas::new(qp.clone(), opts);
        atlas.build(&self.atlas_samples())?;
        std::fs::create_dir_all(&self.cache_dir)?;
        atlas.save(&path)?;
        Ok((atlas, false))
    }

    /// Assembles the full hypothesis set (nominal + all hypotheses),
    /// building or loading atlases as allowed.
    pub fn hypothesis_set(&self, build_if_missing: bool) -> Result<(HypothesisSet, Vec<bool>)> {
        let nominal_qp = netmodel::assemble_qp(&self.case)?;
        let mut cache_hits = Vec::new();
        let (nominal, hit) = self.atlas_for(&nominal_qp, build_if_missing)?;
        cache_hits.push(hit);
        let mut alternatives = Vec::new();
        for (i, (outage, label)) in self.hypotheses.iter().enumerate() {
            let qp = netmodel::apply_outage_with(
                &nominal_qp,
                &self.case,
                outage,
                self.scenario.outage_model,
            )?;
            let (atlas, hit) = self.atlas_for(&qp, build_if_missing)?;
            cache_hits.push(hit);
            alternatives.push(Alternative {
                id: HypothesisId(i as u32 + 1),
                label: label.clone(),
                atlas,
            });
        }
        let hset = HypothesisSet::new(nominal, alternatives, self.noise_model())?;
        Ok((hset, cache_hits))
    }

    /// Hypothesis id of the scenario's injected outage, if hypothesized.
    pub fn true_hypothesis(&self) -> Option<HypothesisId> {
        let (outage, _) = self.scenario.outage.as_ref()?;
        self.hypotheses
            .iter()
            .position(|(h, _)| h == outage)
            .map(|i| HypothesisId(i as u32 + 1))
    }

    /// Serializable echo of the configuration, written next to every output.
    pub fn config_echo(&self, command: &str) -> ConfigEcho {
        ConfigEcho {
            command: command.to_string(),
            case: self.case.name.clone(),
            scenario: self.scenario.clone(),
            hypotheses: self
                .hypotheses
                .iter()
                .map(|(_, label)| label.clone())
                .collect(),
            tolerances: self.tolerances,
            bounds: self.scenario.resolved_bounds(&self.case),
        }
    }

    pub fn write_config_echo(&self, command: &str) -> Result<()> {
        let path = self.out_dir.join("config.json");
        let text = serde_json::to_string_pretty(&self.config_echo(command))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Serialize)]
pub struct ConfigEcho {
    pub command: String,
    pub case: String,
    pub scenario: ScenarioSpec,
    pub hypotheses: Vec<String>,
    pub tolerances: Tolerances,
    pub bounds: Vec<f64>,
}

/// Exit codes: 2 validation/input, 3 numeric, 4 I/O.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use outagewatch_core::{BenchError, DetectError, MppError, NetError, SolveError, StreamError};
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<NetError>() {
            return match e {
                NetError::Io(_) => 4,
                NetError::SingularSusceptance => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<SolveError>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<MppError>() {
            return match e {
                MppError::Io(_) => 4,
                MppError::Solve(_) | MppError::DegenerateRegion { .. } => 3,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<StreamError>() {
            return match e {
                StreamError::Io(_) => 4,
                StreamError::Solve { .. } => 3,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<DetectError>() {
            return match e {
                DetectError::Mpp(MppError::Io(_)) => 4,
                DetectError::Mpp(_) | DetectError::Density(_) => 3,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<BenchError>() {
            return match e {
                BenchError::Stream(StreamError::Io(_)) => 4,
                BenchError::Stream(StreamError::Solve { .. }) | BenchError::Detect(_) => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}
