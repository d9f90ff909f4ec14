//! Grid and market data model: network cases, PTDF computation, assembly of
//! the compact market-clearing QP, and post-outage problem variants.
//!
//! The market clears `min ½xᵀQx + qᵀx  s.t.  Ax ≤ Bξ + b` with `x = [p; ℓ]`
//! (dispatch stacked with load shedding) and ξ the demand perturbation.
//! Constraint rows are laid out in a fixed order: balance, flow upper, flow
//! lower, generator upper, shed upper, generator lower, shed lower. LMPs are
//! recovered from the duals as `λ = Λµ = µ₀·1 − Fᵀ(µ̄ − µ̲)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("case validation failed: {0}")]
    Invalid(String),
    #[error("network graph is disconnected{0}")]
    Disconnected(String),
    #[error("reduced susceptance matrix is singular")]
    SingularSusceptance,
    #[error("shed cost matrix S must be symmetric positive definite")]
    ShedCostNotPd,
    #[error("unknown {kind} index {index}")]
    UnknownElement { kind: &'static str, index: usize },
    #[error("removing line {0} would island the network")]
    WouldIsland(usize),
    #[error("failed to read case file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse case file: {0}")]
    Parse(String),
}

/// Transmission line between two buses. Susceptance is in per-unit on a
/// 100 MVA base; the flow limit is in MW. Positive flow runs from `from`
/// to `to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
    pub limit: f64,
}

/// Dispatchable generator with box limits (MW) and quadratic cost
/// `½·cost_quad·p² + cost_lin·p` ($, with p in MW).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub cost_quad: f64,
    pub cost_lin: f64,
}

/// Load with mean demand (MW) and an optional symmetric perturbation bound
/// (MW). When absent, scenario configuration supplies a default box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    pub mean: f64,
    pub bound: Option<f64>,
}

/// Physical and market description of a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkCase {
    pub name: String,
    pub buses: Vec<String>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    /// Quadratic shed-cost matrix S (one row/col per load).
    pub shed_quad: DMatrix<f64>,
    /// Linear shed-cost vector s.
    pub shed_lin: DVector<f64>,
    /// PTDF reference bus.
    pub slack: usize,
}

impl NetworkCase {
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }
    pub fn n_line(&self) -> usize {
        self.lines.len()
    }
    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }
    pub fn n_load(&self) -> usize {
        self.loads.len()
    }

    /// Mean demand vector l (one entry per load).
    pub fn mean_demand(&self) -> DVector<f64> {
        DVector::from_iterator(self.loads.len(), self.loads.iter().map(|d| d.mean))
    }

    /// Generator-to-bus incidence M_p (buses × generators).
    pub fn gen_incidence(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_bus(), self.n_gen());
        for (g, gen) in self.generators.iter().enumerate() {
            m[(gen.bus, g)] = 1.0;
        }
        m
    }

    /// Load-to-bus incidence M_l (buses × loads).
    pub fn load_incidence(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_bus(), self.n_load());
        for (d, load) in self.loads.iter().enumerate() {
            m[(load.bus, d)] = 1.0;
        }
        m
    }

    /// Checks every structural invariant of the case.
    pub fn validate(&self) -> Result<(), NetError> {
        let n = self.n_bus();
        if n == 0 {
            return Err(NetError::Invalid("case has no buses".into()));
        }
        if self.slack >= n {
            return Err(NetError::Invalid(format!(
                "slack bus index {} out of range",
                self.slack
            )));
        }
        for (k, line) in self.lines.iter().enumerate() {
            if line.from >= n || line.to >= n || line.from == line.to {
                return Err(NetError::Invalid(format!("line {k} references bad buses")));
            }
            if line.susceptance == 0.0 {
                return Err(NetError::Invalid(format!("line {k} has zero susceptance")));
            }
            if line.limit <= 0.0 {
                return Err(NetError::Invalid(format!("line {k} has nonpositive limit")));
            }
        }
        for (g, gen) in self.generators.iter().enumerate() {
            if gen.bus >= n {
                return Err(NetError::Invalid(format!(
                    "generator {g} references bad bus"
                )));
            }
            if gen.p_min > gen.p_max {
                return Err(NetError::Invalid(format!(
                    "generator {g} has p_min > p_max"
                )));
            }
            if gen.cost_quad <= 0.0 {
                return Err(NetError::Invalid(format!(
                    "generator {g} needs a strictly positive quadratic cost"
                )));
            }
        }
        for (d, load) in self.loads.iter().enumerate() {
            if load.bus >= n {
                return Err(NetError::Invalid(format!("load {d} references bad bus")));
            }
            if load.mean < 0.0 {
                return Err(NetError::Invalid(format!("load {d} has negative mean")));
            }
            if let Some(b) = load.bound {
                if !(b >= 0.0 && b.is_finite()) {
                    return Err(NetError::Invalid(format!("load {d} has bad bound")));
                }
            }
        }
        let d = self.n_load();
        if self.shed_quad.nrows() != d || self.shed_quad.ncols() != d || self.shed_lin.len() != d {
            return Err(NetError::Invalid(
                "shed cost dimensions do not match load count".into(),
            ));
        }
        if !is_symmetric_pd(&self.shed_quad) {
            return Err(NetError::ShedCostNotPd);
        }
        if !connected(
            self.n_bus(),
            self.lines.iter().map(|l| (l.from, l.to)),
            None,
        ) {
            return Err(NetError::Disconnected(String::new()));
        }
        Ok(())
    }

    /// Parses a case from its TOML text form.
    pub fn from_toml_str(text: &str) -> Result<Self, NetError> {
        let raw: file::CaseFile =
            toml::from_str(text).map_err(|e| NetError::Parse(e.to_string()))?;
        let case = raw.into_case()?;
        case.validate()?;
        Ok(case)
    }

    /// Loads and validates a case file.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, NetError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Index of a bus by identifier.
    pub fn bus_index(&self, name: &str) -> Option<usize> {
        self.buses.iter().position(|b| b == name)
    }

    /// Index of the line joining two buses (either orientation).
    pub fn line_between(&self, a: usize, b: usize) -> Option<usize> {
        self.lines
            .iter()
            .position(|l| (l.from, l.to) == (a, b) || (l.from, l.to) == (b, a))
    }

    /// Returns the case with one line removed, reindexing nothing else.
    fn without_line(&self, k: usize) -> NetworkCase {
        let mut c = self.clone();
        c.lines.remove(k);
        c
    }
}

fn is_symmetric_pd(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return false;
            }
        }
    }
    m.clone().cholesky().is_some()
}

/// Connectivity of the bus graph, optionally skipping one line.
fn connected(
    n_bus: usize,
    lines: impl Iterator<Item = (usize, usize)>,
    skip: Option<usize>,
) -> bool {
    if n_bus == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n_bus];
    for (k, (f, t)) in lines.enumerate() {
        if Some(k) == skip {
            continue;
        }
        adj[f].push(t);
        adj[t].push(f);
    }
    let mut seen = vec![false; n_bus];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Structure identifier of a market problem: nominal or one outage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StructureId {
    Nominal,
    LineOut(usize),
    GenOut(usize),
}

impl std::fmt::Display for StructureId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StructureId::Nominal => write!(f, "nominal"),
            StructureId::LineOut(k) => write!(f, "lineout{k}"),
            StructureId::GenOut(g) => write!(f, "genout{g}"),
        }
    }
}

/// Hypothesized outage of a single element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "element", rename_all = "lowercase")]
pub enum OutageSpec {
    Line(usize),
    Generator(usize),
}

impl OutageSpec {
    pub fn structure_id(&self) -> StructureId {
        match *self {
            OutageSpec::Line(k) => StructureId::LineOut(k),
            OutageSpec::Generator(g) => StructureId::GenOut(g),
        }
    }

    pub fn validate(&self, case: &NetworkCase) -> Result<(), NetError> {
        match *self {
            OutageSpec::Line(k) => {
                if k >= case.n_line() {
                    return Err(NetError::UnknownElement {
                        kind: "line",
                        index: k,
                    });
                }
                if !connected(
                    case.n_bus(),
                    case.lines.iter().map(|l| (l.from, l.to)),
                    Some(k),
                ) {
                    return Err(NetError::WouldIsland(k));
                }
                Ok(())
            }
            OutageSpec::Generator(g) => {
                if g >= case.n_gen() {
                    return Err(NetError::UnknownElement {
                        kind: "generator",
                        index: g,
                    });
                }
                Ok(())
            }
        }
    }
}

/// Tag identifying which physical constraint a QP row encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowLabel {
    Balance,
    FlowUpper(usize),
    FlowLower(usize),
    GenUpper(usize),
    ShedUpper(usize),
    GenLower(usize),
    ShedLower(usize),
}

impl std::fmt::Display for RowLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RowLabel::Balance => write!(f, "balance"),
            RowLabel::FlowUpper(k) => write!(f, "flow-upper({k})"),
            RowLabel::FlowLower(k) => write!(f, "flow-lower({k})"),
            RowLabel::GenUpper(g) => write!(f, "gen-upper({g})"),
            RowLabel::ShedUpper(d) => write!(f, "shed-upper({d})"),
            RowLabel::GenLower(g) => write!(f, "gen-lower({g})"),
            RowLabel::ShedLower(d) => write!(f, "shed-lower({d})"),
        }
    }
}

/// Compact market-clearing QP with labeled constraint rows and the
/// LMP-extraction matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketQp {
    /// Hessian Q = blockdiag(C, S); symmetric positive definite.
    pub q_mat: DMatrix<f64>,
    /// Linear cost q = [c; s].
    pub q_vec: DVector<f64>,
    /// Constraint matrix A (rows × dim x).
    pub a_mat: DMatrix<f64>,
    /// Perturbation coupling B (rows × dim ξ).
    pub b_mat: DMatrix<f64>,
    /// Constant right-hand side b.
    pub b_vec: DVector<f64>,
    /// LMP extraction Λ (buses × rows): λ = Λµ.
    pub lambda: DMatrix<f64>,
    pub row_labels: Vec<RowLabel>,
    pub structure: StructureId,
    pub n_gen: usize,
    pub n_load: usize,
    pub n_bus: usize,
}

impl MarketQp {
    pub fn n_rows(&self) -> usize {
        self.a_mat.nrows()
    }
    pub fn dim_x(&self) -> usize {
        self.a_mat.ncols()
    }
    pub fn dim_xi(&self) -> usize {
        self.b_mat.ncols()
    }

    /// Right-hand side Bξ + b at a given perturbation.
    pub fn rhs(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.b_mat * xi + &self.b_vec
    }

    /// Row index carrying a given label, if present.
    pub fn row_of(&self, label: RowLabel) -> Option<usize> {
        self.row_labels.iter().position(|&l| l == label)
    }

    /// Content hash over every matrix, label and the structure id; used to
    /// key region-atlas cache files.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut feed = |m: &[f64]| {
            for v in m {
                h.update(v.to_le_bytes());
            }
        };
        feed(self.q_mat.as_slice());
        feed(self.q_vec.as_slice());
        feed(self.a_mat.as_slice());
        feed(self.b_mat.as_slice());
        feed(self.b_vec.as_slice());
        feed(self.lambda.as_slice());
        let mut h = h;
        for l in &self.row_labels {
            h.update(l.to_string().as_bytes());
        }
        h.update(self.structure.to_string().as_bytes());
        hex::encode(&h.finalize()[..16])
    }
}

/// Computes the PTDF matrix F (lines × buses) for the DC approximation.
///
/// Convention: the slack column is zero, so a column j gives line flows when
/// 1 MW is injected at bus j and withdrawn at the slack; injections are
/// interpreted relative to the slack bus. Positive flow runs from-bus to
/// to-bus.
pub fn compute_ptdf(case: &NetworkCase) -> Result<DMatrix<f64>, NetError> {
    let n = case.n_bus();
    let m = case.n_line();
    if !connected(n, case.lines.iter().map(|l| (l.from, l.to)), None) {
        return Err(NetError::Disconnected(String::new()));
    }
    // Line-bus incidence and diagonal susceptance.
    let mut inc = DMatrix::zeros(m, n);
    for (k, line) in case.lines.iter().enumerate() {
        inc[(k, line.from)] = 1.0;
        inc[(k, line.to)] = -1.0;
    }
    let bd = DMatrix::from_diagonal(&DVector::from_iterator(
        m,
        case.lines.iter().map(|l| l.susceptance),
    ));
    let laplacian = inc.transpose() * &bd * &inc;
    // Reduced system without the slack row/column.
    let keep: Vec<usize> = (0..n).filter(|&i| i != case.slack).collect();
    let reduced = laplacian
        .select_rows(keep.iter())
        .select_columns(keep.iter());
    let inv = reduced
        .clone()
        .try_inverse()
        .ok_or(NetError::SingularSusceptance)?;
    // Re-embed with zeros at the slack.
    let mut theta = DMatrix::zeros(n, n);
    for (ri, &i) in keep.iter().enumerate() {
        for (rj, &j) in keep.iter().enumerate() {
            theta[(i, j)] = inv[(ri, rj)];
        }
    }
    Ok(bd * inc * theta)
}

/// Line flows for an arbitrary injection vector, balancing the mismatch at
/// the slack bus first.
pub fn line_flows(f: &DMatrix<f64>, slack: usize, injections: &DVector<f64>) -> DVector<f64> {
    let mut balanced = injections.clone();
    let total: f64 = injections.iter().sum();
    balanced[slack] -= total;
    f * balanced
}

/// Assembles the compact QP from a network case.
///
/// Row order: balance; flow-upper per line; flow-lower per line; gen-upper;
/// shed-upper; gen-lower; shed-lower. The balance row encodes supply ≥ demand
/// as a one-sided inequality; with strictly positive marginal costs it binds
/// at optimality.
pub fn assemble_qp(case: &NetworkCase) -> Result<MarketQp, NetError> {
    case.validate()?;
    let ptdf = compute_ptdf(case)?;
    assemble_qp_with_ptdf(case, &ptdf)
}

fn assemble_qp_with_ptdf(case: &NetworkCase, ptdf: &DMatrix<f64>) -> Result<MarketQp, NetError> {
    let (ng, nd, nl, nb) = (case.n_gen(), case.n_load(), case.n_line(), case.n_bus());
    let nx = ng + nd;
    let n_rows = 1 + 2 * nl + 2 * ng + 2 * nd;

    let mp = case.gen_incidence();
    let ml = case.load_incidence();
    let fmp = ptdf * &mp; // lines × gens
    let fml = ptdf * &ml; // lines × loads
    let l = case.mean_demand();

    let mut q_mat = DMatrix::zeros(nx, nx);
    for (g, gen) in case.generators.iter().enumerate() {
        q_mat[(g, g)] = gen.cost_quad;
    }
    q_mat
        .view_mut((ng, ng), (nd, nd))
        .copy_from(&case.shed_quad);
    if q_mat.clone().cholesky().is_none() {
        return Err(NetError::ShedCostNotPd);
    }

    let mut q_vec = DVector::zeros(nx);
    for (g, gen) in case.generators.iter().enumerate() {
        q_vec[g] = gen.cost_lin;
    }
    q_vec.rows_mut(ng, nd).copy_from(&case.shed_lin);

    let mut a_mat = DMatrix::zeros(n_rows, nx);
    let mut b_mat = DMatrix::zeros(n_rows, nd);
    let mut b_vec = DVector::zeros(n_rows);
    let mut labels = Vec::with_capacity(n_rows);

    // Balance: -1ᵀMp p - 1ᵀMl ℓ ≤ -1ᵀMl ξ - 1ᵀMl l   (supply ≥ demand).
    let ones_b = DVector::from_element(nb, 1.0);
    let row_gen = (ones_b.transpose() * &mp).transpose();
    let row_shed = (ones_b.transpose() * &ml).transpose();
    for g in 0..ng {
        a_mat[(0, g)] = -row_gen[g];
    }
    for d in 0..nd {
        a_mat[(0, ng + d)] = -row_shed[d];
        b_mat[(0, d)] = -row_shed[d];
    }
    b_vec[0] = -(row_shed.transpose() * &l)[0];
    labels.push(RowLabel::Balance);

    // Flow upper: F Mp p + F Ml ℓ ≤ F Ml ξ + F Ml l + f̄.
    let fml_l = &fml * &l;
    for k in 0..nl {
        let r = 1 + k;
        for g in 0..ng {
            a_mat[(r, g)] = fmp[(k, g)];
        }
        for d in 0..nd {
            a_mat[(r, ng + d)] = fml[(k, d)];
            b_mat[(r, d)] = fml[(k, d)];
        }
        b_vec[r] = fml_l[k] + case.lines[k].limit;
        labels.push(RowLabel::FlowUpper(k));
    }
    // Flow lower: -F Mp p - F Ml ℓ ≤ -F Ml ξ - F Ml l + f̄.
    for k in 0..nl {
        let r = 1 + nl + k;
        for g in 0..ng {
            a_mat[(r, g)] = -fmp[(k, g)];
        }
        for d in 0..nd {
            a_mat[(r, ng + d)] = -fml[(k, d)];
            b_mat[(r, d)] = -fml[(k, d)];
        }
        b_vec[r] = -fml_l[k] + case.lines[k].limit;
        labels.push(RowLabel::FlowLower(k));
    }
    // Generator upper: p ≤ p̄.
    for g in 0..ng {
        let r = 1 + 2 * nl + g;
        a_mat[(r, g)] = 1.0;
        b_vec[r] = case.generators[g].p_max;
        labels.push(RowLabel::GenUpper(g));
    }
    // Shed upper: ℓ ≤ l + ξ, coupled through MlᵀMl.
    let mtm = ml.transpose() * &ml;
    for d in 0..nd {
        let r = 1 + 2 * nl + ng + d;
        a_mat[(r, ng + d)] = 1.0;
        for j in 0..nd {
            b_mat[(r, j)] = mtm[(d, j)];
        }
        b_vec[r] = case.loads[d].mean;
        labels.push(RowLabel::ShedUpper(d));
    }
    // Generator lower: -p ≤ -p̲.
    for g in 0..ng {
        let r = 1 + 2 * nl + ng + nd + g;
        a_mat[(r, g)] = -1.0;
        b_vec[r] = -case.generators[g].p_min;
        labels.push(RowLabel::GenLower(g));
    }
    // Shed lower: -ℓ ≤ 0.
    for d in 0..nd {
        let r = 1 + 2 * nl + 2 * ng + nd + d;
        a_mat[(r, ng + d)] = -1.0;
        labels.push(RowLabel::ShedLower(d));
    }

    // Λ = [1, -Fᵀ, Fᵀ, 0]: one column per constraint row.
    let mut lambda = DMatrix::zeros(nb, n_rows);
    for i in 0..nb {
        lambda[(i, 0)] = 1.0;
    }
    for k in 0..nl {
        for i in 0..nb {
            lambda[(i, 1 + k)] = -ptdf[(k, i)];
            lambda[(i, 1 + nl + k)] = ptdf[(k, i)];
        }
    }

    Ok(MarketQp {
        q_mat,
        q_vec,
        a_mat,
        b_mat,
        b_vec,
        lambda,
        row_labels: labels,
        structure: StructureId::Nominal,
        n_gen: ng,
        n_load: nd,
        n_bus: nb,
    })
}

/// How a line outage is reflected in the post-outage QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutageModel {
    /// Delete the faulted line's constraint rows; keep the PTDF of surviving
    /// lines unchanged.
    #[default]
    RowDeletion,
    /// Rebuild the QP with the PTDF recomputed on the reduced topology.
    PhysicalPtdf,
}

/// Builds the post-outage QP with the default row-deletion model.
pub fn apply_outage(
    qp: &MarketQp,
    case: &NetworkCase,
    spec: &OutageSpec,
) -> Result<MarketQp, NetError> {
    apply_outage_with(qp, case, spec, OutageModel::RowDeletion)
}

/// Builds the post-outage QP.
///
/// Line outage: the faulted line's flow-upper and flow-lower rows are removed
/// from A, B, b and the row labels, and the matching columns from Λ. Generator
/// outage: the unit's variable column is removed from A, Q, q together with
/// its bound rows.
pub fn apply_outage_with(
    qp: &MarketQp,
    case: &NetworkCase,
    spec: &OutageSpec,
    model: OutageModel,
) -> Result<MarketQp, NetError> {
    spec.validate(case)?;
    match (*spec, model) {
        (OutageSpec::Line(k), OutageModel::RowDeletion) => {
            let rows: Vec<usize> = qp
                .row_labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == RowLabel::FlowUpper(k) || l == RowLabel::FlowLower(k))
                .map(|(i, _)| i)
                .collect();
            debug_assert_eq!(rows.len(), 2);
            let mut out = qp.clone();
            out.a_mat = out.a_mat.remove_rows_at(&rows);
            out.b_mat = out.b_mat.remove_rows_at(&rows);
            let mut kept_b: Vec<f64> = Vec::with_capacity(qp.n_rows() - rows.len());
            let mut kept_labels = Vec::with_capacity(qp.n_rows() - rows.len());
            for i in 0..qp.n_rows() {
                if !rows.contains(&i) {
                    kept_b.push(qp.b_vec[i]);
                    kept_labels.push(qp.row_labels[i]);
                }
            }
            out.b_vec = DVector::from_vec(kept_b);
            out.row_labels = kept_labels;
            out.lambda = out.lambda.remove_columns_at(&rows);
            out.structure = StructureId::LineOut(k);
            Ok(out)
        }
        (OutageSpec::Line(k), OutageModel::PhysicalPtdf) => {
            let reduced = case.without_line(k);
            let ptdf = compute_ptdf(&reduced)?;
            let mut out = assemble_qp_with_ptdf(&reduced, &ptdf)?;
            out.structure = StructureId::LineOut(k);
            Ok(out)
        }
        (OutageSpec::Generator(g), _) => {
            let rows: Vec<usize> = qp
                .row_labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == RowLabel::GenUpper(g) || l == RowLabel::GenLower(g))
                .map(|(i, _)| i)
                .collect();
            debug_assert_eq!(rows.len(), 2);
            let mut out = qp.clone();
            out.a_mat = out.a_mat.remove_rows_at(&rows).remove_columns_at(&[g]);
            out.b_mat = out.b_mat.remove_rows_at(&rows);
            let mut kept_b = Vec::new();
            let mut kept_labels = Vec::new();
            for i in 0..qp.n_rows() {
                if !rows.contains(&i) {
                    kept_b.push(qp.b_vec[i]);
                    kept_labels.push(qp.row_labels[i]);
                }
            }
            out.b_vec = DVector::from_vec(kept_b);
            out.row_labels = kept_labels;
            out.lambda = out.lambda.remove_columns_at(&rows);
            out.q_mat = out.q_mat.remove_rows_at(&[g]).remove_columns_at(&[g]);
            out.q_vec = out.q_vec.remove_rows_at(&[g]);
            out.n_gen -= 1;
            out.structure = StructureId::GenOut(g);
            Ok(out)
        }
    }
}

mod file {
    //! On-disk TOML representation of a network case.

    use super::*;

    #[derive(Deserialize)]
    pub(super) struct CaseFile {
        name: String,
        slack: String,
        buses: Vec<String>,
        #[serde(default, rename = "line")]
        lines: Vec<LineFile>,
        #[serde(default, rename = "generator")]
        generators: Vec<GenFile>,
        #[serde(default, rename = "load")]
        loads: Vec<LoadFile>,
        shed_cost: ShedFile,
    }

    #[derive(Deserialize)]
    struct LineFile {
        from: String,
        to: String,
        susceptance: f64,
        limit: f64,
    }

    #[derive(Deserialize)]
    struct GenFile {
        bus: String,
        p_min: f64,
        p_max: f64,
        cost_quad: f64,
        cost_lin: f64,
    }

    #[derive(Deserialize)]
    struct LoadFile {
        bus: String,
        mean: f64,
        bound: Option<f64>,
    }

    #[derive(Deserialize)]
    struct ShedFile {
        /// Full quadratic matrix, row major.
        quad: Option<Vec<Vec<f64>>>,
        /// Shorthand: diagonal quadratic matrix.
        quad_diag: Option<Vec<f64>>,
        linear: Vec<f64>,
    }

    impl CaseFile {
        pub(super) fn into_case(self) -> Result<NetworkCase, NetError> {
            let buses = self.buses;
            let find = |name: &str| -> Result<usize, NetError> {
                buses
                    .iter()
                    .position(|b| b == name)
                    .ok_or_else(|| NetError::Parse(format!("unknown bus `{name}`")))
            };
            let slack = find(&self.slack)?;
            let lines = self
                .lines
                .iter()
                .map(|l| {
                    Ok(Line {
                        from: find(&l.from)?,
                        to: find(&l.to)?,
                        susceptance: l.susceptance,
                        limit: l.limit,
                    })
                })
                .collect::<Result<Vec<_>, NetError>>()?;
            let generators = self
                .generators
                .iter()
                .map(|g| {
                    Ok(Generator {
                        bus: find(&g.bus)?,
                        p_min: g.p_min,
                        p_max: g.p_max,
                        cost_quad: g.cost_quad,
                        cost_lin: g.cost_lin,
                    })
                })
                .collect::<Result<Vec<_>, NetError>>()?;
            let loads = self
                .loads
                .iter()
                .map(|d| {
                    Ok(Load {
                        bus: find(&d.bus)?,
                        mean: d.mean,
                        bound: d.bound,
                    })
                })
                .collect::<Result<Vec<_>, NetError>>()?;
            let nd = loads.len();
            let shed_quad = match (&self.shed_cost.quad, &self.shed_cost.quad_diag) {
                (Some(rows), None) => {
                    if rows.len() != nd || rows.iter().any(|r| r.len() != nd) {
                        return Err(NetError::Parse("shed_cost.quad has wrong shape".into()));
                    }
                    DMatrix::from_fn(nd, nd, |i, j| rows[i][j])
                }
                (None, Some(diag)) => {
                    if diag.len() != nd {
                        return Err(NetError::Parse(
                            "shed_cost.quad_diag has wrong length".into(),
                        ));
                    }
                    DMatrix::from_diagonal(&DVector::from_vec(diag.clone()))
                }
                _ => {
                    return Err(NetError::Parse(
                        "shed_cost needs exactly one of `quad` or `quad_diag`".into(),
                    ))
                }
            };
            if self.shed_cost.linear.len() != nd {
                return Err(NetError::Parse("shed_cost.linear has wrong length".into()));
            }
            Ok(NetworkCase {
                name: self.name,
                buses,
                lines,
                generators,
                loads,
                shed_quad,
                shed_lin: DVector::from_vec(self.shed_cost.linear),
                slack,
            })
        }
    }
}
