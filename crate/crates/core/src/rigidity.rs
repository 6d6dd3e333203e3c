//! The Frenkel–Kontorova rigidity experiment: trace field `w_n = tr W_n`,
//! the trace inequality `w_{n+1} - w_n ≤ ΔV_n(q_n)`, torus-grid quadrature
//! and a node-parallel scan exhibiting the dichotomy
//! "conjugate points or constant potentials".

use std::fmt::Write as _;

use serde::Serialize;

use crate::dynamics::{evolve, OrbitSegment, PhasePoint};
use crate::error::{Error, Result};
use crate::generating::{SequenceMode, SequenceSpec};
use crate::green::{green_limit_detailed, riccati_from_base, riccati_periodic_fixed_point, BundleMatrix, LimitOptions};
use crate::jacobi::{coefficients_along_orbit, detect_conjugate_strict, detect_crossings_extended, JacobiCoefficients, LagrangeFrame};
use crate::linalg::{max_abs, Vector};
use crate::parallel::{map_indexed, Execution};

/// Trace defects below `-DEFECT_TOL` violate the trace inequality.
pub const DEFECT_TOL: f64 = 1e-8;
/// `max|∇V| ≤` this counts as a constant potential.
pub const CONSTANT_GRADIENT_TOL: f64 = 1e-12;
pub const DEFAULT_COVERAGE_BOUND: f64 = 0.01;
/// Orbit closure tolerance (modulo integers) for periodic-orbit nodes.
pub const CLOSURE_TOL: f64 = 1e-9;
/// Largest grid accepted.
pub const MAX_NODES: usize = 1 << 24;

/// Uniform lattice on `[0,1)^{2d}` with `G` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TorusGrid {
    dim: usize,
    resolution: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, resolution: usize) -> Result<Self> {
        if dim == 0 || resolution == 0 {
            return Err(Error::Invalid("grid dimension and resolution must be positive".into()));
        }
        let count = (resolution as u128).checked_pow(2 * dim as u32);
        if count.is_none_or(|c| c > MAX_NODES as u128) {
            return Err(Error::Invalid(format!(
                "grid {resolution}^{} exceeds {MAX_NODES} nodes",
                2 * dim
            )));
        }
        Ok(Self { dim, resolution })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn node_count(&self) -> usize {
        self.resolution.pow(2 * self.dim as u32)
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.node_count() as f64
    }

    /// Node `i` in lexicographic order, `p_1` most significant, `q_d` least.
    pub fn node(&self, i: usize) -> PhasePoint {
        let g = self.resolution;
        let mut coords = vec![0.0; 2 * self.dim];
        let mut rest = i;
        for c in coords.iter_mut().rev() {
            *c = (rest % g) as f64 / g as f64;
            rest /= g;
        }
        PhasePoint::from_slices(&coords[..self.dim], &coords[self.dim..])
    }

    /// The `G^d` configuration lattice points.
    pub fn configurations(&self) -> Vec<Vector> {
        let g = self.resolution;
        let count = g.pow(self.dim as u32);
        (0..count)
            .map(|i| {
                let mut coords = vec![0.0; self.dim];
                let mut rest = i;
                for c in coords.iter_mut().rev() {
                    *c = (rest % g) as f64 / g as f64;
                    rest /= g;
                }
                Vector::from_vec(coords)
            })
            .collect()
    }
}

pub fn trace_field(bundle: &[BundleMatrix]) -> Vec<f64> {
    bundle.iter().map(|b| b.w.trace()).collect()
}

fn require_fk(seq: &SequenceSpec) -> Result<()> {
    if seq.is_frenkel_kontorova() {
        Ok(())
    } else {
        Err(Error::Invalid("the rigidity experiment needs a Frenkel-Kontorova sequence".into()))
    }
}

fn laplacian_at(seq: &SequenceSpec, n: i64, q: &Vector) -> f64 {
    seq.potential(n).map_or(0.0, |v| v.laplacian(q))
}

/// `δ_n = ΔV_n(q_n) - (w_{n+1} - w_n)` for consecutive bundle entries.
pub fn trace_defect(seq: &SequenceSpec, orbit: &OrbitSegment, bundle: &[BundleMatrix]) -> Result<Vec<f64>> {
    require_fk(seq)?;
    Ok(bundle
        .windows(2)
        .map(|pair| {
            let n = pair[0].n;
            laplacian_at(seq, n, orbit.q(n)) - (pair[1].w.trace() - pair[0].w.trace())
        })
        .collect())
}

/// `(w_{start+span} - w_start, Σ_{j<span} ΔV_{start+j}(q_{start+j}))`.
pub fn telescoped_sum(seq: &SequenceSpec, orbit: &OrbitSegment, bundle: &[BundleMatrix], start: i64, span: usize) -> Result<(f64, f64)> {
    require_fk(seq)?;
    let first = bundle.first().map_or(0, |b| b.n);
    let end = start + span as i64;
    if bundle.is_empty() || start < first || end > first + bundle.len() as i64 - 1 {
        return Err(Error::OutOfRange {
            index: end,
            first,
            last: first + bundle.len() as i64 - 1,
        });
    }
    let w = |n: i64| bundle[(n - first) as usize].w.trace();
    let rhs = (start..end).map(|n| laplacian_at(seq, n, orbit.q(n))).sum();
    Ok((w(end) - w(start), rhs))
}

/// Grid mean over the nodes where the observable is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Integral {
    pub value: f64,
    pub used: usize,
    pub excluded: usize,
}

pub fn integrate_over_torus(grid: &TorusGrid, observable: &[Option<f64>], coverage_bound: f64) -> Result<Integral> {
    if observable.len() != grid.node_count() {
        return Err(Error::DimensionMismatch {
            expected: grid.node_count(),
            found: observable.len(),
        });
    }
    let used: Vec<f64> = observable.iter().flatten().copied().collect();
    let excluded = observable.len() - used.len();
    if used.is_empty() || excluded as f64 > coverage_bound * observable.len() as f64 {
        return Err(Error::CoverageGap {
            excluded,
            total: observable.len(),
            bound: coverage_bound,
        });
    }
    Ok(Integral {
        value: used.iter().sum::<f64>() / used.len() as f64,
        used: used.len(),
        excluded,
    })
}

/// A vertical at `base` whose evolution crosses the vertical again inside
/// `window`, found from the grid node `node`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub node: usize,
    pub point: PhasePoint,
    /// Index at which the node sits on its orbit.
    pub start: i64,
    pub base: i64,
    /// Index where `λ_min(A^{(base)})` dropped to zero.
    pub index: i64,
    /// First crossing interval found by the frame evolution.
    pub window: (i64, i64),
    /// Smallest `σ_min(ξ_n)` on `(base, index+1]`.
    pub strict_min_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NodeStatus {
    BundleConverged,
    ConjugateFound { witness: Witness },
    HorizonExhausted { reason: String },
}

impl NodeStatus {
    pub fn label(&self) -> &'static str {
        match self {
            NodeStatus::BundleConverged => "bundle_converged",
            NodeStatus::ConjugateFound { .. } => "conjugate_found",
            NodeStatus::HorizonExhausted { .. } => "horizon_exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeRecord {
    pub node: usize,
    pub point: PhasePoint,
    pub status: NodeStatus,
    pub a_min_eigenvalue: Option<f64>,
    pub min_defect: Option<f64>,
    pub max_abs_w: Option<f64>,
    /// Telescoped sides over the node window.
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub horizon: Option<usize>,
    pub cauchy_gap: Option<f64>,
    /// `|w_start|` discrepancy between the period-map fixed point and the
    /// horizon limit, for nodes on periodic orbits.
    pub periodic_discrepancy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RigidityOptions {
    pub limit: LimitOptions,
    /// Steps after the start index covered by the bundle window; defaults
    /// to the period, or to the support length plus the maximal horizon.
    pub forward: Option<usize>,
    pub coverage_bound: f64,
    pub execution: Execution,
}

impl Default for RigidityOptions {
    fn default() -> Self {
        Self {
            limit: LimitOptions {
                tol: 1e-10,
                initial_horizon: 8,
                max_horizon: 1 << 12,
            },
            forward: None,
            coverage_bound: DEFAULT_COVERAGE_BOUND,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ConjugatePointsFound,
    PotentialsConstant,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::ConjugatePointsFound => "conjugate points found",
            Verdict::PotentialsConstant => "bundle exists on tested set; potentials measured constant",
            Verdict::Inconclusive => "inconclusive at tested horizons",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DefectStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Defects below `-DEFECT_TOL`.
    pub violations: usize,
}

impl DefectStats {
    fn from_values(values: impl Iterator<Item = f64>) -> Self {
        let mut stats = DefectStats {
            count: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            mean: 0.0,
            violations: 0,
        };
        let mut sum = 0.0;
        for v in values {
            stats.count += 1;
            stats.min = stats.min.min(v);
            stats.max = stats.max.max(v);
            sum += v;
            if v < -DEFECT_TOL {
                stats.violations += 1;
            }
        }
        if stats.count > 0 {
            stats.mean = sum / stats.count as f64;
        }
        stats
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RigidityReport {
    pub grid: TorusGrid,
    pub start_index: i64,
    pub window_steps: usize,
    pub node_count: usize,
    pub converged: usize,
    pub conjugate: usize,
    pub exhausted: usize,
    pub verdict: Verdict,
    pub verdict_text: String,
    pub witnesses: Vec<Witness>,
    pub defects: DefectStats,
    /// Grid mean of `ΔV_n` for every index of the period or support.
    pub delta_v_integrals: Vec<(i64, f64)>,
    pub lhs_integral: Option<Integral>,
    pub rhs_integral: Option<Integral>,
    pub coverage_note: Option<String>,
    pub max_abs_w: f64,
    pub max_gradient: f64,
    pub periodic_checked: usize,
    pub periodic_max_discrepancy: f64,
    #[serde(skip)]
    pub nodes: Vec<NodeRecord>,
}

impl RigidityReport {
    pub fn max_abs_delta_v_integral(&self) -> f64 {
        self.delta_v_integrals.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max)
    }
}

struct NodePlan {
    start: i64,
    forward: usize,
    period: Option<usize>,
    entries: Vec<i64>,
}

fn node_plan(seq: &SequenceSpec, opts: &RigidityOptions) -> NodePlan {
    match seq.mode() {
        SequenceMode::Periodic { period } => NodePlan {
            start: 0,
            forward: opts.forward.unwrap_or(period).max(1),
            period: Some(period),
            entries: (0..period as i64).collect(),
        },
        SequenceMode::CompactSupport { n_min, n_max } => NodePlan {
            start: n_min,
            forward: opts
                .forward
                .unwrap_or((n_max - n_min) as usize + 1 + opts.limit.max_horizon)
                .max(1),
            period: None,
            entries: (n_min..=n_max).collect(),
        },
    }
}

fn confirm_at(seq: &SequenceSpec, node: usize, x: &PhasePoint, start: i64, base: i64, index: i64) -> Result<Option<Witness>> {
    let back = evolve(seq, x, start, base.min(start))?;
    let orbit = back.extend_forward(seq, (index + 1 - back.last_index()).max(0) as usize)?;
    let coeffs = coefficients_along_orbit(seq, &orbit.window(base, (index + 1).max(base + 2))?)?;
    let last = index + 1;
    let extended = detect_crossings_extended(&coeffs, base, &LagrangeFrame::vertical(seq.dim()), last)?;
    let strict = detect_conjugate_strict(&coeffs, base, last)?;
    let window = match (extended.first_crossing(), strict.conjugate.first()) {
        (Some(c), _) => c.interval,
        (None, Some(&n)) => (n, n),
        (None, None) => return Ok(None),
    };
    Ok(Some(Witness {
        node,
        point: x.clone(),
        start,
        base,
        index,
        window,
        strict_min_sigma: strict.profile.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
    }))
}

/// Finite-base search used when the exactly seeded limit loses positivity.
fn confirm_from_limit(seq: &SequenceSpec, node: usize, x: &PhasePoint, start: i64, index: i64, opts: &RigidityOptions) -> Result<Option<Witness>> {
    let mut step = 1usize;
    while step <= opts.limit.max_horizon {
        let k = start - step as i64;
        let orbit = evolve(seq, x, start, k)?;
        // A degenerate limit pivot at `index` shows up one step later for finite bases.
        let orbit = orbit.extend_forward(seq, (index + 2 - orbit.last_index()).max(0) as usize)?;
        let coeffs = coefficients_along_orbit(seq, &orbit)?;
        if let Err(Error::PositivityLost { index: n, .. }) = riccati_from_base(&coeffs, k, (index + 1 - k) as usize) {
            return confirm_at(seq, node, x, start, k, n);
        }
        step *= 2;
    }
    Ok(None)
}

fn periodic_discrepancy(seq: &SequenceSpec, orbit: &OrbitSegment, period: usize, w_start: f64, max_horizon: usize) -> Option<f64> {
    let first = orbit.first_index();
    let x0 = orbit.point(first)?;
    let xp = orbit.point(first + period as i64)?;
    let closes = x0
        .p
        .iter()
        .chain(x0.q.iter())
        .zip(xp.p.iter().chain(xp.q.iter()))
        .all(|(a, b)| {
            let d = b - a;
            (d - d.round()).abs() <= CLOSURE_TOL
        });
    if !closes {
        return None;
    }
    let window = orbit.window(first, first + period as i64 + 1).ok()?;
    let coeffs = coefficients_along_orbit(seq, &window).ok()?;
    let steps = (0..period as i64).map(|j| coeffs.step(first + j).clone()).collect();
    let one_period = JacobiCoefficients::from_steps(first, steps).ok()?;
    let a = riccati_periodic_fixed_point(&one_period, 1e-12, (max_horizon / period).max(1)).ok()?;
    let s11 = seq.entry(first).d11(orbit.q(first), orbit.q(first + 1));
    Some(((&a[0] - s11).trace() - w_start).abs())
}

fn node_record(seq: &SequenceSpec, grid: &TorusGrid, node: usize, plan: &NodePlan, opts: &RigidityOptions) -> NodeRecord {
    let x = grid.node(node);
    let mut record = NodeRecord {
        node,
        point: x.clone(),
        status: NodeStatus::BundleConverged,
        a_min_eigenvalue: None,
        min_defect: None,
        max_abs_w: None,
        lhs: None,
        rhs: None,
        horizon: None,
        cauchy_gap: None,
        periodic_discrepancy: None,
    };
    let exhausted = |e: Error| NodeStatus::HorizonExhausted {
        reason: e.context(format!("rigidity node {node}")).to_string(),
    };
    let orbit = match evolve(seq, &x, plan.start, plan.start + plan.forward as i64 + 1) {
        Ok(o) => o,
        Err(e) => {
            record.status = exhausted(e);
            return record;
        }
    };
    match green_limit_detailed(seq, &orbit, opts.limit) {
        Ok(g) => {
            let bundle = &g.matrices;
            record.a_min_eigenvalue = bundle.iter().map(|b| b.a_min_eigenvalue).reduce(f64::min);
            record.max_abs_w = bundle.iter().map(|b| max_abs(&b.w)).reduce(f64::max);
            record.horizon = bundle.first().map(|b| b.horizon);
            record.cauchy_gap = Some(g.riccati.cauchy_gap);
            match trace_defect(seq, &orbit, bundle) {
                Ok(d) => record.min_defect = d.into_iter().reduce(f64::min),
                Err(e) => record.status = exhausted(e),
            }
            if let Ok((lhs, rhs)) = telescoped_sum(seq, &orbit, bundle, plan.start, plan.forward) {
                record.lhs = Some(lhs);
                record.rhs = Some(rhs);
            }
            if let (Some(p), Some(first)) = (plan.period, bundle.first()) {
                record.periodic_discrepancy = periodic_discrepancy(seq, &orbit, p, first.w.trace(), opts.limit.max_horizon);
            }
        }
        Err(Error::PositivityLost { base, index, .. }) => {
            let found = if base == i64::MIN {
                confirm_from_limit(seq, node, &x, plan.start, index, opts)
            } else {
                confirm_at(seq, node, &x, plan.start, base, index)
            };
            record.status = match found {
                Ok(Some(witness)) => NodeStatus::ConjugateFound { witness },
                Ok(None) => NodeStatus::HorizonExhausted {
                    reason: format!("rigidity node {node}: positivity lost at index {index} but no crossing confirmed"),
                },
                Err(e) => exhausted(e),
            };
        }
        Err(e) => record.status = exhausted(e),
    }
    record
}

/// Scans every grid node and classifies the sequence.
pub fn rigidity_verdict(seq: &SequenceSpec, grid: &TorusGrid, opts: &RigidityOptions) -> Result<RigidityReport> {
    require_fk(seq)?;
    if grid.dim() != seq.dim() {
        return Err(Error::DimensionMismatch {
            expected: seq.dim(),
            found: grid.dim(),
        });
    }
    let plan = node_plan(seq, opts);
    let nodes = map_indexed(grid.node_count(), opts.execution, |i| node_record(seq, grid, i, &plan, opts));

    let configurations = grid.configurations();
    let mut max_gradient = 0.0_f64;
    for &n in &plan.entries {
        if let Some(v) = seq.potential(n) {
            for q in &configurations {
                max_gradient = max_gradient.max(v.eval(q).grad.amax());
            }
        }
    }
    let mut delta_v_integrals = Vec::with_capacity(plan.entries.len());
    for &n in &plan.entries {
        let values: Vec<Option<f64>> = (0..grid.node_count())
            .map(|i| Some(laplacian_at(seq, n, &grid.node(i).q)))
            .collect();
        delta_v_integrals.push((n, integrate_over_torus(grid, &values, 0.0)?.value));
    }

    let count = |label: &str| nodes.iter().filter(|r| r.status.label() == label).count();
    let converged = count("bundle_converged");
    let conjugate = count("conjugate_found");
    let exhausted = count("horizon_exhausted");

    let lhs: Vec<Option<f64>> = nodes.iter().map(|r| r.lhs.filter(|_| r.status == NodeStatus::BundleConverged)).collect();
    let rhs: Vec<Option<f64>> = nodes.iter().map(|r| r.rhs.filter(|_| r.status == NodeStatus::BundleConverged)).collect();
    let (lhs_integral, rhs_integral, coverage_note) = match (
        integrate_over_torus(grid, &lhs, opts.coverage_bound),
        integrate_over_torus(grid, &rhs, opts.coverage_bound),
    ) {
        (Ok(l), Ok(r)) => (Some(l), Some(r), None),
        (Err(e), _) | (_, Err(e)) => (None, None, Some(e.to_string())),
    };

    let defects = DefectStats::from_values(
        nodes
            .iter()
            .filter(|r| r.status == NodeStatus::BundleConverged)
            .filter_map(|r| r.min_defect),
    );
    let periodic: Vec<f64> = nodes.iter().filter_map(|r| r.periodic_discrepancy).collect();
    let witnesses: Vec<Witness> = nodes
        .iter()
        .filter_map(|r| match &r.status {
            NodeStatus::ConjugateFound { witness } => Some(witness.clone()),
            _ => None,
        })
        .collect();

    let verdict = if conjugate > 0 {
        Verdict::ConjugatePointsFound
    } else if converged == nodes.len() && max_gradient <= CONSTANT_GRADIENT_TOL {
        Verdict::PotentialsConstant
    } else {
        Verdict::Inconclusive
    };

    Ok(RigidityReport {
        grid: *grid,
        start_index: plan.start,
        window_steps: plan.forward,
        node_count: nodes.len(),
        converged,
        conjugate,
        exhausted,
        verdict,
        verdict_text: verdict.to_string(),
        witnesses,
        defects,
        delta_v_integrals,
        lhs_integral,
        rhs_integral,
        coverage_note,
        max_abs_w: nodes.iter().filter_map(|r| r.max_abs_w).fold(0.0, f64::max),
        max_gradient,
        periodic_checked: periodic.len(),
        periodic_max_discrepancy: periodic.iter().copied().fold(0.0, f64::max),
        nodes,
    })
}

fn opt_field(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => {
            let _ = write!(out, ",{v:e}");
        }
        None => out.push(','),
    }
}

/// Node table: `node, p_1..p_d, q_1..q_d, status, lambda_min_a, min_defect`.
pub fn nodes_to_csv(report: &RigidityReport) -> String {
    let d = report.grid.dim();
    let mut out = String::from("node");
    for i in 1..=d {
        let _ = write!(out, ",p_{i}");
    }
    for i in 1..=d {
        let _ = write!(out, ",q_{i}");
    }
    out.push_str(",status,lambda_min_a,min_defect\n");
    for r in &report.nodes {
        let _ = write!(out, "{}", r.node);
        for v in r.point.p.iter().chain(r.point.q.iter()) {
            let _ = write!(out, ",{v:e}");
        }
        let _ = write!(out, ",{}", r.status.label());
        opt_field(&mut out, r.a_min_eigenvalue);
        opt_field(&mut out, r.min_defect);
        out.push('\n');
    }
    out
}
