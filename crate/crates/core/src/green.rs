//! The invariant Lagrangian bundle `W_n` built from Riccati limits.
//!
//! For a base index `k` the matrices `A^{(k)}_n` start at
//! `A^{(k)}_{k+1} = a_{k+1}` and follow
//! `A_{n+1} = a_{n+1} - b_nᵀ A_n⁻¹ b_n`. They are positive definite exactly
//! while the vertical at `k` has no conjugate point, decrease as `k -> -∞`,
//! and the limit gives the bundle `W_n = -∂₁₁S_n(q_n, q_{n+1}) + A_n`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::dynamics::{tangent_from_pair, OrbitSegment};
use crate::error::{Error, Result};
use crate::generating::{FreeHistory, SequenceSpec};
use crate::jacobi::{coefficients_along_orbit, JacobiCoefficients, MatrixJacobiSolution};
use crate::linalg::{max_abs, min_eigenvalue, sigma_min, sym_inverse, symmetrize, Matrix};

/// `λ_min(A) ≤` this means positivity is lost.
pub const POSITIVITY_TOL: f64 = 1e-10;
/// Tolerance for "positive semidefinite up to roundoff".
pub const PSD_TOL: f64 = 1e-9;
/// Inversions beyond this condition number are flagged.
pub const CONDITION_WARN: f64 = 1e12;
/// Increment defects below this norm are classified as equality cases.
pub const EQUALITY_TOL: f64 = 1e-8;

/// Where a Riccati sequence starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RiccatiBase {
    /// `A^{(k)}_{k+1} = a_{k+1}`.
    Finite(i64),
    /// Backward limit `k -> -∞`.
    Limit,
}

/// `A_n` on consecutive indices with convergence metadata.
#[derive(Debug, Clone)]
pub struct RiccatiSequence {
    pub base: RiccatiBase,
    first: i64,
    matrices: Vec<Matrix>,
    /// Backward horizon used (`n - k` for the first entry).
    pub horizon: usize,
    /// Last Cauchy gap of the backward limit; zero for finite bases and
    /// exact seeding.
    pub cauchy_gap: f64,
    /// Indices where an inversion exceeded [`CONDITION_WARN`].
    pub ill_conditioned: Vec<i64>,
}

impl RiccatiSequence {
    pub fn first_index(&self) -> i64 {
        self.first
    }

    pub fn last_index(&self) -> i64 {
        self.first + self.matrices.len() as i64 - 1
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn a(&self, n: i64) -> &Matrix {
        &self.matrices[(n - self.first) as usize]
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.matrices
    }

    pub fn min_eigenvalues(&self) -> Vec<f64> {
        self.matrices.iter().map(min_eigenvalue).collect()
    }

    /// Largest `|A_{n+1} - a_{n+1} + b_nᵀ A_n⁻¹ b_n|` over the sequence.
    pub fn recursion_residual(&self, coeffs: &JacobiCoefficients) -> f64 {
        (self.first..self.last_index())
            .map(|n| {
                let (inv, _) = sym_inverse(self.a(n));
                let b = coeffs.b(n);
                let rhs = coeffs.a(n + 1) - b.transpose() * inv * b;
                max_abs(&(self.a(n + 1) - rhs))
            })
            .fold(0.0, f64::max)
    }
}

struct RiccatiRun {
    matrices: Vec<Matrix>,
    ill_conditioned: Vec<i64>,
}

/// Runs the recursion for `n = first+1..=last` from `A_first = start`.
fn run_recursion(coeffs: &JacobiCoefficients, base: i64, first: i64, start: Matrix, last: i64) -> Result<RiccatiRun> {
    let mut matrices = Vec::with_capacity((last - first + 1).max(1) as usize);
    let mut ill_conditioned = Vec::new();
    let check = |n: i64, a: &Matrix| -> Result<()> {
        let lmin = min_eigenvalue(a);
        if !(lmin > POSITIVITY_TOL) {
            return Err(Error::PositivityLost {
                base,
                index: n,
                min_eigenvalue: lmin,
            });
        }
        Ok(())
    };
    check(first, &start)?;
    matrices.push(start);
    for n in first..last {
        let (inv, cond) = sym_inverse(&matrices[matrices.len() - 1]);
        if cond > CONDITION_WARN {
            ill_conditioned.push(n);
        }
        let b = coeffs.b(n);
        let next = symmetrize(&(coeffs.a(n + 1) - b.transpose() * inv * b));
        check(n + 1, &next)?;
        matrices.push(next);
    }
    Ok(RiccatiRun {
        matrices,
        ill_conditioned,
    })
}

fn require_a(coeffs: &JacobiCoefficients, first: i64, last: i64) -> Result<()> {
    let (lo, hi) = coeffs.a_range();
    for n in [first, last] {
        if n < lo || n > hi {
            return Err(Error::OutOfRange {
                index: n,
                first: lo,
                last: hi,
            });
        }
    }
    Ok(())
}

/// `A^{(k)}_n` for `n = k+1..=k+horizon`.
pub fn riccati_from_base(coeffs: &JacobiCoefficients, k: i64, horizon: usize) -> Result<RiccatiSequence> {
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    let last = k + horizon as i64;
    require_a(coeffs, k + 1, last)?;
    let run = run_recursion(coeffs, k, k + 1, coeffs.a(k + 1), last)?;
    Ok(RiccatiSequence {
        base: RiccatiBase::Finite(k),
        first: k + 1,
        matrices: run.matrices,
        horizon: 1,
        cauchy_gap: 0.0,
        ill_conditioned: run.ill_conditioned,
    })
}

/// `A_n = -b_n ξ_{n+1} ξ_n⁻¹` for every `n > k` where both factors exist.
pub fn a_from_xi(coeffs: &JacobiCoefficients, xi: &MatrixJacobiSolution) -> Result<RiccatiSequence> {
    let first = (xi.base() + 1).max(xi.first_index());
    let last = xi.last_index() - 1;
    if last < first {
        return Err(Error::Invalid("Jacobi window too short".into()));
    }
    let mut matrices = Vec::with_capacity((last - first + 1) as usize);
    for n in first..=last {
        let x = xi.xi(n);
        let smin = sigma_min(x);
        if !(smin > POSITIVITY_TOL) {
            return Err(Error::SingularXi {
                index: n,
                sigma_min: smin,
            });
        }
        // A ξ_n = -b_n ξ_{n+1}  =>  ξ_nᵀ Aᵀ = -(b_n ξ_{n+1})ᵀ
        let rhs = -(coeffs.b(n) * xi.xi(n + 1));
        let a_t = x
            .transpose()
            .lu()
            .solve(&rhs.transpose())
            .ok_or(Error::SingularXi {
                index: n,
                sigma_min: smin,
            })?;
        matrices.push(a_t.transpose());
    }
    Ok(RiccatiSequence {
        base: RiccatiBase::Finite(xi.base()),
        first,
        matrices,
        horizon: 1,
        cauchy_gap: 0.0,
        ill_conditioned: Vec::new(),
    })
}

/// Plane `{dp = W_n dq}` of the bundle at index `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BundleMatrix {
    pub n: i64,
    #[serde(skip)]
    pub w: Matrix,
    #[serde(skip)]
    pub a: Matrix,
    pub a_min_eigenvalue: f64,
    pub horizon: usize,
    pub cauchy_gap: f64,
}

/// Backward-limit controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitOptions {
    pub tol: f64,
    pub initial_horizon: usize,
    pub max_horizon: usize,
}

impl Default for LimitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            initial_horizon: 8,
            max_horizon: 1 << 16,
        }
    }
}

/// A converged bundle together with the limit sequence it came from.
#[derive(Debug, Clone)]
pub struct GreenBundle {
    pub matrices: Vec<BundleMatrix>,
    pub riccati: RiccatiSequence,
}

fn bundle_from(seq: &SequenceSpec, orbit: &OrbitSegment, riccati: &RiccatiSequence, first: i64, last: i64) -> Vec<BundleMatrix> {
    (first..=last)
        .map(|n| {
            let a = riccati.a(n).clone();
            let s11 = seq.entry(n).d11(orbit.q(n), orbit.q(n + 1));
            BundleMatrix {
                n,
                w: symmetrize(&(&a - s11)),
                a_min_eigenvalue: min_eigenvalue(&a),
                a,
                horizon: (n - riccati.first_index()) as usize + riccati.horizon,
                cauchy_gap: riccati.cauchy_gap,
            }
        })
        .collect()
}

/// The bundle `W_n` for every `n` with `x_n, x_{n+1}` in the orbit.
pub fn green_limit(seq: &SequenceSpec, orbit: &OrbitSegment, opts: LimitOptions) -> Result<Vec<BundleMatrix>> {
    green_limit_detailed(seq, orbit, opts).map(|g| g.matrices)
}

pub fn green_limit_detailed(seq: &SequenceSpec, orbit: &OrbitSegment, opts: LimitOptions) -> Result<GreenBundle> {
    if orbit.len() < 2 {
        return Err(Error::Invalid("green_limit needs at least two orbit points".into()));
    }
    let first = orbit.first_index();
    let last = orbit.last_index() - 1;

    // Exact seeding: on a free backward tail the limit is A = I.
    let seed = match seq.free_history() {
        FreeHistory::Everywhere => Some(first - 1),
        FreeHistory::Before(f) => Some((f - 1).min(first - 1)),
        FreeHistory::Never => None,
    };
    if let Some(s) = seed {
        let extended = orbit.extend_backward(seq, (first - s) as usize)?;
        let coeffs = coefficients_along_orbit(seq, &extended)?;
        let d = seq.dim();
        let run = run_recursion(&coeffs, i64::MIN, s, Matrix::identity(d, d), last)?;
        let riccati = RiccatiSequence {
            base: RiccatiBase::Limit,
            first: s,
            matrices: run.matrices,
            horizon: 0,
            cauchy_gap: 0.0,
            ill_conditioned: run.ill_conditioned,
        };
        let matrices = bundle_from(seq, &extended, &riccati, first, last);
        return Ok(GreenBundle { matrices, riccati });
    }

    let mut h = opts.initial_horizon.clamp(1, opts.max_horizon.max(1));
    let mut extended = orbit.clone();
    let mut previous: Option<(i64, Vec<Matrix>)> = None;
    let mut gap = f64::INFINITY;
    while h <= opts.max_horizon {
        let k = first - h as i64;
        // a_{k+1} needs q_k.
        let need = (extended.first_index() - k).max(0) as usize;
        if need > 0 {
            extended = extended.extend_backward(seq, need)?;
        }
        let window = extended.window(k, orbit.last_index())?;
        let coeffs = coefficients_along_orbit(seq, &window)?;
        let run = run_recursion(&coeffs, k, k + 1, coeffs.a(k + 1), last)?;
        let targets: Vec<Matrix> = run.matrices[(first - k - 1) as usize..].to_vec();
        if let Some((k_prev, prev)) = &previous {
            gap = 0.0;
            for (i, (newer, older)) in prev.iter().zip(&targets).enumerate() {
                gap = gap.max(max_abs(&(newer - older)));
                let lmin = min_eigenvalue(&(newer - older));
                if lmin < -PSD_TOL {
                    return Err(Error::MonotonicityViolation {
                        base: *k_prev,
                        index: first + i as i64,
                        min_eigenvalue: lmin,
                    });
                }
            }
            if gap <= opts.tol {
                let riccati = RiccatiSequence {
                    base: RiccatiBase::Limit,
                    first: k + 1,
                    matrices: run.matrices,
                    horizon: 1,
                    cauchy_gap: gap,
                    ill_conditioned: run.ill_conditioned,
                };
                let matrices = bundle_from(seq, &extended, &riccati, first, last);
                return Ok(GreenBundle { matrices, riccati });
            }
        }
        previous = Some((k, targets));
        h *= 2;
    }
    Err(Error::LimitNotConverged {
        horizon: h / 2,
        gap,
    })
}

/// Iterates the Riccati update around a periodic orbit until `A` at the first
/// index of the period is fixed to `tol`.
///
/// `coeffs` must hold exactly one period of steps; indices wrap around.
pub fn riccati_periodic_fixed_point(coeffs: &JacobiCoefficients, tol: f64, max_sweeps: usize) -> Result<Vec<Matrix>> {
    let s = coeffs.first_step();
    let period = (coeffs.last_step() - s + 1) as usize;
    let wrap = |n: i64| s + (n - s).rem_euclid(period as i64);
    let a_at = |n: i64| symmetrize(&(coeffs.s11(wrap(n)) + coeffs.s22(wrap(n - 1))));
    let mut current = a_at(s);
    let mut sweep_vals = Vec::with_capacity(period);
    for _ in 0..max_sweeps {
        sweep_vals.clear();
        let start = current.clone();
        sweep_vals.push(start.clone());
        let mut a = start.clone();
        for j in 1..=period as i64 {
            let n = s + j;
            let (inv, _) = sym_inverse(&a);
            let b = coeffs.b(wrap(n - 1));
            a = symmetrize(&(a_at(n) - b.transpose() * inv * b));
            let lmin = min_eigenvalue(&a);
            if !(lmin > POSITIVITY_TOL) {
                return Err(Error::PositivityLost {
                    base: i64::MIN,
                    index: n,
                    min_eigenvalue: lmin,
                });
            }
            if j < period as i64 {
                sweep_vals.push(a.clone());
            }
        }
        let gap = max_abs(&(&a - &start));
        current = a;
        if gap <= tol {
            return Ok(sweep_vals);
        }
    }
    Err(Error::LimitNotConverged {
        horizon: max_sweeps * period,
        gap: f64::NAN,
    })
}

/// Iterates `λ ← 2 - 1/λ`, returning `λ_0..=λ_steps`.
pub fn free_eigen_recursion(lambda0: f64, steps: usize) -> Result<Vec<f64>> {
    if !(lambda0 > 0.0) {
        return Err(Error::NonPositive {
            step: 0,
            value: lambda0,
        });
    }
    let mut values = Vec::with_capacity(steps + 1);
    values.push(lambda0);
    let mut lambda = lambda0;
    for step in 1..=steps {
        lambda = 2.0 - 1.0 / lambda;
        if !(lambda > 0.0) {
            return Err(Error::NonPositive { step, value: lambda });
        }
        values.push(lambda);
    }
    Ok(values)
}

fn previous_configuration(seq: &SequenceSpec, orbit: &OrbitSegment, n: i64) -> Result<crate::linalg::Vector> {
    match orbit.point(n - 1) {
        Some(x) => Ok(x.q.clone()),
        None => {
            let x = orbit.point(n).ok_or(Error::OutOfRange {
                index: n,
                first: orbit.first_index(),
                last: orbit.last_index(),
            })?;
            Ok(crate::dynamics::apply_inverse(seq.entry(n - 1), x)?.q)
        }
    }
}

/// Margins of `-∂₁₁S_n(q, q₊) ≤ W_n ≤ ∂₂₂S_{n-1}(q₋, q)` at one index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsReport {
    pub n: i64,
    /// `λ_min(W_n + ∂₁₁S_n)`, equal to `λ_min(A_n)`.
    pub lower_margin: f64,
    /// `λ_min(∂₂₂S_{n-1} - W_n)`.
    pub upper_margin: f64,
    pub ok: bool,
}

pub fn check_theorem2_bounds(seq: &SequenceSpec, orbit: &OrbitSegment, bundle: &[BundleMatrix]) -> Result<Vec<BoundsReport>> {
    bundle
        .iter()
        .map(|entry| {
            let n = entry.n;
            let q = orbit.q(n);
            let q_next = orbit.q(n + 1);
            let q_prev = previous_configuration(seq, orbit, n)?;
            let lower = min_eigenvalue(&(&entry.w + seq.entry(n).d11(q, q_next)));
            let upper = min_eigenvalue(&(seq.entry(n - 1).d22(&q_prev, q) - &entry.w));
            Ok(BoundsReport {
                n,
                lower_margin: lower,
                upper_margin: upper,
                ok: lower > 0.0 && upper >= -PSD_TOL,
            })
        })
        .collect()
}

/// `(A^{1/2} + bᵀA^{-1/2})(A^{1/2} + A^{-1/2}b)` for symmetric positive definite `A`.
pub fn increment_square_term(a: &Matrix, b: &Matrix) -> Matrix {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(a));
    let root = &eig.eigenvectors
        * Matrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
        * eig.eigenvectors.transpose();
    let inv_root = &eig.eigenvectors
        * Matrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();
    let left = &root + b.transpose() * &inv_root;
    let right = &root + &inv_root * b;
    left * right
}

/// Increment defect `D_n` at one index and its equality classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IncrementReport {
    pub n: i64,
    /// `λ_min(D_n)`; must be ≥ -1e-9.
    pub min_eigenvalue: f64,
    /// `|D_n|_max`.
    pub defect_norm: f64,
    pub equality: bool,
    /// `max(|A_n + b_n|, |A_n + b_nᵀ|)`; at equality this must vanish.
    pub characterization_residual: f64,
    /// `|W_{n+1} - (∂₂₂S + ∂₂₁S)|`
    pub w_next_residual_21: f64,
    /// `|W_{n+1} - (∂₂₂S + ∂₁₂S)|`
    pub w_next_residual_12: f64,
    /// `|W_n + ∂₁₁S + ∂₁₂S|`
    pub w_residual_12: f64,
    /// `|W_n + ∂₁₁S + ∂₂₁S|`
    pub w_residual_21: f64,
    pub ok: bool,
}

/// `D_n = [∂₁₁S + ∂₂₂S + ∂₁₂S + ∂₂₁S]_n - (W_{n+1} - W_n)` along the bundle.
pub fn w_increment_bound(seq: &SequenceSpec, orbit: &OrbitSegment, bundle: &[BundleMatrix]) -> Vec<IncrementReport> {
    bundle
        .windows(2)
        .map(|pair| {
            let (cur, next) = (&pair[0], &pair[1]);
            let n = cur.n;
            let blk = seq.entry(n).blocks(orbit.q(n), orbit.q(n + 1));
            let total = &blk.s11 + &blk.s22 + &blk.s12 + &blk.s21;
            let d = symmetrize(&(total - (&next.w - &cur.w)));
            let lmin = min_eigenvalue(&d);
            let norm = max_abs(&d);
            let a = &cur.w + &blk.s11;
            IncrementReport {
                n,
                min_eigenvalue: lmin,
                defect_norm: norm,
                equality: norm <= EQUALITY_TOL,
                characterization_residual: max_abs(&(&a + &blk.s12)).max(max_abs(&(&a + blk.s12.transpose()))),
                w_next_residual_21: max_abs(&(&next.w - (&blk.s22 + &blk.s21))),
                w_next_residual_12: max_abs(&(&next.w - (&blk.s22 + &blk.s12))),
                w_residual_12: max_abs(&(&cur.w + &blk.s11 + &blk.s12)),
                w_residual_21: max_abs(&(&cur.w + &blk.s11 + &blk.s21)),
                ok: lmin >= -PSD_TOL,
            }
        })
        .collect()
}

/// Push-forward of the graph `{dp = W dq}` by a tangent map in `(dp, dq)`
/// ordering, returned in graph form.
pub fn graph_transform(m: &Matrix, w: &Matrix, index: i64) -> Result<Matrix> {
    let d = w.nrows();
    let y = m.view((0, 0), (d, d)) * w + m.view((0, d), (d, d));
    let x = m.view((d, 0), (d, d)) * w + m.view((d, d), (d, d));
    let smin = sigma_min(&x);
    if !(smin > 1e-12) {
        return Err(Error::VerticalCollision {
            index,
            sigma_min: smin,
        });
    }
    let w_next = x
        .transpose()
        .lu()
        .solve(&y.transpose())
        .ok_or(Error::VerticalCollision {
            index,
            sigma_min: smin,
        })?
        .transpose();
    Ok(w_next)
}

/// `W_{n+1} = ∂₂₂S_n - b_nᵀ (W_n + ∂₁₁S_n)⁻¹ b_n`, the Riccati route.
pub fn riccati_w_update(seq: &SequenceSpec, n: i64, q: &crate::linalg::Vector, q_next: &crate::linalg::Vector, w: &Matrix) -> Matrix {
    let blk = seq.entry(n).blocks(q, q_next);
    let (inv, _) = sym_inverse(&(w + &blk.s11));
    symmetrize(&(&blk.s22 - blk.s12.transpose() * inv * &blk.s12))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub max_residual: f64,
    pub residuals: Vec<(i64, f64)>,
}

/// Pushes each `W_n` through the tangent map and compares with `W_{n+1}`.
pub fn invariance_check(seq: &SequenceSpec, orbit: &OrbitSegment, bundle: &[BundleMatrix]) -> Result<InvarianceReport> {
    let mut residuals = Vec::with_capacity(bundle.len().saturating_sub(1));
    for pair in bundle.windows(2) {
        let n = pair[0].n;
        let m = tangent_from_pair(seq.entry(n), orbit.q(n), orbit.q(n + 1));
        let pushed = graph_transform(&m, &pair[0].w, n + 1)?;
        residuals.push((n, max_abs(&(pushed - &pair[1].w))));
    }
    Ok(InvarianceReport {
        max_residual: residuals.iter().map(|r| r.1).fold(0.0, f64::max),
        residuals,
    })
}

/// CSV with columns `n, w_11..w_dd (row-major), lambda_min_a, horizon, cauchy_gap`.
pub fn bundle_to_csv(bundle: &[BundleMatrix]) -> String {
    let d = bundle.first().map_or(0, |b| b.w.nrows());
    let mut out = String::from("n");
    for i in 1..=d {
        for j in 1..=d {
            let _ = write!(out, ",w_{i}{j}");
        }
    }
    out.push_str(",lambda_min_a,horizon,cauchy_gap\n");
    for b in bundle {
        let _ = write!(out, "{}", b.n);
        for i in 0..d {
            for j in 0..d {
                let _ = write!(out, ",{:e}", b.w[(i, j)]);
            }
        }
        let _ = writeln!(out, ",{:e},{},{:e}", b.a_min_eigenvalue, b.horizon, b.cauchy_gap);
    }
    out
}
