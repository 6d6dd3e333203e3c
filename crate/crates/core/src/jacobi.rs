//! Jacobi fields along extremals, the second variation, and conjugate points.
//!
//! Along an orbit the Jacobi equation reads
//! `b_{n-1}ᵀ ξ_{n-1} + a_n ξ_n + b_n ξ_{n+1} = 0` with
//! `b_n = ∂₁₂S_n(q_n, q_{n+1})` and
//! `a_n = ∂₁₁S_n(q_n, q_{n+1}) + ∂₂₂S_{n-1}(q_{n-1}, q_n)`.

use nalgebra::SymmetricEigen;
use serde::Serialize;

use crate::dynamics::OrbitSegment;
use crate::error::{Error, Result};
use crate::generating::{SecondDerivatives, SequenceSpec};
use crate::linalg::{sigma_min, symmetrize, Matrix, Signature, Vector, SIGNATURE_TOL};

/// σ_min threshold below which `ξ_n` counts as singular.
pub const CONJUGATE_TOL: f64 = 1e-8;
/// |λ| threshold for kernel vectors of the second variation.
pub const KERNEL_TOL: f64 = 1e-9;
/// Dense storage is used up to this many rows.
pub const DENSE_LIMIT: usize = 4000;
/// Frames are re-orthonormalized every this many steps.
pub const RENORMALIZE_EVERY: usize = 50;

const TWIST_SLACK: f64 = 1e-10;
const RESCALE_ABOVE: f64 = 1e150;

/// Generating-function blocks of `S_n(q_n, q_{n+1})` for consecutive steps.
#[derive(Debug, Clone)]
pub struct JacobiCoefficients {
    first_step: i64,
    steps: Vec<SecondDerivatives>,
}

impl JacobiCoefficients {
    pub fn from_steps(first_step: i64, steps: Vec<SecondDerivatives>) -> Result<Self> {
        let first = steps
            .first()
            .ok_or_else(|| Error::Invalid("no steps given".into()))?;
        let d = first.s11.nrows();
        if steps.iter().any(|s| {
            s.s11.shape() != (d, d)
                || s.s12.shape() != (d, d)
                || s.s21.shape() != (d, d)
                || s.s22.shape() != (d, d)
        }) {
            return Err(Error::Invalid("blocks must all be d×d".into()));
        }
        Ok(Self { first_step, steps })
    }

    /// `count` identical steps with the given blocks (`s21 = s12ᵀ`).
    pub fn uniform(s11: Matrix, s12: Matrix, s22: Matrix, first_step: i64, count: usize) -> Self {
        let block = SecondDerivatives {
            s21: s12.transpose(),
            s11,
            s12,
            s22,
        };
        Self {
            first_step,
            steps: vec![block; count.max(1)],
        }
    }

    /// Frenkel–Kontorova steps with constant potential Hessians `hess[i]`.
    pub fn fk_from_hessians(first_step: i64, hess: &[Matrix]) -> Result<Self> {
        let steps = hess
            .iter()
            .map(|h| {
                let d = h.nrows();
                let id = Matrix::identity(d, d);
                SecondDerivatives {
                    s11: &id + h,
                    s12: -&id,
                    s21: -&id,
                    s22: id,
                }
            })
            .collect();
        Self::from_steps(first_step, steps)
    }

    pub fn dim(&self) -> usize {
        self.steps[0].s11.nrows()
    }

    pub fn first_step(&self) -> i64 {
        self.first_step
    }

    pub fn last_step(&self) -> i64 {
        self.first_step + self.steps.len() as i64 - 1
    }

    /// Indices `n` where `a_n` is available.
    pub fn a_range(&self) -> (i64, i64) {
        (self.first_step + 1, self.last_step())
    }

    fn check_step(&self, n: i64) -> Result<&SecondDerivatives> {
        usize::try_from(n - self.first_step)
            .ok()
            .and_then(|i| self.steps.get(i))
            .ok_or(Error::OutOfRange {
                index: n,
                first: self.first_step,
                last: self.last_step(),
            })
    }

    pub fn step(&self, n: i64) -> &SecondDerivatives {
        self.check_step(n).expect("step index in range")
    }

    pub fn b(&self, n: i64) -> &Matrix {
        &self.step(n).s12
    }

    pub fn a(&self, n: i64) -> Matrix {
        symmetrize(&(&self.step(n).s11 + &self.step(n - 1).s22))
    }

    pub fn s11(&self, n: i64) -> &Matrix {
        &self.step(n).s11
    }

    pub fn s22(&self, n: i64) -> &Matrix {
        &self.step(n).s22
    }

    fn require_steps(&self, first: i64, last: i64) -> Result<()> {
        self.check_step(first)?;
        self.check_step(last)?;
        Ok(())
    }

    /// Smallest singular value of every `b_n` must be at least `bound - 1e-10`.
    pub fn check_twist(&self, bound: f64) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            let smin = sigma_min(&s.s12);
            if smin < bound - TWIST_SLACK {
                return Err(Error::TwistViolation {
                    index: self.first_step + i as i64,
                    sigma_min: smin,
                    bound,
                });
            }
        }
        Ok(())
    }
}

/// Blocks along every step `x_n -> x_{n+1}` of the orbit.
pub fn coefficients_along_orbit(seq: &SequenceSpec, orbit: &OrbitSegment) -> Result<JacobiCoefficients> {
    if orbit.len() < 3 {
        return Err(Error::Invalid(format!(
            "jacobi::coefficients_along_orbit needs at least 3 points, got {}",
            orbit.len()
        )));
    }
    let first = orbit.first_index();
    let steps: Vec<SecondDerivatives> = (first..orbit.last_index())
        .map(|n| seq.entry(n).blocks(orbit.q(n), orbit.q(n + 1)))
        .collect();
    for (i, s) in steps.iter().enumerate() {
        let n = first + i as i64;
        let bound = seq.entry(n).twist_constant();
        let smin = sigma_min(&s.s12);
        if smin < bound - TWIST_SLACK {
            return Err(Error::TwistViolation {
                index: n,
                sigma_min: smin,
                bound,
            });
        }
    }
    JacobiCoefficients::from_steps(first, steps)
}

fn solve_b(b: &Matrix, rhs: &Matrix, index: i64) -> Result<Matrix> {
    b.clone().lu().solve(rhs).ok_or(Error::TwistViolation {
        index,
        sigma_min: 0.0,
        bound: 0.0,
    })
}

/// `ξ_n` for consecutive `n`.
#[derive(Debug, Clone)]
pub struct MatrixJacobiSolution {
    base: i64,
    start: i64,
    xi: Vec<Matrix>,
}

impl MatrixJacobiSolution {
    pub fn base(&self) -> i64 {
        self.base
    }

    pub fn first_index(&self) -> i64 {
        self.start
    }

    pub fn last_index(&self) -> i64 {
        self.start + self.xi.len() as i64 - 1
    }

    pub fn is_scalar(&self) -> bool {
        self.xi[0].nrows() == 1
    }

    pub fn xi(&self, n: i64) -> &Matrix {
        &self.xi[(n - self.start) as usize]
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.xi
    }

    /// Largest interior residual of the Jacobi equation, relative to
    /// `1 + |ξ_{n-1}| + |ξ_n| + |ξ_{n+1}|`.
    pub fn residual(&self, coeffs: &JacobiCoefficients) -> f64 {
        (self.start + 1..self.last_index())
            .map(|n| {
                let (prev, cur, next) = (self.xi(n - 1), self.xi(n), self.xi(n + 1));
                let r = coeffs.b(n - 1).transpose() * prev + coeffs.a(n) * cur + coeffs.b(n) * next;
                r.norm() / (1.0 + prev.norm() + cur.norm() + next.norm())
            })
            .fold(0.0, f64::max)
    }
}

/// Fills `ξ_n` on `first..=last` from the pair `(ξ_k, ξ_{k+1})`.
pub fn propagate_jacobi(
    coeffs: &JacobiCoefficients,
    k: i64,
    xi_k: &Matrix,
    xi_k1: &Matrix,
    first: i64,
    last: i64,
) -> Result<MatrixJacobiSolution> {
    if !(first <= k && k + 1 <= last) {
        return Err(Error::Invalid(format!(
            "window {first}..={last} must contain {k} and {}",
            k + 1
        )));
    }
    if last > k + 1 {
        coeffs.require_steps(k, last - 1)?;
    }
    if first < k {
        coeffs.require_steps(first, k)?;
    }
    let len = (last - first + 1) as usize;
    let mut xi = vec![Matrix::zeros(0, 0); len];
    let at = |n: i64| (n - first) as usize;
    xi[at(k)] = xi_k.clone();
    xi[at(k + 1)] = xi_k1.clone();
    for n in k + 1..last {
        let rhs = coeffs.b(n - 1).transpose() * &xi[at(n - 1)] + coeffs.a(n) * &xi[at(n)];
        xi[at(n + 1)] = -solve_b(coeffs.b(n), &rhs, n)?;
    }
    for n in (first + 1..=k).rev() {
        let rhs = coeffs.a(n) * &xi[at(n)] + coeffs.b(n) * &xi[at(n + 1)];
        xi[at(n - 1)] = -solve_b(&coeffs.b(n - 1).transpose(), &rhs, n - 1)?;
    }
    Ok(MatrixJacobiSolution {
        base: k,
        start: first,
        xi,
    })
}

/// A Lagrangian plane spanned by the columns of `[Y; X]` in `(dp, dq)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeFrame {
    /// dq-components.
    pub x: Matrix,
    /// dp-components.
    pub y: Matrix,
}

impl LagrangeFrame {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.shape() != y.shape() || x.nrows() != x.ncols() {
            return Err(Error::Invalid("frame blocks must both be d×d".into()));
        }
        let frame = Self { x, y };
        if frame.rank() != frame.dim() {
            return Err(Error::Invalid("frame does not span a d-plane".into()));
        }
        Ok(frame)
    }

    pub fn vertical(d: usize) -> Self {
        Self {
            x: Matrix::zeros(d, d),
            y: Matrix::identity(d, d),
        }
    }

    /// The graph `{dp = W dq}`.
    pub fn graph(w: &Matrix) -> Self {
        Self {
            x: Matrix::identity(w.nrows(), w.nrows()),
            y: w.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    fn stacked(&self) -> Matrix {
        let d = self.dim();
        let mut m = Matrix::zeros(2 * d, d);
        m.view_mut((0, 0), (d, d)).copy_from(&self.y);
        m.view_mut((d, 0), (d, d)).copy_from(&self.x);
        m
    }

    pub fn rank(&self) -> usize {
        let s = self.stacked();
        let scale = s.norm().max(f64::MIN_POSITIVE);
        s.singular_values().iter().filter(|v| **v > 1e-12 * scale).count()
    }

    /// `|XᵀY - YᵀX|_max`.
    pub fn lagrangian_defect(&self) -> f64 {
        let m = self.x.transpose() * &self.y;
        (&m - m.transpose()).amax()
    }

    /// `W = Y X⁻¹` when the plane is transversal to the vertical.
    pub fn to_graph(&self, tol: f64) -> Option<Matrix> {
        if sigma_min(&self.x) <= tol {
            return None;
        }
        let w = self.x.transpose().lu().solve(&self.y.transpose())?.transpose();
        Some(w)
    }

    pub fn right_multiply(&self, g: &Matrix) -> Self {
        Self {
            x: &self.x * g,
            y: &self.y * g,
        }
    }

    /// Signature of `sym(XᵀY)`.
    pub fn form_signature(&self) -> Signature {
        Signature::of(&(self.x.transpose() * &self.y))
    }
}

/// The block-tridiagonal second variation on `M..=N`.
#[derive(Debug, Clone)]
pub struct SecondVariation {
    first: i64,
    last: i64,
    diag: Vec<Matrix>,
    off: Vec<Matrix>,
    dense: Option<Matrix>,
}

impl SecondVariation {
    pub fn first(&self) -> i64 {
        self.first
    }

    pub fn last(&self) -> i64 {
        self.last
    }

    pub fn block_dim(&self) -> usize {
        self.diag[0].nrows()
    }

    pub fn size(&self) -> usize {
        self.diag.len() * self.block_dim()
    }

    pub fn diagonal_blocks(&self) -> &[Matrix] {
        &self.diag
    }

    pub fn off_diagonal_blocks(&self) -> &[Matrix] {
        &self.off
    }

    /// Dense matrix when stored densely.
    pub fn dense(&self) -> Option<&Matrix> {
        self.dense.as_ref()
    }

    pub fn is_banded(&self) -> bool {
        self.dense.is_none()
    }

    pub fn to_dense(&self) -> Matrix {
        let d = self.block_dim();
        let mut m = Matrix::zeros(self.size(), self.size());
        for (i, a) in self.diag.iter().enumerate() {
            m.view_mut((i * d, i * d), (d, d)).copy_from(a);
        }
        for (i, b) in self.off.iter().enumerate() {
            m.view_mut((i * d, (i + 1) * d), (d, d)).copy_from(b);
            m.view_mut(((i + 1) * d, i * d), (d, d)).copy_from(&b.transpose());
        }
        m
    }

    /// `uᵀ δ²F u` for a variation given block-wise.
    pub fn quadratic_form(&self, u: &[Vector]) -> f64 {
        let mut total = 0.0;
        for (i, a) in self.diag.iter().enumerate() {
            total += u[i].dot(&(a * &u[i]));
        }
        for (i, b) in self.off.iter().enumerate() {
            total += 2.0 * u[i].dot(&(b * &u[i + 1]));
        }
        total
    }

    /// Block LDLᵀ pivots of `δ²F - shift·I`, stopping at the first singular pivot.
    fn pivots_shifted(&self, shift: f64) -> Vec<Matrix> {
        let d = self.block_dim();
        let id = Matrix::identity(d, d);
        let mut pivots: Vec<Matrix> = Vec::with_capacity(self.diag.len());
        for (i, a) in self.diag.iter().enumerate() {
            let mut pivot = a - &id * shift;
            if i > 0 {
                let prev = &pivots[i - 1];
                let Some(solved) = prev.clone().lu().solve(&self.off[i - 1]) else {
                    break;
                };
                pivot -= self.off[i - 1].transpose() * solved;
            }
            pivots.push(symmetrize(&pivot));
        }
        pivots
    }

    /// Number of eigenvalues below `shift` (Sylvester inertia of the pivots).
    fn count_below(&self, shift: f64) -> usize {
        let pivots = self.pivots_shifted(shift);
        if pivots.len() < self.diag.len() {
            // Singular pivot: nudge the shift.
            return self.count_below(shift - 1e-13 * (1.0 + shift.abs()));
        }
        pivots
            .iter()
            .map(|p| Signature::from_eigenvalues(&crate::linalg::sym_eigenvalues(p), 0.0).negative)
            .sum()
    }

    fn gershgorin_bounds(&self) -> (f64, f64) {
        let d = self.block_dim();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.diag.len() {
            for r in 0..d {
                let centre = self.diag[i][(r, r)];
                let mut radius: f64 = (0..d)
                    .filter(|&c| c != r)
                    .map(|c| self.diag[i][(r, c)].abs())
                    .sum();
                if i > 0 {
                    radius += self.off[i - 1].column(r).abs().sum();
                }
                if i < self.off.len() {
                    radius += self.off[i].row(r).abs().sum();
                }
                lo = lo.min(centre - radius);
                hi = hi.max(centre + radius);
            }
        }
        (lo, hi)
    }

    fn min_eigenvalue_bisection(&self) -> f64 {
        let (mut lo, mut hi) = self.gershgorin_bounds();
        lo -= 1e-12;
        hi += 1e-12;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.count_below(mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Jacobi fields vanishing at `M-1` and `N+1`, by shooting from `ξ_M = I`.
    fn kernel_by_shooting(&self) -> Vec<Vector> {
        let d = self.block_dim();
        let len = self.diag.len();
        let mut xi = vec![Matrix::identity(d, d)];
        for i in 0..len - 1 {
            let mut rhs = &self.diag[i] * &xi[i];
            if i > 0 {
                rhs += self.off[i - 1].transpose() * &xi[i - 1];
            }
            match self.off[i].clone().lu().solve(&rhs) {
                Some(next) => xi.push(-next),
                None => return Vec::new(),
            }
        }
        let mut end = &self.diag[len - 1] * &xi[len - 1];
        if len > 1 {
            end += self.off[len - 2].transpose() * &xi[len - 2];
        }
        let scale = xi.iter().map(|m| m.norm()).fold(1.0, f64::max);
        crate::linalg::null_space(&end, KERNEL_TOL * scale)
            .into_iter()
            .map(|c| {
                let mut v = Vector::zeros(len * d);
                for (i, x) in xi.iter().enumerate() {
                    v.rows_mut(i * d, d).copy_from(&(x * &c));
                }
                v.normalize()
            })
            .collect()
    }

    /// Residual of the Jacobi recurrence for a stacked vector `v` extended by
    /// zero at `M-1` and `N+1`.
    pub fn kernel_residual(&self, v: &Vector) -> f64 {
        let d = self.block_dim();
        let blocks: Vec<Vector> = (0..self.diag.len())
            .map(|i| v.rows(i * d, d).into_owned())
            .collect();
        let mut worst: f64 = 0.0;
        for i in 0..blocks.len() {
            let mut r = &self.diag[i] * &blocks[i];
            if i > 0 {
                r += self.off[i - 1].transpose() * &blocks[i - 1];
            }
            if i + 1 < blocks.len() {
                r += &self.off[i] * &blocks[i + 1];
            }
            worst = worst.max(r.amax());
        }
        worst
    }
}

/// Assembles `δ²F_{M,N}` with diagonal blocks `a_n` and off-diagonal blocks `b_n`.
pub fn assemble_second_variation(coeffs: &JacobiCoefficients, first: i64, last: i64) -> Result<SecondVariation> {
    if last < first {
        return Err(Error::Invalid(format!("N={last} < M={first}")));
    }
    coeffs.require_steps(first - 1, last)?;
    let diag: Vec<Matrix> = (first..=last).map(|n| coeffs.a(n)).collect();
    let off: Vec<Matrix> = (first..last).map(|n| coeffs.b(n).clone()).collect();
    let mut sv = SecondVariation {
        first,
        last,
        diag,
        off,
        dense: None,
    };
    if sv.size() <= DENSE_LIMIT {
        sv.dense = Some(sv.to_dense());
    }
    Ok(sv)
}

#[derive(Debug, Clone)]
pub struct SecondVariationAnalysis {
    pub positive_definite: bool,
    pub min_eigenvalue: f64,
    pub kernel_basis: Vec<Vector>,
    /// Block LDLᵀ pivots, up to the first singular one.
    pub pivots: Vec<Matrix>,
    /// Largest kernel-vector residual of the Jacobi recurrence.
    pub kernel_residual: f64,
}

pub fn second_variation_analysis(sv: &SecondVariation) -> SecondVariationAnalysis {
    let pivots = sv.pivots_shifted(0.0);
    let positive_definite = pivots.len() == sv.diag.len()
        && pivots
            .iter()
            .all(|p| crate::linalg::min_eigenvalue(p) > 1e-10);
    let (min_eigenvalue, kernel_basis) = match sv.dense() {
        Some(m) => {
            let eig = SymmetricEigen::new(m.clone());
            let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            let kernel = eig
                .eigenvalues
                .iter()
                .enumerate()
                .filter(|(_, l)| l.abs() <= KERNEL_TOL)
                .map(|(i, _)| eig.eigenvectors.column(i).into_owned())
                .collect();
            (min, kernel)
        }
        None => (sv.min_eigenvalue_bisection(), sv.kernel_by_shooting()),
    };
    let kernel_residual = kernel_basis
        .iter()
        .map(|v| sv.kernel_residual(v))
        .fold(0.0, f64::max);
    SecondVariationAnalysis {
        positive_definite,
        min_eigenvalue,
        kernel_basis,
        pivots,
        kernel_residual,
    }
}

/// σ_min profile of `ξ^{(k)}` and the indices flagged conjugate to `k`.
#[derive(Debug, Clone, Serialize)]
pub struct StrictScan {
    pub base: i64,
    pub profile: Vec<(i64, f64)>,
    pub conjugate: Vec<i64>,
}

/// Propagates `ξ_k = 0`, `ξ_{k+1} = I` forward to `last` and flags every
/// `n` with `σ_min(ξ_n) ≤ 1e-8`.
///
/// The pair is rescaled by a scalar when it grows past `1e150`; reported
/// values are the unscaled σ_min (possibly `inf`).
pub fn detect_conjugate_strict(coeffs: &JacobiCoefficients, k: i64, last: i64) -> Result<StrictScan> {
    if last <= k {
        return Err(Error::Invalid(format!("window end {last} must exceed base {k}")));
    }
    coeffs.require_steps(k, last - 1)?;
    let d = coeffs.dim();
    let mut prev = Matrix::zeros(d, d);
    let mut cur = Matrix::identity(d, d);
    let mut log_scale = 0.0_f64;
    let mut profile = Vec::with_capacity((last - k) as usize);
    let mut conjugate = Vec::new();
    let mut record = |n: i64, m: &Matrix, log_scale: f64| {
        let s = sigma_min(m) * log_scale.exp();
        if s <= CONJUGATE_TOL {
            conjugate.push(n);
        }
        profile.push((n, s));
    };
    record(k + 1, &cur, log_scale);
    for n in k + 1..last {
        let rhs = coeffs.b(n - 1).transpose() * &prev + coeffs.a(n) * &cur;
        let next = -solve_b(coeffs.b(n), &rhs, n)?;
        prev = cur;
        cur = next;
        let norm = cur.amax();
        if norm > RESCALE_ABOVE {
            prev /= norm;
            cur /= norm;
            log_scale += norm.ln();
        }
        record(n + 1, &cur, log_scale);
    }
    Ok(StrictScan {
        base: k,
        profile,
        conjugate,
    })
}

/// A vertical crossing between integer times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Crossing {
    pub interval: (i64, i64),
    /// Step-form signature on the previous interval (none for the first).
    pub before: Option<Signature>,
    /// Step-form signature on this interval.
    pub after: Signature,
    /// Number of negative directions of the step form.
    pub multiplicity: usize,
}

#[derive(Debug, Clone)]
pub struct ExtendedScan {
    pub base: i64,
    /// Intervals where the step form is negative somewhere.
    pub crossings: Vec<Crossing>,
    /// Intervals where the step form is degenerate: the plane is vertical at
    /// an endpoint.
    pub degenerate: Vec<(i64, i64)>,
    /// Frames `(X_n, Y_n)` for `n = base..last-1`, up to right multiplication.
    pub frames: Vec<LagrangeFrame>,
    /// Signature of `sym(X_nᵀ Y_n)` at each frame.
    pub graph_signatures: Vec<Signature>,
}

impl ExtendedScan {
    pub fn first_crossing(&self) -> Option<&Crossing> {
        self.crossings.first()
    }
}

/// Evolves `frame₀` at time `k` through the tangent recursion up to time
/// `last` and reports vertical crossings.
///
/// On each interval `(n, n+1)` the step form
/// `F_n = X_nᵀ(-b_n)X_{n+1} = X_nᵀ Y_n + X_nᵀ ∂₁₁S_n X_n` is evaluated; it is
/// symmetric for Lagrangian frames and, when `X_n` is invertible, congruent to
/// `-b_n X_{n+1} X_n⁻¹`. Each negative eigenvalue marks one crossing of the
/// vertical in `(n, n+1)`. In one dimension this is a sign change of `ξ`.
pub fn detect_crossings_extended(
    coeffs: &JacobiCoefficients,
    k: i64,
    frame0: &LagrangeFrame,
    last: i64,
) -> Result<ExtendedScan> {
    if last <= k {
        return Err(Error::Invalid(format!("window end {last} must exceed base {k}")));
    }
    if frame0.lagrangian_defect() > 1e-10 * (1.0 + frame0.x.norm() * frame0.y.norm()) {
        return Err(Error::Invalid("initial frame is not Lagrangian".into()));
    }
    coeffs.require_steps(k, last - 1)?;
    let mut x_cur = frame0.x.clone();
    let mut x_next = -solve_b(coeffs.b(k), &(&frame0.y + coeffs.s11(k) * &frame0.x), k)?;

    let mut crossings = Vec::new();
    let mut degenerate = Vec::new();
    let mut frames = Vec::with_capacity((last - k) as usize);
    let mut graph_signatures = Vec::with_capacity((last - k) as usize);
    let mut previous: Option<Signature> = None;

    for (step, n) in (k..last).enumerate() {
        let b = coeffs.b(n);
        let mut y_cur = -coeffs.s11(n) * &x_cur - b * &x_next;
        if step > 0 && step % RENORMALIZE_EVERY == 0 {
            let stacked = LagrangeFrame {
                x: x_cur.clone(),
                y: y_cur.clone(),
            }
            .stacked();
            let r = stacked.qr().r();
            if let Some(r_inv) = r.try_inverse() {
                x_cur = &x_cur * &r_inv;
                x_next = &x_next * &r_inv;
                y_cur = &y_cur * &r_inv;
            }
        }
        let step_form = symmetrize(&(x_cur.transpose() * (-b) * &x_next));
        let scale = x_cur.norm() * x_next.norm() * b.norm();
        let sig = Signature::from_eigenvalues(
            &crate::linalg::sym_eigenvalues(&step_form),
            SIGNATURE_TOL * scale.max(1.0),
        );
        if sig.negative > 0 {
            crossings.push(Crossing {
                interval: (n, n + 1),
                before: previous,
                after: sig,
                multiplicity: sig.negative,
            });
        }
        if sig.is_degenerate() {
            degenerate.push((n, n + 1));
        }
        previous = Some(sig);
        let frame = LagrangeFrame {
            x: x_cur.clone(),
            y: y_cur,
        };
        graph_signatures.push(frame.form_signature());
        frames.push(frame);

        if n + 1 < last {
            let rhs = b.transpose() * &x_cur + coeffs.a(n + 1) * &x_next;
            let advanced = -solve_b(coeffs.b(n + 1), &rhs, n + 1)?;
            x_cur = std::mem::replace(&mut x_next, advanced);
        }
    }
    Ok(ExtendedScan {
        base: k,
        crossings,
        degenerate,
        frames,
        graph_signatures,
    })
}

/// First time `n > k` at which the vertical at `k` is conjugate: either a
/// strict conjugate index or the right end of the first crossing interval.
pub fn first_conjugate_index(coeffs: &JacobiCoefficients, k: i64, last: i64) -> Result<Option<i64>> {
    let strict = detect_conjugate_strict(coeffs, k, last)?;
    let extended = detect_crossings_extended(coeffs, k, &LagrangeFrame::vertical(coeffs.dim()), last)?;
    let a = strict.conjugate.first().copied();
    let b = extended.first_crossing().map(|c| c.interval.1);
    Ok(match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    })
}
