//! The twist maps `T_n`, their inverses and tangent maps, and orbit segments.
//!
//! All dynamics run on the universal cover `R^{2d}`; torus reduction is only
//! applied when reporting. Tangent vectors are ordered `(dp, dq)` everywhere.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::generating::{GeneratingFunction, SequenceSpec};
use crate::linalg::{Matrix, Vector};

pub const NEWTON_MAX_ITER: usize = 50;
pub const NEWTON_TOL: f64 = 1e-12;
/// Largest `|n - m|` accepted by [`evolve`].
pub const MAX_EVOLVE_HORIZON: usize = 1 << 22;
/// Tolerance on the extremal equation accepted by
/// [`momentum_from_configuration`].
pub const EXTREMAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhasePoint {
    #[serde(serialize_with = "as_slice")]
    pub p: Vector,
    #[serde(serialize_with = "as_slice")]
    pub q: Vector,
}

fn as_slice<S: Serializer>(v: &Vector, s: S) -> std::result::Result<S::Ok, S::Error> {
    v.as_slice().serialize(s)
}

impl PhasePoint {
    pub fn new(p: Vector, q: Vector) -> Self {
        assert_eq!(p.len(), q.len(), "p and q must have equal dimension");
        Self { p, q }
    }

    pub fn from_slices(p: &[f64], q: &[f64]) -> Self {
        Self::new(Vector::from_column_slice(p), Vector::from_column_slice(q))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Both coordinates mapped into `[0, 1)`; meaningful for maps that commute
    /// with integer shifts of `p` and `q` (the Frenkel–Kontorova family).
    pub fn reduce_to_torus(&self) -> PhasePoint {
        let wrap = |v: &Vector| v.map(|x| x - x.floor());
        PhasePoint {
            p: wrap(&self.p),
            q: wrap(&self.q),
        }
    }

    pub fn distance(&self, other: &PhasePoint) -> f64 {
        (&self.p - &other.p)
            .amax()
            .max((&self.q - &other.q).amax())
    }
}

/// Result of one map evaluation with its solver statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStep {
    pub point: PhasePoint,
    pub newton_iterations: usize,
}

fn residual_scale(x: &PhasePoint) -> f64 {
    NEWTON_TOL * (1.0 + x.p.amax() + x.q.amax())
}

/// Damped Newton for `f(z) = 0` with Jacobian `jac`, starting at `z0`.
fn damped_newton(
    op: &'static str,
    index: i64,
    z0: Vector,
    tol: f64,
    f: impl Fn(&Vector) -> Vector,
    jac: impl Fn(&Vector) -> Matrix,
) -> Result<(Vector, usize)> {
    let mut z = z0;
    let mut r = f(&z);
    let mut norm = r.norm();
    for iter in 0..=NEWTON_MAX_ITER {
        if norm <= tol {
            return Ok((z, iter));
        }
        if iter == NEWTON_MAX_ITER {
            break;
        }
        let step = jac(&z)
            .lu()
            .solve(&(-&r))
            .ok_or(Error::NoConvergence {
                op,
                index,
                residual: norm,
            })?;
        let mut t = 1.0;
        loop {
            let trial = &z + &step * t;
            let r_trial = f(&trial);
            let n_trial = r_trial.norm();
            if n_trial < norm || t < 1e-10 {
                z = trial;
                r = r_trial;
                norm = n_trial;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::NoConvergence {
        op,
        index,
        residual: norm,
    })
}

fn forward_at(s: &dyn GeneratingFunction, x: &PhasePoint, index: i64) -> Result<MapStep> {
    if x.dim() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            found: x.dim(),
        });
    }
    if let Some(fk) = s.as_frenkel_kontorova() {
        let grad = fk.potential().eval(&x.q).grad;
        let p_next = &x.p + grad;
        let q_next = &x.q + &p_next;
        return Ok(MapStep {
            point: PhasePoint::new(p_next, q_next),
            newton_iterations: 0,
        });
    }
    implicit_forward_at(s, x, index)
}

fn implicit_forward_at(s: &dyn GeneratingFunction, x: &PhasePoint, index: i64) -> Result<MapStep> {
    let (q, p) = (&x.q, &x.p);
    let (q_next, iterations) = damped_newton(
        "dynamics::apply_map",
        index,
        q + p,
        residual_scale(x),
        |big_q| -s.d1(q, big_q) - p,
        |big_q| -s.d12(q, big_q),
    )?;
    let p_next = s.d2(q, &q_next);
    Ok(MapStep {
        point: PhasePoint::new(p_next, q_next),
        newton_iterations: iterations,
    })
}

fn inverse_at(s: &dyn GeneratingFunction, x: &PhasePoint, index: i64) -> Result<PhasePoint> {
    if x.dim() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            found: x.dim(),
        });
    }
    let (big_p, big_q) = (&x.p, &x.q);
    if let Some(fk) = s.as_frenkel_kontorova() {
        let q = big_q - big_p;
        let p = big_p - fk.potential().eval(&q).grad;
        return Ok(PhasePoint::new(p, q));
    }
    let (q, _) = damped_newton(
        "dynamics::apply_inverse",
        index,
        big_q - big_p,
        residual_scale(x),
        |q| s.d2(q, big_q) - big_p,
        |q| s.d21(q, big_q),
    )?;
    let p = -s.d1(&q, big_q);
    Ok(PhasePoint::new(p, q))
}

/// `T(p, q) = (P, Q)` with `p = -∂₁S(q, Q)` and `P = ∂₂S(q, Q)`.
pub fn apply_map(s: &dyn GeneratingFunction, x: &PhasePoint) -> Result<PhasePoint> {
    forward_at(s, x, 0).map(|step| step.point)
}

/// Like [`apply_map`], reporting the Newton iteration count.
pub fn apply_map_detailed(s: &dyn GeneratingFunction, x: &PhasePoint) -> Result<MapStep> {
    forward_at(s, x, 0)
}

/// Solves the implicit relations by Newton even when a closed form exists.
pub fn apply_map_implicit(s: &dyn GeneratingFunction, x: &PhasePoint) -> Result<MapStep> {
    implicit_forward_at(s, x, 0)
}

pub fn apply_inverse(s: &dyn GeneratingFunction, x: &PhasePoint) -> Result<PhasePoint> {
    inverse_at(s, x, 0)
}

/// Residual of the implicit relations `p = -∂₁S(q,Q)`, `P = ∂₂S(q,Q)`.
pub fn step_residual(s: &dyn GeneratingFunction, from: &PhasePoint, to: &PhasePoint) -> f64 {
    let r1 = (&from.p + s.d1(&from.q, &to.q)).amax();
    let r2 = (&to.p - s.d2(&from.q, &to.q)).amax();
    r1.max(r2)
}

/// Tangent map `DT(x)` as a `2d × 2d` matrix acting on `(dp, dq)`.
///
/// With `B = ∂₁₂S`, implicit differentiation gives
/// `dQ = -B⁻¹ dp - B⁻¹ ∂₁₁S dq` and `dP = ∂₂₁S dq + ∂₂₂S dQ`.
pub fn tangent_map(s: &dyn GeneratingFunction, x: &PhasePoint) -> Result<Matrix> {
    let image = apply_map(s, x)?;
    Ok(tangent_from_pair(s, &x.q, &image.q))
}

pub(crate) fn tangent_from_pair(s: &dyn GeneratingFunction, q: &Vector, q_next: &Vector) -> Matrix {
    let d = s.dim();
    let blocks = s.blocks(q, q_next);
    let b_inv = blocks
        .s12
        .clone()
        .try_inverse()
        .expect("twist condition makes ∂₁₂S invertible");
    let dq_dp = -&b_inv;
    let dq_dq = -&b_inv * &blocks.s11;
    let dp_dp = &blocks.s22 * &dq_dp;
    let dp_dq = &blocks.s21 + &blocks.s22 * &dq_dq;
    let mut m = Matrix::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&dp_dp);
    m.view_mut((0, d), (d, d)).copy_from(&dp_dq);
    m.view_mut((d, 0), (d, d)).copy_from(&dq_dp);
    m.view_mut((d, d), (d, d)).copy_from(&dq_dq);
    m
}

/// A finite orbit window `x_{start}, …, x_{start + len - 1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrbitSegment {
    start: i64,
    points: Vec<PhasePoint>,
}

impl OrbitSegment {
    pub fn new(start: i64, points: Vec<PhasePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("orbit segment needs at least one point".into()));
        }
        Ok(Self { start, points })
    }

    pub fn first_index(&self) -> i64 {
        self.start
    }

    pub fn last_index(&self) -> i64 {
        self.start + self.points.len() as i64 - 1
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn points(&self) -> &[PhasePoint] {
        &self.points
    }

    pub fn point(&self, n: i64) -> Option<&PhasePoint> {
        usize::try_from(n - self.start)
            .ok()
            .and_then(|i| self.points.get(i))
    }

    pub(crate) fn q(&self, n: i64) -> &Vector {
        &self.points[(n - self.start) as usize].q
    }

    pub fn configurations(&self) -> Vec<Vector> {
        self.points.iter().map(|x| x.q.clone()).collect()
    }

    /// Per-step residual of the implicit relations; entry `i` belongs to the
    /// step `x_{start+i} -> x_{start+i+1}`.
    pub fn evolution_residuals(&self, seq: &SequenceSpec) -> Vec<f64> {
        self.points
            .windows(2)
            .enumerate()
            .map(|(i, w)| step_residual(seq.entry(self.start + i as i64), &w[0], &w[1]))
            .collect()
    }

    /// Prepends `steps` backward iterates.
    pub fn extend_backward(&self, seq: &SequenceSpec, steps: usize) -> Result<OrbitSegment> {
        let mut back = Vec::with_capacity(steps + self.points.len());
        let mut x = self.points[0].clone();
        for j in 0..steps {
            let n = self.start - 1 - j as i64;
            x = inverse_at(seq.entry(n), &x, n)
                .map_err(|e| e.context(format!("dynamics::extend_backward at n={n}")))?;
            back.push(x.clone());
        }
        back.reverse();
        back.extend(self.points.iter().cloned());
        Ok(OrbitSegment {
            start: self.start - steps as i64,
            points: back,
        })
    }

    /// Appends `steps` forward iterates.
    pub fn extend_forward(&self, seq: &SequenceSpec, steps: usize) -> Result<OrbitSegment> {
        let mut points = self.points.clone();
        points.reserve(steps);
        let mut n = self.last_index();
        for _ in 0..steps {
            let next = forward_at(seq.entry(n), points.last().expect("non-empty"), n)
                .map_err(|e| e.context(format!("dynamics::extend_forward at n={n}")))?
                .point;
            points.push(next);
            n += 1;
        }
        Ok(OrbitSegment {
            start: self.start,
            points,
        })
    }

    /// Sub-window `first..=last`.
    pub fn window(&self, first: i64, last: i64) -> Result<OrbitSegment> {
        if first < self.start || last > self.last_index() || first > last {
            return Err(Error::OutOfRange {
                index: if first < self.start { first } else { last },
                first: self.start,
                last: self.last_index(),
            });
        }
        let lo = (first - self.start) as usize;
        let hi = (last - self.start) as usize;
        Ok(OrbitSegment {
            start: first,
            points: self.points[lo..=hi].to_vec(),
        })
    }

    /// CSV with columns `n, p_1..p_d, q_1..q_d, residual`, where `residual`
    /// is the implicit-relation residual of the step arriving at `x_n`
    /// (zero on the first row).
    pub fn to_csv(&self, seq: &SequenceSpec) -> String {
        let d = self.dim();
        let mut out = String::from("n");
        for i in 1..=d {
            let _ = write!(out, ",p_{i}");
        }
        for i in 1..=d {
            let _ = write!(out, ",q_{i}");
        }
        out.push_str(",residual\n");
        let residuals = self.evolution_residuals(seq);
        for (i, x) in self.points.iter().enumerate() {
            let _ = write!(out, "{}", self.start + i as i64);
            for v in x.p.iter().chain(x.q.iter()) {
                let _ = write!(out, ",{v:e}");
            }
            let r = if i == 0 { 0.0 } else { residuals[i - 1] };
            let _ = writeln!(out, ",{r:e}");
        }
        out
    }
}

/// `R_m^n x`, returned as the full segment between `min(m,n)` and `max(m,n)`
/// with `x` sitting at index `m`.
pub fn evolve(seq: &SequenceSpec, x: &PhasePoint, m: i64, n: i64) -> Result<OrbitSegment> {
    let span = m.abs_diff(n) as usize;
    if span > MAX_EVOLVE_HORIZON {
        return Err(Error::HorizonExceeded {
            requested: span,
            max: MAX_EVOLVE_HORIZON,
        });
    }
    if x.dim() != seq.dim() {
        return Err(Error::DimensionMismatch {
            expected: seq.dim(),
            found: x.dim(),
        });
    }
    let seed = OrbitSegment {
        start: m,
        points: vec![x.clone()],
    };
    if n >= m {
        seed.extend_forward(seq, span)
    } else {
        seed.extend_backward(seq, span)
    }
}

/// Norm of `∂₂S_{n-1}(q_{n-1}, q_n) + ∂₁S_n(q_n, q_{n+1})` at every interior
/// index of a configuration window starting at `n0`.
pub fn extremal_residual(seq: &SequenceSpec, q_trace: &[Vector], n0: i64) -> Vec<f64> {
    q_trace
        .windows(3)
        .enumerate()
        .map(|(i, w)| {
            let n = n0 + 1 + i as i64;
            (seq.entry(n - 1).d2(&w[0], &w[1]) + seq.entry(n).d1(&w[1], &w[2])).norm()
        })
        .collect()
}

/// Rebuilds the orbit of an extremal configuration via `p_n = -∂₁S_n(q_n, q_{n+1})`.
pub fn momentum_from_configuration(
    seq: &SequenceSpec,
    q_trace: &[Vector],
    n0: i64,
) -> Result<OrbitSegment> {
    if q_trace.len() < 2 {
        return Err(Error::Invalid(
            "configuration trace needs at least two points".into(),
        ));
    }
    for (i, &r) in extremal_residual(seq, q_trace, n0).iter().enumerate() {
        if !(r <= EXTREMAL_TOL) {
            return Err(Error::NotExtremal {
                index: n0 + 1 + i as i64,
                residual: r,
                tolerance: EXTREMAL_TOL,
            });
        }
    }
    let last = q_trace.len() - 1;
    let mut points: Vec<PhasePoint> = q_trace
        .windows(2)
        .enumerate()
        .map(|(i, w)| PhasePoint::new(-seq.entry(n0 + i as i64).d1(&w[0], &w[1]), w[0].clone()))
        .collect();
    let p_last = seq
        .entry(n0 + last as i64 - 1)
        .d2(&q_trace[last - 1], &q_trace[last]);
    points.push(PhasePoint::new(p_last, q_trace[last].clone()));
    OrbitSegment::new(n0, points)
}
