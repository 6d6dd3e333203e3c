//! Generating functions `S_n(q, Q)` of symplectic twist maps.
//!
//! A generating function is `Z^d`-periodic under the diagonal shift
//! `(q, Q) -> (q + e, Q + e)` and satisfies the uniform twist condition
//! `ξᵀ ∂₁₂S ξ ≤ -K |ξ|²`. The Frenkel–Kontorova family
//! `S(q, Q) = ½|Q - q|² + V(q)` with a trigonometric-polynomial potential is
//! built in; anything else implements [`GeneratingFunction`] directly.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_eigenvalue, Matrix, Vector};

/// Tolerance for the sampled twist check.
pub const TWIST_TOL: f64 = 1e-10;
/// Tolerance for the sampled periodicity check.
pub const PERIODICITY_TOL: f64 = 1e-9;

/// One term `c cos(2π m·q) + s sin(2π m·q)` of a potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub freq: Vec<i64>,
    pub cos: f64,
    pub sin: f64,
}

/// `V(q) = offset + Σ_m [c_m cos(2π m·q) + s_m sin(2π m·q)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    dim: usize,
    terms: Vec<FourierTerm>,
    offset: f64,
}

/// Value, gradient and Hessian of a potential at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialValue {
    pub value: f64,
    pub grad: Vector,
    pub hess: Matrix,
}

impl PotentialSpec {
    pub fn new(dim: usize, terms: Vec<FourierTerm>, offset: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("potential dimension must be positive".into()));
        }
        for (i, term) in terms.iter().enumerate() {
            if term.freq.len() != dim {
                return Err(Error::Invalid(format!(
                    "term {i}: frequency vector has length {}, expected {dim}",
                    term.freq.len()
                )));
            }
            if term.freq.iter().all(|&m| m == 0) {
                return Err(Error::Invalid(format!("term {i}: zero frequency vector")));
            }
            if !(term.cos.is_finite() && term.sin.is_finite()) {
                return Err(Error::Invalid(format!("term {i}: non-finite coefficient")));
            }
            if terms[..i].iter().any(|t| t.freq == term.freq) {
                return Err(Error::Invalid(format!(
                    "term {i}: duplicate frequency {:?}",
                    term.freq
                )));
            }
        }
        if !offset.is_finite() {
            return Err(Error::Invalid("non-finite potential offset".into()));
        }
        Ok(Self { dim, terms, offset })
    }

    /// The zero potential (free map).
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: Vec::new(),
            offset: 0.0,
        }
    }

    /// Standard-map potential `V(q) = -(k/4π²) cos(2πq)` in one dimension,
    /// so that `V''(q) = k cos(2πq)`.
    pub fn chirikov(k: f64) -> Self {
        Self {
            dim: 1,
            terms: vec![FourierTerm {
                freq: vec![1],
                cos: -k / (4.0 * PI * PI),
                sin: 0.0,
            }],
            offset: 0.0,
        }
    }

    /// Sum of per-axis standard-map kicks `-(k_i/4π²) cos(2π q_i)`.
    pub fn separable_chirikov(strengths: &[f64]) -> Self {
        let dim = strengths.len();
        let terms = strengths
            .iter()
            .enumerate()
            .filter(|(_, k)| **k != 0.0)
            .map(|(i, k)| {
                let mut freq = vec![0; dim];
                freq[i] = 1;
                FourierTerm {
                    freq,
                    cos: -k / (4.0 * PI * PI),
                    sin: 0.0,
                }
            })
            .collect();
        Self {
            dim,
            terms,
            offset: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[FourierTerm] {
        &self.terms
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// True when every Fourier coefficient vanishes.
    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.cos == 0.0 && t.sin == 0.0)
    }

    /// Largest |m_i| over all terms and axes.
    pub fn max_frequency(&self) -> i64 {
        self.terms
            .iter()
            .flat_map(|t| t.freq.iter().map(|m| m.abs()))
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, q: &Vector) -> PotentialValue {
        let d = self.dim;
        let mut value = self.offset;
        let mut grad = Vector::zeros(d);
        let mut hess = Matrix::zeros(d, d);
        let two_pi = 2.0 * PI;
        for term in &self.terms {
            let phase: f64 = term
                .freq
                .iter()
                .zip(q.iter())
                .map(|(&m, &x)| m as f64 * x)
                .sum::<f64>()
                * two_pi;
            let (s, c) = phase.sin_cos();
            value += term.cos * c + term.sin * s;
            let first = two_pi * (-term.cos * s + term.sin * c);
            let second = two_pi * two_pi * (-term.cos * c - term.sin * s);
            for i in 0..d {
                let mi = term.freq[i] as f64;
                grad[i] += first * mi;
                for j in 0..d {
                    hess[(i, j)] += second * mi * term.freq[j] as f64;
                }
            }
        }
        PotentialValue { value, grad, hess }
    }

    /// `ΔV(q)`, the trace of the Hessian.
    pub fn laplacian(&self, q: &Vector) -> f64 {
        self.eval(q).hess.trace()
    }
}

/// Free-standing form of [`PotentialSpec::eval`].
pub fn potential_eval(spec: &PotentialSpec, q: &Vector) -> PotentialValue {
    spec.eval(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    FrenkelKontorova,
    Custom,
}

/// The four second-derivative blocks of `S` at `(q, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondDerivatives {
    pub s11: Matrix,
    pub s12: Matrix,
    pub s21: Matrix,
    pub s22: Matrix,
}

/// A generating function `S(q, Q)` on `R^d × R^d`.
///
/// `d12` is the matrix `∂²S/∂q_i∂Q_j`; `d21` is `∂²S/∂Q_i∂q_j` and must equal
/// its transpose. Implementations must be pure.
pub trait GeneratingFunction: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, q: &Vector, q_next: &Vector) -> f64;
    fn d1(&self, q: &Vector, q_next: &Vector) -> Vector;
    fn d2(&self, q: &Vector, q_next: &Vector) -> Vector;
    fn d11(&self, q: &Vector, q_next: &Vector) -> Matrix;
    fn d12(&self, q: &Vector, q_next: &Vector) -> Matrix;
    fn d21(&self, q: &Vector, q_next: &Vector) -> Matrix {
        self.d12(q, q_next).transpose()
    }
    fn d22(&self, q: &Vector, q_next: &Vector) -> Matrix;

    /// Declared twist constant `K > 0`.
    fn twist_constant(&self) -> f64;

    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Custom
    }

    fn as_frenkel_kontorova(&self) -> Option<&FrenkelKontorova> {
        None
    }

    fn blocks(&self, q: &Vector, q_next: &Vector) -> SecondDerivatives {
        SecondDerivatives {
            s11: self.d11(q, q_next),
            s12: self.d12(q, q_next),
            s21: self.d21(q, q_next),
            s22: self.d22(q, q_next),
        }
    }
}

pub type SharedGenerator = Arc<dyn GeneratingFunction>;

/// `S(q, Q) = ½|Q - q|² + V(q)`, generating the map
/// `(p, q) -> (p + ∇V(q), p + q + ∇V(q))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrenkelKontorova {
    potential: PotentialSpec,
}

impl FrenkelKontorova {
    pub fn new(potential: PotentialSpec) -> Self {
        Self { potential }
    }

    pub fn free(dim: usize) -> Self {
        Self::new(PotentialSpec::zero(dim))
    }

    pub fn potential(&self) -> &PotentialSpec {
        &self.potential
    }
}

pub fn fk_generating(spec: PotentialSpec) -> FrenkelKontorova {
    FrenkelKontorova::new(spec)
}

impl GeneratingFunction for FrenkelKontorova {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn value(&self, q: &Vector, q_next: &Vector) -> f64 {
        0.5 * (q_next - q).norm_squared() + self.potential.eval(q).value
    }

    fn d1(&self, q: &Vector, q_next: &Vector) -> Vector {
        q - q_next + self.potential.eval(q).grad
    }

    fn d2(&self, q: &Vector, q_next: &Vector) -> Vector {
        q_next - q
    }

    fn d11(&self, q: &Vector, _q_next: &Vector) -> Matrix {
        Matrix::identity(self.dim(), self.dim()) + self.potential.eval(q).hess
    }

    fn d12(&self, _q: &Vector, _q_next: &Vector) -> Matrix {
        -Matrix::identity(self.dim(), self.dim())
    }

    fn d21(&self, _q: &Vector, _q_next: &Vector) -> Matrix {
        -Matrix::identity(self.dim(), self.dim())
    }

    fn d22(&self, _q: &Vector, _q_next: &Vector) -> Matrix {
        Matrix::identity(self.dim(), self.dim())
    }

    fn twist_constant(&self) -> f64 {
        1.0
    }

    fn kind(&self) -> GeneratorKind {
        GeneratorKind::FrenkelKontorova
    }

    fn as_frenkel_kontorova(&self) -> Option<&FrenkelKontorova> {
        Some(self)
    }
}

fn sample_pair(rng: &mut ChaCha8Rng, d: usize) -> (Vector, Vector) {
    let q = Vector::from_fn(d, |_, _| rng.random::<f64>());
    let q_next = Vector::from_fn(d, |i, _| q[i] + rng.random_range(-2.0..2.0));
    (q, q_next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwistCheck {
    pub ok: bool,
    /// Max over samples of `λ_max(sym ∂₁₂S) + K`; the twist holds where it is ≤ 0.
    pub worst_margin: f64,
}

/// Samples `q ∈ [0,1)^d`, `Q ∈ q + [-2,2)^d` and checks the uniform twist
/// condition against the declared constant.
pub fn check_twist(s: &dyn GeneratingFunction, sample_count: usize, seed: u64) -> TwistCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = s.twist_constant();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..sample_count.max(1) {
        let (q, q_next) = sample_pair(&mut rng, s.dim());
        worst = worst.max(max_eigenvalue(&s.d12(&q, &q_next)) + k);
    }
    TwistCheck {
        ok: worst <= TWIST_TOL,
        worst_margin: worst,
    }
}

/// Samples `(q, Q, e)` with `e ∈ {-1,0,1}^d` and checks `S(q+e, Q+e) = S(q, Q)`.
pub fn check_periodicity(s: &dyn GeneratingFunction, sample_count: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = s.dim();
    (0..sample_count.max(1)).all(|_| {
        let (q, q_next) = sample_pair(&mut rng, d);
        let e = Vector::from_fn(d, |_, _| rng.random_range(-1_i32..=1) as f64);
        let shifted = s.value(&(&q + &e), &(&q_next + &e));
        (shifted - s.value(&q, &q_next)).abs() <= PERIODICITY_TOL
    })
}

/// How the sequence `S_n` extends over all `n ∈ Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    Periodic { period: usize },
    CompactSupport { n_min: i64, n_max: i64 },
}

/// Range of indices over which the sequence is the free map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeHistory {
    /// Every entry is free.
    Everywhere,
    /// Entries `n < first_non_free` are free.
    Before(i64),
    /// No free backward tail.
    Never,
}

#[derive(Debug, Clone)]
pub struct SequenceSpec {
    dim: usize,
    mode: SequenceMode,
    entries: Vec<SharedGenerator>,
    free: SharedGenerator,
}

impl SequenceSpec {
    /// `entry(n) = entries[n mod p]`.
    pub fn periodic(entries: Vec<SharedGenerator>) -> Result<Self> {
        let dim = Self::common_dim(&entries)?;
        Ok(Self {
            dim,
            mode: SequenceMode::Periodic {
                period: entries.len(),
            },
            entries,
            free: Arc::new(FrenkelKontorova::free(dim)),
        })
    }

    /// `entry(n) = entries[n - n_min]` on the support, the free map elsewhere.
    pub fn compact_support(n_min: i64, entries: Vec<SharedGenerator>) -> Result<Self> {
        let dim = Self::common_dim(&entries)?;
        let n_max = n_min + entries.len() as i64 - 1;
        Ok(Self {
            dim,
            mode: SequenceMode::CompactSupport { n_min, n_max },
            entries,
            free: Arc::new(FrenkelKontorova::free(dim)),
        })
    }

    /// Autonomous sequence `S_n = s` for all `n`.
    pub fn constant(s: SharedGenerator) -> Self {
        Self::periodic(vec![s]).expect("single entry is non-empty")
    }

    /// Periodic Frenkel–Kontorova sequence built from potentials.
    pub fn fk_periodic(potentials: Vec<PotentialSpec>) -> Result<Self> {
        Self::periodic(
            potentials
                .into_iter()
                .map(|v| Arc::new(FrenkelKontorova::new(v)) as SharedGenerator)
                .collect(),
        )
    }

    pub fn fk_compact_support(n_min: i64, potentials: Vec<PotentialSpec>) -> Result<Self> {
        Self::compact_support(
            n_min,
            potentials
                .into_iter()
                .map(|v| Arc::new(FrenkelKontorova::new(v)) as SharedGenerator)
                .collect(),
        )
    }

    fn common_dim(entries: &[SharedGenerator]) -> Result<usize> {
        let first = entries
            .first()
            .ok_or_else(|| Error::Invalid("sequence needs at least one entry".into()))?;
        let dim = first.dim();
        if dim == 0 {
            return Err(Error::Invalid("dimension must be positive".into()));
        }
        for e in entries {
            if e.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: e.dim(),
                });
            }
            if !(e.twist_constant() > 0.0) {
                return Err(Error::Invalid("twist constant must be positive".into()));
            }
        }
        Ok(dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> SequenceMode {
        self.mode
    }

    pub fn entries(&self) -> &[SharedGenerator] {
        &self.entries
    }

    pub fn entry(&self, n: i64) -> &dyn GeneratingFunction {
        match self.mode {
            SequenceMode::Periodic { period } => {
                self.entries[n.rem_euclid(period as i64) as usize].as_ref()
            }
            SequenceMode::CompactSupport { n_min, n_max } => {
                if n < n_min || n > n_max {
                    self.free.as_ref()
                } else {
                    self.entries[(n - n_min) as usize].as_ref()
                }
            }
        }
    }

    /// Potential of entry `n` when that entry is Frenkel–Kontorova.
    pub fn potential(&self, n: i64) -> Option<&PotentialSpec> {
        self.entry(n).as_frenkel_kontorova().map(|fk| fk.potential())
    }

    pub fn is_frenkel_kontorova(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.kind() == GeneratorKind::FrenkelKontorova && e.as_frenkel_kontorova().is_some())
    }

    /// Entry `n` is Frenkel–Kontorova with a constant potential.
    pub fn is_free(&self, n: i64) -> bool {
        self.potential(n).is_some_and(|v| v.is_constant())
    }

    pub fn free_history(&self) -> FreeHistory {
        match self.mode {
            SequenceMode::Periodic { period } => {
                if (0..period as i64).all(|n| self.is_free(n)) {
                    FreeHistory::Everywhere
                } else {
                    FreeHistory::Never
                }
            }
            SequenceMode::CompactSupport { n_min, n_max } => {
                match (n_min..=n_max).find(|&n| !self.is_free(n)) {
                    Some(first) => FreeHistory::Before(first),
                    None => FreeHistory::Everywhere,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    #[test]
    fn zero_potential_is_zero() {
        let out = potential_eval(&PotentialSpec::zero(1), &v(&[0.3]));
        assert_eq!(out.value, 0.0);
        assert_eq!(out.grad[0], 0.0);
        assert_eq!(out.hess[(0, 0)], 0.0);
    }

    #[test]
    fn chirikov_potential_values() {
        let spec = PotentialSpec::chirikov(1.0);
        let at0 = spec.eval(&v(&[0.0]));
        assert!((at0.value + 1.0 / (4.0 * PI * PI)).abs() < 1e-15);
        assert!(at0.grad[0].abs() < 1e-15);
        assert!((at0.hess[(0, 0)] - 1.0).abs() < 1e-14);

        let at_quarter = spec.eval(&v(&[0.25]));
        assert!(at_quarter.value.abs() < 1e-15);
        assert!((at_quarter.grad[0] - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!(at_quarter.hess[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn potential_validation() {
        let dup = vec![
            FourierTerm { freq: vec![1], cos: 1.0, sin: 0.0 },
            FourierTerm { freq: vec![1], cos: 0.0, sin: 1.0 },
        ];
        assert!(PotentialSpec::new(1, dup, 0.0).is_err());
        let zero = vec![FourierTerm { freq: vec![0, 0], cos: 1.0, sin: 0.0 }];
        assert!(PotentialSpec::new(2, zero, 0.0).is_err());
        let wrong = vec![FourierTerm { freq: vec![1], cos: 1.0, sin: 0.0 }];
        assert!(PotentialSpec::new(2, wrong, 0.0).is_err());
    }

    #[test]
    fn fk_blocks() {
        let free = fk_generating(PotentialSpec::zero(1));
        let (q, qn) = (v(&[0.2]), v(&[0.5]));
        assert!((free.value(&q, &qn) - 0.045).abs() < 1e-15);
        assert_eq!(free.d11(&q, &qn)[(0, 0)], 1.0);

        let kicked = fk_generating(PotentialSpec::chirikov(1.0));
        let b = kicked.blocks(&v(&[0.0]), &v(&[0.7]));
        assert!((b.s11[(0, 0)] - 2.0).abs() < 1e-14);
        assert_eq!(b.s12[(0, 0)], -1.0);
        assert_eq!(b.s21[(0, 0)], -1.0);
        assert_eq!(b.s22[(0, 0)], 1.0);
        assert_eq!(kicked.twist_constant(), 1.0);
    }

    #[derive(Debug)]
    struct Bilinear;
    impl GeneratingFunction for Bilinear {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, q: &Vector, qn: &Vector) -> f64 {
            q[0] * qn[0]
        }
        fn d1(&self, _q: &Vector, qn: &Vector) -> Vector {
            qn.clone()
        }
        fn d2(&self, q: &Vector, _qn: &Vector) -> Vector {
            q.clone()
        }
        fn d11(&self, _q: &Vector, _qn: &Vector) -> Matrix {
            Matrix::zeros(1, 1)
        }
        fn d12(&self, _q: &Vector, _qn: &Vector) -> Matrix {
            Matrix::identity(1, 1)
        }
        fn d22(&self, _q: &Vector, _qn: &Vector) -> Matrix {
            Matrix::zeros(1, 1)
        }
        fn twist_constant(&self) -> f64 {
            1.0
        }
    }

    #[derive(Debug)]
    struct Diagonal(Vec<f64>);
    impl GeneratingFunction for Diagonal {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn value(&self, q: &Vector, qn: &Vector) -> f64 {
            let dq = qn - q;
            0.5 * self.0.iter().zip(dq.iter()).map(|(c, x)| c * x * x).sum::<f64>()
        }
        fn d1(&self, q: &Vector, qn: &Vector) -> Vector {
            -Matrix::from_diagonal(&Vector::from_vec(self.0.clone())) * (qn - q)
        }
        fn d2(&self, q: &Vector, qn: &Vector) -> Vector {
            Matrix::from_diagonal(&Vector::from_vec(self.0.clone())) * (qn - q)
        }
        fn d11(&self, _q: &Vector, _qn: &Vector) -> Matrix {
            Matrix::from_diagonal(&Vector::from_vec(self.0.clone()))
        }
        fn d12(&self, _q: &Vector, _qn: &Vector) -> Matrix {
            -Matrix::from_diagonal(&Vector::from_vec(self.0.clone()))
        }
        fn d22(&self, _q: &Vector, _qn: &Vector) -> Matrix {
            Matrix::from_diagonal(&Vector::from_vec(self.0.clone()))
        }
        fn twist_constant(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn twist_checks() {
        let fk = fk_generating(PotentialSpec::chirikov(1.3));
        let report = check_twist(&fk, 100, 7);
        assert!(report.ok);
        assert_eq!(report.worst_margin, 0.0);

        assert!(check_twist(&Diagonal(vec![2.0, 1.0]), 50, 1).ok);
        assert!(!check_twist(&Diagonal(vec![0.0]), 50, 1).ok);
        assert!(!check_twist(&Bilinear, 10, 1).ok);
    }

    #[test]
    fn periodicity_checks() {
        assert!(check_periodicity(&fk_generating(PotentialSpec::chirikov(0.8)), 200, 3));
        assert!(!check_periodicity(&Bilinear, 200, 3));
        assert!(check_periodicity(&Diagonal(vec![1.0]), 200, 3));
    }

    #[test]
    fn sequence_indexing() {
        let seq = SequenceSpec::fk_periodic(vec![
            PotentialSpec::chirikov(1.0),
            PotentialSpec::zero(1),
        ])
        .unwrap();
        assert!(!seq.is_free(0) && seq.is_free(1) && seq.is_free(-1) && !seq.is_free(-2));
        assert_eq!(seq.free_history(), FreeHistory::Never);

        let bump = SequenceSpec::fk_compact_support(
            3,
            vec![PotentialSpec::zero(1), PotentialSpec::chirikov(0.5)],
        )
        .unwrap();
        assert_eq!(bump.mode(), SequenceMode::CompactSupport { n_min: 3, n_max: 4 });
        assert!(bump.is_free(-100) && bump.is_free(3) && !bump.is_free(4) && bump.is_free(5));
        assert_eq!(bump.free_history(), FreeHistory::Before(4));

        let free = SequenceSpec::fk_periodic(vec![PotentialSpec::zero(2)]).unwrap();
        assert_eq!(free.free_history(), FreeHistory::Everywhere);
    }
}
