//! Small dense helpers on top of nalgebra for the d×d blocks used everywhere.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Eigenvalue magnitude below which a form is counted as degenerate.
pub const SIGNATURE_TOL: f64 = 1e-9;

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &Matrix) -> f64 {
    max_abs(&(m - m.transpose()))
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut values: Vec<f64> = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    values.sort_by(f64::total_cmp);
    values
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::INFINITY)
}

pub fn max_eigenvalue(m: &Matrix) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(f64::NEG_INFINITY)
}

pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let mut values: Vec<f64> = m.singular_values().iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

pub fn sigma_min(m: &Matrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Inverse of a symmetric matrix through its eigendecomposition.
///
/// Returns the inverse together with the spectral condition number
/// `max|λ| / min|λ|` (infinite when a zero eigenvalue is hit).
pub fn sym_inverse(m: &Matrix) -> (Matrix, f64) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l.abs());
        hi = hi.max(l.abs());
    }
    if lo == 0.0 {
        let n = m.nrows();
        return (Matrix::from_element(n, n, f64::NAN), f64::INFINITY);
    }
    let inv_diag = Matrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    (symmetrize(&inv), hi / lo)
}

/// Orthonormal basis (as columns) of the numerical null space of `m`.
pub fn null_space(m: &Matrix, tol: f64) -> Vec<Vector> {
    let cols = m.ncols();
    // Thin SVD only returns min(rows, cols) right vectors; pad to square.
    let padded = if m.nrows() < cols {
        let mut p = Matrix::zeros(cols, cols);
        p.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    svd.singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= tol)
        .map(|(i, _)| v_t.row(i).transpose())
        .collect()
}

/// Inertia of a symmetric form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Signature {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

impl Signature {
    pub fn of(m: &Matrix) -> Self {
        Self::from_eigenvalues(&sym_eigenvalues(m), SIGNATURE_TOL)
    }

    pub fn from_eigenvalues(values: &[f64], tol: f64) -> Self {
        let mut sig = Signature {
            positive: 0,
            negative: 0,
            zero: 0,
        };
        for &v in values {
            if v > tol {
                sig.positive += 1;
            } else if v < -tol {
                sig.negative += 1;
            } else {
                sig.zero += 1;
            }
        }
        sig
    }

    pub fn is_degenerate(&self) -> bool {
        self.zero > 0
    }
}

impl std::fmt::Display for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}+,{}-,{}0)", self.positive, self.negative, self.zero)
    }
}

/// Standard symplectic matrix for the (dp, dq) ordering: `[[0, I], [-I, 0]]`.
pub fn symplectic_j(d: usize) -> Matrix {
    let mut j = Matrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        j[(i, d + i)] = 1.0;
        j[(d + i, i)] = -1.0;
    }
    j
}
