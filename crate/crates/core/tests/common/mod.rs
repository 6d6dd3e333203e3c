//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's numerical routines except for constructing inputs.
#![allow(dead_code)]

use std::f64::consts::PI;

use green_bundle::generating::{FourierTerm, PotentialSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random trigonometric potential with `terms` distinct frequencies in
/// `[-max_freq, max_freq]^d` and coefficients in `[-amp, amp]`.
pub fn random_potential<R: Rng>(rng: &mut R, dim: usize, terms: usize, max_freq: i64, amp: f64) -> PotentialSpec {
    let mut list: Vec<FourierTerm> = Vec::new();
    while list.len() < terms {
        let freq: Vec<i64> = (0..dim).map(|_| rng.random_range(-max_freq..=max_freq)).collect();
        if freq.iter().all(|&m| m == 0) || list.iter().any(|t| t.freq == freq) {
            continue;
        }
        list.push(FourierTerm {
            freq,
            cos: rng.random_range(-amp..=amp),
            sin: rng.random_range(-amp..=amp),
        });
    }
    PotentialSpec::new(dim, list, 0.0).unwrap()
}

/// Direct evaluation of `Σ c cos(2π m·q) + s sin(2π m·q)` and its derivatives.
pub struct Direct<'a>(pub &'a PotentialSpec);

impl Direct<'_> {
    pub fn value(&self, q: &[f64]) -> f64 {
        self.0.offset()
            + self
                .0
                .terms()
                .iter()
                .map(|t| {
                    let phase = 2.0 * PI * dot(&t.freq, q);
                    t.cos * phase.cos() + t.sin * phase.sin()
                })
                .sum::<f64>()
    }

    pub fn grad(&self, q: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; q.len()];
        for t in self.0.terms() {
            let phase = 2.0 * PI * dot(&t.freq, q);
            let f = 2.0 * PI * (-t.cos * phase.sin() + t.sin * phase.cos());
            for (gi, &m) in g.iter_mut().zip(&t.freq) {
                *gi += f * m as f64;
            }
        }
        g
    }

    pub fn hess(&self, q: &[f64]) -> DMatrix<f64> {
        let d = q.len();
        let mut h = DMatrix::zeros(d, d);
        for t in self.0.terms() {
            let phase = 2.0 * PI * dot(&t.freq, q);
            let f = -4.0 * PI * PI * (t.cos * phase.cos() + t.sin * phase.sin());
            for i in 0..d {
                for j in 0..d {
                    h[(i, j)] += f * (t.freq[i] * t.freq[j]) as f64;
                }
            }
        }
        h
    }
}

fn dot(m: &[i64], q: &[f64]) -> f64 {
    m.iter().zip(q).map(|(&a, b)| a as f64 * b).sum()
}

/// Closed-form Frenkel–Kontorova step `(p, q) -> (p + ∇V(q), q + p + ∇V(q))`.
pub fn fk_step(v: &PotentialSpec, p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let g = Direct(v).grad(q);
    let pn: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a + b).collect();
    let qn: Vec<f64> = q.iter().zip(&pn).map(|(a, b)| a + b).collect();
    (pn, qn)
}

/// Inverse step `(P, Q) -> (P - ∇V(Q - P), Q - P)`.
pub fn fk_step_back(v: &PotentialSpec, p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let qp: Vec<f64> = q.iter().zip(p).map(|(a, b)| a - b).collect();
    let g = Direct(v).grad(&qp);
    let pp: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a - b).collect();
    (pp, qp)
}

/// Second variation of the FK action on interior indices with Hessians `h`:
/// diagonal blocks `2I + h_n`, off-diagonal blocks `-I`.
pub fn fk_dense_second_variation(h: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = h[0].nrows();
    let m = h.len();
    let mut out = DMatrix::zeros(m * d, m * d);
    for (i, hi) in h.iter().enumerate() {
        let mut blk = hi.clone();
        for r in 0..d {
            blk[(r, r)] += 2.0;
        }
        out.view_mut((i * d, i * d), (d, d)).copy_from(&blk);
        if i + 1 < m {
            for r in 0..d {
                out[(i * d + r, (i + 1) * d + r)] = -1.0;
                out[((i + 1) * d + r, i * d + r)] = -1.0;
            }
        }
    }
    out
}

/// Block pivots `L_ii L_iiᵀ` from a dense Cholesky factorization.
pub fn cholesky_block_pivots(m: &DMatrix<f64>, d: usize) -> Option<Vec<DMatrix<f64>>> {
    let l = m.clone().cholesky()?.l();
    Some(
        (0..m.nrows() / d)
            .map(|i| {
                let blk = l.view((i * d, i * d), (d, d)).into_owned();
                &blk * blk.transpose()
            })
            .collect(),
    )
}

/// Scalar Jacobi field of `ξ_{n+1} = (2 + c_n) ξ_n - ξ_{n-1}`, `ξ_0 = 0`, `ξ_1 = 1`.
pub fn scalar_jacobi(c: &[f64]) -> Vec<f64> {
    let mut xi = vec![0.0, 1.0];
    for n in 1..c.len() {
        let next = (2.0 + c[n]) * xi[n] - xi[n - 1];
        xi.push(next);
    }
    xi
}

pub fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}
