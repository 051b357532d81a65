//! Dense kernels shared by the statevector, operator and MERA code.
//!
//! Every index space here is a register of qubits with qubit 0 as the most
//! significant bit of the flat index. An operator on `k` qubits stored
//! row-major is treated as a register of `2k` qubits: the first `k` address
//! rows, the last `k` address columns.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn bit_of(n_qubits: usize, qubit: usize) -> usize {
    1usize << (n_qubits - 1 - qubit)
}

/// Flat-index offsets for every local basis state of `targets`, with
/// `targets[0]` as the most significant local bit.
pub fn local_offsets(n_qubits: usize, targets: &[usize]) -> Vec<usize> {
    let k = targets.len();
    (0..1usize << k)
        .map(|m| {
            targets
                .iter()
                .enumerate()
                .filter(|(t, _)| (m >> (k - 1 - t)) & 1 == 1)
                .map(|(_, &q)| bit_of(n_qubits, q))
                .sum()
        })
        .collect()
}

fn target_mask(n_qubits: usize, targets: &[usize]) -> usize {
    targets.iter().map(|&q| bit_of(n_qubits, q)).sum()
}

/// Apply `mat` (dimension `2^targets.len()`) to the listed qubits of `amps`.
pub fn apply_block(amps: &mut [C64], n_qubits: usize, targets: &[usize], mat: &DMatrix<C64>) {
    let dim = 1usize << targets.len();
    debug_assert_eq!(amps.len(), 1usize << n_qubits);
    debug_assert_eq!(mat.nrows(), dim);
    let offsets = local_offsets(n_qubits, targets);
    let mask = target_mask(n_qubits, targets);
    let mut gathered = vec![ZERO; dim];
    for base in 0..amps.len() {
        if base & mask != 0 {
            continue;
        }
        for (g, off) in gathered.iter_mut().zip(&offsets) {
            *g = amps[base + off];
        }
        for (r, off) in offsets.iter().enumerate() {
            let mut acc = ZERO;
            for (c, g) in gathered.iter().enumerate() {
                acc += mat[(r, c)] * g;
            }
            amps[base + off] = acc;
        }
    }
}

/// `Σ_rest a[i, rest] · conj(b[j, rest])` over the qubits outside `targets`.
pub fn partial_outer(a: &[C64], b: &[C64], n_qubits: usize, targets: &[usize]) -> DMatrix<C64> {
    let dim = 1usize << targets.len();
    let offsets = local_offsets(n_qubits, targets);
    let mask = target_mask(n_qubits, targets);
    let mut out = DMatrix::from_element(dim, dim, ZERO);
    for base in 0..a.len() {
        if base & mask != 0 {
            continue;
        }
        for (i, oi) in offsets.iter().enumerate() {
            let ai = a[base + oi];
            if ai == ZERO {
                continue;
            }
            for (j, oj) in offsets.iter().enumerate() {
                out[(i, j)] += ai * b[base + oj].conj();
            }
        }
    }
    out
}

pub fn dagger(m: &DMatrix<C64>) -> DMatrix<C64> {
    m.adjoint()
}

pub fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    a.kronecker(b)
}

pub fn identity(dim: usize) -> DMatrix<C64> {
    DMatrix::identity(dim, dim)
}

pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `max |A - A†|`.
pub fn hermiticity_residual(m: &DMatrix<C64>) -> f64 {
    max_abs(&(m - m.adjoint()))
}

/// `max |X†X - I|`.
pub fn isometry_residual(m: &DMatrix<C64>) -> f64 {
    max_abs(&(m.adjoint() * m - identity(m.ncols())))
}

/// Frobenius inner product `⟨a, b⟩ = Tr[a† b]`.
pub fn inner(a: &DMatrix<C64>, b: &DMatrix<C64>) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

pub fn vdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Pairwise (cascade) summation in slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Eigenvalues of a Hermitian matrix in ascending order.
pub fn hermitian_eigenvalues(m: &DMatrix<C64>) -> Vec<f64> {
    let mut vals: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    vals
}

/// Lowest eigenpair of a Hermitian matrix.
pub fn hermitian_lowest(m: &DMatrix<C64>) -> (f64, Vec<C64>) {
    let eig = SymmetricEigen::new(m.clone());
    let (idx, &val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite eigenvalues"))
        .expect("non-empty matrix");
    let v: Vec<C64> = eig.eigenvectors.column(idx).iter().copied().collect();
    (val, v)
}

/// Lowest eigenpair of a Hermitian operator given only its action on vectors.
///
/// Lanczos with full reorthogonalization and explicit restarts from the
/// current Ritz vector. Returns once `‖A v − θ v‖ ≤ tol`.
pub fn lanczos_lowest<F>(dim: usize, apply: F, tol: f64, start: &[C64]) -> (f64, Vec<C64>)
where
    F: Fn(&[C64]) -> Vec<C64>,
{
    let max_krylov = dim.min(300);
    let mut start: Vec<C64> = start.to_vec();
    let nrm = norm_sqr(&start).sqrt();
    start.iter_mut().for_each(|z| *z /= nrm);
    let mut best = (f64::INFINITY, start.clone());

    for _restart in 0..50 {
        let mut basis: Vec<Vec<C64>> = vec![start.clone()];
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        loop {
            let j = basis.len() - 1;
            let mut w = apply(&basis[j]);
            let alpha = vdot(&basis[j], &w).re;
            alphas.push(alpha);
            // two passes of classical Gram-Schmidt against the whole basis
            for _ in 0..2 {
                for b in &basis {
                    let c = vdot(b, &w);
                    w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
            }
            let beta = norm_sqr(&w).sqrt();
            let m = alphas.len();
            let check = m == max_krylov || beta < 1e-14 || m % 10 == 0;
            if check {
                let t = DMatrix::from_fn(m, m, |r, c| {
                    if r == c {
                        alphas[r]
                    } else if r + 1 == c {
                        betas[r]
                    } else if c + 1 == r {
                        betas[c]
                    } else {
                        0.0
                    }
                });
                let eig = SymmetricEigen::new(t);
                let (idx, _) = eig
                    .eigenvalues
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .expect("non-empty");
                let s: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
                let residual = (beta * s[m - 1]).abs();
                if residual <= tol * 0.1 || beta < 1e-14 || m == max_krylov {
                    let mut v = vec![ZERO; dim];
                    for (coef, b) in s.iter().zip(&basis) {
                        v.iter_mut().zip(b).for_each(|(x, y)| *x += y * *coef);
                    }
                    let nrm = norm_sqr(&v).sqrt();
                    v.iter_mut().for_each(|z| *z /= nrm);
                    let av = apply(&v);
                    let theta_v = vdot(&v, &av).re;
                    let true_res = av
                        .iter()
                        .zip(&v)
                        .map(|(a, x)| (a - x * theta_v).norm_sqr())
                        .sum::<f64>()
                        .sqrt();
                    if theta_v < best.0 || true_res <= tol {
                        best = (theta_v, v.clone());
                    }
                    if true_res <= tol {
                        return best;
                    }
                    start = v;
                    break;
                }
            }
            betas.push(beta);
            basis.push(w.into_iter().map(|z| z / beta).collect());
        }
    }
    best
}

/// Row-major serialized form of a complex matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl From<&DMatrix<C64>> for MatrixRecord {
    fn from(m: &DMatrix<C64>) -> Self {
        let (rows, cols) = m.shape();
        let flat: Vec<C64> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|rc| m[rc]).collect();
        Self {
            rows,
            cols,
            re: flat.iter().map(|z| z.re).collect(),
            im: flat.iter().map(|z| z.im).collect(),
        }
    }
}

impl MatrixRecord {
    pub fn to_matrix(&self) -> Option<DMatrix<C64>> {
        let len = self.rows * self.cols;
        if self.re.len() != len || self.im.len() != len {
            return None;
        }
        Some(DMatrix::from_fn(self.rows, self.cols, |r, c| {
            let f = r * self.cols + c;
            C64::new(self.re[f], self.im[f])
        }))
    }
}
