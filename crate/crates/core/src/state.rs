use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, ZERO};
use crate::pauli::PauliSum;

pub const NORM_TOL: f64 = 1e-10;

/// Dense `2^n` amplitude vector, qubit 0 most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct Statevector {
    n_qubits: usize,
    amps: Vec<C64>,
}

impl Statevector {
    pub fn from_amplitudes(n_qubits: usize, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != 1usize << n_qubits {
            return Err(Error::SizeMismatch {
                expected: 1 << n_qubits,
                got: amps.len(),
            });
        }
        let norm = linalg::norm_sqr(&amps).sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Validation(format!("statevector norm {norm} is not 1")));
        }
        Ok(Self { n_qubits, amps })
    }

    /// Normalizes `amps` first; fails only on a zero vector.
    pub fn from_unnormalized(n_qubits: usize, mut amps: Vec<C64>) -> Result<Self> {
        let norm = linalg::norm_sqr(&amps).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Validation("cannot normalize a zero vector".into()));
        }
        amps.iter_mut().for_each(|a| *a /= norm);
        Self::from_amplitudes(n_qubits, amps)
    }

    pub fn basis(n_qubits: usize, index: usize) -> Self {
        let mut amps = vec![ZERO; 1 << n_qubits];
        amps[index] = C64::new(1.0, 0.0);
        Self { n_qubits, amps }
    }

    /// `|−⟩^{⊗n}`.
    pub fn minus_product(n_qubits: usize) -> Self {
        let mag = 0.5f64.powf(n_qubits as f64 / 2.0);
        let amps = (0..1usize << n_qubits)
            .map(|j| C64::new(if j.count_ones() % 2 == 0 { mag } else { -mag }, 0.0))
            .collect();
        Self { n_qubits, amps }
    }

    /// Haar-random pure state.
    pub fn random<R: Rng + ?Sized>(n_qubits: usize, rng: &mut R) -> Self {
        let amps: Vec<C64> = (0..1usize << n_qubits)
            .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        Self::from_unnormalized(n_qubits, amps).expect("gaussian vector is non-zero")
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }

    pub fn norm(&self) -> f64 {
        linalg::norm_sqr(&self.amps).sqrt()
    }

    /// Rescale to unit norm; returns the norm before rescaling.
    pub fn renormalize(&mut self) -> f64 {
        let norm = self.norm();
        log::trace!("renormalizing statevector (norm {norm:.3e})");
        self.amps.iter_mut().for_each(|a| *a /= norm);
        norm
    }

    /// Apply a `2^k` matrix to the listed qubits. No unitarity check.
    pub fn apply_matrix(&mut self, qubits: &[usize], mat: &DMatrix<C64>) {
        linalg::apply_block(&mut self.amps, self.n_qubits, qubits, mat);
    }

    pub fn inner(&self, other: &Statevector) -> C64 {
        linalg::vdot(&self.amps, &other.amps)
    }

    pub fn fidelity(&self, other: &Statevector) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }
}

/// `⟨ψ|H|ψ⟩`; the imaginary residual must vanish to `1e-10`.
pub fn energy(psi: &Statevector, h: &PauliSum) -> Result<f64> {
    expectation_raw(psi.amplitudes(), psi.n_qubits(), h)
}

pub(crate) fn expectation_raw(amps: &[C64], n_qubits: usize, h: &PauliSum) -> Result<f64> {
    if h.n_qubits() != n_qubits {
        return Err(Error::SizeMismatch {
            expected: n_qubits,
            got: h.n_qubits(),
        });
    }
    let hv = h.apply(amps);
    let e = linalg::vdot(amps, &hv);
    if e.im.abs() > 1e-10 * e.re.abs().max(1.0) {
        return Err(Error::Validation(format!("expectation has imaginary part {:e}", e.im)));
    }
    Ok(e.re)
}
