//! Reference values that do not share code paths with the variational pipeline.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annealing::Circuit;
use crate::error::{Error, Result};
use crate::linalg::{self, ZERO};
use crate::pauli::{to_dense, PauliSum, DEFAULT_DENSE_CAP};
use crate::state::Statevector;

pub const RESIDUAL_TOL: f64 = 1e-9;
/// Above this dimension the ground state comes from Lanczos instead of a full eigensolve.
const FULL_EIGEN_MAX_DIM: usize = 256;

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub e0: f64,
    pub vector: Option<Statevector>,
}

/// Lowest eigenpair of `h`, checked to `‖H v − e0 v‖ ≤ 1e−9`.
pub fn dense_ground_state(h: &PauliSum) -> Result<GroundTruth> {
    let n = h.n_qubits();
    if n > DEFAULT_DENSE_CAP {
        return Err(Error::SizeCap {
            what: "exact diagonalization",
            needed: n,
            cap: DEFAULT_DENSE_CAP,
        });
    }
    let dim = 1usize << n;
    let (e0, v) = if dim <= FULL_EIGEN_MAX_DIM {
        linalg::hermitian_lowest(to_dense(h)?.matrix())
    } else {
        let start = Statevector::random(n, &mut ChaCha8Rng::seed_from_u64(0x5eed));
        linalg::lanczos_lowest(dim, |v| h.apply(v), RESIDUAL_TOL * 0.01, start.amplitudes())
    };
    let hv = h.apply(&v);
    let residual = hv
        .iter()
        .zip(&v)
        .map(|(a, x)| (a - x * e0).norm_sqr())
        .sum::<f64>()
        .sqrt();
    if !(residual <= RESIDUAL_TOL) {
        return Err(Error::Validation(format!("ground-state residual {residual:e} exceeds {RESIDUAL_TOL:e}")));
    }
    Ok(GroundTruth {
        e0,
        vector: Some(Statevector::from_unnormalized(n, v)?),
    })
}

/// Ground energy of the open chain `j Σ Z_i Z_{i+1} + lam Σ X_i` via Jordan-Wigner.
///
/// Majorana form `H = (i/4) Σ A_ab γ_a γ_b` with `A_{2i,2i+1} = 2·lam` and
/// `A_{2i+1,2i+2} = 2·j`; the energy is half the sum of the negative
/// eigenvalues of `iA`.
pub fn tfim_free_fermion_energy(n: usize, j: f64, lam: f64) -> f64 {
    assert!(n >= 2, "free-fermion chain needs at least 2 sites");
    let dim = 2 * n;
    let mut ia = DMatrix::from_element(dim, dim, ZERO);
    let mut couple = |a: usize, b: usize, w: f64| {
        ia[(a, b)] = C64::new(0.0, w);
        ia[(b, a)] = C64::new(0.0, -w);
    };
    for i in 0..n {
        couple(2 * i, 2 * i + 1, 2.0 * lam);
        if i + 1 < n {
            couple(2 * i + 1, 2 * i + 2, 2.0 * j);
        }
    }
    let negative: Vec<f64> = linalg::hermitian_eigenvalues(&ia).into_iter().filter(|&e| e < 0.0).collect();
    0.5 * linalg::pairwise_sum(&negative)
}

pub fn relative_error(e: f64, e0: f64) -> Result<f64> {
    if e0 == 0.0 {
        return Err(Error::Validation("relative error against a zero reference".into()));
    }
    Ok((e - e0).abs() / e0.abs())
}

/// Length of the longest chain of two-qubit gates that share qubits.
pub fn two_qubit_depth(c: &Circuit) -> usize {
    let mut front = vec![0usize; c.n_qubits()];
    for g in c.gates().filter(|g| g.arity() == 2) {
        let qs = g.qubits();
        let d = qs.iter().map(|&q| front[q]).max().unwrap_or(0) + 1;
        qs.iter().for_each(|&q| front[q] = d);
    }
    front.into_iter().max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annealing::{build_annealing_circuit, AnnealingSchedule, Gate};
    use crate::pauli::{build_tfim, Boundary};

    #[test]
    fn two_site_chain_is_root_five() {
        let h = build_tfim(2, -1.0, 1.0, Boundary::Open).unwrap();
        let gt = dense_ground_state(&h).unwrap();
        assert!((gt.e0 + 5f64.sqrt()).abs() < 1e-12);
        assert!((tfim_free_fermion_energy(2, -1.0, 1.0) + 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_field_term() {
        let h: PauliSum = "1 * X".parse().unwrap();
        assert!((dense_ground_state(&h).unwrap().e0 + 1.0).abs() < 1e-14);
    }

    #[test]
    fn free_fermion_limits() {
        assert!((tfim_free_fermion_energy(6, 0.7, 0.0) + 0.7 * 5.0).abs() < 1e-12);
        assert!((tfim_free_fermion_energy(6, -0.7, 0.0) + 0.7 * 5.0).abs() < 1e-12);
        assert!((tfim_free_fermion_energy(5, 0.0, -1.3) + 1.3 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn dense_and_free_fermion_agree() {
        for n in [3, 4, 6, 9] {
            for (j, lam) in [(-1.0, 1.0), (0.4, -1.7), (-2.0, 0.3)] {
                let h = build_tfim(n, j, lam, Boundary::Open).unwrap();
                let dense = dense_ground_state(&h).unwrap().e0;
                let ff = tfim_free_fermion_energy(n, j, lam);
                assert!((dense - ff).abs() < 1e-9, "n={n} j={j} lam={lam}: {dense} vs {ff}");
            }
        }
    }

    #[test]
    fn size_cap() {
        let h = PauliSum::empty(15);
        assert!(matches!(dense_ground_state(&h), Err(Error::SizeCap { .. })));
    }

    #[test]
    fn relative_error_values() {
        assert_eq!(relative_error(-2.0, -2.0).unwrap(), 0.0);
        assert!((relative_error(-1.9, -2.0).unwrap() - 0.05).abs() < 1e-15);
        assert!(relative_error(1.0, 0.0).is_err());
    }

    #[test]
    fn depth_counting() {
        let mut c = Circuit::new(4);
        c.push_layer(vec![Gate::Rzz { q0: 0, q1: 1, theta: 0.1 }]).unwrap();
        assert_eq!(two_qubit_depth(&c), 1);
        c.push_layer(vec![Gate::Rzz { q0: 2, q1: 3, theta: 0.1 }]).unwrap();
        assert_eq!(two_qubit_depth(&c), 1);

        let mut step = Circuit::new(4);
        step.push_layer(vec![Gate::Rzz { q0: 0, q1: 1, theta: 0.1 }, Gate::Rzz { q0: 2, q1: 3, theta: 0.1 }]).unwrap();
        step.push_layer((0..4).map(|q| Gate::Rx { q, phi: 0.2 }).collect()).unwrap();
        step.push_layer(vec![Gate::Rzz { q0: 1, q1: 2, theta: 0.1 }, Gate::Rzz { q0: 3, q1: 0, theta: 0.1 }]).unwrap();
        assert_eq!(two_qubit_depth(&step), 2);

        for k in [1usize, 2, 7] {
            let s = AnnealingSchedule::new(k as f64, 1.0).unwrap();
            let c = build_annealing_circuit(&s, 8, Boundary::Periodic).unwrap();
            assert_eq!(two_qubit_depth(&c), 2 * k + 1);
        }
    }
}
