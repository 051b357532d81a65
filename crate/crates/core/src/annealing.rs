//! Second-order Trotterized annealing of the transverse-field Ising chain.
//!
//! The ramp is `J(t) = −t/t_final`, `λ(t) = 1`, starting from `|−⟩^{⊗N}`, the
//! ground state of the field term. One time step is the symmetric product
//!
//! ```text
//! G₂(t+Δt; t) = e^{−iΔt/2·C} e^{−iΔt/2·B} e^{−iΔt·A} e^{−iΔt/2·B} e^{−iΔt/2·C}
//! ```
//!
//! with `A` the odd-bond couplings, `B` the field and `C` the even-bond
//! couplings, all evaluated at the step midpoint. Adjacent half layers of `C`
//! are merged into one `RZZ` layer, so `K` steps cost `2K + 1` two-qubit layers.
//!
//! The noise model is synthetic: depolarizing errors after each gate, and
//! amplitude damping plus pure dephasing on every qubit after each layer, all
//! with a single layer duration `t_g`. Readout errors live in the shadow sampler.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, MatrixRecord, ZERO};
use crate::pauli::{chain_bonds, Boundary, Pauli};
use crate::state::Statevector;

const STEP_INTEGRALITY_TOL: f64 = 1e-9;
const UNITARY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealingSchedule {
    t_final: f64,
    dt: f64,
    /// Multiplies `J(t)`; `0` switches the couplings off entirely.
    coupling: f64,
}

impl AnnealingSchedule {
    pub fn new(t_final: f64, dt: f64) -> Result<Self> {
        if !(t_final > 0.0 && dt > 0.0) {
            return Err(Error::Config(format!("t_final and dt must be positive (got {t_final}, {dt})")));
        }
        let steps = t_final / dt;
        if (steps - steps.round()).abs() > STEP_INTEGRALITY_TOL || steps.round() < 1.0 {
            return Err(Error::Config(format!(
                "t_final/dt = {steps} is not a positive integer number of steps"
            )));
        }
        Ok(Self {
            t_final,
            dt,
            coupling: 1.0,
        })
    }

    /// Largest `dt' ≤ dt` that divides `t_final` into whole steps.
    pub fn with_step_at_most(t_final: f64, dt: f64) -> Result<Self> {
        if !(t_final > 0.0 && dt > 0.0) {
            return Err(Error::Config(format!("t_final and dt must be positive (got {t_final}, {dt})")));
        }
        let ratio = t_final / dt;
        let steps = if (ratio - ratio.round()).abs() <= STEP_INTEGRALITY_TOL {
            ratio.round()
        } else {
            ratio.ceil()
        };
        Self::new(t_final, t_final / steps)
    }

    pub fn with_coupling(mut self, coupling: f64) -> Self {
        self.coupling = coupling;
        self
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn coupling_at(&self, t: f64) -> f64 {
        -self.coupling * t / self.t_final
    }

    pub fn field_at(&self, _t: f64) -> f64 {
        1.0
    }
}

/// Rotation angles (radians) of Trotter step `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepAngles {
    pub theta_odd: f64,
    pub phi: f64,
    pub theta_even_half: f64,
    /// Even-bond angle of the layer merging steps `k` and `k+1`.
    pub theta_even_merged: f64,
}

pub fn schedule_angles(s: &AnnealingSchedule, k: usize) -> Result<StepAngles> {
    let n = s.n_steps();
    if k >= n {
        return Err(Error::Index { index: k, len: n });
    }
    let dt = s.dt;
    let mid = k as f64 * dt + dt / 2.0;
    let next_mid = (k + 1) as f64 * dt + dt / 2.0;
    let j = s.coupling_at(mid);
    Ok(StepAngles {
        theta_odd: 2.0 * j * dt,
        phi: 2.0 * s.field_at(mid) * dt / 2.0,
        theta_even_half: 2.0 * j * dt / 2.0,
        theta_even_merged: 2.0 * (j + s.coupling_at(next_mid)) * dt / 2.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gate", rename_all = "lowercase")]
pub enum Gate {
    /// `exp(−iθ/2 · Z⊗Z)`.
    Rzz { q0: usize, q1: usize, theta: f64 },
    /// `exp(−iφ/2 · X)`.
    Rx { q: usize, phi: f64 },
    Block { qubits: Vec<usize>, matrix: MatrixRecord },
}

impl Gate {
    pub fn qubits(&self) -> Vec<usize> {
        match self {
            Gate::Rzz { q0, q1, .. } => vec![*q0, *q1],
            Gate::Rx { q, .. } => vec![*q],
            Gate::Block { qubits, .. } => qubits.clone(),
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Gate::Rzz { .. } => 2,
            Gate::Rx { .. } => 1,
            Gate::Block { qubits, .. } => qubits.len(),
        }
    }

    pub fn block(qubits: Vec<usize>, matrix: &DMatrix<C64>) -> Self {
        Gate::Block {
            qubits,
            matrix: MatrixRecord::from(matrix),
        }
    }

    pub fn apply(&self, amps: &mut [C64], n_qubits: usize) {
        match self {
            Gate::Rzz { q0, q1, theta } => {
                let same = C64::from_polar(1.0, -theta / 2.0);
                let diff = C64::from_polar(1.0, theta / 2.0);
                let b0 = linalg::bit_of(n_qubits, *q0);
                let b1 = linalg::bit_of(n_qubits, *q1);
                for (j, a) in amps.iter_mut().enumerate() {
                    let parity = ((j & b0) != 0) ^ ((j & b1) != 0);
                    *a *= if parity { diff } else { same };
                }
            }
            Gate::Rx { q, phi } => linalg::apply_block(amps, n_qubits, &[*q], &rx_matrix(*phi)),
            Gate::Block { qubits, matrix } => {
                let m = matrix.to_matrix().expect("validated block");
                linalg::apply_block(amps, n_qubits, qubits, &m);
            }
        }
    }
}

pub fn rx_matrix(phi: f64) -> DMatrix<C64> {
    let c = C64::new((phi / 2.0).cos(), 0.0);
    let s = C64::new(0.0, -(phi / 2.0).sin());
    DMatrix::from_row_slice(2, 2, &[c, s, s, c])
}

/// Layered gate list; layers only matter for noise timing and depth bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    n_qubits: usize,
    layers: Vec<Vec<Gate>>,
}

impl Circuit {
    pub fn new(n_qubits: usize) -> Self {
        Self {
            n_qubits,
            layers: Vec::new(),
        }
    }

    pub fn push_layer(&mut self, layer: Vec<Gate>) -> Result<()> {
        for g in &layer {
            let qs = g.qubits();
            if let Some(&q) = qs.iter().find(|&&q| q >= self.n_qubits) {
                return Err(Error::Index {
                    index: q,
                    len: self.n_qubits,
                });
            }
            let mut sorted = qs.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != qs.len() {
                return Err(Error::Validation(format!("gate acts twice on a qubit: {qs:?}")));
            }
            if let Gate::Block { matrix, .. } = g {
                let m = matrix
                    .to_matrix()
                    .filter(|m| m.nrows() == 1 << qs.len() && m.is_square())
                    .ok_or_else(|| Error::Validation("block matrix has wrong shape".into()))?;
                let res = linalg::isometry_residual(&m);
                if res > UNITARY_TOL {
                    return Err(Error::Validation(format!("block gate is not unitary (residual {res:e})")));
                }
            }
        }
        if !layer.is_empty() {
            self.layers.push(layer);
        }
        Ok(())
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn layers(&self) -> &[Vec<Gate>] {
        &self.layers
    }

    pub fn gates(&self) -> impl Iterator<Item = &Gate> {
        self.layers.iter().flatten()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn rzz_layer(bonds: &[(usize, usize)], theta: f64) -> Vec<Gate> {
    bonds.iter().map(|&(q0, q1)| Gate::Rzz { q0, q1, theta }).collect()
}

fn rx_layer(n: usize, phi: f64) -> Vec<Gate> {
    (0..n).map(|q| Gate::Rx { q, phi }).collect()
}

/// Bonds split by the parity of their left site (the wrap bond counts as `n−1`).
pub fn split_bonds(n: usize, boundary: Boundary) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    chain_bonds(n, boundary).into_iter().partition(|&(a, _)| a % 2 == 0)
}

pub fn build_annealing_circuit(s: &AnnealingSchedule, n: usize, boundary: Boundary) -> Result<Circuit> {
    if n < 2 {
        return Err(Error::InvalidSize(format!("annealing needs at least 2 sites, got {n}")));
    }
    if boundary == Boundary::Periodic && n % 2 == 1 {
        return Err(Error::Config(format!(
            "periodic chain needs an even number of sites for the odd/even bond split, got {n}"
        )));
    }
    let (even, odd) = split_bonds(n, boundary);
    let steps = s.n_steps();
    let mut c = Circuit::new(n);
    c.push_layer(rzz_layer(&even, schedule_angles(s, 0)?.theta_even_half))?;
    for k in 0..steps {
        let a = schedule_angles(s, k)?;
        c.push_layer(rx_layer(n, a.phi))?;
        c.push_layer(rzz_layer(&odd, a.theta_odd))?;
        c.push_layer(rx_layer(n, a.phi))?;
        let closing = if k + 1 == steps {
            a.theta_even_half
        } else {
            a.theta_even_merged
        };
        c.push_layer(rzz_layer(&even, closing))?;
    }
    Ok(c)
}

pub fn apply_circuit(psi: &Statevector, c: &Circuit) -> Result<Statevector> {
    if psi.n_qubits() != c.n_qubits() {
        return Err(Error::SizeMismatch {
            expected: c.n_qubits(),
            got: psi.n_qubits(),
        });
    }
    let mut out = psi.clone();
    let n = out.n_qubits();
    for g in c.gates() {
        g.apply(out.amplitudes_mut(), n);
    }
    Ok(out)
}

/// `|ψ_QA⟩` from `|−⟩^{⊗n}`.
pub fn run_annealing(s: &AnnealingSchedule, n: usize, boundary: Boundary) -> Result<Statevector> {
    let c = build_annealing_circuit(s, n, boundary)?;
    apply_circuit(&Statevector::minus_product(n), &c)
}

/// Synthetic device noise. Times share one unit; `f64::INFINITY` disables a channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub e_ro: f64,
    pub p1: f64,
    pub p2: f64,
    pub t1: f64,
    pub t2: f64,
    pub t_g: f64,
}

impl NoiseModel {
    pub fn noise_free() -> Self {
        Self {
            e_ro: 0.0,
            p1: 0.0,
            p2: 0.0,
            t1: f64::INFINITY,
            t2: f64::INFINITY,
            t_g: 1.0,
        }
    }

    /// Representative (not calibrated) superconducting-device figures, times in µs.
    pub fn representative() -> Self {
        Self {
            e_ro: 0.015,
            p1: 2.5e-4,
            p2: 3.0e-3,
            t1: 200.0,
            t2: 120.0,
            t_g: 0.068,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidNoiseModel(format!("{name} = {p} is not a probability")))
            }
        };
        prob("e_ro", self.e_ro)?;
        prob("p1", self.p1)?;
        prob("p2", self.p2)?;
        if !(self.t1 > 0.0 && self.t2 > 0.0 && self.t_g > 0.0 && self.t_g.is_finite()) {
            return Err(Error::InvalidNoiseModel("t1, t2 and t_g must be positive".into()));
        }
        if self.t2 > 2.0 * self.t1 {
            return Err(Error::InvalidNoiseModel(format!(
                "t2 = {} exceeds 2·t1 = {}",
                self.t2,
                2.0 * self.t1
            )));
        }
        Ok(())
    }

    pub fn is_noise_free(&self) -> bool {
        self.e_ro == 0.0 && self.p1 == 0.0 && self.p2 == 0.0 && self.damping() == 0.0 && self.dephasing() == 0.0
    }

    /// Amplitude-damping probability per layer, `1 − e^{−t_g/t1}`.
    pub fn damping(&self) -> f64 {
        -(-self.t_g / self.t1).exp_m1()
    }

    /// Phase-flip probability per layer from the pure-dephasing part of `t2`.
    pub fn dephasing(&self) -> f64 {
        let rate = 1.0 / self.t2 - 0.5 / self.t1;
        if rate <= 0.0 {
            0.0
        } else {
            -0.5 * (-self.t_g * rate).exp_m1()
        }
    }
}

/// Scale every error source by `eta`.
///
/// Readout and depolarizing rates scale linearly. Relaxation times are mapped
/// so that the per-layer relaxation probability scales by `eta`:
/// `t̃ = −t_g / ln(1 − η(1 − e^{−t_g/t}))`, i.e. `t̃ = t/α` with
/// `α = −(t/t_g)·ln[1 − η(1 − e^{−t_g/t})]`. For `t_g ≪ t`, `α ≈ η`.
pub fn scale_noise(m: &NoiseModel, eta: f64) -> Result<NoiseModel> {
    m.validate()?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::NoiseScaling(format!("eta must be a non-negative number, got {eta}")));
    }
    if eta == 1.0 {
        return Ok(*m);
    }
    for (name, p) in [("e_ro", m.e_ro), ("p1", m.p1), ("p2", m.p2)] {
        if eta * p > 1.0 {
            return Err(Error::NoiseScaling(format!("eta·{name} = {} exceeds 1", eta * p)));
        }
    }
    let scale_time = |name: &str, t: f64| -> Result<f64> {
        let per_gate = -(-m.t_g / t).exp_m1();
        let scaled = eta * per_gate;
        if scaled >= 1.0 {
            return Err(Error::NoiseScaling(format!(
                "eta·(1 − e^(−t_g/{name})) = {scaled} must stay below 1"
            )));
        }
        let log = (-scaled).ln_1p();
        Ok(if log == 0.0 { f64::INFINITY } else { -m.t_g / log })
    };
    let out = NoiseModel {
        e_ro: eta * m.e_ro,
        p1: eta * m.p1,
        p2: eta * m.p2,
        t1: scale_time("t1", m.t1)?,
        t2: scale_time("t2", m.t2)?,
        t_g: m.t_g,
    };
    out.validate().map_err(|e| Error::NoiseScaling(format!("scaled model is invalid: {e}")))?;
    Ok(out)
}

fn pauli_on(n_qubits: usize, amps: &mut [C64], q: usize, p: Pauli) {
    if p != Pauli::I {
        linalg::apply_block(amps, n_qubits, &[q], &p.matrix());
    }
}

/// Non-identity Pauli on `qubits`, indexed `1..4^k` in base 4 (I, X, Y, Z per digit).
pub fn pauli_from_index(k: usize, index: usize) -> Vec<Pauli> {
    (0..k)
        .map(|t| match (index >> (2 * (k - 1 - t))) & 3 {
            0 => Pauli::I,
            1 => Pauli::X,
            2 => Pauli::Y,
            _ => Pauli::Z,
        })
        .collect()
}

/// One Monte-Carlo trajectory of `c` acting on `initial` under `m`.
pub fn run_noisy_trajectory<R: Rng + ?Sized>(
    initial: &Statevector,
    c: &Circuit,
    m: &NoiseModel,
    rng: &mut R,
) -> Result<Statevector> {
    m.validate()?;
    if initial.n_qubits() != c.n_qubits() {
        return Err(Error::SizeMismatch {
            expected: c.n_qubits(),
            got: initial.n_qubits(),
        });
    }
    let n = c.n_qubits();
    let gamma = m.damping();
    let p_z = m.dephasing();
    let mut psi = initial.clone();
    for layer in c.layers() {
        for g in layer {
            g.apply(psi.amplitudes_mut(), n);
            let k = g.arity();
            let p = if k == 1 { m.p1 } else { m.p2 };
            if p > 0.0 && rng.random::<f64>() < p {
                let which = rng.random_range(1..1usize << (2 * k));
                for (q, axis) in g.qubits().into_iter().zip(pauli_from_index(k, which)) {
                    pauli_on(n, psi.amplitudes_mut(), q, axis);
                }
            }
        }
        if gamma > 0.0 {
            for q in 0..n {
                amplitude_damp(&mut psi, q, gamma, rng);
            }
        }
        if p_z > 0.0 {
            for q in 0..n {
                if rng.random::<f64>() < p_z {
                    pauli_on(n, psi.amplitudes_mut(), q, Pauli::Z);
                }
            }
        }
    }
    Ok(psi)
}

/// Kraus-sampled amplitude damping: jump `|1⟩→|0⟩` with probability `γ·P(1)`.
fn amplitude_damp<R: Rng + ?Sized>(psi: &mut Statevector, q: usize, gamma: f64, rng: &mut R) {
    let n = psi.n_qubits();
    let bit = linalg::bit_of(n, q);
    let amps = psi.amplitudes_mut();
    let p_one: f64 = amps
        .iter()
        .enumerate()
        .filter(|(j, _)| j & bit != 0)
        .map(|(_, a)| a.norm_sqr())
        .sum();
    if rng.random::<f64>() < gamma * p_one {
        for j in 0..amps.len() {
            if j & bit != 0 {
                amps[j & !bit] = amps[j];
                amps[j] = ZERO;
            }
        }
    } else {
        let keep = (1.0 - gamma).sqrt();
        for (j, a) in amps.iter_mut().enumerate() {
            if j & bit != 0 {
                *a *= keep;
            }
        }
    }
    psi.renormalize();
}

/// Dense `exp(−iθ/2·Z⊗Z)` for tests and debugging dumps.
pub fn rzz_matrix(theta: f64) -> DMatrix<C64> {
    let same = C64::from_polar(1.0, -theta / 2.0);
    let diff = C64::from_polar(1.0, theta / 2.0);
    DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![same, diff, diff, same]))
}
