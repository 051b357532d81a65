//! Local Pauli classical shadows.
//!
//! Each snapshot measures every qubit in a basis drawn uniformly from
//! `{X, Y, Z}`. The dual operator of outcome `b` is `⊗_q (3|b_q⟩⟨b_q| − I)`,
//! so `Tr[O · dual]` is an unbiased single-shot estimate of `⟨O⟩`.
//!
//! Snapshot `i` of a set with seed `s` draws from ChaCha8 stream `i` of `s`,
//! which keeps parallel sampling reproducible.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealing::{run_noisy_trajectory, Circuit, NoiseModel};
use crate::error::{Error, Result};
use crate::linalg::{self, ZERO};
use crate::pauli::{group_by_weight, pauli_table, Pauli, PauliSum, PauliTerm, SupportedOperator};
use crate::state::Statevector;

/// Tables beyond this many qubits are not built; such terms use direct contraction.
const TABLE_MAX_QUBITS: usize = 8;
const REAL_COEFF_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Basis {
    X,
    Y,
    Z,
}

impl Basis {
    pub const ALL: [Basis; 3] = [Basis::X, Basis::Y, Basis::Z];

    pub fn as_char(self) -> char {
        match self {
            Basis::X => 'X',
            Basis::Y => 'Y',
            Basis::Z => 'Z',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'X' => Some(Basis::X),
            'Y' => Some(Basis::Y),
            'Z' => Some(Basis::Z),
            _ => None,
        }
    }

    pub fn axis(self) -> Pauli {
        match self {
            Basis::X => Pauli::X,
            Basis::Y => Pauli::Y,
            Basis::Z => Pauli::Z,
        }
    }

    /// Unitary taking the eigenbasis of this axis to the computational basis.
    fn rotation(self) -> Option<DMatrix<C64>> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            Basis::Z => None,
            Basis::X => Some(DMatrix::from_row_slice(2, 2, &[C64::new(h, 0.0), C64::new(h, 0.0), C64::new(h, 0.0), C64::new(-h, 0.0)])),
            // H·S†
            Basis::Y => Some(DMatrix::from_row_slice(2, 2, &[C64::new(h, 0.0), C64::new(0.0, -h), C64::new(h, 0.0), C64::new(0.0, h)])),
        }
    }
}

/// One product-basis measurement record. `bits[q] = false` is the +1 eigenstate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    bases: Vec<Basis>,
    bits: Vec<bool>,
}

impl Snapshot {
    pub fn new(bases: Vec<Basis>, bits: Vec<bool>) -> Result<Self> {
        if bases.len() != bits.len() {
            return Err(Error::SizeMismatch {
                expected: bases.len(),
                got: bits.len(),
            });
        }
        Ok(Self { bases, bits })
    }

    pub fn n_qubits(&self) -> usize {
        self.bases.len()
    }

    pub fn bases(&self) -> &[Basis] {
        &self.bases
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn basis_string(&self) -> String {
        self.bases.iter().map(|b| b.as_char()).collect()
    }

    pub fn outcome_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// Masks over `qubits` in local order (first listed qubit most significant):
    /// `(x, z, outcome)`.
    fn local_masks(&self, qubits: &[usize]) -> (usize, usize, usize) {
        let k = qubits.len();
        let (mut x, mut z, mut o) = (0, 0, 0);
        for (t, &q) in qubits.iter().enumerate() {
            let b = 1usize << (k - 1 - t);
            match self.bases[q] {
                Basis::X => x |= b,
                Basis::Y => {
                    x |= b;
                    z |= b;
                }
                Basis::Z => z |= b,
            }
            if self.bits[q] {
                o |= b;
            }
        }
        (x, z, o)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Source {
    Ideal,
    /// Noisy trajectories, with the noise strength when known.
    Noisy(Option<f64>),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Ideal => write!(f, "ideal"),
            Source::Noisy(None) => write!(f, "noisy"),
            Source::Noisy(Some(eta)) => write!(f, "noisy({eta})"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(Source::Ideal),
            "noisy" => Ok(Source::Noisy(None)),
            _ => s
                .strip_prefix("noisy(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|v| v.parse().ok())
                .map(|eta| Source::Noisy(Some(eta)))
                .ok_or_else(|| Error::Parse(format!("unknown shadow source {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSet {
    n_qubits: usize,
    snapshots: Vec<Snapshot>,
    seed: u64,
    source: Source,
}

impl ShadowSet {
    pub fn new(n_qubits: usize, snapshots: Vec<Snapshot>, seed: u64, source: Source) -> Result<Self> {
        if let Some(bad) = snapshots.iter().find(|s| s.n_qubits() != n_qubits) {
            return Err(Error::SizeMismatch {
                expected: n_qubits,
                got: bad.n_qubits(),
            });
        }
        Ok(Self {
            n_qubits,
            snapshots,
            seed,
            source,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }
}

fn snapshot_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn measure<R: Rng + ?Sized>(psi: &Statevector, rng: &mut R) -> Snapshot {
    let n = psi.n_qubits();
    let bases: Vec<Basis> = (0..n).map(|_| Basis::ALL[rng.random_range(0..3)]).collect();
    let mut amps = psi.amplitudes().to_vec();
    for (q, b) in bases.iter().enumerate() {
        if let Some(r) = b.rotation() {
            linalg::apply_block(&mut amps, n, &[q], &r);
        }
    }
    let total: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut index = amps.len() - 1;
    for (j, a) in amps.iter().enumerate() {
        acc += a.norm_sqr();
        if u < acc {
            index = j;
            break;
        }
    }
    let bits = (0..n).map(|q| index & linalg::bit_of(n, q) != 0).collect();
    Snapshot { bases, bits }
}

fn flip_readout<R: Rng + ?Sized>(snap: &mut Snapshot, e_ro: f64, rng: &mut R) {
    if e_ro > 0.0 {
        for b in snap.bits.iter_mut() {
            if rng.random::<f64>() < e_ro {
                *b = !*b;
            }
        }
    }
}

pub fn sample_snapshots(psi: &Statevector, s: usize, seed: u64) -> Result<ShadowSet> {
    if s == 0 {
        return Err(Error::InvalidSize("shadow set needs at least one snapshot".into()));
    }
    let snaps = (0..s)
        .into_par_iter()
        .map(|i| measure(psi, &mut snapshot_rng(seed, i)))
        .collect();
    ShadowSet::new(psi.n_qubits(), snaps, seed, Source::Ideal)
}

/// Each snapshot measures its own noisy trajectory of `c` from `initial`,
/// then every outcome bit flips with probability `m.e_ro`.
pub fn sample_snapshots_noisy(
    initial: &Statevector,
    c: &Circuit,
    m: &NoiseModel,
    s: usize,
    seed: u64,
) -> Result<ShadowSet> {
    m.validate()?;
    if s == 0 {
        return Err(Error::InvalidSize("shadow set needs at least one snapshot".into()));
    }
    let gate_noise_free = m.p1 == 0.0 && m.p2 == 0.0 && m.damping() == 0.0 && m.dephasing() == 0.0;
    let shared = if gate_noise_free {
        Some(crate::annealing::apply_circuit(initial, c)?)
    } else {
        None
    };
    let snaps = (0..s)
        .into_par_iter()
        .map(|i| {
            let mut rng = snapshot_rng(seed, i);
            let psi = match &shared {
                Some(psi) => psi.clone(),
                None => run_noisy_trajectory(initial, c, m, &mut rng)?,
            };
            let mut snap = measure(&psi, &mut rng);
            flip_readout(&mut snap, m.e_ro, &mut rng);
            Ok(snap)
        })
        .collect::<Result<Vec<_>>>()?;
    ShadowSet::new(c.n_qubits(), snaps, seed, Source::Noisy(None))
}

/// `3|b⟩⟨b| − I`.
pub fn dual_factor(basis: Basis, bit: bool) -> DMatrix<C64> {
    let sign = if bit { -1.0 } else { 1.0 };
    // |b⟩⟨b| = (I ± P)/2
    let proj = (linalg::identity(2) + basis.axis().matrix() * C64::new(sign, 0.0)) * C64::new(0.5, 0.0);
    proj * C64::new(3.0, 0.0) - linalg::identity(2)
}

/// `Tr[(⊗ dual) · term]`.
pub fn snapshot_weight(snap: &Snapshot, term: &PauliTerm) -> Result<f64> {
    if snap.n_qubits() != term.string.len() {
        return Err(Error::SizeMismatch {
            expected: snap.n_qubits(),
            got: term.string.len(),
        });
    }
    Ok(term.coeff.re * pauli_factor(snap, term.string.axes()))
}

fn pauli_factor(snap: &Snapshot, axes: &[Pauli]) -> f64 {
    let mut f = 1.0;
    for (q, &p) in axes.iter().enumerate() {
        if p == Pauli::I {
            continue;
        }
        if snap.bases[q].axis() != p {
            return 0.0;
        }
        f *= if snap.bits[q] { -3.0 } else { 3.0 };
    }
    f
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorResult {
    pub mean: f64,
    pub std_err: f64,
    pub s_used: usize,
}

/// Mean and standard error of the mean of per-snapshot weights.
pub fn summarize(weights: &[f64]) -> Result<EstimatorResult> {
    let s = weights.len();
    if s == 0 {
        return Err(Error::EmptySet);
    }
    let mean = linalg::pairwise_sum(weights) / s as f64;
    let std_err = if s == 1 {
        0.0
    } else {
        let dev: Vec<f64> = weights.iter().map(|w| (w - mean).powi(2)).collect();
        (linalg::pairwise_sum(&dev) / (s as f64 * (s as f64 - 1.0))).sqrt()
    };
    if !(mean.is_finite() && std_err.is_finite()) {
        return Err(Error::NonFinite("shadow estimate".into()));
    }
    Ok(EstimatorResult { mean, std_err, s_used: s })
}

fn check_set(set: &ShadowSet, n_qubits: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    if set.n_qubits() != n_qubits {
        return Err(Error::SizeMismatch {
            expected: set.n_qubits(),
            got: n_qubits,
        });
    }
    Ok(())
}

fn check_real(h: &PauliSum) -> Result<()> {
    if h.terms().iter().any(|t| t.coeff.im.abs() > REAL_COEFF_TOL) {
        return Err(Error::Validation("observable has complex Pauli coefficients".into()));
    }
    Ok(())
}

pub fn pauli_weights(set: &ShadowSet, h: &PauliSum) -> Result<Vec<f64>> {
    check_set(set, h.n_qubits())?;
    check_real(h)?;
    Ok(set
        .snapshots()
        .par_iter()
        .map(|snap| {
            let ws: Vec<f64> = h
                .terms()
                .iter()
                .map(|t| t.coeff.re * pauli_factor(snap, t.string.axes()))
                .collect();
            linalg::pairwise_sum(&ws)
        })
        .collect())
}

pub fn estimate(set: &ShadowSet, h: &PauliSum) -> Result<EstimatorResult> {
    summarize(&pauli_weights(set, h)?)
}

/// Dense-support path: contracts each term with the product of dual factors directly.
pub fn estimate_dense(set: &ShadowSet, ops: &[SupportedOperator]) -> Result<EstimatorResult> {
    check_set(set, set.n_qubits())?;
    check_supports(set.n_qubits(), ops)?;
    let weights: Vec<f64> = set
        .snapshots()
        .par_iter()
        .map(|snap| {
            let ws: Vec<f64> = ops.iter().map(|op| dual_contract(snap, op.support(), op.matrix())).collect();
            linalg::pairwise_sum(&ws)
        })
        .collect();
    summarize(&weights)
}

fn check_supports(n: usize, ops: &[SupportedOperator]) -> Result<()> {
    for op in ops {
        if let Some(&q) = op.support().iter().find(|&&q| q >= n) {
            return Err(Error::Index { index: q, len: n });
        }
    }
    Ok(())
}

/// `Re Tr[(⊗_{q∈support} d_q) · T]`, contracting one qubit at a time.
fn dual_contract(snap: &Snapshot, support: &[usize], t: &DMatrix<C64>) -> f64 {
    let k = support.len();
    let mut dim = 1usize << k;
    // row-major flat copy, current qubit is the most significant of rows and columns
    let mut a: Vec<C64> = (0..dim * dim).map(|f| t[(f / dim, f % dim)]).collect();
    for &q in support {
        let d = dual_factor(snap.bases[q], snap.bits[q]);
        let half = dim / 2;
        let mut next = vec![ZERO; half * half];
        for r in 0..half {
            for c in 0..half {
                let mut acc = ZERO;
                for ra in 0..2 {
                    for cb in 0..2 {
                        // Tr[D T] pairs D[c, r] with T[r, c]
                        acc += d[(cb, ra)] * a[(ra * half + r) * dim + cb * half + c];
                    }
                }
                next[r * half + c] = acc;
            }
        }
        a = next;
        dim = half;
    }
    a[0].re
}

#[derive(Clone, Debug)]
enum CompiledTerm {
    /// Real Pauli coefficients `Tr[P·T]/2^k` indexed `(z << k) | x`.
    Table { support: Vec<usize>, table: Vec<f64> },
    Dense(SupportedOperator),
}

/// Sum of dense terms prepared for repeated shadow weighting.
#[derive(Clone, Debug)]
pub struct CompiledObservable {
    n_qubits: usize,
    terms: Vec<CompiledTerm>,
}

impl CompiledObservable {
    pub fn new(n_qubits: usize, ops: &[SupportedOperator]) -> Result<Self> {
        check_supports(n_qubits, ops)?;
        let terms = ops
            .iter()
            .map(|op| {
                let k = op.support().len();
                if k > TABLE_MAX_QUBITS {
                    return Ok(CompiledTerm::Dense(op.clone()));
                }
                let raw = pauli_table(op.matrix());
                if let Some(c) = raw.iter().find(|c| c.im.abs() > REAL_COEFF_TOL * c.norm().max(1.0)) {
                    return Err(Error::Validation(format!("term is not Hermitian (Pauli coefficient {c})")));
                }
                Ok(CompiledTerm::Table {
                    support: op.support().to_vec(),
                    table: raw.into_iter().map(|c| c.re).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n_qubits, terms })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn weight(&self, snap: &Snapshot) -> f64 {
        let ws: Vec<f64> = self
            .terms
            .iter()
            .map(|term| match term {
                CompiledTerm::Table { support, table } => table_weight(snap, support, table),
                CompiledTerm::Dense(op) => dual_contract(snap, op.support(), op.matrix()),
            })
            .collect();
        linalg::pairwise_sum(&ws)
    }

    pub fn weights(&self, set: &ShadowSet) -> Result<Vec<f64>> {
        check_set(set, self.n_qubits)?;
        Ok(set.snapshots().par_iter().map(|s| self.weight(s)).collect())
    }

    pub fn estimate(&self, set: &ShadowSet) -> Result<EstimatorResult> {
        summarize(&self.weights(set)?)
    }
}

/// Only Paulis that are identity or the measured axis on each qubit survive.
fn table_weight(snap: &Snapshot, support: &[usize], table: &[f64]) -> f64 {
    let k = support.len();
    let (xm, zm, om) = snap.local_masks(support);
    let full = (1usize << k) - 1;
    let mut acc = 0.0;
    let mut m = full;
    loop {
        let c = table[((m & zm) << k) | (m & xm)];
        if c != 0.0 {
            let mag = 3f64.powi(m.count_ones() as i32);
            acc += if (m & om).count_ones() % 2 == 0 { c * mag } else { -c * mag };
        }
        if m == 0 {
            break;
        }
        m = (m - 1) & full;
    }
    acc
}

/// Per-weight variance contributions `C_w = Σ_{w'} Cov(P̂_w, P̂_{w'})` of the mean estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightResolvedVariance {
    pub contributions: std::collections::BTreeMap<usize, f64>,
    pub total: f64,
}

pub fn weight_resolved_variance(set: &ShadowSet, h: &PauliSum) -> Result<WeightResolvedVariance> {
    check_set(set, h.n_qubits())?;
    let groups = group_by_weight(h);
    let s = set.len();
    let per_group: Vec<(usize, Vec<f64>)> = groups
        .iter()
        .map(|(&w, g)| Ok((w, pauli_weights(set, g)?)))
        .collect::<Result<_>>()?;
    let centered: Vec<(usize, Vec<f64>)> = per_group
        .into_iter()
        .map(|(w, ws)| {
            let mean = linalg::pairwise_sum(&ws) / s as f64;
            (w, ws.into_iter().map(|x| x - mean).collect())
        })
        .collect();
    let norm = if s > 1 { 1.0 / (s as f64 * (s as f64 - 1.0)) } else { 0.0 };
    let mut contributions = std::collections::BTreeMap::new();
    for (w, a) in &centered {
        let row_sum: Vec<f64> = (0..s).map(|i| a[i] * centered.iter().map(|(_, b)| b[i]).sum::<f64>()).collect();
        contributions.insert(*w, linalg::pairwise_sum(&row_sum) * norm);
    }
    let total = contributions.values().sum();
    Ok(WeightResolvedVariance { contributions, total })
}

/// `ceil(var_ref · s_ref / (f·ΔE)²)`.
pub fn required_snapshots(var_ref: f64, s_ref: u64, delta_e: f64, f: f64) -> Result<u64> {
    if !(var_ref > 0.0 && s_ref > 0 && delta_e > 0.0 && f > 0.0) {
        return Err(Error::Config("snapshot forecast inputs must all be positive".into()));
    }
    let x = var_ref * s_ref as f64 / (f * delta_e).powi(2);
    let rounded = x.round();
    Ok(if (x - rounded).abs() <= 1e-9 * rounded.max(1.0) {
        rounded as u64
    } else {
        x.ceil() as u64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Locality {
    /// Observable acts on `k` qubits: prefactor `4^k`.
    Qubits(u32),
    /// Observable spread by `l` MERA layers: prefactor `16^l`.
    Layers(u32),
}

/// `ln(m_obs)/ε² · prefactor · max_norm²`.
pub fn worst_case_bound(m_obs: u64, eps: f64, locality: Locality, max_norm: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    if m_obs == 0 {
        return Err(Error::Config("bound needs at least one observable".into()));
    }
    Ok((m_obs as f64).ln() / (eps * eps) * locality_prefactor(locality) * max_norm * max_norm)
}

pub fn locality_prefactor(locality: Locality) -> f64 {
    match locality {
        Locality::Qubits(k) => 4f64.powi(k as i32),
        Locality::Layers(l) => 16f64.powi(l as i32),
    }
}

/// Largest qubit support of a two-local term after `l` layers.
pub fn worst_case_locality(layers: u32) -> usize {
    3 << layers
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n_qubits: usize,
    seed: u64,
    source: String,
    s: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    b: String,
    o: String,
}

/// One header line, then one `{"b": bases, "o": outcomes}` line per snapshot.
pub fn write_jsonl<W: Write>(set: &ShadowSet, config_hash: Option<&str>, mut w: W) -> Result<()> {
    let header = Header {
        n_qubits: set.n_qubits(),
        seed: set.seed(),
        source: set.source().to_string(),
        s: set.len(),
        config_hash: config_hash.map(str::to_owned),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for snap in set.snapshots() {
        serde_json::to_writer(
            &mut w,
            &Record {
                b: snap.basis_string(),
                o: snap.outcome_string(),
            },
        )?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<ShadowSet> {
    let mut lines = r.lines();
    let header: Header = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Parse("empty snapshot file".into())),
    };
    let mut snaps = Vec::with_capacity(header.s);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let bases = rec
            .b
            .chars()
            .map(|c| Basis::from_char(c).ok_or_else(|| Error::Parse(format!("bad basis {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let bits = rec
            .o
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Parse(format!("bad outcome {c:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        snaps.push(Snapshot::new(bases, bits)?);
    }
    if snaps.len() != header.s {
        return Err(Error::Parse(format!("header announces {} snapshots, file has {}", header.s, snaps.len())));
    }
    ShadowSet::new(header.n_qubits, snaps, header.seed, header.source.parse()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ONE;
    use crate::annealing::{build_annealing_circuit, scale_noise, AnnealingSchedule};
    use crate::pauli::{build_tfim, to_dense, Boundary, PauliString};
    use crate::state::energy;

    fn random_hermitian(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<C64> {
        let a = DMatrix::from_fn(dim, dim, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        &a + a.adjoint()
    }

    #[test]
    fn dual_factor_values() {
        let d = dual_factor(Basis::Z, false);
        assert!((d[(0, 0)] - C64::new(2.0, 0.0)).norm() < 1e-15);
        assert!((d[(1, 1)] - C64::new(-1.0, 0.0)).norm() < 1e-15);
        assert!(d[(0, 1)].norm() < 1e-15);
        for b in Basis::ALL {
            for bit in [false, true] {
                assert!((dual_factor(b, bit).trace() - ONE).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn single_qubit_unbiasedness() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psi = Statevector::random(1, &mut rng);
        let v = nalgebra::DVector::from_column_slice(psi.amplitudes());
        let rho = &v * v.adjoint();
        let o = random_hermitian(2, &mut rng);
        let mut sum = ZERO;
        for b in Basis::ALL {
            for bit in [false, true] {
                let proj = (dual_factor(b, bit) + linalg::identity(2)) / C64::new(3.0, 0.0);
                let p = (&proj * &rho).trace();
                sum += p / 3.0 * (&o * dual_factor(b, bit)).trace();
            }
        }
        assert!((sum - (&rho * &o).trace()).norm() < 1e-12);
    }

    #[test]
    fn snapshot_weight_values() {
        let z0 = Snapshot::new(vec![Basis::Z], vec![false]).unwrap();
        let x0 = Snapshot::new(vec![Basis::X], vec![false]).unwrap();
        let z = PauliTerm::new(1.0, PauliString::single(1, 0, Pauli::Z));
        let c = PauliTerm::new(0.7, PauliString::identity(1));
        assert_eq!(snapshot_weight(&z0, &z).unwrap(), 3.0);
        assert_eq!(snapshot_weight(&x0, &z).unwrap(), 0.0);
        assert_eq!(snapshot_weight(&x0, &c).unwrap(), 0.7);
        let two = PauliTerm::new(1.0, PauliString::identity(2));
        assert!(snapshot_weight(&x0, &two).is_err());
    }

    #[test]
    fn weight_equals_dual_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h: PauliSum = "0.3 * XYZ + -1.2 * ZZI + 0.5 * IYI + 2 * III".parse().unwrap();
        let dense = to_dense(&h).unwrap();
        for _ in 0..50 {
            let bases: Vec<Basis> = (0..3).map(|_| Basis::ALL[rng.random_range(0..3)]).collect();
            let bits: Vec<bool> = (0..3).map(|_| rng.random()).collect();
            let snap = Snapshot::new(bases, bits).unwrap();
            let direct: f64 = h.terms().iter().map(|t| snapshot_weight(&snap, t).unwrap()).sum();
            let d = dual_factor(snap.bases[0], snap.bits[0])
                .kronecker(&dual_factor(snap.bases[1], snap.bits[1]))
                .kronecker(&dual_factor(snap.bases[2], snap.bits[2]));
            let want = (d * dense.matrix()).trace();
            assert!((direct - want.re).abs() < 1e-12 && want.im.abs() < 1e-12);
            assert!((dual_contract(&snap, &[0, 1, 2], dense.matrix()) - want.re).abs() < 1e-12);
        }
    }

    #[test]
    fn z_basis_on_zero_state_is_deterministic() {
        let set = sample_snapshots(&Statevector::basis(1, 0), 2000, 1).unwrap();
        for s in set.snapshots().iter().filter(|s| s.bases[0] == Basis::Z) {
            assert!(!s.bits[0]);
        }
    }

    #[test]
    fn x_basis_on_zero_state_is_fair() {
        let set = sample_snapshots(&Statevector::basis(1, 0), 30_000, 2).unwrap();
        let xs: Vec<bool> = set.snapshots().iter().filter(|s| s.bases[0] == Basis::X).map(|s| s.bits[0]).collect();
        let ones = xs.iter().filter(|&&b| b).count() as f64;
        let n = xs.len() as f64;
        let chi2 = (ones - n / 2.0).powi(2) / (n / 2.0) + (n - ones - n / 2.0).powi(2) / (n / 2.0);
        // 1 dof, p = 0.001
        assert!(chi2 < 10.83, "chi2 {chi2}");
    }

    #[test]
    fn bell_state_z_outcomes_agree() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let bell = Statevector::from_amplitudes(2, vec![C64::new(h, 0.0), ZERO, ZERO, C64::new(h, 0.0)]).unwrap();
        let set = sample_snapshots(&bell, 3000, 3).unwrap();
        let zz: Vec<&Snapshot> = set.snapshots().iter().filter(|s| s.bases == [Basis::Z, Basis::Z]).collect();
        assert!(zz.len() > 100);
        assert!(zz.iter().all(|s| s.bits[0] == s.bits[1]));
    }

    #[test]
    fn sampling_is_deterministic() {
        let psi = Statevector::random(3, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(sample_snapshots(&psi, 100, 9).unwrap(), sample_snapshots(&psi, 100, 9).unwrap());
        assert_ne!(sample_snapshots(&psi, 100, 9).unwrap(), sample_snapshots(&psi, 100, 10).unwrap());
    }

    #[test]
    fn z_expectation_on_zero() {
        let set = sample_snapshots(&Statevector::basis(1, 0), 10_000, 4).unwrap();
        let r = estimate(&set, &"1 * Z".parse().unwrap()).unwrap();
        assert!((r.mean - 1.0).abs() < 4.0 * r.std_err);
        let c = estimate(&set, &"2.5 * I".parse().unwrap()).unwrap();
        assert_eq!((c.mean, c.std_err, c.s_used), (2.5, 0.0, 10_000));
    }

    #[test]
    fn estimator_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 5;
        let psi = Statevector::random(n, &mut rng);
        let set = sample_snapshots(&psi, 500, 11).unwrap();
        let h = build_tfim(n, -0.8, 1.1, Boundary::Periodic).unwrap();
        let ops: Vec<SupportedOperator> = h
            .terms()
            .iter()
            .map(|t| {
                let supp = t.string.support();
                let local = PauliString::new(supp.iter().map(|&q| t.string.axes()[q]).collect());
                SupportedOperator::new(supp, local.to_matrix() * t.coeff).unwrap()
            })
            .collect();
        let a = estimate(&set, &h).unwrap();
        let b = estimate_dense(&set, &ops).unwrap();
        let c = CompiledObservable::new(n, &ops).unwrap().estimate(&set).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-10 && (a.std_err - b.std_err).abs() < 1e-10);
        assert!((a.mean - c.mean).abs() < 1e-10 && (a.std_err - c.std_err).abs() < 1e-10);
    }

    #[test]
    fn compiled_dense_block_matches_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let psi = Statevector::random(4, &mut rng);
        let set = sample_snapshots(&psi, 200, 1).unwrap();
        let op = SupportedOperator::new(vec![3, 0, 2], random_hermitian(8, &mut rng)).unwrap();
        let compiled = CompiledObservable::new(4, std::slice::from_ref(&op)).unwrap();
        for snap in set.snapshots() {
            let want = dual_contract(snap, op.support(), op.matrix());
            assert!((compiled.weight(snap) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn estimator_errors() {
        let set = ShadowSet::new(2, vec![], 0, Source::Ideal).unwrap();
        assert!(matches!(estimate(&set, &"1 * ZZ".parse().unwrap()), Err(Error::EmptySet)));
        let set = sample_snapshots(&Statevector::basis(2, 0), 3, 0).unwrap();
        assert!(matches!(estimate(&set, &"1 * Z".parse().unwrap()), Err(Error::SizeMismatch { .. })));
        assert!(sample_snapshots(&Statevector::basis(2, 0), 0, 0).is_err());
    }

    #[test]
    fn weight_resolved_total_is_estimator_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let psi = Statevector::random(4, &mut rng);
        let set = sample_snapshots(&psi, 400, 2).unwrap();
        let h: PauliSum = "0.4 * XIII + -1 * ZZII + 0.2 * XYZI + 0.9 * IIZZ + 0.1 * YYYY".parse().unwrap();
        let wr = weight_resolved_variance(&set, &h).unwrap();
        let direct = estimate(&set, &h).unwrap().std_err.powi(2);
        assert!((wr.total - direct).abs() <= 1e-10 * direct);
        assert_eq!(wr.contributions.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3, 4]);

        let single: PauliSum = "1 * ZZII + 0.5 * IIXX".parse().unwrap();
        let wr = weight_resolved_variance(&set, &single).unwrap();
        let direct = estimate(&set, &single).unwrap().std_err.powi(2);
        assert_eq!(wr.contributions.len(), 1);
        assert!((wr.contributions[&2] - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn forecast_values() {
        let s = required_snapshots(0.0033, 100_000, 0.07, 0.25).unwrap();
        assert!((1_000_000..=1_100_000).contains(&s), "{s}");
        assert_eq!(required_snapshots(0.49, 1, 0.7, 1.0).unwrap(), 1);
        let a = required_snapshots(0.02, 1000, 0.1, 0.1).unwrap();
        let b = required_snapshots(0.02, 1000, 0.1, 0.2).unwrap();
        assert_eq!(a, 4 * b);
        assert!(required_snapshots(0.0, 1, 1.0, 1.0).is_err());
    }

    #[test]
    fn worst_case_values() {
        assert_eq!(locality_prefactor(Locality::Layers(1)), 16.0);
        assert_eq!(locality_prefactor(Locality::Layers(2)), 256.0);
        assert_eq!(locality_prefactor(Locality::Qubits(0)), 1.0);
        assert_eq!(worst_case_locality(2), 12);
        let b = worst_case_bound(100, 0.1, Locality::Qubits(2), 2.0).unwrap();
        assert!((b - 100f64.ln() / 0.01 * 16.0 * 4.0).abs() < 1e-9);
        assert!(worst_case_bound(100, 0.0, Locality::Qubits(2), 1.0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let psi = Statevector::random(5, &mut ChaCha8Rng::seed_from_u64(3));
        let set = sample_snapshots(&psi, 50, 77).unwrap().with_source(Source::Noisy(Some(0.1)));
        let mut buf = Vec::new();
        write_jsonl(&set, Some("abc"), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"source\":\"noisy(0.1)\""));
        let back = read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, set);
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(read_jsonl(std::io::Cursor::new(truncated)).is_err());
    }

    #[test]
    fn fully_random_readout_kills_signal() {
        let n = 3;
        let c = Circuit::new(n);
        let m = NoiseModel {
            e_ro: 0.5,
            ..NoiseModel::noise_free()
        };
        let set = sample_snapshots_noisy(&Statevector::basis(n, 0), &c, &m, 20_000, 5).unwrap();
        let r = estimate(&set, &"1 * ZII + 1 * IZI + 1 * ZZZ".parse().unwrap()).unwrap();
        assert!(r.mean.abs() < 4.0 * r.std_err, "{r:?}");
    }

    #[test]
    fn noise_free_sampler_matches_ideal_statistics() {
        let n = 4;
        let s = AnnealingSchedule::new(2.0, 0.5).unwrap();
        let c = build_annealing_circuit(&s, n, Boundary::Periodic).unwrap();
        let h = build_tfim(n, -1.0, 1.0, Boundary::Periodic).unwrap();
        let start = Statevector::minus_product(n);
        let exact = energy(&crate::annealing::apply_circuit(&start, &c).unwrap(), &h).unwrap();
        let set = sample_snapshots_noisy(&start, &c, &NoiseModel::noise_free(), 20_000, 6).unwrap();
        let r = estimate(&set, &h).unwrap();
        assert!((r.mean - exact).abs() < 4.0 * r.std_err);
    }

    #[test]
    fn noisy_energy_error_grows_with_strength() {
        let n = 4;
        let s = AnnealingSchedule::new(2.0, 0.5).unwrap();
        let c = build_annealing_circuit(&s, n, Boundary::Periodic).unwrap();
        let h = build_tfim(n, -1.0, 1.0, Boundary::Periodic).unwrap();
        let start = Statevector::minus_product(n);
        let exact = energy(&crate::annealing::apply_circuit(&start, &c).unwrap(), &h).unwrap();
        let base = NoiseModel::representative();
        let errs: Vec<f64> = [1.0, 10.0, 30.0]
            .iter()
            .map(|&eta| {
                let m = scale_noise(&base, eta).unwrap();
                let set = sample_snapshots_noisy(&start, &c, &m, 20_000, 7).unwrap();
                estimate(&set, &h).unwrap().mean - exact
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] > w[0]), "{errs:?}");
    }
}
