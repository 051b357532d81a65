//! Periodic, untruncated binary MERA acting on an annealed state.
//!
//! Layer `l` (1-based) holds `N/2^l` isometries on the aligned blocks
//! `[i·2^l, (i+1)·2^l)` and `N/2^l` disentanglers on the blocks that start at
//! `i·2^l + 2^(l−1)` and wrap around the ring. Every tensor is a square
//! unitary of dimension `2^(2^l)`.
//!
//! The circuit applies layers from coarse (`l = L`) to fine (`l = 1`); within a
//! layer the isometry row acts before the disentangler row. Tensors are stored
//! in exactly that order, and gradient sets follow it.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, MatrixRecord, ZERO};
use crate::pauli::{pauli_decompose, PauliString, PauliSum, SupportedOperator};
use crate::shadows::{dual_factor, CompiledObservable, EstimatorResult, ShadowSet};
use crate::state::{self, Statevector};

pub const ISOMETRY_TOL: f64 = 1e-10;
/// Largest support a transformed term may reach before [`transform_operator`] gives up.
pub const DEFAULT_SUPPORT_CAP: usize = 10;
/// Largest system for which the dense empirical shadow operator is built.
pub const SHADOW_DENSE_CAP: usize = 10;
const FORMAT: &str = "hybrid-mera";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Disentangler,
    Isometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeraTensor {
    pub kind: TensorKind,
    pub layer: usize,
    pub block: Vec<usize>,
    pub matrix: DMatrix<C64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mera {
    n_sites: usize,
    n_layers: usize,
    tensors: Vec<MeraTensor>,
}

fn wiring(n: usize, layers: usize) -> Result<Vec<(TensorKind, usize, Vec<usize>)>> {
    if n < 2 || layers >= usize::BITS as usize || n % (1usize << layers) != 0 || n < (1usize << layers) {
        return Err(Error::InvalidSize(format!(
            "{n} sites cannot host {layers} MERA layers (need 2^layers to divide n)"
        )));
    }
    let mut out = Vec::new();
    for l in (1..=layers).rev() {
        let width = 1usize << l;
        let count = n / width;
        for i in 0..count {
            out.push((TensorKind::Isometry, l, (i * width..(i + 1) * width).collect()));
        }
        for i in 0..count {
            let start = i * width + width / 2;
            out.push((TensorKind::Disentangler, l, (0..width).map(|t| (start + t) % n).collect()));
        }
    }
    Ok(out)
}

/// Haar-distributed unitary from the QR decomposition of a complex Gaussian matrix.
pub fn haar_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<C64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { C64::new(1.0, 0.0) };
        for i in 0..dim {
            q[(i, j)] *= phase;
        }
    }
    q
}

impl Mera {
    pub fn identity(n_sites: usize, n_layers: usize) -> Result<Self> {
        let tensors = wiring(n_sites, n_layers)?
            .into_iter()
            .map(|(kind, layer, block)| MeraTensor {
                kind,
                layer,
                matrix: linalg::identity(1 << block.len()),
                block,
            })
            .collect();
        Ok(Self {
            n_sites,
            n_layers,
            tensors,
        })
    }

    pub fn random<R: Rng + ?Sized>(n_sites: usize, n_layers: usize, rng: &mut R) -> Result<Self> {
        let tensors = wiring(n_sites, n_layers)?
            .into_iter()
            .map(|(kind, layer, block)| MeraTensor {
                kind,
                layer,
                matrix: haar_unitary(1 << block.len(), rng),
                block,
            })
            .collect();
        Ok(Self {
            n_sites,
            n_layers,
            tensors,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Tensors in application order.
    pub fn tensors(&self) -> &[MeraTensor] {
        &self.tensors
    }

    pub fn matrices(&self) -> Vec<DMatrix<C64>> {
        self.tensors.iter().map(|t| t.matrix.clone()).collect()
    }

    fn check_shapes(&self, mats: &[DMatrix<C64>]) -> Result<()> {
        if mats.len() != self.tensors.len() {
            return Err(Error::SizeMismatch {
                expected: self.tensors.len(),
                got: mats.len(),
            });
        }
        for (t, m) in self.tensors.iter().zip(mats) {
            if m.shape() != t.matrix.shape() {
                return Err(Error::SizeMismatch {
                    expected: t.matrix.nrows(),
                    got: m.nrows(),
                });
            }
        }
        Ok(())
    }

    /// Same wiring with new tensors; each must be unitary to `1e−10`.
    pub fn with_matrices(&self, mats: Vec<DMatrix<C64>>) -> Result<Self> {
        self.check_shapes(&mats)?;
        for (i, m) in mats.iter().enumerate() {
            let res = linalg::isometry_residual(m);
            if !(res <= ISOMETRY_TOL) {
                return Err(Error::Validation(format!("tensor {i} violates isometry (residual {res:e})")));
            }
        }
        Ok(self.replace(mats))
    }

    fn replace(&self, mats: Vec<DMatrix<C64>>) -> Self {
        let tensors = self
            .tensors
            .iter()
            .zip(mats)
            .map(|(t, matrix)| MeraTensor {
                matrix,
                ..t.clone()
            })
            .collect();
        Self { tensors, ..*self }
    }

    /// `X + eps·Δ` per tensor without restoring isometry. For finite-difference probes.
    pub fn perturbed(&self, direction: &[DMatrix<C64>], eps: f64) -> Result<Self> {
        self.check_shapes(direction)?;
        let mats = self
            .tensors
            .iter()
            .zip(direction)
            .map(|(t, d)| &t.matrix + d * C64::new(eps, 0.0))
            .collect();
        Ok(self.replace(mats))
    }

    pub fn max_isometry_residual(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| linalg::isometry_residual(&t.matrix))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self, config_hash: Option<&str>) -> Result<String> {
        let file = MeraFile {
            format: FORMAT.into(),
            version: VERSION,
            n_sites: self.n_sites,
            n_layers: self.n_layers,
            config_hash: config_hash.map(str::to_owned),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorRecord {
                    kind: t.kind,
                    layer: t.layer,
                    block: t.block.clone(),
                    matrix: MatrixRecord::from(&t.matrix),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MeraFile = serde_json::from_str(text)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Parse(format!(
                "unsupported MERA container {} v{}",
                file.format, file.version
            )));
        }
        let skeleton = Self::identity(file.n_sites, file.n_layers)?;
        if file.tensors.len() != skeleton.tensors.len() {
            return Err(Error::Parse("tensor count does not match the wiring".into()));
        }
        let mut mats = Vec::with_capacity(file.tensors.len());
        for (rec, t) in file.tensors.iter().zip(&skeleton.tensors) {
            if rec.kind != t.kind || rec.layer != t.layer || rec.block != t.block {
                return Err(Error::Parse(format!("tensor wiring mismatch at block {:?}", rec.block)));
            }
            mats.push(
                rec.matrix
                    .to_matrix()
                    .ok_or_else(|| Error::Parse("malformed matrix record".into()))?,
            );
        }
        skeleton.with_matrices(mats)
    }
}

pub fn identity_mera(n: usize, layers: usize) -> Result<Mera> {
    Mera::identity(n, layers)
}

pub fn random_mera<R: Rng + ?Sized>(n: usize, layers: usize, rng: &mut R) -> Result<Mera> {
    Mera::random(n, layers, rng)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeraFile {
    format: String,
    version: u32,
    n_sites: usize,
    n_layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    kind: TensorKind,
    layer: usize,
    block: Vec<usize>,
    matrix: MatrixRecord,
}

fn check_state(m: &Mera, n: usize) -> Result<()> {
    if m.n_sites != n {
        return Err(Error::SizeMismatch {
            expected: m.n_sites,
            got: n,
        });
    }
    Ok(())
}

pub fn apply_mera(psi: &Statevector, m: &Mera) -> Result<Statevector> {
    check_state(m, psi.n_qubits())?;
    let mut out = psi.clone();
    for t in &m.tensors {
        out.apply_matrix(&t.block, &t.matrix);
    }
    Ok(out)
}

/// `⟨ψ|U† H U|ψ⟩`.
pub fn energy_exact(m: &Mera, psi: &Statevector, h: &PauliSum) -> Result<f64> {
    state::energy(&apply_mera(psi, m)?, h)
}

/// Conjugated Hamiltonian `U† H U` as dense blocks on tracked supports.
#[derive(Clone, Debug)]
pub struct TransformedOperator {
    n_qubits: usize,
    terms: Vec<SupportedOperator>,
}

impl TransformedOperator {
    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn terms(&self) -> &[SupportedOperator] {
        &self.terms
    }

    pub fn max_support(&self) -> usize {
        self.terms.iter().map(|t| t.support().len()).max().unwrap_or(0)
    }

    /// Terms with equal supports summed into one block.
    pub fn merged(&self) -> Result<TransformedOperator> {
        let mut groups: BTreeMap<Vec<usize>, DMatrix<C64>> = BTreeMap::new();
        for t in &self.terms {
            groups
                .entry(t.support().to_vec())
                .and_modify(|acc| *acc += t.matrix())
                .or_insert_with(|| t.matrix().clone());
        }
        let terms = groups
            .into_iter()
            .map(|(s, mat)| SupportedOperator::new(s, mat))
            .collect::<Result<_>>()?;
        Ok(TransformedOperator {
            n_qubits: self.n_qubits,
            terms,
        })
    }

    pub fn expectation(&self, psi: &Statevector) -> Result<f64> {
        if psi.n_qubits() != self.n_qubits {
            return Err(Error::SizeMismatch {
                expected: self.n_qubits,
                got: psi.n_qubits(),
            });
        }
        let parts: Vec<f64> = self
            .terms
            .iter()
            .map(|t| {
                let mut phi = psi.clone();
                phi.apply_matrix(t.support(), t.matrix());
                psi.inner(&phi).re
            })
            .collect();
        Ok(linalg::pairwise_sum(&parts))
    }

    pub fn to_dense(&self) -> Result<DMatrix<C64>> {
        let n = self.n_qubits;
        if n > crate::pauli::DEFAULT_DENSE_CAP {
            return Err(Error::SizeCap {
                what: "dense transformed operator",
                needed: n,
                cap: crate::pauli::DEFAULT_DENSE_CAP,
            });
        }
        let dim = 1usize << n;
        let mut out = DMatrix::from_element(dim, dim, ZERO);
        for t in &self.terms {
            for j in 0..dim {
                let mut col = vec![ZERO; dim];
                col[j] = C64::new(1.0, 0.0);
                linalg::apply_block(&mut col, n, t.support(), t.matrix());
                for (i, v) in col.into_iter().enumerate() {
                    out[(i, j)] += v;
                }
            }
        }
        Ok(out)
    }

    /// Full Pauli expansion; coefficients with magnitude `≤ drop_threshold` are dropped.
    pub fn to_pauli_sum(&self, drop_threshold: f64) -> Result<PauliSum> {
        let mut acc = PauliSum::empty(self.n_qubits);
        for t in &self.merged()?.terms {
            let local = pauli_decompose(t, drop_threshold)?;
            acc = acc.plus(&local.embed(t.support(), self.n_qubits)?, drop_threshold)?;
        }
        Ok(acc)
    }
}

fn is_identity(m: &DMatrix<C64>) -> bool {
    m.iter()
        .enumerate()
        .all(|(f, &z)| z == if f % (m.nrows() + 1) == 0 { C64::new(1.0, 0.0) } else { ZERO })
}

/// In-place `M ← A·M·Bᵀ` on the listed qubits of a column-major operator on `k` qubits.
fn sandwich(m: &mut DMatrix<C64>, k: usize, targets: &[usize], left: &DMatrix<C64>, right_t: &DMatrix<C64>) {
    // column-major flat index c·dim + r: column qubits lead, row qubits follow
    let rows: Vec<usize> = targets.iter().map(|&q| q + k).collect();
    let flat = m.as_mut_slice();
    linalg::apply_block(flat, 2 * k, &rows, left);
    linalg::apply_block(flat, 2 * k, targets, right_t);
}

/// Support of `U† O U` for an operator on `support`, visiting tensors in reverse application order.
fn light_cone(m: &Mera, support: &[usize], skip: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let mut inside = vec![false; m.n_sites];
    support.iter().for_each(|&q| inside[q] = true);
    let mut hits = Vec::new();
    for (idx, t) in m.tensors.iter().enumerate().rev() {
        if skip[idx] || !t.block.iter().any(|&q| inside[q]) {
            continue;
        }
        t.block.iter().for_each(|&q| inside[q] = true);
        hits.push(idx);
    }
    ((0..m.n_sites).filter(|&q| inside[q]).collect(), hits)
}

/// `O ⊗ I` on `outer ⊇ inner`; both supports sorted ascending.
fn widen(op: &DMatrix<C64>, inner: &[usize], outer: &[usize]) -> DMatrix<C64> {
    let k_in = inner.len();
    let k_out = outer.len();
    let pos: Vec<usize> = inner
        .iter()
        .map(|q| outer.iter().position(|p| p == q).expect("inner support inside outer"))
        .collect();
    let in_mask: usize = pos.iter().map(|&p| linalg::bit_of(k_out, p)).sum();
    let compress = |x: usize| -> usize {
        pos.iter()
            .enumerate()
            .filter(|(_, &p)| x & linalg::bit_of(k_out, p) != 0)
            .map(|(t, _)| linalg::bit_of(k_in, t))
            .sum()
    };
    let dim = 1usize << k_out;
    let small: Vec<usize> = (0..dim).map(compress).collect();
    DMatrix::from_fn(dim, dim, |r, c| {
        if (r & !in_mask) == (c & !in_mask) {
            op[(small[r], small[c])]
        } else {
            ZERO
        }
    })
}

pub fn transform_operator(m: &Mera, h: &PauliSum) -> Result<TransformedOperator> {
    transform_operator_capped(m, h, DEFAULT_SUPPORT_CAP)
}

pub fn transform_operator_capped(m: &Mera, h: &PauliSum, cap: usize) -> Result<TransformedOperator> {
    check_state(m, h.n_qubits())?;
    let skip: Vec<bool> = m.tensors.iter().map(|t| is_identity(&t.matrix)).collect();
    let terms = h
        .terms()
        .par_iter()
        .map(|term| {
            let support = term.string.support();
            let local = PauliString::new(support.iter().map(|&q| term.string.axes()[q]).collect());
            let base = local.to_matrix() * term.coeff;
            let (cone, hits) = light_cone(m, &support, &skip);
            if cone.len() > cap {
                return Err(Error::SizeCap {
                    what: "transformed term support",
                    needed: cone.len(),
                    cap,
                });
            }
            let mut op = widen(&base, &support, &cone);
            let k = cone.len();
            for idx in hits {
                let t = &m.tensors[idx];
                let targets: Vec<usize> = t
                    .block
                    .iter()
                    .map(|q| cone.iter().position(|p| p == q).expect("block inside cone"))
                    .collect();
                // U† O U: rows by G†, columns by Gᵀ
                sandwich(&mut op, k, &targets, &t.matrix.adjoint(), &t.matrix.transpose());
            }
            SupportedOperator::new(cone, op)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformedOperator {
        n_qubits: h.n_qubits(),
        terms,
    })
}

/// Shadow estimate of `⟨ψ|U† H U|ψ⟩` from snapshots of `ψ`.
pub fn energy_shadow(m: &Mera, set: &ShadowSet, h: &PauliSum) -> Result<EstimatorResult> {
    let op = transform_operator(m, h)?.merged()?;
    CompiledObservable::new(op.n_qubits(), op.terms())?.estimate(set)
}

/// Euclidean gradient per tensor, with `dE = 2·Re Σ Tr[G† dX]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet(pub Vec<DMatrix<C64>>);

impl GradientSet {
    pub fn matrices(&self) -> &[DMatrix<C64>] {
        &self.0
    }

    /// `2·Re Σ ⟨G, Δ⟩`.
    pub fn directional(&self, direction: &[DMatrix<C64>]) -> f64 {
        2.0 * self
            .0
            .iter()
            .zip(direction)
            .map(|(g, d)| linalg::inner(g, d).re)
            .sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }
}

pub enum GradientSource<'a> {
    State(&'a Statevector),
    Shadows(&'a ShadowSet),
}

pub fn gradient(m: &Mera, source: GradientSource<'_>, h: &PauliSum) -> Result<GradientSet> {
    Ok(match source {
        GradientSource::State(psi) => energy_and_gradient_exact(m, psi, h)?.1,
        GradientSource::Shadows(set) => energy_and_gradient_shadow(m, set, h)?.1,
    })
}

/// Energy and gradient from forward states `φ_k` and adjoint states `λ_k`.
pub fn energy_and_gradient_exact(m: &Mera, psi: &Statevector, h: &PauliSum) -> Result<(f64, GradientSet)> {
    check_state(m, psi.n_qubits())?;
    let n = m.n_sites;
    let mut phis = Vec::with_capacity(m.tensors.len() + 1);
    phis.push(psi.amplitudes().to_vec());
    for t in &m.tensors {
        let mut next = phis.last().expect("non-empty").clone();
        linalg::apply_block(&mut next, n, &t.block, &t.matrix);
        phis.push(next);
    }
    let last = phis.last().expect("non-empty");
    let energy = state::expectation_raw(last, n, h)?;
    let mut lambda = h.apply(last);
    let mut grads = vec![DMatrix::from_element(0, 0, ZERO); m.tensors.len()];
    for (k, t) in m.tensors.iter().enumerate().rev() {
        grads[k] = linalg::partial_outer(&lambda, &phis[k], n, &t.block);
        linalg::apply_block(&mut lambda, n, &t.block, &t.matrix.adjoint());
    }
    let g = GradientSet(grads);
    if !g.is_finite() || !energy.is_finite() {
        return Err(Error::NonFinite("exact gradient".into()));
    }
    Ok((energy, g))
}

/// `ρ_S = (1/S) Σ_s ⊗_q (3|b_q⟩⟨b_q| − I)`, dense on all qubits.
pub fn empirical_operator(set: &ShadowSet) -> Result<DMatrix<C64>> {
    let n = set.n_qubits();
    if n > SHADOW_DENSE_CAP {
        return Err(Error::SizeCap {
            what: "dense shadow operator",
            needed: n,
            cap: SHADOW_DENSE_CAP,
        });
    }
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let factors: Vec<[DMatrix<C64>; 2]> = crate::shadows::Basis::ALL
        .iter()
        .map(|&b| [dual_factor(b, false), dual_factor(b, true)])
        .collect();
    let index = |b: crate::shadows::Basis| crate::shadows::Basis::ALL.iter().position(|&x| x == b).expect("basis");
    let dim = 1usize << n;
    let chunk = 256;
    let partials: Vec<DMatrix<C64>> = set
        .snapshots()
        .par_chunks(chunk)
        .map(|snaps| {
            let mut acc = DMatrix::from_element(dim, dim, ZERO);
            for s in snaps {
                let mut prod = DMatrix::from_element(1, 1, C64::new(1.0, 0.0));
                for (b, &bit) in s.bases().iter().zip(s.bits()) {
                    prod = prod.kronecker(&factors[index(*b)][bit as usize]);
                }
                acc += prod;
            }
            acc
        })
        .collect();
    let mut total = DMatrix::from_element(dim, dim, ZERO);
    for p in partials {
        total += p;
    }
    Ok(total / C64::new(set.len() as f64, 0.0))
}

/// Empirical energy `Tr[U ρ_S U† H]` and its gradient, through dense operators.
///
/// Valid for non-unitary tensors too, which the finite-difference checks rely on.
pub fn energy_and_gradient_shadow(m: &Mera, set: &ShadowSet, h: &PauliSum) -> Result<(f64, GradientSet)> {
    check_state(m, set.n_qubits())?;
    check_state(m, h.n_qubits())?;
    let n = m.n_sites;
    let mut rhos = Vec::with_capacity(m.tensors.len() + 1);
    rhos.push(empirical_operator(set)?);
    for t in &m.tensors {
        let mut next = rhos.last().expect("non-empty").clone();
        // G ρ G†: rows by G, columns by conj(G)
        sandwich(&mut next, n, &t.block, &t.matrix, &t.matrix.conjugate());
        rhos.push(next);
    }
    let mut lambda = crate::pauli::to_dense_capped(h, SHADOW_DENSE_CAP)?.matrix().clone();
    let energy = (&lambda * rhos.last().expect("non-empty")).trace().re;
    let dim = 1usize << n;
    let mut grads = vec![DMatrix::from_element(0, 0, ZERO); m.tensors.len()];
    for (k, t) in m.tensors.iter().enumerate().rev() {
        // Tr_rest[Λ_k · G ρ_{k−1}]
        let mut g_rho = rhos[k].clone();
        sandwich(&mut g_rho, n, &t.block, &t.matrix, &linalg::identity(t.matrix.nrows()));
        let full = &lambda * g_rho;
        let offsets = linalg::local_offsets(n, &t.block);
        let mask: usize = t.block.iter().map(|&q| linalg::bit_of(n, q)).sum();
        let bd = offsets.len();
        let mut g = DMatrix::from_element(bd, bd, ZERO);
        for base in (0..dim).filter(|b| b & mask == 0) {
            for (i, oi) in offsets.iter().enumerate() {
                for (j, oj) in offsets.iter().enumerate() {
                    g[(i, j)] += full[(base + oi, base + oj)];
                }
            }
        }
        grads[k] = g;
        // Λ_{k−1} = G† Λ_k G
        sandwich(&mut lambda, n, &t.block, &t.matrix.adjoint(), &t.matrix.transpose());
    }
    let g = GradientSet(grads);
    if !g.is_finite() || !energy.is_finite() {
        return Err(Error::NonFinite("shadow gradient".into()));
    }
    Ok((energy, g))
}

/// Worst-case qubit support of a term spanning `initial_links` sites after `layers` layers.
///
/// Each layer maps 1 link to 2, 2 to at most 3, and 3 to 3; a coarse link holds `2^layers` qubits.
pub fn support_after_layers(initial_links: usize, layers: u32) -> usize {
    if layers == 0 {
        return initial_links;
    }
    (initial_links + layers as usize).min(3) << layers
}
