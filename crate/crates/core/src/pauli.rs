//! Pauli strings, sparse Pauli sums and dense operators on explicit supports.
//!
//! Qubit 0 is the most significant tensor factor everywhere in this crate:
//! the dense realization of `A ⊗ B` on qubits `(0, 1)` is `kron(A, B)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, bit_of, I, ONE, ZERO};

pub const DEFAULT_DROP_THRESHOLD: f64 = 1e-12;
pub const DEFAULT_DENSE_CAP: usize = 14;
const HERMITIAN_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn matrix(self) -> DMatrix<C64> {
        let m = match self {
            Pauli::I => [ONE, ZERO, ZERO, ONE],
            Pauli::X => [ZERO, ONE, ONE, ZERO],
            Pauli::Y => [ZERO, -I, I, ZERO],
            Pauli::Z => [ONE, ZERO, ZERO, -ONE],
        };
        DMatrix::from_row_slice(2, 2, &m)
    }

    pub fn as_char(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'I' => Some(Pauli::I),
            'X' => Some(Pauli::X),
            'Y' => Some(Pauli::Y),
            'Z' => Some(Pauli::Z),
            _ => None,
        }
    }

    fn has_x(self) -> bool {
        matches!(self, Pauli::X | Pauli::Y)
    }

    fn has_z(self) -> bool {
        matches!(self, Pauli::Y | Pauli::Z)
    }
}

/// One axis per qubit, in qubit order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PauliString(Vec<Pauli>);

impl PauliString {
    pub fn new(axes: Vec<Pauli>) -> Self {
        Self(axes)
    }

    pub fn identity(n_qubits: usize) -> Self {
        Self(vec![Pauli::I; n_qubits])
    }

    /// A single non-identity axis on `qubit`.
    pub fn single(n_qubits: usize, qubit: usize, axis: Pauli) -> Self {
        let mut axes = vec![Pauli::I; n_qubits];
        axes[qubit] = axis;
        Self(axes)
    }

    pub fn pair(n_qubits: usize, (a, pa): (usize, Pauli), (b, pb): (usize, Pauli)) -> Self {
        let mut axes = vec![Pauli::I; n_qubits];
        axes[a] = pa;
        axes[b] = pb;
        Self(axes)
    }

    pub fn axes(&self) -> &[Pauli] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weight(&self) -> usize {
        self.0.iter().filter(|&&p| p != Pauli::I).count()
    }

    /// Qubits carrying a non-identity axis, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &p)| p != Pauli::I)
            .map(|(q, _)| q)
            .collect()
    }

    /// Flat-index masks `(x, z)` such that `P|j⟩ = i^{#Y} (−1)^{popcount(j & z)} |j ⊕ x⟩`.
    pub fn masks(&self) -> (usize, usize) {
        let n = self.len();
        let mut x = 0;
        let mut z = 0;
        for (q, &p) in self.0.iter().enumerate() {
            if p.has_x() {
                x |= bit_of(n, q);
            }
            if p.has_z() {
                z |= bit_of(n, q);
            }
        }
        (x, z)
    }

    fn y_phase(&self) -> C64 {
        match self.0.iter().filter(|&&p| p == Pauli::Y).count() % 4 {
            0 => ONE,
            1 => I,
            2 => -ONE,
            _ => -I,
        }
    }

    pub fn to_matrix(&self) -> DMatrix<C64> {
        let dim = 1usize << self.len();
        let (x, z) = self.masks();
        let phase = self.y_phase();
        let mut m = DMatrix::from_element(dim, dim, ZERO);
        for j in 0..dim {
            let sign = if (j & z).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            m[(j ^ x, j)] = phase * sign;
        }
        m
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.0 {
            write!(f, "{}", p.as_char())?;
        }
        Ok(())
    }
}

impl FromStr for PauliString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| Pauli::from_char(c).ok_or_else(|| Error::Parse(format!("bad Pauli axis {c:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(PauliString)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PauliTerm {
    pub coeff: C64,
    pub string: PauliString,
}

impl PauliTerm {
    pub fn new(coeff: impl Into<C64>, string: PauliString) -> Self {
        Self {
            coeff: coeff.into(),
            string,
        }
    }
}

/// Weighted sum of Pauli strings, kept in canonical order with merged duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct PauliSum {
    n_qubits: usize,
    terms: Vec<PauliTerm>,
}

impl PauliSum {
    pub fn empty(n_qubits: usize) -> Self {
        Self {
            n_qubits,
            terms: Vec::new(),
        }
    }

    /// Merge duplicates, drop `|c| ≤ drop_threshold`, sort lexicographically by axes.
    pub fn from_terms<T>(n_qubits: usize, terms: T, drop_threshold: f64) -> Result<Self>
    where
        T: IntoIterator<Item = PauliTerm>,
    {
        let mut merged: BTreeMap<PauliString, C64> = BTreeMap::new();
        for t in terms {
            if t.string.len() != n_qubits {
                return Err(Error::SizeMismatch {
                    expected: n_qubits,
                    got: t.string.len(),
                });
            }
            *merged.entry(t.string).or_insert(ZERO) += t.coeff;
        }
        let terms = merged
            .into_iter()
            .filter(|(_, c)| c.norm() > drop_threshold)
            .map(|(string, coeff)| PauliTerm { coeff, string })
            .collect();
        Ok(Self { n_qubits, terms })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn terms(&self) -> &[PauliTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn has_real_coefficients(&self) -> bool {
        self.terms.iter().all(|t| t.coeff.im == 0.0)
    }

    /// `Σ_P c_P · P |ψ⟩` without forming a matrix.
    pub fn apply(&self, psi: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; psi.len()];
        for t in &self.terms {
            let (x, z) = t.string.masks();
            let c = t.coeff * t.string.y_phase();
            for (j, &a) in psi.iter().enumerate() {
                if a == ZERO {
                    continue;
                }
                let v = c * a;
                if (j & z).count_ones() % 2 == 0 {
                    out[j ^ x] += v;
                } else {
                    out[j ^ x] -= v;
                }
            }
        }
        out
    }

    /// Re-express this sum (on `support.len()` qubits) on a register of `n_total` qubits.
    pub fn embed(&self, support: &[usize], n_total: usize) -> Result<PauliSum> {
        if support.len() != self.n_qubits {
            return Err(Error::SizeMismatch {
                expected: self.n_qubits,
                got: support.len(),
            });
        }
        let terms = self.terms.iter().map(|t| {
            let mut axes = vec![Pauli::I; n_total];
            for (&q, &p) in support.iter().zip(t.string.axes()) {
                axes[q] = p;
            }
            PauliTerm::new(t.coeff, PauliString::new(axes))
        });
        PauliSum::from_terms(n_total, terms, 0.0)
    }

    pub fn plus(&self, other: &PauliSum, drop_threshold: f64) -> Result<PauliSum> {
        PauliSum::from_terms(
            self.n_qubits,
            self.terms.iter().chain(other.terms.iter()).cloned(),
            drop_threshold,
        )
    }
}

impl fmt::Display for PauliSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, t) in self.terms.iter().enumerate() {
            let c = t.coeff;
            if c.im == 0.0 {
                let (sign, mag) = if c.re < 0.0 { ('-', -c.re) } else { ('+', c.re) };
                if i == 0 {
                    if sign == '-' {
                        write!(f, "-")?;
                    }
                } else {
                    write!(f, " {sign} ")?;
                }
                write!(f, "{mag:?} * {}", t.string)?;
            } else {
                if i > 0 {
                    write!(f, " + ")?;
                }
                let sign = if c.im < 0.0 { '-' } else { '+' };
                write!(f, "({:?}{sign}{:?}i) * {}", c.re, c.im.abs(), t.string)?;
            }
        }
        Ok(())
    }
}

impl FromStr for PauliSum {
    type Err = Error;

    /// Parses e.g. `"-1.0 * ZZII + 1.0 * XIII"`; a bare string means coefficient 1.
    fn from_str(s: &str) -> Result<Self> {
        let text: Vec<char> = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| if c == '\u{2212}' { '-' } else { c })
            .collect();
        let bad = |msg: &str| Error::Parse(format!("{msg} in {s:?}"));
        let mut pos = 0;
        let mut terms = Vec::new();
        let mut n_qubits = None;
        while pos < text.len() {
            let mut sign = 1.0;
            if terms.is_empty() || pos > 0 {
                match text.get(pos) {
                    Some('+') => pos += 1,
                    Some('-') => {
                        sign = -1.0;
                        pos += 1;
                    }
                    _ if !terms.is_empty() => return Err(bad("expected '+' or '-'")),
                    _ => {}
                }
            }
            let coeff = if text.get(pos).is_some_and(|c| Pauli::from_char(*c).is_some()) {
                ONE
            } else {
                let (c, used) = parse_coefficient(&text[pos..]).ok_or_else(|| bad("bad coefficient"))?;
                pos += used;
                if text.get(pos) != Some(&'*') {
                    return Err(bad("expected '*'"));
                }
                pos += 1;
                c
            };
            let start = pos;
            while pos < text.len() && Pauli::from_char(text[pos]).is_some() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("missing Pauli string"));
            }
            let string: PauliString = text[start..pos].iter().collect::<String>().parse()?;
            match n_qubits {
                None => n_qubits = Some(string.len()),
                Some(n) if n != string.len() => return Err(bad("inconsistent string lengths")),
                _ => {}
            }
            terms.push(PauliTerm::new(coeff * sign, string));
        }
        let n = n_qubits.ok_or_else(|| bad("empty sum"))?;
        PauliSum::from_terms(n, terms, DEFAULT_DROP_THRESHOLD)
    }
}

fn parse_real(text: &[char]) -> Option<(f64, usize)> {
    let mut end = 0;
    while end < text.len() {
        let c = text[end];
        let ok = c.is_ascii_digit()
            || c == '.'
            || c == 'e'
            || c == 'E'
            || ((c == '-' || c == '+') && (end == 0 || matches!(text[end - 1], 'e' | 'E')));
        if !ok {
            break;
        }
        end += 1;
    }
    let s: String = text[..end].iter().collect();
    s.parse().ok().map(|v| (v, end))
}

fn parse_coefficient(text: &[char]) -> Option<(C64, usize)> {
    if text.first() == Some(&'(') {
        let (re, a) = parse_real(&text[1..])?;
        let (im, b) = parse_real(&text[1 + a..])?;
        let after = 1 + a + b;
        if text.get(after) == Some(&'i') && text.get(after + 1) == Some(&')') {
            return Some((C64::new(re, im), after + 2));
        }
        None
    } else {
        parse_real(text).map(|(v, n)| (C64::new(v, 0.0), n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Open,
    Periodic,
}

/// Nearest-neighbour bonds `(i, i+1)`; periodic adds `(n−1, 0)`.
pub fn chain_bonds(n: usize, boundary: Boundary) -> Vec<(usize, usize)> {
    let mut bonds: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    if boundary == Boundary::Periodic && n > 2 {
        bonds.push((n - 1, 0));
    }
    bonds
}

/// `j Σ Z_i Z_{i+1} + lam Σ X_i`.
pub fn build_tfim(n: usize, j: f64, lam: f64, boundary: Boundary) -> Result<PauliSum> {
    if n < 2 {
        return Err(Error::InvalidSize(format!("TFIM needs at least 2 sites, got {n}")));
    }
    let zz = chain_bonds(n, boundary)
        .into_iter()
        .map(|(a, b)| PauliTerm::new(j, PauliString::pair(n, (a, Pauli::Z), (b, Pauli::Z))));
    let x = (0..n).map(|q| PauliTerm::new(lam, PauliString::single(n, q, Pauli::X)));
    PauliSum::from_terms(n, zz.chain(x), 0.0)
}

pub fn weight(p: &PauliString) -> usize {
    p.weight()
}

pub fn group_by_weight(h: &PauliSum) -> BTreeMap<usize, PauliSum> {
    let mut groups: BTreeMap<usize, Vec<PauliTerm>> = BTreeMap::new();
    for t in h.terms() {
        groups.entry(t.string.weight()).or_default().push(t.clone());
    }
    groups
        .into_iter()
        .map(|(w, ts)| {
            // terms are already canonical and distinct
            (w, PauliSum { n_qubits: h.n_qubits, terms: ts })
        })
        .collect()
}

/// Dense square matrix acting on an ordered list of distinct qubits.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportedOperator {
    support: Vec<usize>,
    matrix: DMatrix<C64>,
}

impl SupportedOperator {
    pub fn new(support: Vec<usize>, matrix: DMatrix<C64>) -> Result<Self> {
        let dim = 1usize << support.len();
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::SizeMismatch {
                expected: dim,
                got: matrix.nrows(),
            });
        }
        let mut sorted = support.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != support.len() {
            return Err(Error::Validation(format!("repeated qubit in support {support:?}")));
        }
        Ok(Self { support, matrix })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_parts(self) -> (Vec<usize>, DMatrix<C64>) {
        (self.support, self.matrix)
    }

    pub fn hermiticity_residual(&self) -> f64 {
        linalg::hermiticity_residual(&self.matrix)
    }
}

pub fn to_dense(h: &PauliSum) -> Result<SupportedOperator> {
    to_dense_capped(h, DEFAULT_DENSE_CAP)
}

pub fn to_dense_capped(h: &PauliSum, cap: usize) -> Result<SupportedOperator> {
    let n = h.n_qubits();
    if n > cap {
        return Err(Error::SizeCap {
            what: "dense operator",
            needed: n,
            cap,
        });
    }
    let dim = 1usize << n;
    let mut m = DMatrix::from_element(dim, dim, ZERO);
    for t in h.terms() {
        let (x, z) = t.string.masks();
        let c = t.coeff * t.string.y_phase();
        for j in 0..dim {
            if (j & z).count_ones() % 2 == 0 {
                m[(j ^ x, j)] += c;
            } else {
                m[(j ^ x, j)] -= c;
            }
        }
    }
    SupportedOperator::new((0..n).collect(), m)
}

/// All `4^k` Pauli coefficients `Tr[P·A]/2^k` of a `2^k`-dimensional matrix.
///
/// Indexed by `(z << k) | x` with the masks of [`PauliString::masks`] taken on
/// `k` qubits. Runs in `O(k·4^k)`.
pub fn pauli_table(matrix: &DMatrix<C64>) -> Vec<C64> {
    let dim = matrix.nrows();
    let k = dim.trailing_zeros() as usize;
    // flat index r·dim + c; slot per qubit is (row bit, col bit)
    let mut a: Vec<C64> = (0..dim * dim).map(|f| matrix[(f / dim, f % dim)]).collect();
    for q in 0..k {
        let rb = bit_of(k, q) * dim;
        let cb = bit_of(k, q);
        for f in 0..dim * dim {
            if f & rb != 0 || f & cb != 0 {
                continue;
            }
            let o00 = a[f];
            let o01 = a[f | cb];
            let o10 = a[f | rb];
            let o11 = a[f | rb | cb];
            a[f] = (o00 + o11) * 0.5; // I
            a[f | cb] = (o01 + o10) * 0.5; // X
            a[f | rb] = (o00 - o11) * 0.5; // Z
            a[f | rb | cb] = I * (o01 - o10) * 0.5; // Y
        }
    }
    a
}

fn string_from_masks(k: usize, x: usize, z: usize) -> PauliString {
    PauliString::new(
        (0..k)
            .map(|q| {
                let b = bit_of(k, q);
                match (x & b != 0, z & b != 0) {
                    (false, false) => Pauli::I,
                    (true, false) => Pauli::X,
                    (true, true) => Pauli::Y,
                    (false, true) => Pauli::Z,
                }
            })
            .collect(),
    )
}

/// Pauli expansion of `op` over its own support (qubit `i` of the result is `op.support()[i]`).
pub fn pauli_decompose(op: &SupportedOperator, drop_threshold: f64) -> Result<PauliSum> {
    let res = op.hermiticity_residual();
    if res > HERMITIAN_TOL {
        return Err(Error::Validation(format!("operator is not Hermitian (residual {res:e})")));
    }
    let k = op.support().len();
    let dim = 1usize << k;
    let table = pauli_table(op.matrix());
    let terms = table.iter().enumerate().filter_map(|(idx, &c)| {
        (c.norm() > drop_threshold).then(|| PauliTerm::new(c, string_from_masks(k, idx % dim, idx / dim)))
    });
    PauliSum::from_terms(k, terms, drop_threshold)
}
