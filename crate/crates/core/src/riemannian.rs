//! Riemannian ADAM over products of unitary tensors.
//!
//! Tangent projection at `X` is `P_X(Y) = Y − ½·X(X†Y + Y†X)`. Moments are
//! transported by re-projecting them at the new base point, and the updated
//! candidate is pulled back onto the manifold with the polar factor `U V†` of
//! its SVD. The second moment is one scalar per tensor.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mera::{energy_and_gradient_exact, energy_and_gradient_shadow, energy_exact, energy_shadow, GradientSet, Mera};
use crate::pauli::PauliSum;
use crate::shadows::{sample_snapshots, sample_snapshots_noisy, ShadowSet, Source};
use crate::annealing::{Circuit, NoiseModel};
use crate::state::Statevector;

const RANK_TOL: f64 = 1e-12;

fn check_same_shape(x: &DMatrix<C64>, y: &DMatrix<C64>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::SizeMismatch {
            expected: x.nrows() * x.ncols(),
            got: y.nrows() * y.ncols(),
        });
    }
    Ok(())
}

pub fn project_tangent(x: &DMatrix<C64>, y: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    check_same_shape(x, y)?;
    let xy = x.adjoint() * y;
    let sym = &xy + xy.adjoint();
    Ok(y - x * sym * C64::new(0.5, 0.0))
}

/// Polar factor `U V†` of `x = U S V†`.
pub fn retract(x: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let smin = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smin > RANK_TOL * smax.max(1.0)) {
        return Err(Error::Retraction(format!(
            "candidate is rank deficient (singular values in [{smin:e}, {smax:e}])"
        )));
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V†");
    Ok(u * v_t)
}

pub fn transport(x_new: &DMatrix<C64>, v: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    project_tangent(x_new, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid ADAM hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub params: AdamParams,
    /// First moment per tensor, tangent at the tensor it was last updated with.
    pub m: Vec<DMatrix<C64>>,
    /// Second moment per tensor, `‖g_R‖²_F` averaged.
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(mera: &Mera, params: AdamParams) -> Self {
        Self {
            params,
            m: mera.tensors().iter().map(|t| DMatrix::zeros(t.matrix.nrows(), t.matrix.ncols())).collect(),
            v: vec![0.0; mera.tensors().len()],
            t: 0,
        }
    }
}

/// Riemannian gradients `P_X(G)` for every tensor.
pub fn riemannian_gradient(mera: &Mera, grads: &GradientSet) -> Result<Vec<DMatrix<C64>>> {
    if grads.matrices().len() != mera.tensors().len() {
        return Err(Error::SizeMismatch {
            expected: mera.tensors().len(),
            got: grads.matrices().len(),
        });
    }
    mera.tensors()
        .iter()
        .zip(grads.matrices())
        .map(|(t, g)| project_tangent(&t.matrix, g))
        .collect()
}

pub fn adam_step(mera: &Mera, grads: &GradientSet, state: &mut AdamState) -> Result<Mera> {
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!("gradient at optimizer step {}", state.t + 1)));
    }
    let g_r = riemannian_gradient(mera, grads)?;
    let p = state.params;
    state.t += 1;
    let bc1 = 1.0 - p.beta1.powi(state.t as i32);
    let bc2 = 1.0 - p.beta2.powi(state.t as i32);
    let mut mats = Vec::with_capacity(g_r.len());
    for (i, (t, g)) in mera.tensors().iter().zip(&g_r).enumerate() {
        let x = &t.matrix;
        let m = transport(x, &state.m[i])? * C64::new(p.beta1, 0.0) + g * C64::new(1.0 - p.beta1, 0.0);
        let v = p.beta2 * state.v[i] + (1.0 - p.beta2) * g.norm_squared();
        let step = (v / bc2).sqrt() + p.eps;
        let candidate = x - &m * C64::new(p.alpha / (bc1 * step), 0.0);
        mats.push(retract(&candidate)?);
        state.m[i] = m;
        state.v[i] = v;
    }
    mera.with_matrices(mats)
}

/// How snapshot pools are shared between gradients and recorded energies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One fixed pool for gradients and energies.
    FixedShared,
    /// Fixed training pool, separate fixed evaluation pool.
    FixedSplit,
    /// Fresh pool each step, used for the gradient and the post-update energy.
    ResampleShared,
    /// Fresh independent pools each step for gradient and energy.
    ResampleIndependent,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::FixedShared,
        Protocol::FixedSplit,
        Protocol::ResampleShared,
        Protocol::ResampleIndependent,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Protocol::FixedShared => "i",
            Protocol::FixedSplit => "ii",
            Protocol::ResampleShared => "iii",
            Protocol::ResampleIndependent => "iv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Interface {
    Exact,
    Shadow { s: usize, protocol: Protocol },
}

/// Where shadow snapshots come from.
#[derive(Clone, Debug)]
pub enum SnapshotSource {
    State(Statevector),
    Noisy {
        initial: Statevector,
        circuit: Circuit,
        model: NoiseModel,
        eta: f64,
    },
}

impl SnapshotSource {
    pub fn sample(&self, s: usize, seed: u64) -> Result<ShadowSet> {
        match self {
            SnapshotSource::State(psi) => sample_snapshots(psi, s, seed),
            SnapshotSource::Noisy {
                initial,
                circuit,
                model,
                eta,
            } => Ok(sample_snapshots_noisy(initial, circuit, model, s, seed)?.with_source(Source::Noisy(Some(*eta)))),
        }
    }
}

/// Deterministic 64-bit seed for pool `k` of a given purpose.
pub fn derive_seed(base: u64, purpose: u64, k: u64) -> u64 {
    let mut z = base
        .wrapping_add(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TRAIN: u64 = 1;
const EVAL: u64 = 2;

#[derive(Clone, Debug)]
pub struct OptimizeConfig {
    pub steps: usize,
    pub adam: AdamParams,
    pub interface: Interface,
    pub shadow_seed: u64,
    /// Stop once the Riemannian gradient norm falls below this value.
    pub early_stop: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub energy: f64,
    pub std_err: f64,
    /// Exact energy of the same parameters on the reference state, when one is given.
    pub exact_energy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizationTrace {
    pub records: Vec<StepRecord>,
    pub final_mera: Mera,
    pub max_isometry_residual: f64,
    pub early_stopped_at: Option<usize>,
}

impl OptimizationTrace {
    pub fn final_record(&self) -> &StepRecord {
        self.records.last().expect("trace holds the initial record")
    }

    /// `step,energy,std_err,exact_energy` rows, preceded by `# key=value` comment lines.
    pub fn to_csv(&self, comments: &[(&str, String)]) -> String {
        let mut out = String::new();
        for (k, v) in comments {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str("step,energy,std_err,exact_energy\n");
        for r in &self.records {
            let exact = r.exact_energy.map(|e| e.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.step, r.energy, r.std_err, exact));
        }
        out
    }
}

/// Minimize the MERA energy of `source`, starting from `init`.
///
/// `reference` is the state used for exact re-evaluation of every step's
/// parameters; for the exact interface it is also the optimized state.
pub fn optimize(
    init: &Mera,
    h: &PauliSum,
    source: &SnapshotSource,
    reference: Option<&Statevector>,
    cfg: &OptimizeConfig,
) -> Result<OptimizationTrace> {
    cfg.adam.validate()?;
    let mut state = AdamState::new(init, cfg.adam);
    let mut mera = init.clone();
    let mut records = Vec::with_capacity(cfg.steps + 1);
    let mut max_res = mera.max_isometry_residual();
    let mut early = None;
    let exact_at = |m: &Mera| -> Result<Option<f64>> { reference.map(|psi| energy_exact(m, psi, h)).transpose() };

    match cfg.interface {
        Interface::Exact => {
            let psi = match (source, reference) {
                (SnapshotSource::State(psi), _) => psi,
                (_, Some(psi)) => psi,
                _ => return Err(Error::Config("exact interface needs a statevector".into())),
            };
            for k in 0..=cfg.steps {
                let (e, g) = energy_and_gradient_exact(&mera, psi, h)?;
                records.push(StepRecord {
                    step: k,
                    energy: e,
                    std_err: 0.0,
                    exact_energy: exact_at(&mera)?,
                });
                if k == cfg.steps || stop_now(&mera, &g, cfg.early_stop)? {
                    if k < cfg.steps {
                        early = Some(k);
                        log::info!("early stop at step {k}");
                    }
                    break;
                }
                mera = adam_step(&mera, &g, &mut state)?;
                max_res = max_res.max(mera.max_isometry_residual());
            }
        }
        Interface::Shadow { s, protocol } => {
            let seed = cfg.shadow_seed;
            let fixed_train = match protocol {
                Protocol::FixedShared | Protocol::FixedSplit => Some(source.sample(s, derive_seed(seed, TRAIN, 0))?),
                _ => None,
            };
            let fixed_eval = match protocol {
                Protocol::FixedSplit => Some(source.sample(s, derive_seed(seed, EVAL, 0))?),
                _ => None,
            };
            // pool that scores the parameters reached after step k
            let eval_pool = |k: usize| -> Result<ShadowSet> {
                match protocol {
                    Protocol::FixedShared => Ok(fixed_train.clone().expect("fixed pool")),
                    Protocol::FixedSplit => Ok(fixed_eval.clone().expect("fixed pool")),
                    Protocol::ResampleShared => source.sample(s, derive_seed(seed, TRAIN, k as u64)),
                    Protocol::ResampleIndependent => source.sample(s, derive_seed(seed, EVAL, k as u64)),
                }
            };
            let record = |m: &Mera, k: usize, pool: &ShadowSet| -> Result<StepRecord> {
                let est = energy_shadow(m, pool, h)?;
                Ok(StepRecord {
                    step: k,
                    energy: est.mean,
                    std_err: est.std_err,
                    exact_energy: exact_at(m)?,
                })
            };
            records.push(record(&mera, 0, &eval_pool(0)?)?);
            for k in 1..=cfg.steps {
                let train = match protocol {
                    Protocol::FixedShared | Protocol::FixedSplit => fixed_train.clone().expect("fixed pool"),
                    Protocol::ResampleShared => eval_pool(k)?,
                    Protocol::ResampleIndependent => source.sample(s, derive_seed(seed, TRAIN, k as u64))?,
                };
                let (_, g) = energy_and_gradient_shadow(&mera, &train, h)?;
                if stop_now(&mera, &g, cfg.early_stop)? {
                    early = Some(k - 1);
                    log::info!("early stop before step {k}");
                    break;
                }
                mera = adam_step(&mera, &g, &mut state)?;
                max_res = max_res.max(mera.max_isometry_residual());
                let pool = if protocol == Protocol::ResampleShared { train } else { eval_pool(k)? };
                records.push(record(&mera, k, &pool)?);
            }
        }
    }
    Ok(OptimizationTrace {
        records,
        final_mera: mera,
        max_isometry_residual: max_res,
        early_stopped_at: early,
    })
}

fn stop_now(mera: &Mera, g: &GradientSet, tol: Option<f64>) -> Result<bool> {
    let Some(tol) = tol else { return Ok(false) };
    let norm = riemannian_gradient(mera, g)?.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
    Ok(norm < tol)
}

/// `max |X†Y + Y†X|`; zero for tangent `Y`.
pub fn tangency_residual(x: &DMatrix<C64>, y: &DMatrix<C64>) -> f64 {
    let xy = x.adjoint() * y;
    linalg::max_abs(&(&xy + xy.adjoint()))
}
