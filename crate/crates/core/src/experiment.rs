//! Experiment configs and the runners behind the `hmera` subcommands.
//!
//! Every runner writes plain CSV/JSON/JSONL into an output directory and
//! returns the same summary it serialized. Outputs carry the SHA-256 of the
//! canonical config so a file can always be traced back to its inputs.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annealing::{apply_circuit, build_annealing_circuit, scale_noise, AnnealingSchedule, Circuit, NoiseModel};
use crate::error::{Error, Result};
use crate::mera::{transform_operator, Mera};
use crate::oracle::{dense_ground_state, relative_error, tfim_free_fermion_energy, two_qubit_depth};
use crate::pauli::{build_tfim, Boundary, PauliSum, DEFAULT_DENSE_CAP, DEFAULT_DROP_THRESHOLD};
use crate::riemannian::{
    derive_seed, optimize, AdamParams, Interface, OptimizationTrace, OptimizeConfig, Protocol, SnapshotSource,
};
use crate::shadows::{
    estimate, read_jsonl, required_snapshots, weight_resolved_variance, worst_case_bound, write_jsonl, Locality,
    ShadowSet,
};
use crate::state::{energy, Statevector};

/// Largest chain run without `--large`.
pub const DESK_MAX_QUBITS: usize = 12;
/// Hard ceiling even with `--large`: a 24-qubit statevector is 256 MiB.
pub const LARGE_MAX_QUBITS: usize = 24;
pub const DEFAULT_DEPTH_TARGET: usize = 200;

const NOISY_REFERENCE: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub mera: MeraConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "exact_interface")]
    pub interface: Interface,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub seeds: Seeds,
}

fn exact_interface() -> Interface {
    Interface::Exact
}

/// `H = j Σ Z_i Z_{i+1} + lam Σ X_i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n: usize,
    pub j: f64,
    pub lam: f64,
    pub boundary: Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_final: f64,
    pub dt: f64,
    /// Sweep for `anneal`; without it the sweep is the single cell above.
    #[serde(default)]
    pub grid: Option<GridConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_final: Vec<f64>,
    pub dt: Vec<f64>,
    #[serde(default = "default_depth_target")]
    pub depth_target: usize,
}

fn default_depth_target() -> usize {
    DEFAULT_DEPTH_TARGET
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeraInit {
    #[default]
    Identity,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeraConfig {
    pub layers: usize,
    #[serde(default)]
    pub init: MeraInit,
}

impl Default for MeraConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            init: MeraInit::Identity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop once the Riemannian gradient norm drops below this.
    pub early_stop: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamParams::default();
        Self {
            steps: 1000,
            alpha: a.alpha,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            early_stop: None,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamParams {
        AdamParams {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_etas")]
    pub eta: Vec<f64>,
    #[serde(default = "NoiseModel::representative")]
    pub base: NoiseModel,
    /// Pool size used to score the noisy annealing state itself.
    #[serde(default = "default_reference_snapshots")]
    pub reference_snapshots: usize,
}

fn default_etas() -> Vec<f64> {
    vec![1.0]
}

fn default_reference_snapshots() -> usize {
    20_000
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            eta: default_etas(),
            base: NoiseModel::representative(),
            reference_snapshots: default_reference_snapshots(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Energy resolution the snapshot forecast aims for, as a fraction `f` of `delta_e`.
    pub delta_e: f64,
    pub fraction: f64,
    /// Random MERAs scored next to the supplied ones.
    pub random_instances: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            delta_e: 0.07,
            fraction: 0.25,
            random_instances: 0,
        }
    }
}

/// `circuit` seeds the reference pool of the noisy annealing state,
/// `shadows` every training/evaluation pool, `optimizer` random MERA draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub circuit: u64,
    pub shadows: u64,
    pub optimizer: u64,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| missing(path, e))?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces all three seeds with `seed`.
    pub fn with_seed_override(mut self, seed: u64) -> Self {
        self.seeds = Seeds {
            circuit: seed,
            shadows: seed,
            optimizer: seed,
        };
        self
    }

    /// Hex SHA-256 of the canonical JSON form; independent of TOML layout and comments.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn validate(&self, large: bool) -> Result<()> {
        let n = self.system.n;
        if n < 2 {
            return Err(Error::Config(format!("system.n must be at least 2, got {n}")));
        }
        if n > DESK_MAX_QUBITS && !large {
            return Err(Error::Config(format!(
                "n = {n} exceeds the desk-scale limit {DESK_MAX_QUBITS}; pass --large to run it"
            )));
        }
        if n > LARGE_MAX_QUBITS {
            return Err(Error::SizeCap {
                what: "statevector simulation",
                needed: n,
                cap: LARGE_MAX_QUBITS,
            });
        }
        if self.system.boundary == Boundary::Periodic && n % 2 == 1 {
            return Err(Error::Config("periodic chains need an even number of sites".into()));
        }
        for (name, v) in [("system.j", self.system.j), ("system.lam", self.system.lam)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        AnnealingSchedule::with_step_at_most(self.schedule.t_final, self.schedule.dt)?;
        if let Some(g) = &self.schedule.grid {
            if g.t_final.is_empty() || g.dt.is_empty() {
                return Err(Error::Config("schedule.grid needs at least one t_final and one dt".into()));
            }
            for &t in &g.t_final {
                for &dt in &g.dt {
                    AnnealingSchedule::with_step_at_most(t, dt)?;
                }
            }
        }
        let layers = self.mera.layers;
        if layers == 0 || n % (1 << layers) != 0 {
            return Err(Error::Config(format!("{layers} MERA layers need n divisible by 2^{layers}")));
        }
        self.optimizer.adam().validate()?;
        if let Interface::Shadow { s, .. } = self.interface {
            if s < 2 {
                return Err(Error::Config("interface.s must be at least 2".into()));
            }
        }
        if self.noise.enabled {
            if self.noise.eta.is_empty() {
                return Err(Error::Config("noise.eta needs at least one strength".into()));
            }
            for &eta in &self.noise.eta {
                scale_noise(&self.noise.base, eta)?;
            }
            if self.noise.reference_snapshots < 2 {
                return Err(Error::Config("noise.reference_snapshots must be at least 2".into()));
            }
        }
        let a = &self.analysis;
        if !(a.delta_e > 0.0 && a.fraction > 0.0) {
            return Err(Error::Config("analysis.delta_e and analysis.fraction must be positive".into()));
        }
        Ok(())
    }

    fn schedule(&self) -> Result<AnnealingSchedule> {
        AnnealingSchedule::with_step_at_most(self.schedule.t_final, self.schedule.dt)
    }

    fn hamiltonian(&self) -> Result<PauliSum> {
        build_tfim(self.system.n, self.system.j, self.system.lam, self.system.boundary)
    }

    fn initial_mera(&self) -> Result<Mera> {
        match self.mera.init {
            MeraInit::Identity => Mera::identity(self.system.n, self.mera.layers),
            MeraInit::Random => Mera::random(
                self.system.n,
                self.mera.layers,
                &mut ChaCha8Rng::seed_from_u64(self.seeds.optimizer),
            ),
        }
    }

    fn optimize_config(&self) -> OptimizeConfig {
        OptimizeConfig {
            steps: self.optimizer.steps,
            adam: self.optimizer.adam(),
            interface: self.interface,
            shadow_seed: self.seeds.shadows,
            early_stop: self.optimizer.early_stop,
        }
    }
}

/// Exact ground energy: dense ED up to 14 qubits, free fermions beyond that on open chains.
pub fn reference_energy(h: &PauliSum, sys: &SystemConfig) -> Result<f64> {
    if sys.n <= DEFAULT_DENSE_CAP {
        return Ok(dense_ground_state(h)?.e0);
    }
    match sys.boundary {
        Boundary::Open => Ok(tfim_free_fermion_energy(sys.n, sys.j, sys.lam)),
        Boundary::Periodic => Err(Error::SizeCap {
            what: "periodic reference energy",
            needed: sys.n,
            cap: DEFAULT_DENSE_CAP,
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Seeds,
}

impl Provenance {
    fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seeds: cfg.seeds,
        }
    }

    fn csv_comments(&self) -> Vec<(&'static str, String)> {
        vec![
            ("config_hash", self.config_hash.clone()),
            ("seed_circuit", self.seeds.circuit.to_string()),
            ("seed_shadows", self.seeds.shadows.to_string()),
            ("seed_optimizer", self.seeds.optimizer.to_string()),
        ]
    }

    fn csv_header(&self) -> String {
        self.csv_comments().iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
    }
}

/// Hamiltonian, exact energy and annealed state shared by the runners.
struct Prepared {
    h: PauliSum,
    e_exact: f64,
    circuit: Circuit,
    psi_qa: Statevector,
    e_qa: f64,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let h = cfg.hamiltonian()?;
    let e_exact = reference_energy(&h, &cfg.system)?;
    let circuit = build_annealing_circuit(&cfg.schedule()?, cfg.system.n, cfg.system.boundary)?;
    let psi_qa = apply_circuit(&Statevector::minus_product(cfg.system.n), &circuit)?;
    let e_qa = energy(&psi_qa, &h)?;
    log::info!("E_exact = {e_exact}, E_QA = {e_qa}");
    Ok(Prepared {
        h,
        e_exact,
        circuit,
        psi_qa,
        e_qa,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(dir, name, &text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealRow {
    pub t_final: f64,
    pub dt: f64,
    pub steps: usize,
    pub energy: f64,
    pub relative_error: f64,
    pub two_qubit_depth: usize,
    /// This dt has the depth nearest the target among cells with the same t_final.
    pub near_depth_target: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub e_exact: f64,
    pub depth_target: usize,
    pub rows: Vec<AnnealRow>,
}

/// Index of the depth closest to `target`; ties go to the smaller `dt`.
pub fn nearest_depth(cells: &[(f64, usize)], target: usize) -> Option<usize> {
    (0..cells.len()).min_by(|&a, &b| {
        let da = cells[a].1.abs_diff(target);
        let db = cells[b].1.abs_diff(target);
        da.cmp(&db).then(cells[a].0.total_cmp(&cells[b].0))
    })
}

/// Sweeps the `(t_final, dt)` grid and writes `anneal.csv` and `anneal.json`.
pub fn cmd_anneal(cfg: &ExperimentConfig, out: &Path) -> Result<AnnealSummary> {
    let h = cfg.hamiltonian()?;
    let e_exact = reference_energy(&h, &cfg.system)?;
    let (t_grid, dt_grid, target) = match &cfg.schedule.grid {
        Some(g) => (g.t_final.clone(), g.dt.clone(), g.depth_target),
        None => (vec![cfg.schedule.t_final], vec![cfg.schedule.dt], DEFAULT_DEPTH_TARGET),
    };
    let cells: Vec<(f64, f64)> = t_grid.iter().flat_map(|&t| dt_grid.iter().map(move |&dt| (t, dt))).collect();
    let sys = cfg.system;
    let mut rows = cells
        .par_iter()
        .map(|&(t_final, dt)| {
            let s = AnnealingSchedule::with_step_at_most(t_final, dt)?;
            let c = build_annealing_circuit(&s, sys.n, sys.boundary)?;
            let psi = apply_circuit(&Statevector::minus_product(sys.n), &c)?;
            let e = energy(&psi, &h)?;
            Ok(AnnealRow {
                t_final,
                dt,
                steps: s.n_steps(),
                energy: e,
                relative_error: relative_error(e, e_exact)?,
                two_qubit_depth: two_qubit_depth(&c),
                near_depth_target: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for &t in &t_grid {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].t_final == t).collect();
        let cells: Vec<(f64, usize)> = idx.iter().map(|&i| (rows[i].dt, rows[i].two_qubit_depth)).collect();
        if let Some(k) = nearest_depth(&cells, target) {
            rows[idx[k]].near_depth_target = true;
        }
    }
    let summary = AnnealSummary {
        provenance: Provenance::of(cfg),
        e_exact,
        depth_target: target,
        rows,
    };
    let mut csv = summary.provenance.csv_header();
    csv.push_str("t_final,dt,steps,energy,relative_error,two_qubit_depth,near_depth_target\n");
    for r in &summary.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.t_final, r.dt, r.steps, r.energy, r.relative_error, r.two_qubit_depth, r.near_depth_target
        ));
    }
    write_file(out, "anneal.csv", &csv)?;
    write_json(out, "anneal.json", &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub e_exact: f64,
    pub e_qa: f64,
    /// Last recorded energy (a shadow estimate for the shadow interface).
    pub e_final: f64,
    pub e_final_std_err: f64,
    /// Exact energy of the final MERA on the annealed state.
    pub e_final_exact: f64,
    pub relative_error_qa: f64,
    pub relative_error_final: f64,
    /// `relative_error_final / relative_error_qa`.
    pub improvement_ratio: f64,
    pub steps_run: usize,
    pub early_stopped_at: Option<usize>,
    pub max_isometry_residual: f64,
}

/// Optimizes the MERA on the annealed state; writes `trace.csv`, `summary.json`, `mera.json`.
pub fn cmd_optimize(cfg: &ExperimentConfig, out: &Path) -> Result<OptimizeSummary> {
    let p = prepare(cfg)?;
    let reference = match cfg.interface {
        Interface::Exact => None,
        Interface::Shadow { .. } => Some(&p.psi_qa),
    };
    let trace = optimize(
        &cfg.initial_mera()?,
        &p.h,
        &SnapshotSource::State(p.psi_qa.clone()),
        reference,
        &cfg.optimize_config(),
    )?;
    let prov = Provenance::of(cfg);
    let last = *trace.final_record();
    let e_final_exact = match last.exact_energy {
        Some(e) => e,
        None => last.energy,
    };
    let rel_qa = relative_error(p.e_qa, p.e_exact)?;
    let rel_final = relative_error(e_final_exact, p.e_exact)?;
    let summary = OptimizeSummary {
        provenance: prov.clone(),
        e_exact: p.e_exact,
        e_qa: p.e_qa,
        e_final: last.energy,
        e_final_std_err: last.std_err,
        e_final_exact,
        relative_error_qa: rel_qa,
        relative_error_final: rel_final,
        improvement_ratio: if rel_qa > 0.0 { rel_final / rel_qa } else { f64::NAN },
        steps_run: last.step,
        early_stopped_at: trace.early_stopped_at,
        max_isometry_residual: trace.max_isometry_residual,
    };
    write_file(out, "trace.csv", &trace.to_csv(&prov.csv_comments()))?;
    write_json(out, "summary.json", &summary)?;
    write_file(out, "mera.json", &trace.final_mera.to_json(Some(&prov.config_hash))?)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub protocol: Protocol,
    pub label: String,
    pub min_energy: f64,
    pub min_energy_step: usize,
    /// Smallest `(E_k − E_exact)/σ_k` over the trace.
    pub min_z: f64,
    pub final_energy: f64,
    pub final_exact: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolStudySummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub e_exact: f64,
    pub e_qa: f64,
    pub snapshots_per_pool: usize,
    pub protocols: Vec<ProtocolResult>,
}

fn protocol_result(protocol: Protocol, trace: &OptimizationTrace, e_exact: f64) -> ProtocolResult {
    let (min_step, min_energy) = trace
        .records
        .iter()
        .map(|r| (r.step, r.energy))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("trace holds the initial record");
    let min_z = trace
        .records
        .iter()
        .map(|r| (r.energy - e_exact) / r.std_err)
        .fold(f64::INFINITY, f64::min);
    let last = trace.final_record();
    ProtocolResult {
        protocol,
        label: protocol.label().to_owned(),
        min_energy,
        min_energy_step: min_step,
        min_z,
        final_energy: last.energy,
        final_exact: last.exact_energy.unwrap_or(f64::NAN),
    }
}

/// Runs protocols (i)-(iv) on identical seeds; one trace per protocol plus `protocols.json`.
pub fn cmd_protocol_study(cfg: &ExperimentConfig, out: &Path) -> Result<ProtocolStudySummary> {
    let Interface::Shadow { s, .. } = cfg.interface else {
        return Err(Error::Config("protocol-study needs interface.kind = \"shadow\"".into()));
    };
    let p = prepare(cfg)?;
    let init = cfg.initial_mera()?;
    let source = SnapshotSource::State(p.psi_qa.clone());
    let prov = Provenance::of(cfg);
    let mut protocols = Vec::with_capacity(4);
    for protocol in Protocol::ALL {
        let mut oc = cfg.optimize_config();
        oc.interface = Interface::Shadow { s, protocol };
        let trace = optimize(&init, &p.h, &source, Some(&p.psi_qa), &oc)?;
        let mut comments = prov.csv_comments();
        comments.push(("protocol", protocol.label().to_owned()));
        write_file(out, &format!("protocol_{}.csv", protocol.label()), &trace.to_csv(&comments))?;
        protocols.push(protocol_result(protocol, &trace, p.e_exact));
    }
    let summary = ProtocolStudySummary {
        provenance: prov,
        e_exact: p.e_exact,
        e_qa: p.e_qa,
        snapshots_per_pool: s,
        protocols,
    };
    write_json(out, "protocols.json", &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyResult {
    pub eta: f64,
    pub model: NoiseModel,
    /// Noisy annealing state scored on the reference pool.
    pub e_qa_noisy: f64,
    pub e_qa_noisy_std_err: f64,
    pub relative_error_qa_noisy: f64,
    pub final_estimate: f64,
    /// Final MERA evaluated exactly on the noiseless annealed state.
    pub final_exact: f64,
    /// Mean of `|estimate − exact re-evaluation|` over the trace.
    pub mean_trace_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisySummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub e_exact: f64,
    pub e_qa: f64,
    pub runs: Vec<NoisyResult>,
}

/// Trains on noisy snapshots for each configured η; one trace per η plus `noisy.json`.
pub fn cmd_noisy_optimize(cfg: &ExperimentConfig, out: &Path) -> Result<NoisySummary> {
    if !cfg.noise.enabled {
        return Err(Error::Config("noisy-optimize needs noise.enabled = true".into()));
    }
    if !matches!(cfg.interface, Interface::Shadow { .. }) {
        return Err(Error::Config("noisy-optimize needs interface.kind = \"shadow\"".into()));
    }
    let p = prepare(cfg)?;
    let init = cfg.initial_mera()?;
    let prov = Provenance::of(cfg);
    let mut runs = Vec::with_capacity(cfg.noise.eta.len());
    for (i, &eta) in cfg.noise.eta.iter().enumerate() {
        let model = scale_noise(&cfg.noise.base, eta)?;
        let source = SnapshotSource::Noisy {
            initial: Statevector::minus_product(cfg.system.n),
            circuit: p.circuit.clone(),
            model,
            eta,
        };
        let pool = source.sample(
            cfg.noise.reference_snapshots,
            derive_seed(cfg.seeds.circuit, NOISY_REFERENCE, i as u64),
        )?;
        let noisy_qa = estimate(&pool, &p.h)?;
        let trace = optimize(&init, &p.h, &source, Some(&p.psi_qa), &cfg.optimize_config())?;
        let gaps: Vec<f64> = trace
            .records
            .iter()
            .map(|r| (r.energy - r.exact_energy.unwrap_or(f64::NAN)).abs())
            .collect();
        let last = trace.final_record();
        let mut comments = prov.csv_comments();
        comments.push(("eta", eta.to_string()));
        write_file(out, &format!("noisy_eta_{eta}.csv"), &trace.to_csv(&comments))?;
        runs.push(NoisyResult {
            eta,
            model,
            e_qa_noisy: noisy_qa.mean,
            e_qa_noisy_std_err: noisy_qa.std_err,
            relative_error_qa_noisy: relative_error(noisy_qa.mean, p.e_exact)?,
            final_estimate: last.energy,
            final_exact: last.exact_energy.unwrap_or(f64::NAN),
            mean_trace_gap: crate::linalg::pairwise_sum(&gaps) / gaps.len() as f64,
        });
    }
    let summary = NoisySummary {
        provenance: prov,
        e_exact: p.e_exact,
        e_qa: p.e_qa,
        runs,
    };
    write_json(out, "noisy.json", &summary)?;
    Ok(summary)
}

/// Samples snapshots of the annealed state (noisy at the first η when noise is enabled).
pub fn cmd_shadows_sample(cfg: &ExperimentConfig, s: Option<usize>, out: &Path) -> Result<PathBuf> {
    let s = match (s, cfg.interface) {
        (Some(s), _) | (None, Interface::Shadow { s, .. }) => s,
        (None, Interface::Exact) => {
            return Err(Error::Config("snapshot count needed: pass one or use a shadow interface".into()))
        }
    };
    let p = prepare(cfg)?;
    let set = if cfg.noise.enabled {
        let eta = cfg.noise.eta[0];
        SnapshotSource::Noisy {
            initial: Statevector::minus_product(cfg.system.n),
            circuit: p.circuit,
            model: scale_noise(&cfg.noise.base, eta)?,
            eta,
        }
        .sample(s, cfg.seeds.shadows)?
    } else {
        SnapshotSource::State(p.psi_qa).sample(s, cfg.seeds.shadows)?
    };
    fs::create_dir_all(out)?;
    let path = out.join("shadows.jsonl");
    let hash = cfg.hash();
    write_jsonl(&set, Some(&hash), BufWriter::new(fs::File::create(&path)?))?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceEntry {
    pub label: String,
    pub n_terms: usize,
    pub max_weight: usize,
    /// `C_w` keyed by Pauli weight.
    pub contributions: Vec<(usize, f64)>,
    pub total: f64,
    pub required_snapshots: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub layers: u32,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub snapshots: usize,
    pub entries: Vec<VarianceEntry>,
    pub random_mean_total: Option<f64>,
    pub worst_case: Vec<WorstCase>,
}

fn variance_entry(label: String, set: &ShadowSet, op: &PauliSum, a: &AnalysisConfig) -> Result<VarianceEntry> {
    let wr = weight_resolved_variance(set, op)?;
    let required = if wr.total > 0.0 {
        required_snapshots(wr.total, set.len() as u64, a.delta_e, a.fraction)?
    } else {
        0
    };
    Ok(VarianceEntry {
        label,
        n_terms: op.terms().len(),
        max_weight: wr.contributions.keys().copied().max().unwrap_or(0),
        contributions: wr.contributions.into_iter().collect(),
        total: wr.total,
        required_snapshots: required,
    })
}

/// Weight-resolved variance of the Hamiltonian, each given MERA and any random MERAs on one snapshot set.
pub fn analyze_set(
    cfg: &ExperimentConfig,
    set: &ShadowSet,
    meras: &[(String, Mera)],
) -> Result<AnalysisSummary> {
    let h = cfg.hamiltonian()?;
    if set.n_qubits() != h.n_qubits() {
        return Err(Error::SizeMismatch {
            expected: h.n_qubits(),
            got: set.n_qubits(),
        });
    }
    let a = &cfg.analysis;
    let transformed = |m: &Mera| -> Result<PauliSum> { transform_operator(m, &h)?.to_pauli_sum(DEFAULT_DROP_THRESHOLD) };
    let mut entries = vec![variance_entry("hamiltonian".into(), set, &h, a)?];
    for (label, m) in meras {
        entries.push(variance_entry(label.clone(), set, &transformed(m)?, a)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.optimizer);
    let mut random_totals = Vec::with_capacity(a.random_instances);
    for i in 0..a.random_instances {
        let m = Mera::random(cfg.system.n, cfg.mera.layers, &mut rng)?;
        let e = variance_entry(format!("random_{i}"), set, &transformed(&m)?, a)?;
        random_totals.push(e.total);
        entries.push(e);
    }
    let random_mean_total = (!random_totals.is_empty())
        .then(|| crate::linalg::pairwise_sum(&random_totals) / random_totals.len() as f64);
    let max_norm = h.terms().iter().map(|t| t.coeff.norm()).fold(0.0, f64::max);
    let eps = a.fraction * a.delta_e;
    let worst_case = [1u32, 2]
        .into_iter()
        .map(|l| {
            Ok(WorstCase {
                layers: l,
                bound: worst_case_bound(h.terms().len() as u64, eps, Locality::Layers(l), max_norm)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AnalysisSummary {
        provenance: Provenance::of(cfg),
        snapshots: set.len(),
        entries,
        random_mean_total,
        worst_case,
    })
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("cannot read {}: {e}", path.display()))
}

/// Reads a snapshot file and MERA containers; writes `variance.csv` and `analysis.json`.
pub fn cmd_analyze(cfg: &ExperimentConfig, shadows: &Path, meras: &[PathBuf], out: &Path) -> Result<AnalysisSummary> {
    let set = read_jsonl(BufReader::new(fs::File::open(shadows).map_err(|e| missing(shadows, e))?))?;
    let loaded = meras
        .iter()
        .map(|p| {
            let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((label, Mera::from_json(&fs::read_to_string(p).map_err(|e| missing(p, e))?)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = analyze_set(cfg, &set, &loaded)?;
    let mut csv = summary.provenance.csv_header();
    csv.push_str("label,weight,contribution\n");
    for e in &summary.entries {
        for (w, c) in &e.contributions {
            csv.push_str(&format!("{},{w},{c}\n", e.label));
        }
    }
    write_file(out, "variance.csv", &csv)?;
    write_json(out, "analysis.json", &summary)?;
    Ok(summary)
}
