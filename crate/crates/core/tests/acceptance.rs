//! Acceptance suite. Every criterion prints one PASS/FAIL line with the
//! measured quantities; the process exits non-zero if any criterion fails.
//!
//! Run a subset with `cargo test -p hybrid-mera --test acceptance -- 5 13`.

use std::fs;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hybrid_mera::annealing::{run_annealing, AnnealingSchedule};
use hybrid_mera::experiment::{
    analyze_set, cmd_noisy_optimize, cmd_optimize, cmd_protocol_study, ExperimentConfig, OptimizeSummary,
};
use hybrid_mera::mera::{energy_and_gradient_exact, energy_exact, transform_operator, Mera};
use hybrid_mera::oracle::{dense_ground_state, relative_error, tfim_free_fermion_energy};
use hybrid_mera::pauli::{build_tfim, Boundary, PauliSum};
use hybrid_mera::riemannian::{optimize, AdamParams, Interface, OptimizeConfig, SnapshotSource};
use hybrid_mera::shadows::{
    estimate, pauli_weights, required_snapshots, sample_snapshots, weight_resolved_variance, ShadowSet,
};
use hybrid_mera::state::{energy, Statevector};
use hybrid_mera::C64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Suite {
    filter: Vec<String>,
    results: Vec<(String, bool)>,
}

impl Suite {
    fn wants(&self, id: &str) -> bool {
        self.filter.is_empty() || self.filter.iter().any(|f| f == id)
    }

    fn record(&mut self, id: &str, name: &str, limit: Option<Duration>, elapsed: Duration, outcome: Outcome) {
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let pass = outcome.pass && in_time;
        let timing = match limit {
            Some(l) => format!("{:.1}s / limit {:.0}s", elapsed.as_secs_f64(), l.as_secs_f64()),
            None => format!("{:.1}s", elapsed.as_secs_f64()),
        };
        println!(
            "[{}] criterion {id:>4} {name}: {} ({timing})",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
        self.results.push((id.to_owned(), pass));
    }
}

fn tfim(n: usize, boundary: Boundary) -> PauliSum {
    build_tfim(n, -1.0, 1.0, boundary).unwrap()
}

fn config(n: usize, dt: f64, layers: usize, steps: usize, interface: &str, seed: u64) -> ExperimentConfig {
    let text = format!(
        "[system]\nn = {n}\nj = -1.0\nlam = 1.0\nboundary = \"periodic\"\n\
         [schedule]\nt_final = 10.0\ndt = {dt}\n\
         [mera]\nlayers = {layers}\n\
         [optimizer]\nsteps = {steps}\n\
         [interface]\n{interface}\n\
         [seeds]\ncircuit = {seed}\nshadows = {seed}\noptimizer = {seed}\n"
    );
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    cfg.validate(false).unwrap();
    cfg
}

fn qa_state(n: usize) -> Statevector {
    run_annealing(&AnnealingSchedule::new(10.0, 0.1).unwrap(), n, Boundary::Periodic).unwrap()
}

fn random_direction(m: &Mera, rng: &mut ChaCha8Rng) -> Vec<DMatrix<C64>> {
    m.matrices()
        .iter()
        .map(|x| DMatrix::from_fn(x.nrows(), x.ncols(), |_, _| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))))
        .collect()
}

/// Plain two-pass variance of the sample mean, written out independently of the library.
fn mean_variance(w: &[f64]) -> f64 {
    let s = w.len() as f64;
    let mean = w.iter().sum::<f64>() / s;
    w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (s * (s - 1.0))
}

fn c1() -> Outcome {
    let e2 = dense_ground_state(&build_tfim(2, -1.0, 1.0, Boundary::Open).unwrap()).unwrap().e0;
    let d2 = (e2 + 5f64.sqrt()).abs();
    let mut worst: f64 = 0.0;
    for n in [4, 8, 12] {
        let ed = dense_ground_state(&tfim(n, Boundary::Open)).unwrap().e0;
        worst = worst.max((ed - tfim_free_fermion_energy(n, -1.0, 1.0)).abs());
    }
    check(
        d2 <= 1e-10 && worst <= 1e-9,
        format!("|E(2) + sqrt5| = {d2:.1e}, max |ED - free fermion| = {worst:.1e}"),
    )
}

fn c2() -> Outcome {
    let n = 8;
    let h = tfim(n, Boundary::Periodic);
    let e0 = dense_ground_state(&h).unwrap().e0;
    let err = |t: f64, dt: f64| {
        let psi = run_annealing(&AnnealingSchedule::with_step_at_most(t, dt).unwrap(), n, Boundary::Periodic).unwrap();
        relative_error(energy(&psi, &h).unwrap(), e0).unwrap()
    };
    let (fine, coarse) = (err(10.0, 0.1), err(10.0, 0.8));
    let (long, short) = (err(10.0, 0.05), err(2.0, 0.05));
    check(
        fine < coarse && long < short,
        format!("dt 0.1: {fine:.3e} < dt 0.8: {coarse:.3e}; t 10: {long:.3e} < t 2: {short:.3e}"),
    )
}

fn c3() -> Outcome {
    let n = 12;
    let h = tfim(n, Boundary::Periodic);
    let psi = qa_state(n);
    let plain = energy(&psi, &h).unwrap();
    let worst = [1, 2]
        .iter()
        .map(|&l| (energy_exact(&Mera::identity(n, l).unwrap(), &psi, &h).unwrap() - plain).abs())
        .fold(0.0, f64::max);
    check(worst <= 1e-12, format!("max |E_MERA - E_QA| = {worst:.1e}"))
}

fn c4() -> Outcome {
    let n = 6;
    let h = tfim(n, Boundary::Periodic);
    let spectrum = |m: DMatrix<C64>| {
        let mut v: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let reference = spectrum(hybrid_mera::pauli::to_dense(&h).unwrap().matrix().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = Mera::random(n, 1, &mut rng).unwrap();
        let dense = transform_operator(&m, &h).unwrap().to_dense().unwrap();
        for (a, b) in spectrum(dense).iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-8, format!("max eigenvalue shift over 20 MERAs = {worst:.1e}"))
}

struct C5 {
    l1: OptimizeSummary,
    l2: OptimizeSummary,
    trace_l1: Vec<u8>,
}

fn run_c5(dir: &std::path::Path) -> C5 {
    let run = |l: usize, sub: &str| {
        let out = dir.join(sub);
        let s = cmd_optimize(&config(12, 0.1, l, 1000, "kind = \"exact\"", 5), &out).unwrap();
        (s, fs::read(out.join("trace.csv")).unwrap())
    };
    let (l1, trace_l1) = run(1, "l1");
    let (l2, _) = run(2, "l2");
    C5 { l1, l2, trace_l1 }
}

fn c5(r: &C5) -> [(&'static str, &'static str, Outcome); 2] {
    let qa = r.l1.relative_error_qa;
    let (e1, e2) = (r.l1.relative_error_final, r.l2.relative_error_final);
    [
        (
            "5a",
            "one MERA layer halves the annealing error",
            check(
                e1 <= 0.5 * qa,
                format!("QA {qa:.4e}, l=1 {e1:.4e}, ratio {:.3} (need <= 0.5)", e1 / qa),
            ),
        ),
        (
            "5b",
            "two layers do at least as well as one",
            check(e2 <= e1, format!("l=2 {e2:.4e} vs l=1 {e1:.4e}")),
        ),
    ]
}

fn c6() -> Outcome {
    let n = 6;
    let h = tfim(n, Boundary::Periodic);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = Mera::random(n, 1, &mut rng).unwrap();
        let psi = Statevector::random(n, &mut rng);
        let dir = random_direction(&m, &mut rng);
        let (_, g) = energy_and_gradient_exact(&m, &psi, &h).unwrap();
        let analytic: f64 = g
            .matrices()
            .iter()
            .zip(&dir)
            .map(|(gk, dk)| 2.0 * gk.iter().zip(dk.iter()).map(|(a, b)| (a.conj() * b).re).sum::<f64>())
            .sum();
        let plus = energy_exact(&m.perturbed(&dir, eps).unwrap(), &psi, &h).unwrap();
        let minus = energy_exact(&m.perturbed(&dir, -eps).unwrap(), &psi, &h).unwrap();
        let fd = (plus - minus) / (2.0 * eps);
        worst = worst.max((fd - analytic).abs() / analytic.abs().max(1e-12));
    }
    check(worst <= 1e-5, format!("max relative deviation = {worst:.1e}"))
}

fn c7(r: &C5) -> Outcome {
    let worst = r.l1.max_isometry_residual.max(r.l2.max_isometry_residual);
    check(worst <= 1e-10, format!("max isometry residual = {worst:.1e}"))
}

fn c8() -> Outcome {
    let n = 4;
    let h = tfim(n, Boundary::Periodic);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for state in 0..5u64 {
        let psi = Statevector::random(n, &mut rng);
        let exact = energy(&psi, &h).unwrap();
        let runs: Vec<_> = (0..50u64)
            .map(|k| estimate(&sample_snapshots(&psi, 20_000, 1000 * state + k).unwrap(), &h).unwrap())
            .collect();
        let mean = runs.iter().map(|r| r.mean).sum::<f64>() / 50.0;
        let pooled = runs.iter().map(|r| r.std_err * r.std_err).sum::<f64>().sqrt() / 50.0;
        worst = worst.max((mean - exact).abs() / pooled);
    }
    check(worst <= 3.0, format!("max |mean - exact| over 5 states = {worst:.2} pooled standard errors"))
}

fn c9() -> Outcome {
    let n = 8;
    let h = tfim(n, Boundary::Periodic);
    let psi = qa_state(n);
    let s = 10_000;
    let ratios: Vec<f64> = (0..10u64)
        .map(|seed| {
            let small = estimate(&sample_snapshots(&psi, s, 2 * seed).unwrap(), &h).unwrap().std_err;
            let large = estimate(&sample_snapshots(&psi, 4 * s, 2 * seed + 1).unwrap(), &h).unwrap().std_err;
            (small * small) / (large * large)
        })
        .collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    check(
        lo >= 2.8 && hi <= 5.7,
        format!("std_err^2(S)/std_err^2(4S) over 10 seeds in [{lo:.2}, {hi:.2}]"),
    )
}

fn c10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut cases: Vec<(ShadowSet, PauliSum)> = Vec::new();
    for n in [4usize, 6, 8] {
        let h = tfim(n, Boundary::Periodic);
        let psi = Statevector::random(n, &mut rng);
        let set = sample_snapshots(&psi, 3000, n as u64).unwrap();
        let m = Mera::random(n, 1, &mut rng).unwrap();
        let hm = transform_operator(&m, &h).unwrap().to_pauli_sum(1e-12).unwrap();
        cases.push((set.clone(), h));
        cases.push((set, hm));
    }
    let mut worst: f64 = 0.0;
    for (set, op) in &cases {
        let wr = weight_resolved_variance(set, op).unwrap();
        let summed: f64 = wr.contributions.values().sum();
        let direct = mean_variance(&pauli_weights(set, op).unwrap());
        worst = worst.max((summed - direct).abs() / direct);
    }
    check(worst <= 1e-10, format!("max relative gap over {} sets = {worst:.1e}", cases.len()))
}

fn c11() -> Outcome {
    let n = 8;
    let mut cfg = config(n, 0.1, 1, 1000, "kind = \"exact\"", 11);
    cfg.analysis.random_instances = 10;
    let h = tfim(n, Boundary::Periodic);
    let psi = qa_state(n);
    let oc = OptimizeConfig {
        steps: 1000,
        adam: AdamParams::default(),
        interface: Interface::Exact,
        shadow_seed: 0,
        early_stop: None,
    };
    let optimized = optimize(&Mera::identity(n, 1).unwrap(), &h, &SnapshotSource::State(psi.clone()), None, &oc)
        .unwrap()
        .final_mera;
    let set = sample_snapshots(&psi, 10_000, 11).unwrap();
    let a = analyze_set(&cfg, &set, &[("optimized".into(), optimized)]).unwrap();
    let opt = a.entries.iter().find(|e| e.label == "optimized").unwrap().total;
    let random = a.random_mean_total.unwrap();
    check(random >= opt, format!("random mean {random:.4e} >= optimized {opt:.4e}"))
}

fn c12() -> Outcome {
    let s = required_snapshots(0.0033, 100_000, 0.07, 0.25).unwrap();
    check(
        (1_000_000..=1_100_000).contains(&s),
        format!("S = {s}, expected within [1.0e6, 1.1e6]"),
    )
}

fn c13(dir: &std::path::Path) -> Vec<(&'static str, &'static str, Outcome)> {
    let cfg = config(6, 0.1, 1, 200, "kind = \"shadow\"\ns = 500\nprotocol = \"resample_independent\"", 7);
    let s = cmd_protocol_study(&cfg, dir).unwrap();
    let by = |label: &str| s.protocols.iter().find(|p| p.label == label).unwrap();
    let (i, iv) = (by("i"), by("iv"));
    vec![
        (
            "13i",
            "protocol (i) dips below the exact ground energy",
            check(
                i.min_z < -2.0,
                format!("min (E - E_exact)/std_err = {:.2} at step {} (need < -2)", i.min_z, i.min_energy_step),
            ),
        ),
        (
            "13iv",
            "protocol (iv) stays above E_exact - 3 std_err",
            check(
                iv.min_z >= -3.0,
                format!("min (E - E_exact)/std_err = {:.2} (need >= -3)", iv.min_z),
            ),
        ),
    ]
}

fn c14(dir: &std::path::Path) -> Outcome {
    let text = "[system]\nn = 6\nj = -1.0\nlam = 1.0\nboundary = \"periodic\"\n\
                [schedule]\nt_final = 10.0\ndt = 1.0\n\
                [mera]\nlayers = 1\n\
                [optimizer]\nsteps = 100\n\
                [interface]\nkind = \"shadow\"\ns = 500\nprotocol = \"resample_independent\"\n\
                [noise]\nenabled = true\neta = [0.1, 1.0]\nreference_snapshots = 20000\n\
                [seeds]\ncircuit = 14\nshadows = 14\noptimizer = 14\n";
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    cfg.validate(false).unwrap();
    let s = cmd_noisy_optimize(&cfg, dir).unwrap();
    let improves = s.runs.iter().all(|r| r.final_exact < r.e_qa_noisy);
    let grows = s.runs[1].relative_error_qa_noisy > s.runs[0].relative_error_qa_noisy;
    let parts: Vec<String> = s
        .runs
        .iter()
        .map(|r| {
            format!(
                "eta {}: final exact {:.4} vs noisy QA {:.4} (rel err {:.4}, trace gap {:.3})",
                r.eta, r.final_exact, r.e_qa_noisy, r.relative_error_qa_noisy, r.mean_trace_gap
            )
        })
        .collect();
    check(improves && grows, parts.join("; "))
}

fn c15(r: &C5, dir: &std::path::Path) -> Outcome {
    let out = dir.join("rerun");
    cmd_optimize(&config(12, 0.1, 1, 1000, "kind = \"exact\"", 5), &out).unwrap();
    let again = fs::read(out.join("trace.csv")).unwrap();
    check(again == r.trace_l1, format!("trace bytes {} vs {}", r.trace_l1.len(), again.len()))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut suite = Suite {
        filter,
        results: Vec::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let secs = |s: u64| Some(Duration::from_secs(s));

    macro_rules! run {
        ($id:expr, $name:expr, $limit:expr, $body:expr) => {
            if suite.wants($id) {
                let t = Instant::now();
                let outcome = $body;
                suite.record($id, $name, $limit, t.elapsed(), outcome);
            }
        };
    }

    run!("1", "oracle correctness", secs(10), c1());
    run!("2", "annealing regimes", secs(60), c2());
    run!("3", "identity MERA leaves the energy unchanged", secs(1), c3());
    run!("4", "spectrum preserved under the MERA", secs(60), c4());
    let needs_c5 = ["5", "7", "15"].iter().any(|id| suite.wants(id));
    if needs_c5 {
        let t = Instant::now();
        let r = run_c5(dir.path());
        let elapsed = t.elapsed();
        if suite.wants("5") {
            for (id, name, outcome) in c5(&r) {
                suite.record(id, name, secs(1800), elapsed, outcome);
            }
        }
        run!("7", "tensors stay isometric", None, c7(&r));
        run!("15", "byte-identical reruns", None, c15(&r, dir.path()));
    }
    run!("6", "gradient matches finite differences", secs(300), c6());
    run!("8", "shadow estimator is unbiased", secs(300), c8());
    run!("9", "estimator variance scales as 1/S", None, c9());
    run!("10", "weight-resolved variance sums to the total", None, c10());
    run!("11", "random MERAs have larger variance than the optimized one", None, c11());
    run!("12", "snapshot forecast", None, c12());
    if suite.wants("13") || suite.wants("13i") || suite.wants("13iv") {
        let t = Instant::now();
        let checks = c13(&dir.path().join("protocols"));
        let elapsed = t.elapsed();
        for (id, name, outcome) in checks {
            suite.record(id, name, secs(900), elapsed, outcome);
        }
    }
    run!("14", "noisy training beats the noisy annealed state", secs(1200), c14(&dir.path().join("noisy")));

    let failed: Vec<&str> = suite.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        suite.results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" ({})", failed.join(", "))
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
