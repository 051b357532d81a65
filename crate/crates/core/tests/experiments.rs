use std::fs;

use hybrid_mera::experiment::{cmd_anneal, cmd_noisy_optimize, cmd_optimize, cmd_protocol_study, ExperimentConfig};

fn config(body: &str) -> ExperimentConfig {
    let text = format!(
        "[system]\nn = 8\nj = -1.0\nlam = 1.0\nboundary = \"periodic\"\n\
         [schedule]\nt_final = 10.0\ndt = 0.1\n\
         [seeds]\ncircuit = 1\nshadows = 2\noptimizer = 3\n{body}"
    );
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    cfg.validate(false).unwrap();
    cfg
}

fn with_system(n: usize, body: &str) -> ExperimentConfig {
    let mut cfg = config(body);
    cfg.system.n = n;
    cfg
}

#[test]
fn anneal_grid_depths_and_markers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("[schedule.grid]\nt_final = [2.0, 5.0, 10.0]\ndt = [0.8, 0.4, 0.2, 0.1, 0.05]\n");
    let s = cmd_anneal(&cfg, dir.path()).unwrap();
    assert_eq!(s.rows.len(), 15);
    let csv = fs::read_to_string(dir.path().join("anneal.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 16);

    for t in [2.0, 5.0, 10.0] {
        let rows: Vec<_> = s.rows.iter().filter(|r| r.t_final == t).collect();
        // depth of K steps is 2K+1 with K = ceil(t/dt)
        for r in &rows {
            let k = (t / r.dt - 1e-9).ceil() as usize;
            assert_eq!(r.two_qubit_depth, 2 * k + 1, "t={t} dt={}", r.dt);
        }
        let best = rows.iter().map(|r| r.two_qubit_depth.abs_diff(200)).min().unwrap();
        let expected = rows
            .iter()
            .filter(|r| r.two_qubit_depth.abs_diff(200) == best)
            .map(|r| r.dt)
            .fold(f64::INFINITY, f64::min);
        let marked: Vec<f64> = rows.iter().filter(|r| r.near_depth_target).map(|r| r.dt).collect();
        assert_eq!(marked, vec![expected], "t={t}");
    }
    let at = |t: f64, dt: f64| s.rows.iter().find(|r| r.t_final == t && r.dt == dt).unwrap().relative_error;
    assert!(at(10.0, 0.1) < at(10.0, 0.8));
    assert!(at(10.0, 0.05) < at(2.0, 0.05));
}

#[test]
fn layered_refinement_orders_errors() {
    let dir = tempfile::tempdir().unwrap();
    let l1 = cmd_optimize(&config("[optimizer]\nsteps = 300\n[mera]\nlayers = 1\n"), &dir.path().join("l1")).unwrap();
    let l2 = cmd_optimize(&config("[optimizer]\nsteps = 300\n[mera]\nlayers = 2\n"), &dir.path().join("l2")).unwrap();
    assert!(l1.relative_error_final <= l1.relative_error_qa);
    assert!(l2.relative_error_final <= l1.relative_error_final);
    assert_eq!(l1.e_final, l1.e_final_exact);
}

#[test]
fn evaluation_pool_removes_the_fixed_pool_dip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_system(
        6,
        "[optimizer]\nsteps = 80\n[interface]\nkind = \"shadow\"\ns = 300\nprotocol = \"fixed_shared\"\n",
    );
    let s = cmd_protocol_study(&cfg, dir.path()).unwrap();
    let by = |label: &str| s.protocols.iter().find(|p| p.label == label).unwrap();
    // (i) and (ii) train on the same pool, so their parameters coincide step by step
    assert_eq!(by("i").final_exact, by("ii").final_exact);
    assert!(by("ii").min_z > by("i").min_z);
    assert!(by("i").min_energy < s.e_exact);
}

#[test]
fn zero_noise_matches_ideal_shadow_training_statistically() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[optimizer]\nsteps = 20\n[interface]\nkind = \"shadow\"\ns = 400\nprotocol = \"resample_independent\"\n\
                [noise]\nenabled = true\neta = [0.0]\nreference_snapshots = 4000\n";
    let cfg = with_system(6, body);
    let noisy = cmd_noisy_optimize(&cfg, &dir.path().join("noisy")).unwrap();
    let ideal = cmd_optimize(&cfg, &dir.path().join("ideal")).unwrap();
    let r = &noisy.runs[0];
    assert!((r.e_qa_noisy - noisy.e_qa).abs() < 4.0 * r.e_qa_noisy_std_err);
    // both runs start at the annealed state and take 20 small steps
    assert!((r.final_exact - ideal.e_final_exact).abs() < 0.1, "{} vs {}", r.final_exact, ideal.e_final_exact);
}
