use kamrev2::dioph::DiophParams;
use kamrev2::herman::*;
use kamrev2::revlin::{build_unfolding, Unfolding};
use kamrev2::systems::{parse_system, SystemSpec};

fn load(doc: &str) -> (SystemSpec, Unfolding) {
    let spec = parse_system(doc, 50).unwrap();
    let unf = build_unfolding(&spec.m, &spec.r).unwrap();
    (spec, unf)
}

fn dioph() -> DiophParams {
    DiophParams::new(2.5, 1e-4, 2).unwrap()
}

fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

#[test]
fn unperturbed_sweep_is_trivial() {
    let doc = format!(
        r#"{{"dims": {{"n": 1, "m": 1, "p": 0, "N": 1, "s": 1}}, "omega": [{}],
            "fields": {{"F": [{{"c": [1.0]}}, {{"d": {{"mu": [1]}}, "c": [1.0]}}]}}}}"#,
        golden()
    );
    let (spec, unf) = load(&doc);
    let mut cfg = SweepConfig::new(1.0, 201, 0.1, dioph());
    cfg.gamma_table = vec![1e-2, 1e-3];
    let fam = sweep(&spec, &unf, &cfg).unwrap();
    assert!(fam.records.iter().all(|r| r.error.is_none()));
    assert!(fam.g_records().all(|r| r.theta.as_ref().unwrap()[0] == 0.0));
    assert!(fam.measure.fraction_of_gamma > 0.9);
    let fr: Vec<f64> = fam.gamma_table.iter().map(|r| r.fraction_of_gamma).collect();
    assert!(fr.windows(2).all(|w| w[1] >= w[0]), "{fr:?}");
    // Γ″ is the only place 𝒢 can live
    assert!(fam.records.iter().all(|r| !r.in_g || r.in_gamma_dblprime));
}

#[test]
fn forced_family_has_linear_theta() {
    let eps = 1e-2;
    let doc = format!(
        r#"{{"dims": {{"n": 0, "m": 1, "p": 0, "N": 1, "s": 1}}, "omega": [1.0],
            "fields": {{"g": [{{"d": {{"mu": [1]}}, "c": [{eps}]}}, {{"k": [1], "basis": "cos", "c": [{eps}]}}]}}}}"#
    );
    let (spec, unf) = load(&doc);
    let fam = sweep(&spec, &unf, &SweepConfig::new(1.0, 21, 0.1, dioph())).unwrap();
    for r in fam.g_records() {
        assert!((r.theta.as_ref().unwrap()[0] + eps * r.mu[0]).abs() < 1e-14);
    }
    let rep = whitney_report(&fam, 2).unwrap();
    let second = rep.theta.iter().find(|d| d.order == 2).unwrap();
    assert!(second.max_abs < 1e-10);
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&fam, dir.path()).unwrap();
    for f in ["family.json", "measures.csv", "theta.csv", "long.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn perturbed_family_solves_key_system() {
    let eps = 1e-3;
    let doc = format!(
        r#"{{"dims": {{"n": 1, "m": 1, "p": 1, "N": 1, "s": 1}}, "omega": [{om}],
            "R": [[1.0, 0.0], [0.0, -1.0]],
            "fields": {{"F": [{{"c": [1.0]}}, {{"d": {{"mu": [1]}}, "c": [1.0]}}],
              "M": [{{"c": [[0.0, 1.0], [1.0, 0.0]]}}, {{"d": {{"mu": [1]}}, "c": [[0.0, 0.5], [0.5, 0.0]]}}],
              "f": [{{"k": [1, 1], "basis": "cos", "c": [{eps}]}}, {{"d": {{"y": [2]}}, "c": [{eps}]}}],
              "g": [{{"k": [0, 1], "basis": "cos", "c": [{eps}]}}, {{"d": {{"mu": [1]}}, "c": [{eps}]}}],
              "h": [{{"k": [0, 1], "basis": "cos", "d": {{"z": [0, 1]}}, "c": [{eps}, 0.0]}},
                    {{"k": [0, 1], "basis": "cos", "d": {{"z": [1, 0]}}, "c": [0.0, {m}]}}]}}}}"#,
        om = golden(),
        m = -eps
    );
    let (spec, unf) = load(&doc);
    let mut cfg = SweepConfig::new(0.5, 5, 0.1, dioph());
    cfg.solver.k_max = 4;
    let fam = sweep(&spec, &unf, &cfg).unwrap();
    let g: Vec<_> = fam.g_records().collect();
    assert!(!g.is_empty());
    for r in g {
        assert!(r.consistency.unwrap() < 1e-9, "{:?}", r.consistency);
        // Θ tracks the mean of g: −ε μ up to second order
        assert!((r.theta.as_ref().unwrap()[0] + eps * r.mu[0]).abs() < 1e-5);
    }
    let point = solve_point(&spec, &unf, &cfg, &[0.0]).unwrap();
    assert!(point.consistency < 1e-9);
    assert!(point.key.residual < cfg.key.tol);
}
