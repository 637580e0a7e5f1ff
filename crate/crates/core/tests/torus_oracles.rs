use kamrev2::dioph::DiophParams;
use kamrev2::error::Error;
use kamrev2::revlin::{build_unfolding, Unfolding};
use kamrev2::series::Basis;
use kamrev2::systems::{parse_system, SystemSpec};
use kamrev2::torus::*;

fn load(doc: &str) -> (SystemSpec, Unfolding) {
    let spec = parse_system(doc, 50).unwrap();
    let unf = build_unfolding(&spec.m, &spec.r).unwrap();
    (spec, unf)
}

fn guard() -> DiophParams {
    DiophParams::new(1.0, 1e-3, 2).unwrap()
}

fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

fn forced(eps: f64, c: f64) -> String {
    format!(
        r#"{{"dims": {{"n": 0, "m": 1, "p": 0, "N": 1, "s": 1}}, "omega": [1.0],
            "fields": {{"g": [{{"c": [{}]}}, {{"k": [1], "basis": "cos", "c": [{eps}]}}]}}}}"#,
        eps * c
    )
}

#[test]
fn forced_oscillator_has_closed_form_torus() {
    let (eps, c) = (1e-2, 0.3);
    let (spec, unf) = load(&forced(eps, c));
    let target = Target { omega0: vec![], mu0: vec![0.0], chi0: vec![] };
    let t = solve_torus(&spec, &target, &unf, &guard(), &SolverConfig::default()).unwrap();
    assert!((t.v[0] + eps * c).abs() < 1e-12);
    assert!((t.b0.coeff(&[1], Basis::Sin)[0] - eps).abs() < 1e-12);
    assert!(t.b0.coeff(&[1], Basis::Cos)[0].abs() < 1e-12);
    let fr = floquet_residual(&spec, &unf, &t).unwrap();
    assert!(fr.invariance < 1e-12 && fr.frequency < 1e-12);
    let rep = verify_by_integration(&spec, &unf, &t, 50.0).unwrap();
    assert!(rep.max_distance < 1e-9);
}

#[test]
fn rotation_matches_exact_circle_map() {
    let eps = 1e-3;
    let om = golden();
    let doc = format!(
        r#"{{"dims": {{"n": 1, "m": 1, "p": 0, "N": 1, "s": 1}}, "omega": [{om}],
            "fields": {{"F": [{{"c": [1.0]}}], "f": [{{"k": [1, 1], "basis": "cos", "c": [{eps}]}}]}}}}"#
    );
    let (spec, unf) = load(&doc);
    let target = Target { omega0: vec![1.0], mu0: vec![0.0], chi0: vec![] };
    let t = solve_torus(&spec, &target, &unf, &guard(), &SolverConfig::default()).unwrap();
    // φ = x + X obeys φ' = ω + Ω + ε cos φ; rotating at 1 + Ω needs this u
    let exact_u = ((1.0 + om).powi(2) + eps * eps).sqrt() - (1.0 + om);
    assert!((t.u[0] - exact_u).abs() < 1e-14, "{:?}", t.u);
    let first = t.a.coeff(&[1, 1], Basis::Sin)[0];
    assert!((first - eps / (1.0 + om)).abs() < 1e-6);
    let order = convergence_order(&t.history).order.unwrap();
    assert!(order > 1.8);
    assert!(t.symmetry_residuals(spec.r.matrix()).max() < 1e-14);
    assert_eq!(t.x_component_residual(&spec), 0.0);
}

#[test]
fn floquet_shift_absorbs_exponent_correction() {
    let eps = 1e-3;
    let doc = format!(
        r#"{{"dims": {{"n": 0, "m": 1, "p": 1, "N": 1, "s": 1}}, "omega": [1.0],
            "R": [[1.0, 0.0], [0.0, -1.0]],
            "fields": {{"M": [{{"c": [[0.0, 1.0], [1.0, 0.0]]}}],
              "h": [{{"k": [1], "basis": "cos", "d": {{"z": [0, 1]}}, "c": [{eps}, 0.0]}},
                    {{"k": [1], "basis": "cos", "d": {{"z": [1, 0]}}, "c": [0.0, {m}]}}]}}}}"#,
        m = -eps
    );
    let (spec, unf) = load(&doc);
    let target = Target { omega0: vec![], mu0: vec![0.0], chi0: vec![0.0] };
    let t = solve_torus(&spec, &target, &unf, &guard(), &SolverConfig::default()).unwrap();
    // averaging lowers the exponent by ε²/5; the unfolding shift restores α = 1
    let shifted = unf.spectrum(&t.w, &t.big_w).unwrap();
    assert!((shifted.alpha[0] - (1.0 + eps * eps / 5.0)).abs() < 1e-10, "{shifted:?}");
    assert_eq!(t.m_prime, unf.eval(&[0.0], &[0.0]));
    let fr = floquet_residual(&spec, &unf, &t).unwrap();
    assert!(fr.reducibility < 1e-12);
    assert_eq!(t.symmetry_residuals(spec.r.matrix()).max(), 0.0);
}

#[test]
fn transform_round_trips_through_json() {
    let (spec, unf) = load(&forced(1e-2, 0.3));
    let target = Target { omega0: vec![], mu0: vec![0.0], chi0: vec![] };
    let t = solve_torus(&spec, &target, &unf, &guard(), &SolverConfig { k_max: 3, ..Default::default() }).unwrap();
    let back = TorusTransform::from_json(&t.to_json(None), (0, 1, 0, 1)).unwrap();
    assert_eq!(back.coefficient_vector(), t.coefficient_vector());
    assert_eq!(back.v, t.v);
}

#[test]
fn resonances_and_large_perturbations_are_refused() {
    let (spec, unf) = load(&forced(1e-2, 0.3));
    let doc = format!(
        r#"{{"dims": {{"n": 1, "m": 1, "p": 0, "N": 1, "s": 1}}, "omega": [1.0],
            "fields": {{"F": [{{"c": [1.0]}}], "f": [{{"k": [1, -1], "basis": "cos", "c": [1e-3]}}]}}}}"#
    );
    let (rspec, runf) = load(&doc);
    let target = Target { omega0: vec![1.0], mu0: vec![0.0], chi0: vec![] };
    let err = solve_torus(&rspec, &target, &runf, &guard(), &SolverConfig::default()).unwrap_err();
    assert!(matches!(err, Error::SmallDivisorBreach { .. }), "{err:?}");
    let big = spec.scaled_perturbation(100.0);
    let target = Target { omega0: vec![], mu0: vec![0.0], chi0: vec![] };
    let err = solve_torus(&big, &target, &unf, &guard(), &SolverConfig::default()).unwrap_err();
    assert!(matches!(err, Error::GateExceeded { .. }), "{err:?}");
}
