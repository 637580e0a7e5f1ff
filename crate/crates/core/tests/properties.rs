use nalgebra::DMatrix;
use proptest::prelude::*;

use kamrev2::dioph::{affine_dioph_check, affine_form, DiophParams};
use kamrev2::herman::{ball_volume, shrunk_radii};
use kamrev2::revlin::{build_unfolding, check_involution, classify_spectrum, CLASSIFY_TOL};
use kamrev2::series::{Basis, MatrixPoly};
use kamrev2::torus::{cohomological_solve, convergence_order, FourierSeries};

fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cohomological_solution_inverts_the_derivative(
        coeffs in prop::collection::vec((-3i64..=3, -3i64..=3, -1.0f64..1.0, -1.0f64..1.0), 1..8),
        theta in (0.0f64..6.3, 0.0f64..6.3),
    ) {
        let freq = [1.0, golden()];
        let mut rhs = FourierSeries::zero(1, 2);
        for (k1, k2, c, s) in &coeffs {
            if *k1 == 0 && *k2 == 0 {
                continue;
            }
            rhs.push(vec![*k1, *k2], Basis::Cos, vec![*c]);
            rhs.push(vec![*k1, *k2], Basis::Sin, vec![*s]);
        }
        let guard = DiophParams::new(2.5, 1e-4, 1).unwrap();
        let phi = cohomological_solve(&rhs, &freq, &guard).unwrap();
        let th = [theta.0, theta.1];
        let (_, grad) = phi.eval_grad(&th);
        let lhs = grad[0][0] * freq[0] + grad[1][0] * freq[1];
        prop_assert!((lhs - rhs.eval(&th)[0]).abs() < 1e-9);
        prop_assert!(phi.mean()[0].abs() == 0.0);
    }

    #[test]
    fn shrunk_balls_remove_equal_thirds(r in 0.1f64..5.0, eps2 in 0.01f64..0.99, s in 1usize..5) {
        let (r1, r2) = shrunk_radii(r, eps2, s);
        prop_assert!(r2 < r1 && r1 < r);
        let v = ball_volume(s, r);
        let third = eps2 / 3.0 * v;
        prop_assert!(((v - ball_volume(s, r1)) - third).abs() <= 1e-12 * v);
        prop_assert!(((ball_volume(s, r1) - ball_volume(s, r2)) - third).abs() <= 1e-12 * v);
    }

    #[test]
    fn diophantine_pass_survives_smaller_gamma(f0 in 0.1f64..2.0, f1 in 0.1f64..2.0, b in 0.1f64..2.0, g in 1e-5f64..1e-1) {
        let wide = DiophParams::new(3.0, g, 1).unwrap();
        let narrow = DiophParams::new(3.0, g / 2.0, 1).unwrap();
        let f = [f0, f1];
        let rw = affine_dioph_check(&f, &[b], &wide, 20).unwrap();
        let rn = affine_dioph_check(&f, &[b], &narrow, 20).unwrap();
        prop_assert_eq!(rw.worst_ratio, rn.worst_ratio);
        if rw.passed() {
            prop_assert!(rn.passed());
        }
    }

    #[test]
    fn affine_form_is_odd(f in prop::collection::vec(-2.0f64..2.0, 2), b in -2.0f64..2.0, k in prop::collection::vec(-4i64..4, 2), l in -2i64..2) {
        let plus = affine_form(&f, &k, &[b], &[l]);
        let nk: Vec<i64> = k.iter().map(|v| -v).collect();
        let minus = affine_form(&f, &nk, &[b], &[-l]);
        prop_assert!((plus + minus).abs() < 1e-12);
    }

    #[test]
    fn reversible_pair_spectrum(a in prop_oneof![0.1f64..3.0, -3.0f64..-0.1], b in 0.1f64..3.0) {
        let r = check_involution(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[0.0, a, b, 0.0]);
        let sp = classify_spectrum(&m, &r, CLASSIFY_TOL).unwrap();
        let mag = (a * b).abs().sqrt();
        if a > 0.0 {
            prop_assert_eq!((sp.nu1, sp.nu2), (1, 0));
            prop_assert!((sp.alpha[0] - mag).abs() < 1e-12);
        } else {
            prop_assert_eq!((sp.nu1, sp.nu2), (0, 1));
            prop_assert!((sp.beta[0] - mag).abs() < 1e-12);
        }
        let unf = build_unfolding(&MatrixPoly::constant(m.clone(), 1), &r).unwrap();
        let zero = vec![0.0; unf.s_unf()];
        prop_assert_eq!(unf.eval(&[0.3], &zero), m);
    }

    #[test]
    fn quadratic_histories_have_order_two(r0 in 1e-4f64..9e-4, c in 0.5f64..2.0) {
        let mut h = vec![1.0, 1e-2, r0];
        while *h.last().unwrap() > 1e-12 {
            let r = *h.last().unwrap();
            h.push(c * r * r);
        }
        let o = convergence_order(&h).order.unwrap();
        prop_assert!(o > 1.8 && o < 2.3, "order {o}");
    }
}
