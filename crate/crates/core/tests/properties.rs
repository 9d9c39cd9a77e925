use crl_lab::contrast::{local_ima, local_ima_of_jacobian};
use crl_lab::dataset::fmt_f64;
use crl_lab::flow::FlowModel;
use crl_lab::metrics::{amari_index, mcc, CorrelationMode};
use crl_lab::mixing::{InvertibleMlp, MixingMap, Moebius};
use crl_lab::rng::rng_from_seed;
use crl_lab::scm::{counterfactual, d_separated, enumerate_dags, three_node_linear_example, InterventionSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix2() -> impl Strategy<Value = DMatrix<f64>> {
    prop::array::uniform4(-2.0f64..2.0)
        .prop_filter("well conditioned", |a| (a[0] * a[3] - a[1] * a[2]).abs() > 0.1)
        .prop_map(|a| DMatrix::from_row_slice(2, 2, &a))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn local_contrast_is_nonnegative(j in matrix2()) {
        let (c, _) = local_ima_of_jacobian(&j).unwrap();
        prop_assert!(c >= -1e-12);
    }

    #[test]
    fn local_contrast_ignores_column_scaling(j in matrix2(), d0 in 0.1f64..5.0, d1 in -5.0f64..-0.1, angle in 0.0f64..6.3) {
        let (c, _) = local_ima_of_jacobian(&j).unwrap();
        let scaled = &j * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![d0, d1]));
        let swapped = DMatrix::from_columns(&[scaled.column(1), scaled.column(0)]);
        let (c2, _) = local_ima_of_jacobian(&swapped).unwrap();
        let rotated = crl_lab::linalg::rotation2(angle) * &j;
        let (c3, _) = local_ima_of_jacobian(&rotated).unwrap();
        prop_assert!((c - c2).abs() < 1e-9);
        prop_assert!((c - c3).abs() < 1e-9);
    }

    #[test]
    fn moebius_round_trip(seed in any::<u64>(), s0 in 0.0f64..1.0, s1 in 0.0f64..1.0) {
        let m = MixingMap::Moebius(Moebius::random(2, 0.0, 1.0, 0.1, &mut rng_from_seed(seed)));
        let back = m.inverse(&m.forward(&[s0, s1]).unwrap()).unwrap();
        prop_assert!((back[0] - s0).abs() < 1e-8 && (back[1] - s1).abs() < 1e-8);
        // Conformal maps have zero local contrast.
        prop_assert!(local_ima(&m, &[s0, s1]).unwrap().abs() < 1e-8);
    }

    #[test]
    fn mlp_round_trip(seed in any::<u64>(), s in prop::array::uniform3(-3.0f64..3.0)) {
        let m = MixingMap::InvertibleMlp(InvertibleMlp::random(3, 2, 0.5, &mut rng_from_seed(seed)));
        let back = m.inverse(&m.forward(&s).unwrap()).unwrap();
        for k in 0..3 {
            prop_assert!((back[k] - s[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn flow_round_trip(seed in any::<u64>(), x in prop::array::uniform2(-2.0f64..2.0)) {
        let flow = FlowModel::coupling(2, 3, &[8], false, &mut rng_from_seed(seed));
        let (z, _) = flow.encode(&x);
        let back = flow.decode(&z).unwrap();
        prop_assert!((back[0] - x[0]).abs() < 1e-8 && (back[1] - x[1]).abs() < 1e-8);
    }

    #[test]
    fn mcc_is_affine_invariant(seed in any::<u64>(), a in 0.1f64..4.0, b in -4.0f64..-0.1, shift in -3.0f64..3.0) {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        let z = DMatrix::from_fn(200, 2, |_, _| rng.random_range(-1.0..1.0));
        let zh = DMatrix::from_fn(200, 2, |r, c| if c == 0 { b * z[(r, 1)] } else { a * z[(r, 0)] + shift });
        let res = mcc(&zh, &z, CorrelationMode::Pearson).unwrap();
        prop_assert!((res.score - 1.0).abs() < 1e-10);
        let noise = DMatrix::from_fn(200, 2, |_, _| rng.random_range(-1.0..1.0));
        let s = mcc(&noise, &z, CorrelationMode::Rank).unwrap().score;
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn amari_is_zero_on_scaled_permutations(d0 in 0.1f64..5.0, d1 in -5.0f64..-0.1) {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, d0, d1, 0.0]);
        prop_assert!(amari_index(&p).abs() < 1e-12);
    }

    #[test]
    fn float_format_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn empty_counterfactual_returns_evidence(u in prop::array::uniform3(-3.0f64..3.0)) {
        let scm = three_node_linear_example();
        let v = scm.solve(&u).unwrap();
        let cf = counterfactual(&scm, &v, &InterventionSpec::observational()).unwrap();
        for k in 0..3 {
            prop_assert!((cf[k] - v[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn d_separation_is_symmetric_and_dags_are_distinct() {
    let dags = enumerate_dags(3).unwrap();
    for (a, da) in dags.iter().enumerate() {
        for db in &dags[a + 1..] {
            assert_ne!(da.edges(), db.edges());
        }
        for given in [vec![], vec![0], vec![1], vec![2]] {
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                if given.contains(&i) || given.contains(&j) {
                    continue;
                }
                assert_eq!(d_separated(da, i, j, &given).unwrap(), d_separated(da, j, i, &given).unwrap());
            }
        }
    }
}
