//! Independent oracles: brute force, closed forms and quadrature, compared
//! against the library.

use std::f64::consts::{FRAC_PI_4, LN_2, PI};

use crl_lab::contrast::{global_ima, igci_contrast, local_ima, sample_source};
use crl_lab::dataset::{EnvData, GroundTruth, MultiEnvDataset};
use crl_lab::linalg::rotation2;
use crl_lab::metrics::{krr_r2, mcc, nonlinear_amari, CorrelationMode, KrrConfig};
use crl_lab::mixing::{MixingMap, ScalarMap};
use crl_lab::mss::{mss_discover, mss_score, CiInvarianceTest};
use crl_lab::multienv::{
    causal_influence, causal_influence_mc, discrepancy_check, genericity_gap, reference_bivariate, GenericityProbe, Phi,
    TransportedMechanism,
};
use crl_lab::rng::rng_from_seed;
use crl_lab::scm::{
    ancestral_sample, apply_intervention, d_separated, enumerate_dags, log_density, three_node_linear_example, Dag,
    InterventionSpec, Mechanism, Scm,
};
use crl_lab::source::{Marginal, SourceDistribution};
use crl_lab::spurious::DarmoisMap;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn mvn_log_pdf(x: &[f64], cov: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let v = DVector::from_column_slice(x);
    let inv = cov.clone().try_inverse().unwrap();
    -0.5 * (n * (2.0 * PI).ln() + cov.determinant().ln() + (v.transpose() * inv * v)[(0, 0)])
}

fn example_a() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 2.0, 1.0, 1.0])
}

// ---------------------------------------------------------------------------
// Graphs

fn is_acyclic(n: usize, edges: &[(usize, usize)]) -> bool {
    // Kahn's algorithm.
    let mut indeg = vec![0; n];
    for &(_, j) in edges {
        indeg[j] += 1;
    }
    let mut stack: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = stack.pop() {
        seen += 1;
        for &(i, j) in edges {
            if i == v {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    stack.push(j);
                }
            }
        }
    }
    seen == n
}

fn brute_force_dag_count(n: usize) -> usize {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    (0u64..1 << pairs.len())
        .filter(|mask| {
            let edges: Vec<_> = pairs.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, &e)| e).collect();
            is_acyclic(n, &edges)
        })
        .count()
}

#[test]
fn dag_counts_match_brute_force() {
    for (n, expected) in [(1, 1), (2, 3), (3, 25)] {
        assert_eq!(brute_force_dag_count(n), expected);
        assert_eq!(enumerate_dags(n).unwrap().len(), expected, "n = {n}");
    }
}

/// d-separation by enumerating every simple undirected path and applying
/// the blocking rules.
fn brute_force_dsep(dag: &Dag, i: usize, j: usize, given: &[usize]) -> bool {
    let n = dag.n();
    let desc = |v: usize| -> Vec<usize> {
        let mut out = vec![v];
        let mut k = 0;
        while k < out.len() {
            for c in dag.children(out[k]) {
                if !out.contains(&c) {
                    out.push(c);
                }
            }
            k += 1;
        }
        out
    };
    fn paths(dag: &Dag, n: usize, cur: Vec<usize>, j: usize, out: &mut Vec<Vec<usize>>) {
        let last = *cur.last().unwrap();
        if last == j {
            out.push(cur);
            return;
        }
        for v in 0..n {
            if !cur.contains(&v) && (dag.has_edge(last, v) || dag.has_edge(v, last)) {
                let mut next = cur.clone();
                next.push(v);
                paths(dag, n, next, j, out);
            }
        }
    }
    let mut all = Vec::new();
    paths(dag, n, vec![i], j, &mut all);
    all.iter().all(|p| {
        (1..p.len() - 1).any(|k| {
            let (a, b, c) = (p[k - 1], p[k], p[k + 1]);
            let collider = dag.has_edge(a, b) && dag.has_edge(c, b);
            if collider {
                !desc(b).iter().any(|d| given.contains(d))
            } else {
                given.contains(&b)
            }
        })
    })
}

#[test]
fn d_separation_matches_path_enumeration_on_all_three_node_dags() {
    for dag in enumerate_dags(3).unwrap() {
        for (i, j, k) in [(0, 1, 2), (0, 2, 1), (1, 2, 0)] {
            for given in [vec![], vec![k]] {
                assert_eq!(
                    d_separated(&dag, i, j, &given).unwrap(),
                    brute_force_dsep(&dag, i, j, &given),
                    "{} {i} {j} {given:?}",
                    dag.edge_string()
                );
            }
        }
    }
}

#[test]
fn collider_and_complete_graph() {
    let collider = Dag::from_edges(3, &[(0, 2), (1, 2)]).unwrap();
    assert!(d_separated(&collider, 0, 1, &[]).unwrap());
    assert!(!d_separated(&collider, 0, 1, &[2]).unwrap());
    let complete = three_node_linear_example();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let k = 3 - i - j;
        assert!(!d_separated(complete.dag(), i, j, &[]).unwrap());
        assert!(!d_separated(complete.dag(), i, j, &[k]).unwrap());
    }
}

// ---------------------------------------------------------------------------
// SCM sampling and densities

#[test]
fn standard_normal_node_moments() {
    let scm = Scm::new(Dag::empty(1), vec![Mechanism::gaussian(0.0, 1.0)]).unwrap();
    let x = ancestral_sample(&scm, 100_000, 3).unwrap();
    let mean = x.mean();
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    assert!(mean.abs() < 3.0 / (1e5f64).sqrt());
    assert!((var - 1.0).abs() < 0.05);
}

#[test]
fn three_node_covariance_is_a_at() {
    let scm = three_node_linear_example();
    let x = ancestral_sample(&scm, 200_000, 5).unwrap();
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(x.nrows(), 3, |r, c| x[(r, c)] - mean[c]);
    let cov = centred.transpose() * &centred / (n - 1.0);
    let a = example_a();
    let truth = &a * a.transpose();
    for (c, t) in cov.iter().zip(truth.iter()) {
        assert!((c - t).abs() < 0.05 * t.abs().max(1.0), "{cov} vs {truth}");
    }
}

#[test]
fn joint_density_is_the_gaussian_closed_form() {
    let scm = three_node_linear_example();
    let a = example_a();
    let cov = &a * a.transpose();
    for v in [[0.0, 0.0, 0.0], [1.0, -0.5, 2.0], [-1.2, 0.3, 0.7]] {
        let ours = log_density(&scm, &v).unwrap();
        assert!((ours - mvn_log_pdf(&v, &cov)).abs() < 1e-10);
        let summed: f64 = (0..3).map(|j| scm.log_conditional(j, &v).unwrap()).sum();
        assert!((ours - summed).abs() < 1e-12);
    }
}

#[test]
fn do_on_middle_node_sets_child_mean() {
    let scm = three_node_linear_example();
    let post = apply_intervention(&scm, &InterventionSpec::hard(1, 1.5)).unwrap();
    assert!(post.dag().parents(1).is_empty());
    let x = ancestral_sample(&post, 50_000, 9).unwrap();
    let m3 = x.column(2).mean();
    assert!((m3 - 1.5).abs() < 4.0 * (2.0f64 / 5e4).sqrt(), "{m3}");
    assert_eq!(apply_intervention(&scm, &InterventionSpec::observational()).unwrap(), scm);
}

// ---------------------------------------------------------------------------
// Contrasts

#[test]
fn shear_matrix_local_contrast() {
    let map = MixingMap::linear(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
    assert!((local_ima(&map, &[0.3, -0.2]).unwrap() - 0.5 * LN_2).abs() < 1e-12);
}

#[test]
fn left_rotation_leaves_local_contrast_unchanged() {
    let base = MixingMap::linear(DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.3, 2.0])).then(MixingMap::PolarCartesian);
    let rotated = base.clone().then(MixingMap::linear(rotation2(0.7)));
    let mut rng = rng_from_seed(4);
    for _ in 0..50 {
        let s = [rng.random_range(0.5..2.0), rng.random_range(0.0..1.0)];
        let a = local_ima(&base, &s).unwrap();
        let b = local_ima(&rotated, &s).unwrap();
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn polar_global_contrast_is_zero() {
    let est = global_ima(&MixingMap::PolarCartesian, &SourceDistribution::Polar { r_max: 3.0 }, 20_000, 2).unwrap();
    assert!(est.value.abs() <= 3.0 * est.stderr.max(1e-12));
}

#[test]
fn igci_quadrature_oracle() {
    // f(s) = s² on (0, 1) with p(s) = 2s: E_p[ln 2s] − E_unif[ln 2s].
    let m = 200_000;
    let h = 1.0 / m as f64;
    let (mut ep, mut eu) = (0.0, 0.0);
    for k in 0..m {
        let s = (k as f64 + 0.5) * h;
        let g = (2.0 * s).ln();
        ep += 2.0 * s * g * h;
        eu += g * h;
    }
    let oracle = ep - eu;
    let map = MixingMap::elementwise(vec![ScalarMap::Power { exponent: 2.0 }]).unwrap();
    let src = SourceDistribution::iid(Marginal::Beta { a: 2.0, b: 1.0 }, 1);
    let est = igci_contrast(&map, &src, Some(&[(0.0, 1.0)]), 100_000, 6).unwrap();
    assert!((est.value - oracle).abs() <= 3.0 * est.stderr, "{} ± {} vs {oracle}", est.value, est.stderr);

    let uniform = SourceDistribution::iid(Marginal::unit_uniform(), 1);
    let est = igci_contrast(&map, &uniform, Some(&[(0.0, 1.0)]), 100_000, 6).unwrap();
    assert!(est.value.abs() <= 3.0 * est.stderr);
}

// ---------------------------------------------------------------------------
// Spurious solutions

#[test]
fn gaussian_darmois_determinant_is_the_density() {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
    let d = DarmoisMap::gaussian(vec![0.2, -0.1], &cov).unwrap();
    for x in [[0.0, 0.0], [1.0, -1.0], [-0.7, 2.2]] {
        let j = d.jacobian(&x).unwrap();
        assert_eq!(j[(0, 1)], 0.0);
        let p = mvn_log_pdf(&[x[0] - 0.2, x[1] + 0.1], &cov).exp();
        assert!((j.determinant() - p).abs() < 1e-8);
    }
}

#[test]
fn darmois_pushforward_is_uniform_and_uncorrelated() {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]);
    let d = DarmoisMap::gaussian(vec![0.0, 0.0], &cov).unwrap();
    let chol = cov.cholesky().unwrap().l();
    let mut rng = rng_from_seed(8);
    let n = 5000;
    let u: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let e = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &chol * e;
            d.apply(x.as_slice()).unwrap()
        })
        .collect();
    for c in 0..2 {
        let mut col: Vec<f64> = u.iter().map(|r| r[c]).collect();
        col.sort_by(f64::total_cmp);
        let ks = col
            .iter()
            .enumerate()
            .map(|(k, &v)| ((k + 1) as f64 / n as f64 - v).abs().max((v - k as f64 / n as f64).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 1.36 / (n as f64).sqrt(), "KS {ks}");
    }
    let a: Vec<f64> = u.iter().map(|r| r[0] - 0.5).collect();
    let b: Vec<f64> = u.iter().map(|r| r[1] - 0.5).collect();
    let r = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
        / (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|y| y * y).sum::<f64>()).sqrt();
    assert!(r.abs() < 3.0 / (n as f64).sqrt());
}

// ---------------------------------------------------------------------------
// Metrics

#[test]
fn mcc_of_permuted_rescaled_latents_is_one() {
    let z = DMatrix::from_fn(500, 3, |r, c| ((r * 7 + c * 13) % 31) as f64 + (r as f64 * 0.01 * (c + 1) as f64).sin());
    let scales = [-2.0, 0.5, 3.0];
    let perm = [2, 0, 1];
    let zh = DMatrix::from_fn(500, 3, |r, c| scales[c] * z[(r, perm[c])] + 1.0);
    let res = mcc(&zh, &z, CorrelationMode::Pearson).unwrap();
    assert!((res.score - 1.0).abs() < 1e-12);
    for (i, &m) in res.matching.iter().enumerate() {
        assert_eq!(perm[m], i);
    }
}

#[test]
fn mcc_null_is_small() {
    let mut rng = rng_from_seed(12);
    let z = DMatrix::from_fn(10_000, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let zh = DMatrix::from_fn(10_000, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    assert!(mcc(&zh, &z, CorrelationMode::Pearson).unwrap().score < 0.05);
}

#[test]
fn krr_r2_extremes() {
    let mut rng = rng_from_seed(13);
    let f = DMatrix::from_fn(800, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let t = f.map(|v| v + 1e-6 * rng.sample::<f64, _>(StandardNormal));
    assert!(krr_r2(&f, &t, &KrrConfig::default(), 1).unwrap().r2_mean >= 0.99);
    let noise = DMatrix::from_fn(800, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    assert!(krr_r2(&f, &noise, &KrrConfig::default(), 1).unwrap().r2_mean <= 0.05);
}

#[test]
fn nonlinear_amari_cases() {
    let f = MixingMap::linear(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 1.2])).then(MixingMap::PolarCartesian);
    let pts = sample_source(&SourceDistribution::uniform_cube(2).clone(), 200, 1)
        .into_iter()
        .map(|s| vec![s[0] + 1.0, s[1]])
        .collect::<Vec<_>>();
    let inv = f.clone().inverted();
    assert!(nonlinear_amari(&f, &inv, &pts).unwrap().per_sample < 1e-8);
    let equiv = inv.clone().then(MixingMap::elementwise(vec![ScalarMap::cubic(), ScalarMap::Affine { scale: -2.0, shift: 1.0 }]).unwrap());
    let equiv = equiv.then(MixingMap::permutation(vec![1, 0]).unwrap());
    assert!(nonlinear_amari(&f, &equiv, &pts).unwrap().per_sample < 1e-8);
    let rotated = inv.then(MixingMap::linear(rotation2(FRAC_PI_4)));
    assert!(nonlinear_amari(&f, &rotated, &pts).unwrap().per_sample > 0.1);
}

// ---------------------------------------------------------------------------
// Multi-environment machinery

#[test]
fn discrepancy_examples() {
    let grid: Vec<f64> = (0..81).map(|k| -4.0 + 0.1 * k as f64).collect();
    let n01 = Mechanism::gaussian(0.0, 1.0);
    assert!(discrepancy_check(&n01, &Mechanism::gaussian(1.0, 1.0), &grid).unwrap().holds);
    assert!(!discrepancy_check(&n01, &n01, &grid).unwrap().holds);
    let wide = discrepancy_check(&n01, &Mechanism::gaussian(0.0, 2.0), &grid).unwrap();
    assert!(!wide.holds);
    assert!(wide.failures.iter().any(|v| v.abs() < 1e-9));
}

#[test]
fn genericity_gap_vanishes_without_a_shift() {
    let scm = reference_bivariate();
    let p1 = scm.mechanism(0).clone();
    for phi in Phi::PROBES {
        let g = genericity_gap(&scm, &p1, &Mechanism::gaussian(0.0, 2.0), &GenericityProbe::new(phi, 20_000, 3)).unwrap();
        assert!(g.value.abs() <= 3.0 * g.stderr.max(1e-12), "{phi:?}: {} ± {}", g.value, g.stderr);
    }
}

#[test]
fn influence_oracles() {
    let dag = Dag::from_edges(2, &[(0, 1)]).unwrap();
    let lg = |w: f64| Scm::new(dag.clone(), vec![Mechanism::gaussian(0.0, 1.0), Mechanism::linear_gaussian(vec![w], 0.0, 1.0)]).unwrap();
    assert!((causal_influence(&lg(1.0), 0, 1, 10_000, 1).unwrap().value - 0.5 * LN_2).abs() < 1e-12);
    let zero = causal_influence_mc(&lg(0.0), 0, 1, 20_000, 1).unwrap();
    assert!(zero.value.abs() <= 3.0 * zero.stderr.max(1e-3), "{zero:?}");
}

#[test]
fn transported_affine_gaussian_matches_hand_derivation() {
    // 3·N(1, 2²) − 1 = N(2, 6²).
    let t = TransportedMechanism { base: Mechanism::gaussian(1.0, 2.0), map: ScalarMap::Affine { scale: 3.0, shift: -1.0 } };
    let closed = t.affine_gaussian().unwrap();
    assert_eq!(closed, Mechanism::gaussian(2.0, 6.0));
    for z in [-3.0, 0.0, 2.0, 7.5] {
        assert!((t.log_density(z) - closed.log_density(z, &[]).unwrap()).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Mechanism shift score

fn two_node_dataset(envs: Vec<InterventionSpec>) -> MultiEnvDataset {
    let scm = Scm::new(
        Dag::from_edges(2, &[(0, 1)]).unwrap(),
        vec![Mechanism::gaussian(0.0, 1.0), Mechanism::linear_gaussian(vec![0.8], 0.1, 0.7)],
    )
    .unwrap();
    let envs = envs
        .into_iter()
        .enumerate()
        .map(|(k, spec)| {
            let x = ancestral_sample(&apply_intervention(&scm, &spec).unwrap(), 300, k as u64).unwrap();
            EnvData { id: format!("e{k}"), spec: Some(spec), x, latents: None }
        })
        .collect();
    MultiEnvDataset {
        envs,
        ground_truth: Some(GroundTruth { scm, mixing: MixingMap::permutation(vec![0, 1]).unwrap() }),
        seed: None,
    }
}

#[test]
fn mss_two_node_oracle() {
    let shift = InterventionSpec::perfect(0, Mechanism::gaussian(1.5, 0.5));
    let ds = two_node_dataset(vec![InterventionSpec::observational(), shift]);
    let oracle = CiInvarianceTest::oracle();
    let forward = Dag::from_edges(2, &[(0, 1)]).unwrap();
    let backward = Dag::from_edges(2, &[(1, 0)]).unwrap();
    assert_eq!(mss_score(&forward, &ds, &oracle).unwrap().0, 1);
    assert_eq!(mss_score(&Dag::empty(2), &ds, &oracle).unwrap().0, 2);
    assert_eq!(mss_score(&backward, &ds, &oracle).unwrap().0, 2);
    let res = mss_discover(&ds, &oracle).unwrap();
    assert_eq!(res.minimizers.len(), 1);
    assert!(res.contains_minimizer(&forward));
}

#[test]
fn mss_degenerate_environments_score_zero() {
    let single = two_node_dataset(vec![InterventionSpec::observational()]);
    let dup = two_node_dataset(vec![InterventionSpec::observational(), InterventionSpec::observational()]);
    for dag in enumerate_dags(2).unwrap() {
        assert_eq!(mss_score(&dag, &single, &CiInvarianceTest::default()).unwrap().0, 0);
        assert_eq!(mss_score(&dag, &dup, &CiInvarianceTest::oracle()).unwrap().0, 0);
    }
}

#[test]
fn dense_shifts_leave_orientation_open() {
    let both = InterventionSpec::soft(0, vec![], Mechanism::gaussian(1.0, 0.5))
        .and(InterventionSpec::soft(1, vec![0], Mechanism::linear_gaussian(vec![-0.4], 1.0, 1.3)));
    let ds = two_node_dataset(vec![InterventionSpec::observational(), both]);
    let res = mss_discover(&ds, &CiInvarianceTest::oracle()).unwrap();
    assert_eq!(res.minimizers.len(), 3);
}

/// Regenerates the reference value used by the acceptance suite. Takes a
/// few minutes in release mode.
#[test]
#[ignore]
fn genericity_reference_value() {
    let scm = reference_bivariate();
    let probe = GenericityProbe::new(Phi::Square, 10_000_000, 1);
    let g = genericity_gap(&scm, &Mechanism::gaussian(2.0, 1.0), &Mechanism::gaussian(0.0, 2.0), &probe).unwrap();
    println!("reference gap {:e} stderr {:e}", g.value, g.stderr);
    assert_eq!((g.value, g.stderr), (-7.16683390054605e33, 7.166827520894657e33));
}
