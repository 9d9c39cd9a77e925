//! Fast numerical property suite shared by `verify-props` and the acceptance
//! tests. Each check reports its worst observed error against a threshold.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::contrast::local_ima_of_jacobian;
use crate::dataset::GroundTruth;
use crate::error::Result;
use crate::flow::{BaseDensity, FlowModel};
use crate::linalg::{random_orthogonal, rotation2};
use crate::mixing::{InvertibleMlp, MixingMap, Moebius, ScalarMap};
use crate::multienv::{random_equivalent_solution, reference_bivariate, verify_minimality};
use crate::rng::{child_rng, LabRng};
use crate::scm::{counterfactual, three_node_linear_example, InterventionSpec, Mechanism};
use crate::source::Marginal;
use crate::spurious::{DarmoisMap, MpaMap};
use crate::stats::{ks_one_sample_critical, ks_statistic};

pub const JACOBIAN_TOL: f64 = 1e-5;
pub const ROUND_TRIP_TOL: f64 = 1e-8;
pub const NORMALIZATION_TOL: f64 = 0.01;
pub const INVARIANCE_TOL: f64 = 1e-8;
/// Family-wise level of each KS check, split over its coordinates.
pub const KS_LEVEL: f64 = 0.01;
pub const KS_SAMPLES: usize = 10_000;
pub const MINIMALITY_TRIALS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub threshold: f64,
    pub detail: String,
}

impl PropertyCheck {
    fn below(name: &str, worst: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: worst < threshold, worst, threshold, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    pub seed: u64,
    pub checks: Vec<PropertyCheck>,
}

impl PropertyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn normal_vec(rng: &mut LabRng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn uniform_vec(rng: &mut LabRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// Central-difference Jacobian of `f` at `x`.
pub fn finite_difference_jacobian(f: impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64]) -> Result<DMatrix<f64>> {
    let m = f(x)?.len();
    let mut jac = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let h = 1e-5 * x[j].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp)?, f(&xm)?);
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / analytic.norm().max(1e-12)
}

fn randomized_flow(dim: usize, rng: &mut LabRng, sd: f64) -> FlowModel {
    let mut flow = FlowModel::coupling(dim, 4, &[8], false, rng);
    let p = normal_vec(rng, flow.n_params(), sd);
    flow.set_params(&p);
    flow
}

/// Analytic Jacobians of every mixing family (and of flow encoders) against
/// central differences.
pub fn check_jacobians(seed: u64) -> Result<PropertyCheck> {
    let mut rng = child_rng(seed, 0);
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut record = |name: &str, err: f64| {
        if err > worst {
            worst = err;
            worst_name = name.to_string();
        }
    };
    for _ in 0..5 {
        let unit_box = |rng: &mut LabRng, n| uniform_vec(rng, n, 0.05, 0.95);
        let maps: Vec<(&str, MixingMap, Vec<f64>)> = vec![
            ("linear", MixingMap::linear(DMatrix::from_fn(3, 3, |_, _| rng.sample(StandardNormal))), normal_vec(&mut rng, 3, 1.0)),
            ("moebius", MixingMap::Moebius(Moebius::random(2, 0.0, 1.0, 0.5, &mut rng)), unit_box(&mut rng, 2)),
            ("mlp", MixingMap::InvertibleMlp(InvertibleMlp::random(3, 3, 0.2, &mut rng)), normal_vec(&mut rng, 3, 1.0)),
            ("polar", MixingMap::PolarCartesian, vec![0.2 + 2.0 * rng.random::<f64>(), 6.0 * rng.random::<f64>()]),
            (
                "elementwise",
                MixingMap::elementwise(vec![ScalarMap::cubic(), ScalarMap::Affine { scale: -2.0, shift: 0.5 }, ScalarMap::Power { exponent: 1.7 }])?,
                vec![rng.random::<f64>() * 2.0 - 1.0, 0.3, 0.2 + rng.random::<f64>()],
            ),
            (
                "darmois",
                DarmoisMap::gaussian(vec![0.5, -1.0], &DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]))?.into_mixing(),
                unit_box(&mut rng, 2),
            ),
            (
                "mpa",
                MpaMap::new(rotation2(rng.random::<f64>() * 6.0), vec![Marginal::unit_uniform(), Marginal::Beta { a: 2.0, b: 3.0 }])?.into_mixing(),
                unit_box(&mut rng, 2),
            ),
        ];
        for (name, map, s) in maps {
            let analytic = map.jacobian(&s)?;
            let numeric = finite_difference_jacobian(|v| map.forward(v), &s)?;
            record(name, relative_error(&analytic, &numeric));
        }
        let composed = MixingMap::InvertibleMlp(InvertibleMlp::random(2, 2, 0.3, &mut rng))
            .then(MixingMap::Moebius(Moebius::random(2, -3.0, 3.0, 1.0, &mut rng)));
        let s = normal_vec(&mut rng, 2, 0.5);
        record("composition", relative_error(&composed.jacobian(&s)?, &finite_difference_jacobian(|v| composed.forward(v), &s)?));

        let flow = randomized_flow(3, &mut rng, 0.3);
        let x = normal_vec(&mut rng, 3, 1.0);
        let (_, analytic) = flow.encode_with_jacobian(&x);
        let numeric = finite_difference_jacobian(|v| Ok(flow.encode(v).0), &x)?;
        record("flow", relative_error(&analytic, &numeric));
    }
    Ok(PropertyCheck::below("jacobian-vs-finite-difference", worst, JACOBIAN_TOL, format!("worst family: {worst_name}")))
}

/// `decode(encode(x)) = x` for random coupling flows.
pub fn check_flow_round_trip(seed: u64) -> Result<PropertyCheck> {
    let mut rng = child_rng(seed, 1);
    let mut worst: f64 = 0.0;
    for dim in [2, 3, 5] {
        let flow = randomized_flow(dim, &mut rng, 0.5);
        for _ in 0..50 {
            let x = normal_vec(&mut rng, dim, 2.0);
            let back = flow.decode(&flow.encode(&x).0)?;
            let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    Ok(PropertyCheck::below("flow-round-trip", worst, ROUND_TRIP_TOL, "max abs error over 150 points"))
}

fn trapezoid(step: f64, ys: &[f64]) -> f64 {
    let inner: f64 = ys.iter().sum();
    step * (inner - 0.5 * (ys[0] + ys[ys.len() - 1]))
}

/// The density of a 1D flow, and of a 2D coupling flow, integrates to one.
pub fn check_flow_normalization(seed: u64) -> Result<PropertyCheck> {
    let mut rng = child_rng(seed, 2);
    let mut flow1 = FlowModel::coupling(1, 0, &[], false, &mut rng);
    flow1.set_params(&[0.7, 0.4]);
    let (lo, hi, k) = (-15.0, 15.0, 30_001);
    let step = (hi - lo) / (k - 1) as f64;
    let ys: Vec<f64> = (0..k).map(|i| flow1.log_density(BaseDensity::StandardNormal, &[lo + step * i as f64]).exp()).collect();
    let one_d = trapezoid(step, &ys);

    let flow2 = randomized_flow(2, &mut rng, 0.3);
    let (lo, hi, k) = (-10.0, 10.0, 401);
    let step = (hi - lo) / (k - 1) as f64;
    let grid: Vec<f64> = (0..k).map(|i| lo + step * i as f64).collect();
    let rows: Vec<f64> = grid
        .iter()
        .map(|&a| {
            let ys: Vec<f64> = grid.iter().map(|&b| flow2.log_density(BaseDensity::StandardNormal, &[a, b]).exp()).collect();
            trapezoid(step, &ys)
        })
        .collect();
    let two_d = trapezoid(step, &rows);
    let worst = (one_d - 1.0).abs().max((two_d - 1.0).abs());
    Ok(PropertyCheck::below("flow-density-normalizes", worst, NORMALIZATION_TOL, format!("1D integral {one_d:.6}, 2D integral {two_d:.6}")))
}

/// `c_IMA ≥ 0`, invariant under left orthogonal maps and scalings and under
/// right column permutations and scalings.
pub fn check_cima_invariances(seed: u64) -> Result<(PropertyCheck, PropertyCheck)> {
    let mut rng = child_rng(seed, 3);
    let mut most_negative: f64 = 0.0;
    let mut worst_invariance: f64 = 0.0;
    for n in [2, 3, 4] {
        for _ in 0..100 {
            let j = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (c, _) = local_ima_of_jacobian(&j)?;
            most_negative = most_negative.min(c);
            let o = random_orthogonal(n, &mut rng);
            let alpha = 0.1 + 5.0 * rng.random::<f64>();
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let p = crate::linalg::permutation_matrix(&perm);
            let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                n,
                (0..n).map(|_| (0.1 + 3.0 * rng.random::<f64>()) * if rng.random::<bool>() { 1.0 } else { -1.0 }),
            ));
            for variant in [&o * &j, &j * alpha, &j * &p * &d, (&o * &j) * (&p * &d) * alpha] {
                let (cv, _) = local_ima_of_jacobian(&variant)?;
                worst_invariance = worst_invariance.max((cv - c).abs());
            }
        }
    }
    Ok((
        PropertyCheck::below("cima-nonnegative", -most_negative, INVARIANCE_TOL, "negated minimum over 300 random Jacobians"),
        PropertyCheck::below("cima-invariances", worst_invariance, INVARIANCE_TOL, "max deviation under O·J, αJ, J·P·D"),
    ))
}

/// Every coordinate of the Darmois pushforward of `x ~ N(μ, Σ)` is U(0,1).
pub fn check_darmois_uniformity(seed: u64) -> Result<PropertyCheck> {
    let mut rng = child_rng(seed, 4);
    let n = KS_SAMPLES;
    let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, -0.3, 0.6, 1.0, 0.4, -0.3, 0.4, 1.5]);
    let mean = vec![1.0, -0.5, 0.0];
    let chol = cov.clone().cholesky().expect("positive definite").l();
    let darmois = DarmoisMap::gaussian(mean.clone(), &cov)?;
    let mut cols = vec![Vec::with_capacity(n); 3];
    for _ in 0..n {
        let z = nalgebra::DVector::from_vec(normal_vec(&mut rng, 3, 1.0));
        let x: Vec<f64> = (&chol * z).iter().zip(&mean).map(|(a, b)| a + b).collect();
        for (c, u) in darmois.apply(&x)?.into_iter().enumerate() {
            cols[c].push(u);
        }
    }
    let worst = cols.iter().map(|c| ks_statistic(c, |u| u.clamp(0.0, 1.0))).fold(0.0, f64::max);
    let crit = ks_one_sample_critical(KS_LEVEL / cols.len() as f64, n);
    Ok(PropertyCheck::below("darmois-pushforward-uniform", worst, crit, format!("max KS over 3 coordinates, n={n}")))
}

/// An MPA leaves each source marginal unchanged.
pub fn check_mpa_marginals(seed: u64) -> Result<PropertyCheck> {
    let mut rng = child_rng(seed, 5);
    let n = KS_SAMPLES;
    let marginals = vec![Marginal::Beta { a: 2.0, b: 5.0 }, Marginal::Laplace { loc: 0.0, scale: 1.0 }];
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let theta = std::f64::consts::FRAC_PI_8 * (1.0 + 2.0 * k as f64);
        let mpa = MpaMap::new(rotation2(theta), marginals.clone())?;
        let mut cols = vec![Vec::with_capacity(n); 2];
        for _ in 0..n {
            let s: Vec<f64> = marginals.iter().map(|m| m.sample(&mut rng)).collect();
            for (c, v) in mpa.apply(&s)?.into_iter().enumerate() {
                cols[c].push(v);
            }
        }
        for (c, m) in marginals.iter().enumerate() {
            worst = worst.max(ks_statistic(&cols[c], |v| m.cdf(v)));
        }
    }
    let crit = ks_one_sample_critical(KS_LEVEL / 6.0, n);
    Ok(PropertyCheck::below("mpa-preserves-marginals", worst, crit, format!("max KS over 3 angles and 2 coordinates, n={n}")))
}

/// The worked three-node counterfactual: evidence (1,2,2) under do(V1 = 3)
/// gives exactly (1,3,3).
pub fn check_counterfactual() -> Result<PropertyCheck> {
    let cf = counterfactual(&three_node_linear_example(), &[1.0, 2.0, 2.0], &InterventionSpec::hard(1, 3.0))?;
    let exact = cf == [1.0, 3.0, 3.0];
    Ok(PropertyCheck { name: "counterfactual-example".into(), passed: exact, worst: if exact { 0.0 } else { 1.0 }, threshold: 0.5, detail: format!("{cf:?}") })
}

/// Random equivalent solutions reproduce the interventional observations of
/// the ground truth.
pub fn check_minimality(seed: u64) -> Result<PropertyCheck> {
    let mut rng = child_rng(seed, 6);
    let mut failures = 0;
    let mut worst_ratio: f64 = 0.0;
    for t in 0..MINIMALITY_TRIALS {
        let gt = GroundTruth { scm: reference_bivariate(), mixing: MixingMap::InvertibleMlp(InvertibleMlp::random(2, 2, 0.5, &mut rng)) };
        let node = t % 2;
        let spec = InterventionSpec::perfect(node, Mechanism::gaussian(2.0 * rng.random::<f64>() - 1.0, 0.5 + rng.random::<f64>()));
        let sol = random_equivalent_solution(2, &mut rng);
        let rep = verify_minimality(&gt, &sol, &spec, 2000, crate::rng::child_seed(seed, 100 + t as u64))?;
        failures += usize::from(!rep.passed);
        worst_ratio = worst_ratio.max(rep.ks.iter().fold(0.0, |a: f64, &b| a.max(b)) / rep.critical);
    }
    Ok(PropertyCheck {
        name: "minimality".into(),
        passed: failures == 0,
        worst: worst_ratio,
        threshold: 1.0,
        detail: format!("{failures}/{MINIMALITY_TRIALS} failed; worst KS / critical {worst_ratio:.3}"),
    })
}

pub fn run_property_suite(seed: u64) -> Result<PropertyReport> {
    let (nonneg, inv) = check_cima_invariances(seed)?;
    let checks = vec![
        check_jacobians(seed)?,
        check_flow_round_trip(seed)?,
        check_flow_normalization(seed)?,
        nonneg,
        inv,
        check_darmois_uniformity(seed)?,
        check_mpa_marginals(seed)?,
        check_counterfactual()?,
        check_minimality(seed)?,
    ];
    Ok(PropertyReport { seed, checks })
}

