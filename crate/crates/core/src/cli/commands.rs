//! Subcommand bodies. Each writes its outputs through the run context and
//! returns an optional failure note (a completed run whose checks failed).

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::config::*;
use super::manifest::{RunContext, RunManifest};
use crate::bss::ima_bss_sweep;
use crate::contrast::{darmois_global_ima, global_ima, igci_contrast, mpa_angle_sweep, sample_source};
use crate::dataset::{load_dataset, save_dataset, MultiEnvDataset};
use crate::error::{Error, Result};
use crate::mixing::MixingMap;
use crate::mss::{generate_mss_problem, mss_discover};
use crate::multienv::{
    causal_influence, causal_influence_mc, crl_sweep, enumerate_candidates, fit_candidate, generate_crl_problem, select_candidate,
    true_candidate, ReparametrizedScm,
};
use crate::multiview::{content_experiment, MultiViewProcess};
use crate::props::run_property_suite;
use crate::row;
use crate::spurious::DarmoisMap;
use crate::stats::{mean, variance};

pub type Outcome = Result<Option<String>>;

pub fn gen_data(cfg: &GenDataConfig, ctx: &mut RunContext) -> Outcome {
    let ds = match cfg.kind {
        DataKind::Crl => generate_crl_problem(&cfg.crl, cfg.seed)?,
        DataKind::Mss => generate_mss_problem(&cfg.mss, cfg.seed)?,
    };
    for p in save_dataset(&ds, &ctx.path(&cfg.file))? {
        ctx.record(&p);
    }
    let rows: Vec<_> = ds
        .envs
        .iter()
        .map(|e| row![e.id.clone(), e.x.nrows(), e.spec.as_ref().map(|s| format!("{:?}", s.target_nodes()))])
        .collect();
    ctx.write_csv("environments.csv", &["env_id", "rows", "targets"], &rows)?;
    Ok(None)
}

fn observations(mixing: &MixingMap, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = mixing.dim();
    let xs: Vec<Vec<f64>> = points.par_iter().map(|s| mixing.forward(s)).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(xs.len(), n, |r, c| xs[r][c]))
}

pub fn ima_eval(cfg: &ImaEvalConfig, ctx: &mut RunContext) -> Outcome {
    let mixing = cfg.mixing.build(cfg.seed)?;
    let mut rows = Vec::new();
    let est = match cfg.contrast {
        ContrastKind::Ima => global_ima(&mixing, &cfg.source, cfg.n_mc, cfg.seed)?,
        ContrastKind::Igci => {
            let dom: Option<Vec<(f64, f64)>> = cfg.igci_domain.as_ref().map(|d| d.iter().map(|&[a, b]| (a, b)).collect());
            igci_contrast(&mixing, &cfg.source, dom.as_deref(), cfg.n_mc, cfg.seed)?
        }
    };
    let label = match cfg.contrast {
        ContrastKind::Ima => "ima",
        ContrastKind::Igci => "igci",
    };
    rows.push(row![label, "mixing", est.value, est.stderr, est.n_mc, est.seed, est.excluded]);
    if let Some(d) = cfg.darmois {
        let fit_seed = crate::rng::child_seed(cfg.seed, 2);
        let eval_seed = crate::rng::child_seed(cfg.seed, 3);
        let x_fit = observations(&mixing, &sample_source(&cfg.source, d.n_fit, fit_seed))?;
        let x_eval = observations(&mixing, &sample_source(&cfg.source, d.n_eval, eval_seed))?;
        let darmois = DarmoisMap::empirical(&x_fit)?;
        let e = darmois_global_ima(&darmois, &x_eval, eval_seed)?;
        rows.push(row!["ima", "darmois", e.value, e.stderr, e.n_mc, e.seed, e.excluded]);
    }
    ctx.write_csv("contrast.csv", &["contrast", "map", "estimate", "stderr", "n_mc", "seed", "excluded"], &rows)?;
    Ok(None)
}

pub fn ima_sweep(cfg: &ImaSweepConfig, ctx: &mut RunContext) -> Outcome {
    let mixing = cfg.mixing.build(cfg.seed)?;
    let sweep = mpa_angle_sweep(&mixing, &cfg.source, &cfg.angles(), cfg.n_mc, cfg.seed)?;
    let rows: Vec<_> = sweep.iter().map(|r| row![r.theta, r.estimate, r.stderr, r.n_mc, r.seed]).collect();
    ctx.write_csv("sweep.csv", &["theta", "estimate", "stderr", "n_mc", "seed"], &rows)?;
    Ok(None)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

pub fn ima_train(cfg: &ImaTrainConfig, ctx: &mut RunContext) -> Outcome {
    let records = ima_bss_sweep(&cfg.experiment, cfg.seed)?;
    let rows: Vec<_> = records.iter().map(|r| row![r.seed, r.lambda, r.mcc, r.cima, r.val_nll, r.epochs]).collect();
    ctx.write_csv("runs.csv", &["seed", "lambda", "mcc", "cima", "val_nll", "epochs"], &rows)?;
    ctx.write_csv("summary.csv", &["lambda", "runs", "median_mcc", "median_cima"], &lambda_summary(&records.iter().map(|r| (r.lambda, r.mcc, r.cima)).collect::<Vec<_>>()))?;
    Ok(None)
}

fn lambda_summary(records: &[(f64, f64, f64)]) -> Vec<Vec<super::manifest::Cell>> {
    let mut lambdas: Vec<f64> = records.iter().map(|r| r.0).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    lambdas
        .into_iter()
        .map(|l| {
            let sel: Vec<_> = records.iter().filter(|r| r.0 == l).collect();
            row![l, sel.len(), median(sel.iter().map(|r| r.1).collect()), median(sel.iter().map(|r| r.2).collect())]
        })
        .collect()
}

pub fn multiview(cfg: &MultiviewConfig, ctx: &mut RunContext) -> Outcome {
    let results: Vec<_> = (0..cfg.n_seeds)
        .map(|k| {
            let seed = replicate_seed(cfg.seed, k);
            let mixing_seed = crate::rng::child_seed(seed, 1);
            let proc_ = if cfg.causal {
                MultiViewProcess::causal(cfg.n_c, cfg.n_s, cfg.change_prob, mixing_seed)
            } else {
                MultiViewProcess::independent(cfg.n_c, cfg.n_s, cfg.change_prob, mixing_seed)
            };
            content_experiment(&proc_, &cfg.experiment, seed).map(|r| (seed, r))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<_> = results
        .iter()
        .map(|(seed, r)| {
            let get = |k: &str| r.report.r2_per_block.get(k).copied();
            row![*seed, get("content"), get("style"), r.saturation, r.collapsed, r.epochs]
        })
        .collect();
    ctx.write_csv("results.csv", &["seed", "content_r2", "style_r2", "saturation", "collapsed", "epochs"], &rows)?;
    Ok(None)
}

pub fn crl_sweep_cmd(cfg: &CrlSweepCliConfig, ctx: &mut RunContext) -> Outcome {
    let header = ["seed", "candidate", "graph", "targets", "heldout_ll", "mcc", "correct", "failed"];
    let Some(path) = &cfg.data else {
        let (records, winners) = crl_sweep(&cfg.sweep, cfg.seed)?;
        let rows: Vec<_> = records
            .iter()
            .map(|r| row![r.seed, r.candidate.clone(), r.graph.clone(), r.targets.clone(), r.heldout_ll, r.mcc, r.correct, r.failed.clone()])
            .collect();
        ctx.write_csv("candidates.csv", &header, &rows)?;
        let rows: Vec<_> = winners.iter().map(|w| row![w.seed, w.winner.clone(), w.correct_won, w.ground_truth_ll]).collect();
        ctx.write_csv("winners.csv", &["seed", "winner", "correct_won", "ground_truth_ll"], &rows)?;
        return Ok(None);
    };
    let ds = load_dataset(path)?;
    let n = ds.dim();
    let extra = ds.envs.len().saturating_sub(1);
    if n == 0 || extra == 0 || extra % n != 0 {
        return Err(Error::Config(format!("{} environments cannot be one observational plus a whole number of interventions per each of {n} latents", ds.envs.len())));
    }
    let candidates = enumerate_candidates(n, extra / n)?;
    let truth = if ds.ground_truth.is_some() { Some(true_candidate(&ds)?) } else { None };
    let mut fit = cfg.sweep.fit.clone();
    fit.train.seed = crate::rng::child_seed(cfg.seed, 7);
    let fits: Vec<_> = candidates.par_iter().map(|c| fit_candidate(c, &ds, &fit)).collect::<Result<_>>()?;
    let rows: Vec<_> = fits
        .iter()
        .map(|f| {
            row![
                cfg.seed,
                f.spec.id(),
                f.spec.graph.edge_string(),
                format!("{:?}", f.spec.targets),
                f.heldout_total,
                f.mcc,
                truth.as_ref().map(|t| *t == f.spec),
                f.failed.clone()
            ]
        })
        .collect();
    ctx.write_csv("candidates.csv", &header, &rows)?;
    let sel = select_candidate(&fits)?;
    let w = &fits[sel.winner];
    ctx.write_csv(
        "winners.csv",
        &["seed", "winner", "correct_won", "ground_truth_ll"],
        &[row![cfg.seed, w.spec.id(), truth.as_ref().map(|t| *t == w.spec), Option::<f64>::None]],
    )?;
    Ok(None)
}

pub fn mss(cfg: &MssConfig, ctx: &mut RunContext) -> Outcome {
    let datasets: Vec<MultiEnvDataset> = match &cfg.data {
        Some(p) => vec![load_dataset(p)?],
        None => (0..cfg.n_runs).map(|k| generate_mss_problem(&cfg.problem, replicate_seed(cfg.seed, k))).collect::<Result<_>>()?,
    };
    let mut scores = Vec::new();
    let mut summary = Vec::new();
    for (run, ds) in datasets.iter().enumerate() {
        let res = mss_discover(ds, &cfg.test)?;
        let truth = ds.ground_truth.as_ref().map(|g| g.scm.dag().clone());
        for (k, e) in res.entries.iter().enumerate() {
            scores.push(row![run, k, e.dag.edge_string(), e.hard, e.soft, res.minimizers.contains(&k)]);
        }
        summary.push(row![
            run,
            res.minimizers.len(),
            res.entries[0].dag.edge_string(),
            truth.as_ref().map(|t| t.edge_string()),
            truth.as_ref().map(|t| res.contains_minimizer(t))
        ]);
    }
    ctx.write_csv("mss.csv", &["run", "dag_id", "edges", "hard", "soft", "minimizer"], &scores)?;
    ctx.write_csv("summary.csv", &["run", "n_minimizers", "best", "truth", "truth_in_minimizers"], &summary)?;
    Ok(None)
}

pub fn influence(cfg: &InfluenceConfig, ctx: &mut RunContext) -> Outcome {
    let base = causal_influence(&cfg.scm, cfg.i, cfg.j, cfg.n_mc, cfg.seed)?;
    let mut rows = vec![row!["original", cfg.i, cfg.j, format!("{:?}", base.method), base.value, base.stderr]];
    if let Some(r) = &cfg.reparam {
        let model = ReparametrizedScm::new(cfg.scm.clone(), r.maps.clone(), r.perm.clone())?;
        let (pi, pj) = (r.perm[cfg.i], r.perm[cfg.j]);
        let est = causal_influence_mc(&model, pi, pj, cfg.n_mc, cfg.seed)?;
        rows.push(row!["reparametrized", pi, pj, format!("{:?}", est.method), est.value, est.stderr]);
    }
    ctx.write_csv("influence.csv", &["model", "from", "to", "method", "estimate", "stderr"], &rows)?;
    Ok(None)
}

pub fn verify_props(cfg: &VerifyPropsConfig, ctx: &mut RunContext) -> Outcome {
    let report = run_property_suite(cfg.seed)?;
    let rows: Vec<_> = report.checks.iter().map(|c| row![c.name.clone(), c.passed, c.worst, c.threshold, c.detail.clone()]).collect();
    ctx.write_csv("props.csv", &["property", "passed", "worst", "threshold", "detail"], &rows)?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    Ok((!failed.is_empty()).then(|| format!("properties failed: {}", failed.join(", "))))
}

fn read_csv(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let header = rdr.headers()?.clone();
    let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

fn column(header: &csv::StringRecord, path: &Path, name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Parse { path: path.display().to_string(), row: 1, reason: format!("missing column {name}") })
}

fn parse_f64(path: &Path, row: usize, s: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::Parse { path: path.display().to_string(), row, reason: format!("cannot parse {s:?} as a number") })
}

/// Aggregates the outputs of a finished run.
pub fn report(cfg: &ReportConfig, run_dir: &Path, source: &RunManifest, ctx: &mut RunContext) -> Outcome {
    match source.command.as_str() {
        "ima-sweep" => {
            let p = run_dir.join("sweep.csv");
            let (h, rows) = read_csv(&p)?;
            let (ct, ce, cs) = (column(&h, &p, "theta")?, column(&h, &p, "estimate")?, column(&h, &p, "stderr")?);
            let mut out = Vec::new();
            let mut pattern_holds = true;
            for (k, r) in rows.iter().enumerate() {
                let (theta, est, se) = (parse_f64(&p, k + 2, &r[ct])?, parse_f64(&p, k + 2, &r[ce])?, parse_f64(&p, k + 2, &r[cs])?);
                let multiple = theta / FRAC_PI_2;
                let at_multiple = (multiple - multiple.round()).abs() < 1e-9;
                let zero = est.abs() <= cfg.zero_k * se;
                pattern_holds &= zero == at_multiple;
                out.push(row![theta, multiple, est, se, if se > 0.0 { est / se } else { f64::NAN }, zero, at_multiple]);
            }
            ctx.write_csv("report.csv", &["theta", "theta_over_half_pi", "estimate", "stderr", "z", "zero", "multiple_of_half_pi"], &out)?;
            ctx.write_csv("summary.csv", &["zero_exactly_at_multiples_of_half_pi"], &[row![pattern_holds]])?;
        }
        "crl-sweep" => {
            let p = run_dir.join("candidates.csv");
            let (h, rows) = read_csv(&p)?;
            let (cc, cl, cm, cr) = (column(&h, &p, "candidate")?, column(&h, &p, "heldout_ll")?, column(&h, &p, "mcc")?, column(&h, &p, "correct")?);
            let wp = run_dir.join("winners.csv");
            let (wh, wrows) = read_csv(&wp)?;
            let cw = column(&wh, &wp, "winner")?;
            let mut ids: Vec<String> = rows.iter().map(|r| r[cc].to_string()).collect();
            ids.sort();
            ids.dedup();
            let mut out = Vec::new();
            for id in ids {
                let sel: Vec<(usize, &csv::StringRecord)> = rows.iter().enumerate().filter(|(_, r)| r[cc] == *id).collect();
                let ll = sel.iter().map(|(k, r)| parse_f64(&p, k + 2, &r[cl])).collect::<Result<Vec<_>>>()?;
                let mc = sel.iter().map(|(k, r)| parse_f64(&p, k + 2, &r[cm])).collect::<Result<Vec<_>>>()?;
                let correct = sel.iter().filter(|(_, r)| &r[cr] == "true").count();
                let wins = wrows.iter().filter(|r| r[cw] == *id).count();
                out.push(row![id, sel.len(), correct, wins, median(ll), median(mc)]);
            }
            ctx.write_csv("report.csv", &["candidate", "fits", "times_correct", "wins", "median_heldout_ll", "median_mcc"], &out)?;
        }
        "ima-train" => {
            let p = run_dir.join("runs.csv");
            let (h, rows) = read_csv(&p)?;
            let (cl, cm, cc) = (column(&h, &p, "lambda")?, column(&h, &p, "mcc")?, column(&h, &p, "cima")?);
            let recs = rows
                .iter()
                .enumerate()
                .map(|(k, r)| Ok((parse_f64(&p, k + 2, &r[cl])?, parse_f64(&p, k + 2, &r[cm])?, parse_f64(&p, k + 2, &r[cc])?)))
                .collect::<Result<Vec<_>>>()?;
            ctx.write_csv("report.csv", &["lambda", "runs", "median_mcc", "median_cima"], &lambda_summary(&recs))?;
        }
        "mss" => {
            let p = run_dir.join("summary.csv");
            let (h, rows) = read_csv(&p)?;
            let ct = column(&h, &p, "truth_in_minimizers")?;
            let known: Vec<bool> = rows.iter().filter(|r| !r[ct].is_empty()).map(|r| &r[ct] == "true").collect();
            let hits = known.iter().filter(|&&b| b).count();
            ctx.write_csv("report.csv", &["runs", "runs_with_truth", "truth_in_minimizers"], &[row![rows.len(), known.len(), hits]])?;
        }
        "multiview" => {
            let p = run_dir.join("results.csv");
            let (h, rows) = read_csv(&p)?;
            let (cc, cs) = (column(&h, &p, "content_r2")?, column(&h, &p, "style_r2")?);
            let c = rows.iter().enumerate().map(|(k, r)| parse_f64(&p, k + 2, &r[cc])).collect::<Result<Vec<_>>>()?;
            let s = rows.iter().enumerate().map(|(k, r)| parse_f64(&p, k + 2, &r[cs])).collect::<Result<Vec<_>>>()?;
            let sd = |v: &[f64]| if v.len() > 1 { variance(v).sqrt() } else { 0.0 };
            ctx.write_csv(
                "report.csv",
                &["block", "mean_r2", "sd_r2", "seeds"],
                &[row!["content", mean(&c), sd(&c), c.len()], row!["style", mean(&s), sd(&s), s.len()]],
            )?;
        }
        other => return Err(Error::Config(format!("no report is defined for {other} runs"))),
    }
    Ok(None)
}
