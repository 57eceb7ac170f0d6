//! Stage pipeline: spectral → cumulants → estimates → predictions → comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rmldp_core::cumulant::{build_model, CumulantModel};
use rmldp_core::ensemble::{validate, ConditionReport, EnsembleConfig, MatrixEnsemble, ValidateOptions};
use rmldp_core::montecarlo::{
    self, crude, exhaustive, norm_tail, tilted_estimate, EstimateRecord, Functional, SamplerSettings, TiltedKernel,
};
use rmldp_core::numeric::fmt_f64;
use rmldp_core::predict::{self, ldp_rate_pred, llt_pred, lower_tail_pred, upper_tail_pred, Prediction};
use rmldp_core::projective::SphereDirection;
use rmldp_core::spectral::{build_grid, default_chart, SpectralDocument, SpectralProblem, SpectralSolution};
use serde::Serialize;

use crate::config::{Check, EstimatorMethod, ExperimentConfig, LoadedConfig, Target};

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub resolution: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.estimator.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.estimator.workers = w;
        }
        if let Some(r) = self.resolution {
            cfg.resolution = r;
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
    }
}

/// Internal worker argument: 1 = sequential, 0 = the (bounded) global pool.
fn inner_workers(w: usize) -> usize {
    if w == 1 {
        1
    } else {
        0
    }
}

pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from("out").join(&cfg.name))
}

#[derive(Debug, Serialize)]
struct SpectralFile<'a> {
    name: &'a str,
    ensemble: EnsembleConfig,
    conditions: &'a ConditionReport,
    resolution: usize,
    solutions: Vec<SpectralDocument>,
}

/// Spectral layer for every configured `s`.
pub struct SpectralStage {
    pub problem: SpectralProblem,
    pub solutions: Vec<SpectralSolution>,
    pub conditions: ConditionReport,
}

pub fn spectral_stage(cfg: &ExperimentConfig, ensemble: &MatrixEnsemble) -> Result<SpectralStage> {
    let conditions = validate(ensemble, &ValidateOptions::default());
    let grid = build_grid(ensemble.dim(), default_chart(ensemble), cfg.resolution).context("[spectral] building grid")?;
    let problem = SpectralProblem::new(ensemble, &grid).context("[spectral] discretizing")?;
    let solutions = cfg
        .s_values
        .iter()
        .map(|&s| problem.solve(s).with_context(|| format!("[spectral] solving at s = {s}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralStage { problem, solutions, conditions })
}

pub fn spectral_json(cfg: &ExperimentConfig, ensemble: &MatrixEnsemble, st: &SpectralStage) -> Result<String> {
    let file = SpectralFile {
        name: &cfg.name,
        ensemble: ensemble.to_config(),
        conditions: &st.conditions,
        resolution: cfg.resolution,
        solutions: st.solutions.iter().map(|s| s.document()).collect(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn cumulant_stage(cfg: &ExperimentConfig, st: &SpectralStage) -> Result<CumulantModel> {
    let mut opts = cfg.model_options();
    opts.workers = inner_workers(cfg.estimator.workers);
    build_model(&st.problem, &opts).context("[cumulants] building Λ model")
}

pub fn cumulants_csv(model: &CumulantModel) -> String {
    let (a, b) = model.range();
    let pad = 0.02 * (b - a);
    let pts: Vec<f64> = (0..=60).map(|k| a + pad + (b - a - 2.0 * pad) * k as f64 / 60.0).collect();
    model.csv_table(&pts)
}

/// One point of the experiment sweep.
#[derive(Debug, Clone)]
pub struct Case {
    pub target: Target,
    pub s_index: usize,
    pub s: f64,
    pub n: usize,
    pub l: f64,
    pub l_sign: f64,
    pub x_id: String,
    pub x: SphereDirection,
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn cases(cfg: &ExperimentConfig, ensemble: &MatrixEnsemble) -> Result<Vec<Case>> {
    let chart = default_chart(ensemble);
    let dirs: Vec<Vec<f64>> = if cfg.directions.is_empty() { vec![vec![1.0; ensemble.dim()]] } else { cfg.directions.clone() };
    let mut out = Vec::new();
    for t in &cfg.targets {
        for (si, &s) in cfg.s_values.iter().enumerate() {
            if !t.accepts(s) {
                continue;
            }
            for (xi, xv) in dirs.iter().enumerate() {
                let x = SphereDirection::new(xv.clone(), chart).with_context(|| format!("direction {xv:?}"))?;
                for &sign in &cfg.l_signs {
                    for &n in &cfg.n_values {
                        let seed = splitmix(cfg.estimator.seed ^ splitmix(out.len() as u64));
                        out.push(Case {
                            target: *t,
                            s_index: si,
                            s,
                            n,
                            l: sign * cfg.l_rule.at(n),
                            l_sign: sign,
                            x_id: format!("x{xi}"),
                            x: x.clone(),
                            seed,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn paths_affordable(ensemble: &MatrixEnsemble, n: usize) -> bool {
    ensemble.scalar_logs().is_some() || (ensemble.len() as f64).powi(n as i32) <= montecarlo::ENUMERATION_GUARD as f64
}

fn functional(case: &Case, q: f64) -> Functional {
    let level = case.n as f64 * (q + case.l);
    match case.target {
        Target::UpperTail | Target::Norm => Functional::UpperTail { level },
        Target::LowerTail => Functional::LowerTail { level },
        Target::LocalLimit { a, delta } => Functional::Window { lo: level + a, hi: level + a + delta },
    }
}

pub fn estimate_case(
    cfg: &ExperimentConfig,
    ensemble: &MatrixEnsemble,
    st: &SpectralStage,
    model: &CumulantModel,
    case: &Case,
) -> Result<EstimateRecord> {
    let q = model.q(case.s);
    let sol = &st.solutions[case.s_index];
    let set = SamplerSettings { samples: cfg.estimator.samples, seed: case.seed, workers: inner_workers(cfg.estimator.workers) };
    let tag = || format!("[estimate] {} s={} n={} l={}", case.target.id(), case.s, case.n, case.l);
    if let Target::Norm = case.target {
        let k = TiltedKernel::new(ensemble, sol).with_context(tag)?;
        return Ok(norm_tail(&k, &case.x, case.n, q, case.l, &set).with_context(tag)?.direct);
    }
    let f = functional(case, q);
    let method = match cfg.estimator.method {
        EstimatorMethod::Auto if paths_affordable(ensemble, case.n) => EstimatorMethod::Exhaustive,
        EstimatorMethod::Auto => EstimatorMethod::Tilted,
        m => m,
    };
    let rec = match method {
        EstimatorMethod::Exhaustive => exhaustive(ensemble, &case.x, case.n, &f),
        EstimatorMethod::Crude => crude(ensemble, &case.x, case.n, &f, &set),
        _ => {
            let k = TiltedKernel::new(ensemble, sol).with_context(tag)?;
            tilted_estimate(&k, &case.x, case.n, &f, &set).map(|e| e.record)
        }
    };
    rec.with_context(tag)
}

/// A prediction row; the norm target only has its exponential rate.
#[derive(Debug, Clone)]
pub enum PredRow {
    Full(Prediction),
    Rate { s: f64, n: usize, l: f64, log_value: f64 },
}

impl PredRow {
    pub fn log_value(&self) -> f64 {
        match self {
            PredRow::Full(p) => p.log_value,
            PredRow::Rate { log_value, .. } => *log_value,
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            PredRow::Full(p) => p.value,
            PredRow::Rate { log_value, .. } => log_value.exp(),
        }
    }

    pub fn csv(&self, x_id: &str) -> String {
        match self {
            PredRow::Full(p) => predict::csv_row(p, x_id),
            PredRow::Rate { s, n, l, log_value } => format!(
                "norm_rate,{},{},{},{},{},{},nan,nan,nan,nan,nan,{}\n",
                fmt_f64(*s),
                n,
                fmt_f64(*l),
                x_id,
                fmt_f64(log_value.exp()),
                fmt_f64(*log_value),
                fmt_f64(*log_value)
            ),
        }
    }
}

pub fn predict_case(st: &SpectralStage, model: &CumulantModel, case: &Case) -> Result<PredRow> {
    let sol = &st.solutions[case.s_index];
    let tag = || format!("[predict] {} s={} n={} l={}", case.target.id(), case.s, case.n, case.l);
    let p = match case.target {
        Target::UpperTail => upper_tail_pred(sol, model, &case.x, case.n, case.l),
        Target::LowerTail => lower_tail_pred(sol, model, &case.x, case.n, case.l),
        Target::LocalLimit { a, delta } => llt_pred(sol, model, &case.x, case.n, case.l, a, delta),
        Target::Norm => {
            let r = ldp_rate_pred(model, case.s).with_context(tag)?;
            return Ok(PredRow::Rate { s: case.s, n: case.n, l: case.l, log_value: case.n as f64 * r });
        }
    };
    Ok(PredRow::Full(p.with_context(tag)?))
}

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub case: Case,
    pub estimate: EstimateRecord,
    pub prediction: PredRow,
    pub ratio: f64,
    pub ratio_ci: (f64, f64),
}

impl ComparisonRow {
    pub fn new(case: Case, estimate: EstimateRecord, prediction: PredRow) -> Self {
        let lr = estimate.log_value - prediction.log_value();
        let ratio = lr.exp();
        let d = 1.96 * estimate.rel_std_error;
        let ratio_ci = (ratio * (1.0 - d), ratio * (1.0 + d));
        Self { case, estimate, prediction, ratio, ratio_ci }
    }

    pub fn rate_gap(&self) -> f64 {
        (self.estimate.log_value - self.prediction.log_value()) / self.case.n as f64
    }
}

pub const COMPARISON_HEADER: &str =
    "target,n,s,l,x_id,estimate,log_estimate,std_error,prediction,log_prediction,ratio,ratio_lo,ratio_hi,rate_gap\n";

fn comparison_line(r: &ComparisonRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        r.case.target.id(),
        r.case.n,
        fmt_f64(r.case.s),
        fmt_f64(r.case.l),
        r.case.x_id,
        fmt_f64(r.estimate.value),
        fmt_f64(r.estimate.log_value),
        fmt_f64(r.estimate.std_error),
        fmt_f64(r.prediction.value()),
        fmt_f64(r.prediction.log_value()),
        fmt_f64(r.ratio),
        fmt_f64(r.ratio_ci.0),
        fmt_f64(r.ratio_ci.1),
        fmt_f64(r.rate_gap())
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub check: Check,
    pub pass: bool,
    pub detail: String,
}

fn curve_key(r: &ComparisonRow) -> (String, usize, String, String) {
    (r.case.target.id(), r.case.s_index, format!("{}", r.case.l_sign), r.case.x_id.clone())
}

pub fn evaluate_checks(checks: &[Check], rows: &[ComparisonRow]) -> Vec<CheckOutcome> {
    checks
        .iter()
        .map(|c| match c {
            Check::RatioBand { target, n, band } => {
                let sel: Vec<&ComparisonRow> =
                    rows.iter().filter(|r| &r.case.target.id() == target && n.is_none_or(|n| r.case.n == n)).collect();
                let bad: Vec<String> = sel
                    .iter()
                    .filter(|r| !(r.ratio >= band[0] && r.ratio <= band[1]))
                    .map(|r| format!("n={} l={:.3e}: {:.4}", r.case.n, r.case.l, r.ratio))
                    .collect();
                let pass = !sel.is_empty() && bad.is_empty();
                let detail = if sel.is_empty() { "no matching rows".into() } else if pass { format!("{} rows in band", sel.len()) } else { bad.join("; ") };
                CheckOutcome { check: c.clone(), pass, detail }
            }
            Check::RatioTrend { target } => {
                let mut curves: BTreeMap<_, Vec<&ComparisonRow>> = BTreeMap::new();
                for r in rows.iter().filter(|r| &r.case.target.id() == target) {
                    curves.entry(curve_key(r)).or_default().push(r);
                }
                let mut bad = Vec::new();
                for (k, mut v) in curves.clone() {
                    v.sort_by_key(|r| r.case.n);
                    for w in v.windows(2) {
                        if (w[1].ratio - 1.0).abs() > (w[0].ratio - 1.0).abs() {
                            bad.push(format!("{k:?}: n={}→{} ratio {:.4}→{:.4}", w[0].case.n, w[1].case.n, w[0].ratio, w[1].ratio));
                        }
                    }
                }
                let pass = !curves.is_empty() && bad.is_empty();
                CheckOutcome { check: c.clone(), pass, detail: if pass { "monotone".into() } else { bad.join("; ") } }
            }
            Check::RateGap { target, n, tolerance } => {
                let sel: Vec<&ComparisonRow> = rows.iter().filter(|r| &r.case.target.id() == target && r.case.n == *n).collect();
                let worst = sel.iter().map(|r| r.rate_gap().abs()).fold(0.0f64, f64::max);
                let pass = !sel.is_empty() && worst <= *tolerance;
                CheckOutcome { check: c.clone(), pass, detail: format!("max |rate gap| = {worst:.4e}") }
            }
        })
        .collect()
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let p = dir.join(name);
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
}

/// Which files a subcommand produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Spectral,
    Cumulants,
    Estimate,
    Predict,
    Compare,
    Run,
}

/// Runs the pipeline up to `stage`; returns check outcomes (empty unless `Run`).
pub fn execute(loaded: &LoadedConfig, stage: Stage) -> Result<Vec<CheckOutcome>> {
    let cfg = &loaded.config;
    let e = &loaded.ensemble;
    let dir = output_dir(cfg);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let st = spectral_stage(cfg, e)?;
    write(&dir, "spectral.json", &spectral_json(cfg, e, &st)?)?;
    if stage == Stage::Spectral {
        return Ok(vec![]);
    }
    let model = cumulant_stage(cfg, &st)?;
    write(&dir, "cumulants.csv", &cumulants_csv(&model))?;
    if stage == Stage::Cumulants {
        return Ok(vec![]);
    }
    let cs = cases(cfg, e)?;
    let need_est = matches!(stage, Stage::Estimate | Stage::Compare | Stage::Run);
    let need_pred = matches!(stage, Stage::Predict | Stage::Compare | Stage::Run);
    let mut ests = Vec::new();
    if need_est {
        let mut body = String::from(montecarlo::CSV_HEADER);
        for c in &cs {
            let r = estimate_case(cfg, e, &st, &model, c)?;
            body.push_str(&montecarlo::csv_row(&r, c.s, c.n, c.l, &c.x_id));
            ests.push(r);
        }
        write(&dir, "estimates.csv", &body)?;
    }
    let mut preds = Vec::new();
    if need_pred {
        let mut body = String::from(predict::CSV_HEADER);
        for c in &cs {
            let p = predict_case(&st, &model, c)?;
            body.push_str(&p.csv(&c.x_id));
            preds.push(p);
        }
        write(&dir, "predictions.csv", &body)?;
    }
    if !(need_est && need_pred) {
        return Ok(vec![]);
    }
    let rows: Vec<ComparisonRow> =
        cs.into_iter().zip(ests).zip(preds).map(|((c, e), p)| ComparisonRow::new(c, e, p)).collect();
    let mut body = String::from(COMPARISON_HEADER);
    rows.iter().for_each(|r| body.push_str(&comparison_line(r)));
    write(&dir, "comparison.csv", &body)?;
    write_plotdata(&dir, &rows)?;
    if stage != Stage::Run {
        return Ok(vec![]);
    }
    let outcomes = evaluate_checks(&cfg.checks, &rows);
    write(&dir, "checks.json", &(serde_json::to_string_pretty(&outcomes)? + "\n"))?;
    Ok(outcomes)
}

/// All comparison rows of a config, computed in memory.
pub fn comparison_rows(loaded: &LoadedConfig) -> Result<Vec<ComparisonRow>> {
    let cfg = &loaded.config;
    let e = &loaded.ensemble;
    let st = spectral_stage(cfg, e)?;
    let model = cumulant_stage(cfg, &st)?;
    cases(cfg, e)?
        .into_iter()
        .map(|c| {
            let est = estimate_case(cfg, e, &st, &model, &c)?;
            let pred = predict_case(&st, &model, &c)?;
            Ok(ComparisonRow::new(c, est, pred))
        })
        .collect()
}

fn write_plotdata(dir: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    for r in rows {
        let body = files
            .entry(r.case.target.id())
            .or_insert_with(|| String::from("s,l_sign,x_id,n,ratio,ratio_lo,ratio_hi\n"));
        body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt_f64(r.case.s),
            fmt_f64(r.case.l_sign),
            r.case.x_id,
            r.case.n,
            fmt_f64(r.ratio),
            fmt_f64(r.ratio_ci.0),
            fmt_f64(r.ratio_ci.1)
        ));
    }
    for (t, body) in files {
        write(dir, &format!("plotdata/ratio_vs_n_{t}.csv"), &body)?;
    }
    Ok(())
}
