//! The four batch subcommands. Each writes its outputs plus `manifest.json`
//! into the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use triview_core::data::EmissionSpec;
use triview_core::decomposition::DecompConfig;
use triview_core::hmm::{hmm_risk, labeled_inner_risk, oracle_unary_term, HmmModel, LocalKind};
use triview_core::learning::{learn_general, learn_logistic, LearnConfig, MomentGradient};
use triview_core::models::ViewLossModel;
use triview_core::risk::{labeled_risk, predictive_entropy, Baselines, RiskEstimate};
use triview_core::sample::{LabeledData, ViewData};

use crate::config::{
    retrain, train_logistic, DatasetEntry, EstimateRiskConfig, GenDataConfig, Generator, HmmRunConfig,
    LearnRunConfig, Method, ModelSpec, Source, Variant, VALIDATION_SEED_OFFSET,
};
use crate::error::{Error, Result};
use crate::format::{self, Dataset, EmissionKind, SequenceFile};
use crate::parallel::par_estimate_risk;

pub const TOOL: &str = "triview";

/// Written next to every run's outputs; `--config` accepts it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

/// Outcome of a command: written files and failed jobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub outputs: Vec<String>,
    pub jobs: usize,
    /// Message and numerical flag of each failed job.
    pub failures: Vec<(String, bool)>,
}

impl RunSummary {
    /// `Ok` when every job succeeded.
    pub fn into_result(self) -> Result<Vec<String>> {
        match self.failures.first() {
            None => Ok(self.outputs),
            Some((first, _)) => Err(Error::Jobs {
                failed: self.failures.len(),
                total: self.jobs,
                numerical: self.failures.iter().any(|(_, n)| *n),
                first: first.clone(),
            }),
        }
    }
}

/// Floats with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Shift values in file names: `0`, `2.5`, `10`.
fn shift_tag(a: f64) -> String {
    format!("{a}")
}

fn describe(e: &Error) -> (String, bool) {
    let numerical = matches!(e, Error::Core(c) if c.is_numerical());
    (e.to_string(), numerical)
}

pub(crate) fn write_manifest<T: Serialize>(out: &Path, command: &str, config: &T, outputs: &[String]) -> Result<()> {
    let manifest = Manifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config: serde_json::to_value(config)?,
        outputs: outputs.to_vec(),
    };
    format::write_json(&out.join("manifest.json"), &manifest)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn gen_data(config: &GenDataConfig, out: &Path) -> Result<RunSummary> {
    create_dir(out)?;
    let generator = Generator::new(&config.source, config.convention)?;
    let outputs: Vec<String> = match &config.source {
        Source::Hmm(spec) => {
            let kind = match spec.emission {
                EmissionSpec::Categorical { .. } => EmissionKind::Categorical,
                EmissionSpec::Gaussian { .. } => EmissionKind::Gaussian,
            };
            config
                .seeds
                .par_iter()
                .map(|&seed| {
                    let seqs = generator.sequences(config.m, seed)?;
                    let name = format!("sequences_s{seed}.tvhm");
                    let file = SequenceFile {
                        k: spec.k,
                        emission: kind,
                        data: seqs.data,
                        states: config.labels.then_some(seqs.states),
                    };
                    format::write_sequences(&out.join(&name), &file)?;
                    Ok(name)
                })
                .collect::<Result<_>>()?
        }
        _ => {
            let grid: Vec<(f64, u64)> = config
                .shifts
                .iter()
                .flat_map(|&a| config.seeds.iter().map(move |&s| (a, s)))
                .collect();
            grid.par_iter()
                .map(|&(a, seed)| {
                    let data = generator.views(config.m, a, seed)?;
                    let mut ds = Dataset::from_labeled(&data);
                    if !config.labels {
                        ds = ds.without_labels();
                    }
                    let name = format!("data_a{}_s{seed}.tvds", shift_tag(a));
                    format::write_dataset(&out.join(&name), &ds)?;
                    Ok(name)
                })
                .collect::<Result<_>>()?
        }
    };
    write_manifest(out, "gen-data", config, &outputs)?;
    let jobs = outputs.len();
    Ok(RunSummary {
        outputs,
        jobs,
        failures: Vec::new(),
    })
}

/// One `(a, seed)` cell of an experiment grid.
#[derive(Debug, Clone)]
struct Job {
    a: f64,
    seed: u64,
    file: Option<PathBuf>,
}

fn jobs(datasets: &[DatasetEntry], shifts: &[f64], seeds: &[u64]) -> Vec<Job> {
    let mut jobs: Vec<Job> = if datasets.is_empty() {
        shifts
            .iter()
            .flat_map(|&a| seeds.iter().map(move |&seed| Job { a, seed, file: None }))
            .collect()
    } else {
        datasets
            .iter()
            .map(|d| Job {
                a: d.a,
                seed: d.seed,
                file: Some(d.path.clone()),
            })
            .collect()
    };
    jobs.sort_by(|x, y| x.a.total_cmp(&y.a).then(x.seed.cmp(&y.seed)));
    jobs
}

/// Unlabeled samples of a job, plus the labeled view when labels exist.
fn load(job: &Job, generator: Option<&Generator>, m: usize) -> Result<(ViewData, Option<LabeledData>)> {
    match (&job.file, generator) {
        (Some(path), _) => {
            let ds = format::read_dataset(path)?;
            let labeled = ds.labeled()?;
            Ok((ds.data, labeled))
        }
        (None, Some(g)) => {
            let data = g.views(m, job.a, job.seed)?;
            Ok((data.unlabeled().clone(), Some(data)))
        }
        (None, None) => Err(Error::Config("job without data".into())),
    }
}

fn resolve_model(spec: &ModelSpec, generator: Option<&Generator>, out: &Path, outputs: &mut Vec<String>) -> Result<ViewLossModel> {
    match spec {
        ModelSpec::Path(p) => format::read_model(p),
        ModelSpec::Train(t) => {
            let g = generator.ok_or_else(|| Error::Config("training a seed model needs a source".into()))?;
            let data = g.views(t.m, t.shift, t.seed)?;
            let model = train_logistic(&data, t.rho, t.tol, t.max_iter)?;
            format::write_model(&out.join("seed_model.json"), &model)?;
            outputs.push("seed_model.json".into());
            Ok(model)
        }
    }
}

fn pool_map<T: Send, R: Send>(items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    items.into_par_iter().map(f).collect()
}

pub const RISK_COLUMNS: [&str; 11] = [
    "a",
    "seed",
    "variant",
    "R_hat",
    "R_labeled_oracle",
    "validation_baseline",
    "entropy_baseline",
    "lambda",
    "pi_min",
    "residual",
    "status",
];

#[derive(Serialize)]
struct RiskReport {
    a: f64,
    seed: u64,
    variant: Variant,
    report: RiskEstimate,
}

pub fn estimate_risk(config: &EstimateRiskConfig, out: &Path) -> Result<RunSummary> {
    create_dir(out)?;
    let generator = config
        .source
        .as_ref()
        .map(|s| Generator::new(s, config.convention))
        .transpose()?;
    let mut outputs = Vec::new();
    let model = resolve_model(&config.model, generator.as_ref(), out, &mut outputs)?;
    let file_validation = match &config.validation {
        Some(p) => {
            let ds = format::read_dataset(p)?;
            let labeled = ds
                .labeled()?
                .ok_or_else(|| Error::format(p, "validation file has no labels"))?;
            Some(labeled_risk(&labeled, &model)?)
        }
        None => None,
    };

    let grid = jobs(&config.datasets, &config.shifts, &config.seeds);
    let n_jobs = grid.len();
    let results = pool_map(grid, |job| {
        let run = || -> Result<Vec<(Variant, RiskEstimate, Option<f64>)>> {
            let (data, labeled) = load(&job, generator.as_ref(), config.m)?;
            let oracle = labeled.as_ref().map(|l| labeled_risk(l, &model)).transpose()?;
            let validation = match (&generator, file_validation) {
                (_, Some(v)) => Some(v),
                (Some(g), None) => {
                    let val = g.views(config.validation_m, 0.0, job.seed.wrapping_add(VALIDATION_SEED_OFFSET))?;
                    Some(labeled_risk(&val, &model)?)
                }
                (None, None) => None,
            };
            let entropy = predictive_entropy(&data, &model)?;
            config
                .variants
                .iter()
                .map(|&variant| {
                    let decomp = DecompConfig {
                        refine: variant == Variant::Refine,
                        ..config.decomp.clone()
                    };
                    let mut est = par_estimate_risk(&data, &model, &decomp)?;
                    est.baselines = Baselines {
                        validation,
                        entropy: Some(entropy),
                    };
                    Ok((variant, est, oracle))
                })
                .collect()
        };
        (job.clone(), run())
    });

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (job, res) in results {
        match res {
            Ok(list) => {
                for (variant, est, oracle) in list {
                    let diag = est.diagnostics.as_ref();
                    rows.push(vec![
                        fmt_f64(job.a),
                        job.seed.to_string(),
                        variant_name(variant).into(),
                        fmt_f64(est.value),
                        fmt_opt(oracle),
                        fmt_opt(est.baselines.validation),
                        fmt_opt(est.baselines.entropy),
                        fmt_opt(diag.map(|d| d.lambda)),
                        fmt_opt(diag.map(|d| d.pi_min)),
                        fmt_opt(diag.map(|d| d.residual)),
                        "ok".into(),
                    ]);
                    reports.push(RiskReport {
                        a: job.a,
                        seed: job.seed,
                        variant,
                        report: est,
                    });
                }
            }
            Err(e) => {
                let (msg, numerical) = describe(&e);
                for &variant in &config.variants {
                    let mut row = vec![fmt_f64(job.a), job.seed.to_string(), variant_name(variant).into()];
                    row.extend((0..7).map(|_| String::new()));
                    row.push(msg.clone());
                    rows.push(row);
                }
                failures.push((format!("a = {}, seed {}: {msg}", job.a, job.seed), numerical));
            }
        }
    }
    write_csv(&out.join("risk.csv"), &RISK_COLUMNS, &rows)?;
    format::write_json(&out.join("reports.json"), &reports)?;
    outputs.push("risk.csv".into());
    outputs.push("reports.json".into());
    write_manifest(out, "estimate-risk", config, &outputs)?;
    Ok(RunSummary {
        outputs,
        jobs: n_jobs,
        failures,
    })
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Refine => "refine",
        Variant::TensorOnly => "tensor-only",
    }
}

pub const LEARN_COLUMNS: [&str; 8] = [
    "a",
    "seed",
    "risk_seed",
    "risk_learned",
    "risk_oracle",
    "estimated_risk",
    "gap",
    "status",
];

struct LearnRow {
    risk_seed: Option<f64>,
    risk_learned: Option<f64>,
    risk_oracle: Option<f64>,
    estimated: Option<f64>,
    gap: Option<f64>,
    model: ViewLossModel,
    log: Option<Vec<u8>>,
}

fn learn_job(
    config: &LearnRunConfig,
    seed_model: &ViewLossModel,
    data: &ViewData,
    labeled: Option<&LabeledData>,
) -> Result<LearnRow> {
    let learn: &LearnConfig = &config.learn;
    let (model, estimated, gap, log) = if learn.steps == 0 {
        (seed_model.clone(), None, None, None)
    } else {
        match config.method {
            Method::Logistic => {
                let out = learn_logistic(data, seed_model, learn)?;
                let model = seed_model.with_theta(out.solve.theta.clone())?;
                let a_mean = triview_core::risk::mean_base_term(data, &model)?;
                let est = a_mean - model.theta().iter().zip(&out.moments.phi_hat).map(|(t, p)| t * p).sum::<f64>();
                (model, Some(est), out.seed.gap, None)
            }
            Method::General => {
                let mut estimator = MomentGradient::new(data, seed_model, learn)?;
                let mut log = Vec::new();
                let mut last = None;
                let out = learn_general(seed_model.theta(), learn, &mut estimator, |step| {
                    if let Ok(line) = serde_json::to_string(step) {
                        let _ = writeln!(log, "{line}");
                    }
                    if step.estimated_risk.is_some() {
                        last = step.estimated_risk;
                    }
                })?;
                (seed_model.with_theta(out.theta)?, last, None, Some(log))
            }
        }
    };
    let (risk_seed, risk_learned, risk_oracle) = match labeled {
        Some(l) => {
            let oracle = if config.oracle {
                let trained = retrain(l, seed_model, learn.rho, learn.tol, learn.max_iter)?;
                Some(labeled_risk(l, &trained)?)
            } else {
                None
            };
            (Some(labeled_risk(l, seed_model)?), Some(labeled_risk(l, &model)?), oracle)
        }
        None => (None, None, None),
    };
    Ok(LearnRow {
        risk_seed,
        risk_learned,
        risk_oracle,
        estimated,
        gap,
        model,
        log,
    })
}

pub fn learn(config: &LearnRunConfig, out: &Path) -> Result<RunSummary> {
    create_dir(out)?;
    create_dir(&out.join("models"))?;
    let generator = config
        .source
        .as_ref()
        .map(|s| Generator::new(s, config.convention))
        .transpose()?;
    let mut outputs = Vec::new();
    let seed_model = resolve_model(&config.model, generator.as_ref(), out, &mut outputs)?;
    let grid = jobs(&config.datasets, &config.shifts, &config.seeds);
    let n_jobs = grid.len();
    let results = pool_map(grid, |job| {
        let res = load(&job, generator.as_ref(), config.m)
            .and_then(|(data, labeled)| learn_job(config, &seed_model, &data, labeled.as_ref()));
        (job, res)
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (job, res) in results {
        let tag = format!("a{}_s{}", shift_tag(job.a), job.seed);
        match res {
            Ok(r) => {
                let name = format!("models/learned_{tag}.json");
                format::write_model(&out.join(&name), &r.model)?;
                outputs.push(name);
                if let Some(log) = &r.log {
                    let name = format!("steps_{tag}.jsonl");
                    fs::write(out.join(&name), log).map_err(|e| Error::io(out.join(&name), e))?;
                    outputs.push(name);
                }
                rows.push(vec![
                    fmt_f64(job.a),
                    job.seed.to_string(),
                    fmt_opt(r.risk_seed),
                    fmt_opt(r.risk_learned),
                    fmt_opt(r.risk_oracle),
                    fmt_opt(r.estimated),
                    fmt_opt(r.gap),
                    "ok".into(),
                ]);
            }
            Err(e) => {
                let (msg, numerical) = describe(&e);
                let mut row = vec![fmt_f64(job.a), job.seed.to_string()];
                row.extend((0..5).map(|_| String::new()));
                row.push(msg.clone());
                rows.push(row);
                failures.push((format!("a = {}, seed {}: {msg}", job.a, job.seed), numerical));
            }
        }
    }
    write_csv(&out.join("learn.csv"), &LEARN_COLUMNS, &rows)?;
    outputs.push("learn.csv".into());
    write_manifest(out, "learn", config, &outputs)?;
    Ok(RunSummary {
        outputs,
        jobs: n_jobs,
        failures,
    })
}

pub const HMM_COLUMNS: [&str; 8] = ["seed", "kind", "t", "value", "a_mean", "lambda", "oracle", "status"];

pub fn hmm_risk_cmd(config: &HmmRunConfig, out: &Path) -> Result<RunSummary> {
    create_dir(out)?;
    let spec = config.model.as_ref().ok_or_else(|| Error::Config("no model".into()))?;
    let model = HmmModel::from_spec(spec)?;
    let generator = config
        .source
        .as_ref()
        .map(|s| Generator::new(&Source::Hmm(s.clone()), Default::default()))
        .transpose()?;
    let inputs: Vec<(u64, Option<PathBuf>)> = if config.sequences.is_empty() {
        config.seeds.iter().map(|&s| (s, None)).collect()
    } else {
        let mut v: Vec<_> = config.sequences.iter().map(|s| (s.seed, Some(s.path.clone()))).collect();
        v.sort_by_key(|x| x.0);
        v
    };
    let n_jobs = inputs.len();
    let results = pool_map(inputs, |(seed, path)| {
        let run = || -> Result<(triview_core::hmm::HmmRisk, Option<f64>, Vec<Option<f64>>)> {
            let labeled = match (&path, &generator) {
                (Some(p), _) => {
                    let f = format::read_sequences(p)?;
                    if f.k != model.k {
                        return Err(Error::format(p, format!("file has k = {}, model has k = {}", f.k, model.k)));
                    }
                    match f.states {
                        Some(states) => Ok(triview_core::data::LabeledSequences { data: f.data, states }),
                        None => Err(f.data),
                    }
                }
                (None, Some(g)) => Ok(g.sequences(config.m, seed)?),
                (None, None) => return Err(Error::Config("no sequences".into())),
            };
            let seqs = match &labeled {
                Ok(l) => &l.data,
                Err(s) => s,
            };
            let risk = hmm_risk(&model, seqs, &config.risk)?;
            let (total, unary) = match &labeled {
                Ok(l) => {
                    let total = labeled_inner_risk(&model, l)?;
                    let unary = risk
                        .terms
                        .iter()
                        .map(|term| match term.kind {
                            LocalKind::Unary => oracle_unary_term(&model, l, term.t).map(Some),
                            LocalKind::Pair => Ok(None),
                        })
                        .collect::<triview_core::Result<_>>()?;
                    (Some(total), unary)
                }
                Err(_) => (None, vec![None; risk.terms.len()]),
            };
            Ok((risk, total, unary))
        };
        (seed, run())
    });
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (seed, res) in results {
        match res {
            Ok((risk, total, unary)) => {
                for (term, oracle) in risk.terms.iter().zip(&unary) {
                    rows.push(vec![
                        seed.to_string(),
                        match term.kind {
                            LocalKind::Pair => "pair".into(),
                            LocalKind::Unary => "unary".into(),
                        },
                        term.t.to_string(),
                        fmt_f64(term.value),
                        fmt_f64(term.a_mean),
                        fmt_opt(term.lambda),
                        fmt_opt(*oracle),
                        "ok".into(),
                    ]);
                }
                rows.push(vec![
                    seed.to_string(),
                    "total".into(),
                    String::new(),
                    fmt_f64(risk.value),
                    String::new(),
                    String::new(),
                    fmt_opt(total),
                    "ok".into(),
                ]);
                reports.push(serde_json::json!({ "seed": seed, "risk": risk, "oracle": total }));
            }
            Err(e) => {
                let (msg, numerical) = describe(&e);
                rows.push(vec![
                    seed.to_string(),
                    "total".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    msg.clone(),
                ]);
                failures.push((format!("seed {seed}: {msg}"), numerical));
            }
        }
    }
    write_csv(&out.join("hmm_risk.csv"), &HMM_COLUMNS, &rows)?;
    format::write_json(&out.join("hmm_report.json"), &reports)?;
    let outputs = vec!["hmm_risk.csv".to_string(), "hmm_report.json".to_string()];
    write_manifest(out, "hmm-risk", config, &outputs)?;
    Ok(RunSummary {
        outputs,
        jobs: n_jobs,
        failures,
    })
}
