//! Sequence orchestration: run a lifelong training order end to end for the
//! adaptive method (per-domain bank), the distillation baseline, or plain
//! fine-tuning; evaluate every seen domain after each step; and emit curve
//! files, metrics logs, and run manifests.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backbone::{build_and_partition, BackboneGraph, SaPlacement, Stage};
use crate::bank::Bank;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::eval::{
    average_seen, evaluate_domain, evaluate_domain_live, render_curve_png, write_curve_csv,
    write_eval_report, CurvePoint, DomainEval, EvalOptions, Metric,
};
use crate::kd::{train_domain_kd, BaselineState, KdOptions};
use crate::train::{train_domain, EpochStats, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dasa,
    Kd,
    FineTune,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Dasa => "dasa",
            Method::Kd => "kd",
            Method::FineTune => "finetune",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dasa" => Ok(Method::Dasa),
            "kd" => Ok(Method::Kd),
            "finetune" => Ok(Method::FineTune),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

/// Parse a placement string: "all", "none", "stages:2,3,4", or
/// "layers:<conv spec indices>".
pub fn parse_sa_placement(text: &str) -> Result<Option<SaPlacement>> {
    let text = text.trim();
    match text {
        "all" => Ok(Some(SaPlacement::All)),
        "none" => Ok(None),
        _ => {
            if let Some(rest) = text.strip_prefix("stages:") {
                let stages: BTreeSet<Stage> = rest
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?;
                Ok(Some(SaPlacement::Stages(stages)))
            } else if let Some(rest) = text.strip_prefix("layers:") {
                let indices: BTreeSet<usize> = rest
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::InvalidConfig(format!("bad layer index `{s}`")))
                    })
                    .collect::<Result<_>>()?;
                Ok(Some(SaPlacement::ConvSpecIndices(indices)))
            } else {
                Err(Error::InvalidConfig(format!(
                    "unknown placement `{text}` (expected all, none, stages:<...>, layers:<...>)"
                )))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: u32,
    pub trained_dataset: String,
    pub evals: Vec<DomainEval>,
    pub s_map: f64,
    pub s_r1: f64,
    #[serde(skip)]
    pub epochs: Vec<EpochStats>,
}

pub struct SequenceOutcome {
    pub method: Method,
    pub steps: Vec<StepReport>,
    pub curve: Vec<CurvePoint>,
    pub bank: Option<Bank>,
    pub graph: BackboneGraph,
}

impl SequenceOutcome {
    pub fn final_averages(&self) -> (f64, f64) {
        self.steps
            .last()
            .map(|s| (s.s_map, s.s_r1))
            .unwrap_or((0.0, 0.0))
    }

    /// Metric for one dataset after a given step (1-based), if evaluated.
    pub fn eval_after_step(&self, step: u32, dataset: &str) -> Option<&DomainEval> {
        self.steps
            .iter()
            .find(|s| s.step == step)?
            .evals
            .iter()
            .find(|e| e.dataset == dataset)
    }
}

pub fn eval_options_from(cfg: &TrainConfig, metric: Metric) -> EvalOptions {
    EvalOptions {
        metric,
        input_height: cfg.input_height,
        input_width: cfg.input_width,
        ..EvalOptions::default()
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    method: &'a str,
    arch: &'a str,
    seed: u64,
    sequence: Vec<String>,
    completed_steps: u32,
    bank_dir: Option<String>,
    model_file: Option<String>,
    curve_file: String,
    metrics_files: Vec<String>,
    config: &'a TrainConfig,
}

/// Run the full lifelong sequence. With an output directory, artifacts land
/// there after every step so a failed later step preserves a usable partial
/// bank and manifest.
pub fn run_sequence(
    method: Method,
    datasets: &[DatasetSpec],
    cfg: &TrainConfig,
    metric: Metric,
    out_dir: Option<&Path>,
) -> Result<SequenceOutcome> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::InvalidConfig("no datasets in the sequence".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let opts = eval_options_from(cfg, metric);

    let (mut graph, _) = build_and_partition(&cfg.arch, None, cfg.seed)?;
    let mut bank = match method {
        Method::Dasa => {
            if let Some(placement) = parse_sa_placement(&cfg.sa_placement)? {
                graph = graph.insert_sa(&placement, cfg.sa_kernel_size)?;
            }
            Some(Bank::new(graph.arch()))
        }
        _ => None,
    };
    let mut baseline_state =
        BaselineState::new(cfg.exemplar_ids_per_step, cfg.exemplar_images_per_id);
    let kd_opts = KdOptions::kd(cfg);
    let ft_opts = KdOptions::finetune();

    let mut steps: Vec<StepReport> = Vec::new();
    let mut curve: Vec<CurvePoint> = Vec::new();
    let mut metrics_files: Vec<String> = Vec::new();

    for (index, dataset) in datasets.iter().enumerate() {
        let step = index as u32 + 1;
        let is_first = index == 0;
        let epochs = match method {
            Method::Dasa => {
                let bank_ref = bank.as_mut().expect("dasa keeps a bank");
                bank_ref.forward_transfer_init(&mut graph)?;
                let outcome = train_domain(&mut graph, dataset, cfg, is_first)?;
                bank_ref.insert(outcome.snapshot, &dataset.name)?;
                outcome.epochs
            }
            Method::Kd => {
                train_domain_kd(&mut graph, dataset, cfg, is_first, &mut baseline_state, &kd_opts)?
            }
            Method::FineTune => {
                train_domain_kd(&mut graph, dataset, cfg, is_first, &mut baseline_state, &ft_opts)?
            }
        };

        let mut evals = Vec::with_capacity(index + 1);
        for seen in &datasets[..=index] {
            let eval = match (&method, bank.as_ref()) {
                (Method::Dasa, Some(bank_ref)) => {
                    evaluate_domain(&mut graph, bank_ref, seen, &opts, None)?
                }
                _ => evaluate_domain_live(&graph, seen, &opts)?,
            };
            evals.push(eval);
        }
        let (s_map, s_r1) = average_seen(&evals);
        curve.push(CurvePoint {
            step,
            domain_count: step,
            s_map,
            s_r1,
        });
        steps.push(StepReport {
            step,
            trained_dataset: dataset.name.clone(),
            evals,
            s_map,
            s_r1,
            epochs,
        });

        if let Some(dir) = out_dir {
            let report = steps.last().expect("just pushed");
            let metrics_name = format!("metrics_step{step}.jsonl");
            write_metrics_log(&dir.join(&metrics_name), &report.epochs)?;
            metrics_files.push(metrics_name);
            write_eval_report(&dir.join(format!("eval_step{step}.jsonl")), &report.evals)?;
            write_curve_csv(&dir.join("curve.csv"), &curve)?;
            if let Err(err) = render_curve_png(&curve, &dir.join("curve.png")) {
                eprintln!("warning: curve rendering failed: {err}");
            }
            let mut bank_dir = None;
            let mut model_file = None;
            match (&method, bank.as_ref()) {
                (Method::Dasa, Some(bank_ref)) => {
                    let sub = dir.join("bank");
                    bank_ref.save_dir(&sub)?;
                    bank_dir = Some("bank".to_string());
                }
                _ => {
                    let name = "model.dasw".to_string();
                    graph.to_weight_set().save(&dir.join(&name))?;
                    model_file = Some(name);
                }
            }
            let manifest = RunManifest {
                method: method.as_str(),
                arch: &cfg.arch,
                seed: cfg.seed,
                sequence: datasets.iter().map(|d| d.name.clone()).collect(),
                completed_steps: step,
                bank_dir,
                model_file,
                curve_file: "curve.csv".into(),
                metrics_files: metrics_files.clone(),
                config: cfg,
            };
            let path = dir.join("run_manifest.json");
            let text = serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::Other(e.to_string()))?;
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        }
    }

    Ok(SequenceOutcome {
        method,
        steps,
        curve,
        bank,
        graph,
    })
}

/// Line-delimited records of (epoch, lr, loss, accuracy).
pub fn write_metrics_log(path: &Path, epochs: &[EpochStats]) -> Result<()> {
    let mut text = String::new();
    for stats in epochs {
        text.push_str(&serde_json::to_string(stats).map_err(|e| Error::Other(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolve sequence step names against a set of loaded datasets.
pub fn resolve_sequence<'a>(
    order: &crate::data::SequenceOrder,
    datasets: &'a [DatasetSpec],
) -> Result<Vec<&'a DatasetSpec>> {
    order
        .steps
        .iter()
        .map(|step| {
            datasets
                .iter()
                .find(|d| d.name == step.dataset)
                .ok_or_else(|| Error::UnknownOrder(step.dataset.clone()))
        })
        .collect()
}

pub fn to_owned_path(p: &Path) -> PathBuf {
    p.to_path_buf()
}
