use crate::config::{RunConfig, Variant};
use crate::manifest::Manifest;
use anyhow::{bail, Context};
use m2m::controller::write_trace_csv;
use m2m::datagen::{
    generate_poisson_dataset, load_dataset, ns_generate, save_dataset, DatasetKind, NsSource, SampleSet,
};
use m2m::evalbench::{mae, pareto_report, relative_l2, rmse, time_forward, BenchRecord, ParetoReport};
use m2m::experts::ExpertSpec;
use m2m::router::{PriorSpec, Strategy};
use m2m::training::{Model, ModelConfig, RunLog, TrainConfig, Trainer};
use m2m::M2mError;
use serde_json::json;
use std::path::{Path, PathBuf};

pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";
pub const ROUTER_SNAPSHOTS: &str = "router_snapshots.json";
pub const CONTROLLER_TRACE: &str = "controller_trace.csv";
pub const PARETO_CSV: &str = "pareto_report.csv";
pub const PARETO_JSON: &str = "pareto_report.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";

/// Marks errors caused by the command's configuration rather than its data.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn generate(cfg: &RunConfig, device: &str) -> anyhow::Result<PathBuf> {
    let dir = &cfg.data.path;
    let (train, test, extra) = match cfg.data.kind {
        DatasetKind::Poisson => {
            let splits = generate_poisson_dataset(&cfg.poisson)?;
            (splits.train, splits.test, serde_json::to_value(&cfg.poisson)?)
        }
        DatasetKind::Ns => {
            let ns = &cfg.ns;
            let all = match ns.source {
                NsSource::Generate => ns_generate(ns, ns.n_samples, ns.seed)?,
                NsSource::Load => {
                    let path = ns.path.as_deref().expect("validated load path");
                    load_dataset(Path::new(path), DatasetKind::Ns)?
                }
            };
            let split = ns.train_split.min(all.len());
            (all.slice(0, split), all.slice(split, all.len()), serde_json::to_value(ns)?)
        }
        DatasetKind::Cylinder => {
            return Err(ConfigError(
                "cylinder data cannot be generated; point data.path at converted train/ and test/ splits".into(),
            )
            .into())
        }
    };
    save_dataset(&dir.join(TRAIN_DIR), &train, cfg.data.kind, extra.clone())?;
    save_dataset(&dir.join(TEST_DIR), &test, cfg.data.kind, extra)?;
    let mut manifest = Manifest::new("generate", device, Some(cfg));
    manifest.details = json!({ "train_samples": train.len(), "test_samples": test.len() });
    manifest.write(dir)?;
    Ok(dir.clone())
}

pub fn load_splits(dir: &Path, kind: DatasetKind) -> anyhow::Result<(SampleSet, Option<SampleSet>)> {
    let train_dir = dir.join(TRAIN_DIR);
    if !train_dir.exists() {
        return Err(M2mError::Missing(format!("{} not found; run `m2m generate` first", train_dir.display())).into());
    }
    let train = load_dataset(&train_dir, kind)?;
    let test_dir = dir.join(TEST_DIR);
    let test = if test_dir.exists() {
        Some(load_dataset(&test_dir, kind)?).filter(|t| !t.is_empty())
    } else {
        None
    };
    Ok((train, test))
}

/// Trains `model` epoch by epoch, rewriting the run log in `out` after every epoch.
pub fn train_model(
    model: Model,
    train: &SampleSet,
    val: Option<&SampleSet>,
    tcfg: &TrainConfig,
    cfg: &RunConfig,
    out: &Path,
) -> anyhow::Result<(Model, RunLog)> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut trainer = Trainer::new(model, train, val, tcfg.clone(), cfg.controller.clone())?;
    while !trainer.is_finished() {
        let result = trainer.run_epoch().map(|e| {
            log::info!(
                "epoch {:>4}  train_rmse {:.4e}  train_rel_l2 {:.4e}  val_rel_l2 {}  lambda {:.3e}",
                e.epoch,
                e.train_rmse,
                e.train_rel_l2,
                e.val_rel_l2.map_or("-".into(), |v| format!("{v:.4e}")),
                e.lambda_used
            )
        });
        write_logs(&trainer, out)?;
        result?;
    }
    let log = trainer.log().clone();
    Ok((trainer.into_model(), log))
}

fn write_logs(trainer: &Trainer<'_>, out: &Path) -> anyhow::Result<()> {
    let log = trainer.log();
    log.write(out)?;
    std::fs::write(out.join(ROUTER_SNAPSHOTS), serde_json::to_string(&log.snapshots())?)?;
    let mut trace = Vec::new();
    write_trace_csv(trainer.controller().trace(), &mut trace)?;
    std::fs::write(out.join(CONTROLLER_TRACE), trace)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, device: &str) -> anyhow::Result<PathBuf> {
    let (train, test) = load_splits(&cfg.data.path, cfg.data.kind)?;
    let out = &cfg.output_dir;
    let mut manifest = Manifest::new("train", device, Some(cfg));
    manifest.status = "running";
    manifest.write(out)?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let params = model.param_count();
    match train_model(model, &train, test.as_ref(), &cfg.train, cfg, out) {
        Ok((model, log)) => {
            model.save(out)?;
            manifest.status = "ok";
            manifest.details = json!({
                "parameter_count": params,
                "epochs": log.epochs.len(),
                "final": log.last(),
            });
            manifest.write(out)?;
            Ok(out.clone())
        }
        Err(e) => {
            manifest.status = "failed";
            manifest.details = json!({ "error": format!("{e:#}") });
            manifest.write(out)?;
            Err(e)
        }
    }
}

pub struct EvalOptions {
    pub warmups: usize,
    pub repeats: usize,
    pub batch: usize,
}

/// Test metrics plus the median forward time of one `batch`-sample pass.
pub fn evaluate(name: &str, model: &Model, set: &SampleSet, opts: &EvalOptions) -> anyhow::Result<BenchRecord> {
    if set.is_empty() {
        return Err(M2mError::Missing("evaluation set is empty".into()).into());
    }
    let pred = model.predict(&set.inputs)?;
    let rel = relative_l2(pred.view(), set.targets.view())?;
    let batch = opts.batch.clamp(1, set.len());
    let x = set.head(batch).inputs;
    let timing = time_forward(|| model.predict(&x).map(drop), opts.warmups, opts.repeats)?;
    Ok(BenchRecord {
        model_name: name.to_string(),
        parameter_count: model.param_count(),
        forward_ms: timing.median_ms,
        rel_l2: rel,
        rmse: rmse(pred.view(), set.targets.view())?,
        mae: mae(pred.view(), set.targets.view())?,
    })
}

pub fn protocol(opts: &EvalOptions, device: &str) -> String {
    format!(
        "forward_ms is the median of {} timed passes after {} warmups on a batch of {} sample(s), device {device}, \
         data loading excluded; errors are per-sample means over the evaluation split",
        opts.repeats.max(1),
        opts.warmups,
        opts.batch
    )
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    kind: DatasetKind,
    opts: &EvalOptions,
    out: Option<&Path>,
    device: &str,
) -> anyhow::Result<BenchRecord> {
    let model = Model::load(checkpoint)?;
    let set = load_dataset(data, kind)?;
    let name = checkpoint
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let record = evaluate(&name, &model, &set, opts)?;
    if let Some(dir) = out {
        let report = pareto_report(std::slice::from_ref(&record), protocol(opts, device))?;
        write_report(&report, dir, EVAL_CSV, EVAL_JSON)?;
        let mut manifest = Manifest::new("eval", device, None);
        manifest.details = json!({
            "checkpoint": checkpoint,
            "data": data,
            "kind": kind,
        });
        manifest.write(dir)?;
    }
    Ok(record)
}

fn write_report(report: &ParetoReport, dir: &Path, csv: &str, json_name: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(csv), report.to_csv())?;
    std::fs::write(dir.join(json_name), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

/// Model and training settings for one row of the sweep.
fn sweep_entries(cfg: &RunConfig) -> Vec<(String, ModelConfig, TrainConfig)> {
    let template = cfg.baseline_template();
    let mut entries = Vec::new();
    for &modes in &cfg.bench.fno_modes {
        let model = ModelConfig {
            experts: vec![ExpertSpec { modes, ..template.clone() }],
            scale: 1,
            prior: PriorSpec::none(),
            ..cfg.model.clone()
        };
        let train = TrainConfig {
            strategy: Strategy::TopK,
            k: 1,
            ..cfg.train.clone()
        };
        entries.push((format!("fno_{modes}"), model, train));
    }
    for Variant { name, strategy, k } in &cfg.bench.variants {
        let train = TrainConfig {
            strategy: *strategy,
            k: *k,
            ..cfg.train.clone()
        };
        entries.push((name.clone(), cfg.model.clone(), train));
    }
    entries
}

pub fn bench(cfg: &RunConfig, device: &str) -> anyhow::Result<ParetoReport> {
    let (train, test) = load_splits(&cfg.data.path, cfg.data.kind)?;
    let test = test.ok_or_else(|| M2mError::Missing("benchmarking needs a non-empty test split".into()))?;
    let entries = sweep_entries(cfg);
    if entries.is_empty() {
        bail!(ConfigError("bench sweep has no entries".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some((dup, _, _)) = entries.iter().find(|(n, _, _)| !seen.insert(n.clone())) {
        bail!(ConfigError(format!("bench entry name {dup} is used twice")));
    }
    let out = &cfg.output_dir;
    let opts = EvalOptions {
        warmups: cfg.bench.warmups,
        repeats: cfg.bench.repeats,
        batch: cfg.bench.batch,
    };
    let mut records = Vec::with_capacity(entries.len());
    for (name, model_cfg, train_cfg) in entries {
        log::info!("bench: training {name}");
        let dir = out.join("models").join(&name);
        let model = Model::new(model_cfg, cfg.seed)?;
        let (model, _) = train_model(model, &train, None, &train_cfg, cfg, &dir)?;
        model.save(&dir)?;
        let record = evaluate(&name, &model, &test, &opts)?;
        log::info!(
            "bench: {name} rel_l2 {:.4e} forward {:.3} ms",
            record.rel_l2,
            record.forward_ms
        );
        records.push(record);
    }
    let report = pareto_report(&records, protocol(&opts, device))?;
    write_report(&report, out, PARETO_CSV, PARETO_JSON)?;
    let mut manifest = Manifest::new("bench", device, Some(cfg));
    manifest.details = json!({ "rows": report.rows.len() });
    manifest.write(out)?;
    Ok(report)
}
