//! Command-line pipeline. Every subcommand reads one TOML config, writes its
//! artifacts under the run directory, logs JSON lines to stderr and prints one
//! JSON summary to stdout.
//!
//! Exit codes: 0 success, 1 a self-check failed, 2 configuration error,
//! 3 data or integrity error, 4 contract violation.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::alliance::{train_alliance, train_plain};
use crate::checkpoint::{load_model, save_model};
use crate::config::{member_seed, BaselineKind, ExperimentConfig, OutputMode};
use crate::data::write_dataset;
use crate::error::{Error, Result};
use crate::experiment::run_seed;
use crate::fusion::{fit_logreg, fit_output_weights, train_late_fusion, FusionBundle, FusionHead};
use crate::metrics::{attribute_rows, complementarity_score, write_attributions};
use crate::nn::{Head, Mlp};
use crate::pipeline::{evaluate_checkpoint, member_trial_scores, write_jsonl, write_metrics, EvalRecord, RunContext};
use crate::report::{build_report, discover_runs};
use crate::rng::subseed;
use crate::Tensor;

#[derive(Debug, Parser)]
#[command(name = "acorl", version, about = "Adversarial complementary representation learning and model fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the config seed (disables the `seeds` list).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seeds processed in parallel when the config lists several.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the dataset and trial lists into `data/`.
    GenData,
    /// Train a plain model.
    Train,
    /// Train an alliance model against the checkpoints in `acorl.avoid`.
    TrainAcorl,
    /// Train a late-fusion head over `fusion.members`.
    FuseLate,
    /// Fit output fusion (weighted sum or logistic regression) over `fusion.members`.
    FuseOutput,
    /// Evaluate the checkpoints listed in `eval.entries` into `metrics/eval.jsonl`.
    Eval,
    /// Integrated-gradients maps for `attribute.checkpoints`.
    Attribute,
    /// Run the autodiff finite-difference suite.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        compositions: usize,
    },
    /// Aggregate run directories into `report.txt` and `report.json`.
    Report {
        /// Run directories, or parents of `seed-*` run directories.
        runs: Vec<PathBuf>,
    },
    /// Run the full canonical experiment (members, fusions, attribution, verification).
    Experiment {
        #[arg(long)]
        skip_verification: bool,
    },
}

/// Structured log line on stderr.
pub fn log(event: &str, fields: Value) {
    let mut line = json!({ "level": "info", "event": event });
    if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    eprintln!("{line}");
}

fn log_error(err: &Error) {
    eprintln!(
        "{}",
        json!({ "level": "error", "event": "error", "exit_code": err.exit_code(), "message": err.to_string() })
    );
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok((code, summary)) => {
            use std::io::Write as _;
            let _ = writeln!(std::io::stdout(), "{summary}");
            code
        }
        Err(e) => {
            log_error(&e);
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(i32, Value)> {
    match &cli.command {
        Command::Gradcheck { compositions } => {
            let seed = match (&cli.seed, &cli.config) {
                (Some(s), _) => *s,
                (None, Some(p)) => ExperimentConfig::load(p)?.seed,
                (None, None) => 0,
            };
            let report = crate::gradcheck::run_suite(seed, *compositions)?;
            let passed = report.passed();
            log("gradcheck", json!({ "max_rel_err": report.max_rel_err, "passed": passed }));
            let summary = json!({
                "command": "gradcheck",
                "passed": passed,
                "tolerance": crate::gradcheck::TOLERANCE,
                "report": report,
            });
            return Ok((if passed { 0 } else { 1 }, summary));
        }
        Command::Report { runs } if !runs.is_empty() => {
            let out = cli.out.clone().unwrap_or_else(|| runs[0].clone());
            return report(runs, &out);
        }
        _ => {}
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config <path> is required for this subcommand"))?;
    let cfg = ExperimentConfig::load(path)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    if let Command::Report { .. } = cli.command {
        let runs = if cfg.report.runs.is_empty() {
            vec![out.clone()]
        } else {
            cfg.report.runs.iter().map(|r| resolve(&out, r)).collect()
        };
        return report(&runs, &out);
    }
    let seeds = match (cli.seed, &cfg.seeds) {
        (Some(s), _) => vec![(s, out.clone())],
        (None, Some(list)) => list.iter().map(|&s| (s, out.join(format!("seed-{s}")))).collect(),
        (None, None) => vec![(cfg.seed, out.clone())],
    };
    let contexts: Vec<RunContext> = seeds
        .into_iter()
        .map(|(s, dir)| RunContext::new(cfg.clone(), s, dir))
        .collect();
    let results = run_parallel(&contexts, cli.jobs.max(1), |ctx| run_one(&cli.command, ctx))?;
    let summary = if results.len() == 1 {
        results.into_iter().next().expect("one result")
    } else {
        json!({ "runs": results })
    };
    Ok((0, summary))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn report(runs: &[PathBuf], out: &Path) -> Result<(i32, Value)> {
    let runs = discover_runs(runs)?;
    let report = build_report(&runs)?;
    report.write(out)?;
    log("report", json!({ "runs": runs.len(), "cells": report.cells.len() }));
    Ok((0, json!({ "command": "report", "runs": runs.len(), "report": report })))
}

/// Run `f` over the contexts on up to `jobs` threads; results keep input order
/// and the first error (in input order) wins.
fn run_parallel<F>(contexts: &[RunContext], jobs: usize, f: F) -> Result<Vec<Value>>
where
    F: Fn(&RunContext) -> Result<Value> + Sync,
{
    if jobs <= 1 || contexts.len() <= 1 {
        return contexts.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<Value>>>> = contexts.iter().map(|_| Default::default()).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(contexts.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= contexts.len() {
                    break;
                }
                let r = f(&contexts[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

fn require_exists(ctx: &RunContext, paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        let full = ctx.resolve(p);
        if !full.exists() {
            return Err(Error::MissingPath(full));
        }
    }
    Ok(())
}

fn run_one(command: &Command, ctx: &RunContext) -> Result<Value> {
    log("start", json!({ "command": command_name(command), "seed": ctx.seed, "out": ctx.out }));
    let summary = match command {
        Command::GenData => gen_data(ctx),
        Command::Train => train(ctx, false),
        Command::TrainAcorl => train(ctx, true),
        Command::FuseLate => fuse_late(ctx),
        Command::FuseOutput => fuse_output(ctx),
        Command::Eval => eval(ctx),
        Command::Attribute => attribute(ctx),
        Command::Experiment { skip_verification } => {
            let outcome = run_seed(ctx, !skip_verification)?;
            Ok(json!({ "command": "experiment", "seed": ctx.seed, "outcome": outcome }))
        }
        Command::Gradcheck { .. } | Command::Report { .. } => unreachable!("handled before seeding"),
    }?;
    log("done", json!({ "command": command_name(command), "seed": ctx.seed }));
    Ok(summary)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Train => "train",
        Command::TrainAcorl => "train-acorl",
        Command::FuseLate => "fuse-late",
        Command::FuseOutput => "fuse-output",
        Command::Eval => "eval",
        Command::Attribute => "attribute",
        Command::Gradcheck { .. } => "gradcheck",
        Command::Report { .. } => "report",
        Command::Experiment { .. } => "experiment",
    }
}

fn gen_data(ctx: &RunContext) -> Result<Value> {
    let (data, report) = ctx.dataset()?;
    let path = ctx.out.join("data").join("dataset.csv");
    write_dataset(&path, &data)?;
    let splits = ctx.splits(&data);
    let (eval, calibration) = ctx.trials(&data, &splits)?;
    eval.write(&ctx.out.join("data").join("trials_eval.txt"))?;
    calibration.write(&ctx.out.join("data").join("trials_calibration.txt"))?;
    Ok(json!({
        "command": "gen-data",
        "seed": ctx.seed,
        "rows": data.len(),
        "dim": data.dim,
        "num_classes": data.num_classes,
        "group_oracle_accuracy": report.map(|r| r.group_oracle_accuracy),
        "eval_trials": eval.len(),
        "calibration_trials": calibration.len(),
    }))
}

fn train(ctx: &RunContext, alliance: bool) -> Result<Value> {
    let cfg = &ctx.cfg;
    if alliance {
        require_exists(ctx, &cfg.acorl.avoid)?;
        if cfg.acorl.avoid.is_empty() {
            return Err(Error::config("train-acorl needs at least one checkpoint in acorl.avoid"));
        }
    }
    let (data, _) = ctx.dataset()?;
    let splits = ctx.splits(&data);
    let spec = cfg.model.to_spec(data.dim, data.num_classes)?;
    let eval = ctx.eval_set(&spec.head, &data, &splits)?;
    let seed = member_seed(ctx.seed, &cfg.name);
    let run = if alliance {
        let frozen = ctx.load_members(&cfg.acorl.avoid)?;
        train_alliance(&spec, &data, &splits.train, &eval, &cfg.train, &cfg.acorl.to_config(), &frozen, seed, &cfg.snapshot_epochs)?
    } else {
        train_plain(&spec, &data, &splits.train, &eval, &cfg.train, seed, &cfg.snapshot_epochs)?
    };
    for m in &run.metrics {
        log("epoch", serde_json::to_value(m).map_err(|e| Error::Data(e.to_string()))?);
    }
    save_model(&run.model, &ctx.checkpoint_path(&cfg.name))?;
    for (e, m) in &run.snapshots {
        save_model(m, &ctx.checkpoint_path(&format!("{}.epoch{e}", cfg.name)))?;
    }
    write_metrics(&ctx.metrics_path(&cfg.name), &run.metrics)?;
    Ok(json!({
        "command": if alliance { "train-acorl" } else { "train" },
        "seed": ctx.seed,
        "checkpoint": ctx.checkpoint_path(&cfg.name),
        "fingerprint": run.model.fingerprint(),
        "final": run.metrics.last(),
    }))
}

fn members(ctx: &RunContext) -> Result<Vec<Mlp>> {
    let paths = &ctx.cfg.fusion.members;
    if paths.is_empty() {
        return Err(Error::config("fusion.members is empty"));
    }
    require_exists(ctx, paths)?;
    ctx.load_members(paths)
}

fn member_names(ctx: &RunContext) -> Vec<String> {
    ctx.cfg.fusion.members.iter().map(|p| p.display().to_string()).collect()
}

fn fuse_late(ctx: &RunContext) -> Result<Value> {
    let members = members(ctx)?;
    let (data, _) = ctx.dataset()?;
    let splits = ctx.splits(&data);
    let eval = ctx.eval_set(&members[0].spec().head, &data, &splits)?;
    let (fusion, run) = train_late_fusion(&members, &data, &splits.train, &eval, &ctx.cfg.fusion.late, subseed(ctx.seed, "fusion.late"))?;
    let name = &ctx.cfg.fusion.name;
    let bundle = FusionBundle {
        members: member_names(ctx),
        head: FusionHead::Late(fusion.head),
    };
    bundle.to_container().save(&ctx.checkpoint_path(name))?;
    write_metrics(&ctx.metrics_path(name), &run.metrics)?;
    Ok(json!({
        "command": "fuse-late",
        "seed": ctx.seed,
        "checkpoint": ctx.checkpoint_path(name),
        "final": run.metrics.last(),
    }))
}

fn fuse_output(ctx: &RunContext) -> Result<Value> {
    let members = members(ctx)?;
    let (data, _) = ctx.dataset()?;
    let splits = ctx.splits(&data);
    let head = members[0].spec().head;
    let mode = ctx.cfg.fusion.output_mode.unwrap_or(match head {
        Head::Classifier { .. } => OutputMode::OutputWeighted,
        Head::Embedding { .. } => OutputMode::OutputLogreg,
    });
    let (head, fit) = match (mode, head) {
        (OutputMode::OutputWeighted, Head::Classifier { .. }) => {
            let batch = data.batch(&splits.calibration);
            let logits = members
                .iter()
                .map(|m| m.predict(&batch).map(|o| o.task_out))
                .collect::<Result<Vec<_>>>()?;
            let (w, acc) = fit_output_weights(&logits, &data.labels_of(&splits.calibration))?;
            (FusionHead::OutputWeighted(w), json!({ "calibration_accuracy": acc }))
        }
        (OutputMode::OutputLogreg, Head::Embedding { .. }) => {
            let (_, calibration) = ctx.trials(&data, &splits)?;
            let scores = member_trial_scores(&members, &data, &splits.calibration, &calibration)?;
            let lr = fit_logreg(&scores, &calibration.genuine_mask())?;
            let fit = json!({ "iterations": lr.iterations, "converged": lr.converged });
            (FusionHead::OutputLogreg(lr), fit)
        }
        (mode, head) => {
            return Err(Error::config(format!("output mode {mode:?} does not apply to {} members", head.name())))
        }
    };
    let name = &ctx.cfg.fusion.name;
    let bundle = FusionBundle {
        members: member_names(ctx),
        head,
    };
    bundle.to_container().save(&ctx.checkpoint_path(name))?;
    Ok(json!({
        "command": "fuse-output",
        "seed": ctx.seed,
        "mode": bundle.head.mode(),
        "checkpoint": ctx.checkpoint_path(name),
        "fit": fit,
    }))
}

fn eval(ctx: &RunContext) -> Result<Value> {
    let entries = &ctx.cfg.eval.entries;
    if entries.is_empty() {
        return Err(Error::config("eval.entries is empty"));
    }
    require_exists(ctx, &entries.iter().map(|e| e.checkpoint.clone()).collect::<Vec<_>>())?;
    let (data, _) = ctx.dataset()?;
    let splits = ctx.splits(&data);
    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        let (metric, value, members) = evaluate_checkpoint(ctx, &e.checkpoint, &data, &splits)?;
        let track = if metric == "eer" { "verification" } else { "classification" };
        records.push(EvalRecord {
            track: track.into(),
            metric,
            regime: e.regime.clone(),
            fusion: e.fusion.clone(),
            members: e.members.clone().unwrap_or_else(|| members.join("+")),
            value,
        });
    }
    write_jsonl(&ctx.out.join("metrics").join("eval.jsonl"), &records)?;
    Ok(json!({ "command": "eval", "seed": ctx.seed, "records": records }))
}

/// Per-row class prototype embeddings: the mean training embedding of each
/// row's class, used as the cosine reference for embedding models.
fn prototypes(model: &Mlp, data: &crate::data::Dataset, train_rows: &[usize]) -> Result<Tensor> {
    let emb = model.predict(&data.batch(train_rows))?.task_out;
    let d = emb.cols();
    let mut sums = vec![vec![0.0; d]; data.num_classes];
    for (i, &r) in train_rows.iter().enumerate() {
        for (s, v) in sums[data.labels[r]].iter_mut().zip(emb.row(i)) {
            *s += v;
        }
    }
    let values = (0..data.len()).flat_map(|r| sums[data.labels[r]].clone()).collect();
    Tensor::matrix(data.len(), d, values)
}

fn attribute(ctx: &RunContext) -> Result<Value> {
    let a = &ctx.cfg.attribute;
    if a.checkpoints.is_empty() {
        return Err(Error::config("attribute.checkpoints is empty"));
    }
    require_exists(ctx, &a.checkpoints)?;
    let (data, _) = ctx.dataset()?;
    let splits = ctx.splits(&data);
    let baseline = match a.baseline {
        BaselineKind::Mean => data.feature_mean(&splits.train),
        BaselineKind::Zero => vec![0.0; data.dim],
    };
    let rows = &splits.eval[..a.samples.min(splits.eval.len())];
    let mut all = Vec::new();
    let mut outputs = Vec::new();
    for path in &a.checkpoints {
        let model = load_model(&ctx.resolve(path))?;
        let id = path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
        let refs = match model.spec().head {
            Head::Embedding { .. } => Some(prototypes(&model, &data, &splits.train)?),
            Head::Classifier { .. } => None,
        };
        let mut maps = attribute_rows(&model, &id, &data, rows, &baseline, a.steps, refs.as_ref())?;
        if a.baseline == BaselineKind::Zero {
            for m in &mut maps {
                m.baseline_id = "zero".into();
            }
        }
        let file = ctx.out.join("attributions").join(format!("{id}.csv"));
        write_attributions(&file, &maps)?;
        let max_gap = maps.iter().map(|m| m.completeness_gap).fold(0.0, f64::max);
        outputs.push(json!({ "model": id, "file": file, "max_completeness_gap": max_gap }));
        all.push((id, maps));
    }
    let mut pairs = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let c = complementarity_score(&all[i].1, &all[j].1)?;
            pairs.push(json!({ "pair": format!("{},{}", all[i].0, all[j].0), "result": c }));
        }
    }
    if !pairs.is_empty() {
        write_jsonl(&ctx.out.join("attributions").join("complementarity.json"), &pairs)?;
    }
    Ok(json!({ "command": "attribute", "seed": ctx.seed, "models": outputs, "complementarity": pairs }))
}
