//! Run-directory helpers shared by the CLI subcommands and the canonical
//! experiment: dataset loading, splits, trial lists, evaluation and artifact
//! writing.
//!
//! Layout under a run directory:
//!
//! ```text
//! data/         dataset.csv, trials_eval.txt, trials_calibration.txt
//! checkpoints/  <name>.ckpt, <name>.epoch<e>.ckpt
//! metrics/      <name>.jsonl (per epoch), eval.jsonl (report records)
//! attributions/ <model>.csv, complementarity.json
//! report.txt, report.json
//! ```

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alliance::{EpochMetrics, EvalSet};
use crate::checkpoint::Container;
use crate::config::ExperimentConfig;
use crate::data::{gen_complementary_classes, gen_trial_list, read_dataset, split, Dataset, GenerationReport, Splits, TrialList};
use crate::error::{Error, Result};
use crate::fusion::{output_fuse_logreg, output_fuse_weighted, FusionBundle, FusionHead, LateFusion};
use crate::metrics::{eer, top1_accuracy, trial_scores};
use crate::nn::{Head, Mlp};
use crate::rng::subseed;

/// One cell of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    /// `classification` (metric `accuracy`) or `verification` (metric `eer`).
    pub track: String,
    pub metric: String,
    pub regime: String,
    pub fusion: String,
    pub members: String,
    pub value: f64,
}

pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunContext {
    pub fn new(cfg: ExperimentConfig, seed: u64, out: PathBuf) -> Self {
        RunContext { cfg, seed, out }
    }

    /// Relative paths are taken relative to the run directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn metrics_path(&self, name: &str) -> PathBuf {
        self.out.join("metrics").join(format!("{name}.jsonl"))
    }

    pub fn dataset(&self) -> Result<(Dataset, Option<GenerationReport>)> {
        match (&self.cfg.data.generate, &self.cfg.data.path) {
            (Some(g), None) => {
                let (data, report) = gen_complementary_classes(&g.to_spec(self.seed))?;
                Ok((data, Some(report)))
            }
            (None, Some(p)) => Ok((read_dataset(&self.resolve(p))?, None)),
            _ => Err(Error::config("[data] needs exactly one of `generate` or `path`")),
        }
    }

    pub fn splits(&self, data: &Dataset) -> Splits {
        split(data.len(), self.seed)
    }

    /// Evaluation and calibration trial lists; ids are positions within the
    /// respective split.
    pub fn trials(&self, data: &Dataset, splits: &Splits) -> Result<(TrialList, TrialList)> {
        let t = &self.cfg.trials;
        let eval = gen_trial_list(
            &data.labels_of(&splits.eval),
            t.eval_genuine_per_class,
            t.eval_impostor_total,
            subseed(self.seed, "trials.eval"),
        )?;
        let calibration = gen_trial_list(
            &data.labels_of(&splits.calibration),
            t.calibration_genuine_per_class,
            t.calibration_impostor_total,
            subseed(self.seed, "trials.calibration"),
        )?;
        Ok((eval, calibration))
    }

    /// Held-out evaluation set matching the model head.
    pub fn eval_set(&self, head: &Head, data: &Dataset, splits: &Splits) -> Result<EvalSet> {
        let trials = match head {
            Head::Classifier { .. } => None,
            Head::Embedding { .. } => Some(self.trials(data, splits)?.0),
        };
        Ok(EvalSet {
            rows: splits.eval.clone(),
            trials,
        })
    }

    pub fn load_members(&self, paths: &[PathBuf]) -> Result<Vec<Mlp>> {
        paths
            .iter()
            .map(|p| crate::checkpoint::load_model(&self.resolve(p)))
            .collect()
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                detail: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    write_jsonl(path, metrics)
}

/// Embeddings (unit rows) of `rows`.
fn embeddings(model: &Mlp, data: &Dataset, rows: &[usize]) -> Result<crate::autodiff::Tensor> {
    Ok(model.predict(&data.batch(rows))?.task_out)
}

/// Per-trial member cosine scores, one row per trial.
pub fn member_trial_scores(members: &[Mlp], data: &Dataset, rows: &[usize], trials: &TrialList) -> Result<Vec<Vec<f64>>> {
    let per_member = members
        .iter()
        .map(|m| trial_scores(&embeddings(m, data, rows)?, trials))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..trials.len()).map(|i| per_member.iter().map(|s| s[i]).collect()).collect())
}

/// Accuracy (classifiers) or EER (embedding models) of a single model on the
/// evaluation split.
pub fn evaluate_model(model: &Mlp, data: &Dataset, splits: &Splits, eval_trials: Option<&TrialList>) -> Result<(String, f64)> {
    match model.spec().head {
        Head::Classifier { .. } => {
            let logits = model.predict(&data.batch(&splits.eval))?.task_out;
            Ok(("accuracy".into(), top1_accuracy(&logits, &data.labels_of(&splits.eval))?))
        }
        Head::Embedding { .. } => {
            let trials = eval_trials.ok_or_else(|| Error::contract("verification needs trials"))?;
            let scores = trial_scores(&embeddings(model, data, &splits.eval)?, trials)?;
            Ok(("eer".into(), eer(&scores, &trials.genuine_mask())?.eer))
        }
    }
}

/// Metric of a fusion bundle on the evaluation split.
pub fn evaluate_fusion(
    bundle: &FusionBundle,
    members: &[Mlp],
    data: &Dataset,
    splits: &Splits,
    eval_trials: Option<&TrialList>,
) -> Result<(String, f64)> {
    match &bundle.head {
        FusionHead::Late(head) => {
            let late = LateFusion { head: head.clone() };
            let out = late.predict(members, data, &splits.eval)?;
            match head.spec().head {
                Head::Classifier { .. } => Ok(("accuracy".into(), top1_accuracy(&out, &data.labels_of(&splits.eval))?)),
                Head::Embedding { .. } => {
                    let trials = eval_trials.ok_or_else(|| Error::contract("verification needs trials"))?;
                    let scores = trial_scores(&out, trials)?;
                    Ok(("eer".into(), eer(&scores, &trials.genuine_mask())?.eer))
                }
            }
        }
        FusionHead::OutputWeighted(w) => {
            let batch = data.batch(&splits.eval);
            let logits = members
                .iter()
                .map(|m| m.predict(&batch).map(|o| o.task_out))
                .collect::<Result<Vec<_>>>()?;
            let fused = output_fuse_weighted(&logits, w)?;
            Ok(("accuracy".into(), top1_accuracy(&fused, &data.labels_of(&splits.eval))?))
        }
        FusionHead::OutputLogreg(lr) => {
            let trials = eval_trials.ok_or_else(|| Error::contract("verification needs trials"))?;
            let scores = member_trial_scores(members, data, &splits.eval, trials)?;
            let fused = output_fuse_logreg(lr, &scores)?;
            Ok(("eer".into(), eer(&fused, &trials.genuine_mask())?.eer))
        }
    }
}

/// Load a model or fusion checkpoint and evaluate it.
pub fn evaluate_checkpoint(ctx: &RunContext, path: &Path, data: &Dataset, splits: &Splits) -> Result<(String, f64, Vec<String>)> {
    let container = Container::load(&ctx.resolve(path))?;
    if container.fusion.is_some() {
        let bundle = FusionBundle::from_container(&container)?;
        let paths: Vec<PathBuf> = bundle.members.iter().map(PathBuf::from).collect();
        let members = ctx.load_members(&paths)?;
        let trials = needs_trials(members.first().map(|m| &m.spec().head))
            .then(|| ctx.trials(data, splits))
            .transpose()?;
        let (metric, value) = evaluate_fusion(&bundle, &members, data, splits, trials.as_ref().map(|t| &t.0))?;
        Ok((metric, value, bundle.members.clone()))
    } else {
        let model = container.to_model()?;
        let trials = needs_trials(Some(&model.spec().head))
            .then(|| ctx.trials(data, splits))
            .transpose()?;
        let (metric, value) = evaluate_model(&model, data, splits, trials.as_ref().map(|t| &t.0))?;
        Ok((metric, value, vec![path.display().to_string()]))
    }
}

fn needs_trials(head: Option<&Head>) -> bool {
    matches!(head, Some(Head::Embedding { .. }))
}
