//! The canonical per-seed experiment: plain and alliance members, late and
//! output fusion, attribution complementarity and the verification track.
//!
//! Members within a seed:
//!
//! - `A`: plain model, seed `member_seed(s, "A")`
//! - plain `B`: plain model, seed `member_seed(s, "B")`
//! - alliance `B`: same seed as plain `B`, trained to avoid `A`
//!
//! The verification track repeats this with embedding heads (`A_e`, `B_e`).

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::alliance::{train_alliance, train_plain, EvalSet, TrainRun};
use crate::checkpoint::save_model;
use crate::config::{member_seed, ExperimentConfig, HeadKind};
use crate::data::{write_dataset, Dataset, Splits};
use crate::error::{Error, Result};
use crate::fusion::{fit_logreg, fit_output_weights, train_late_fusion, FusionBundle, FusionHead};
use crate::metrics::{attribute_rows, complementarity_score, write_attributions, AttributionMap, Complementarity};
use crate::nn::Mlp;
use crate::pipeline::{evaluate_fusion, evaluate_model, member_trial_scores, write_jsonl, write_metrics, EvalRecord, RunContext};
use crate::rng::subseed;

/// Headline numbers of one seed. Accuracies are fractions in `[0, 1]`.
#[derive(Clone, Debug, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub acc_a: f64,
    pub acc_plain_b: f64,
    pub acc_ally_b: f64,
    pub lf_a: f64,
    pub lf_aa: f64,
    pub lf_plain_ab: f64,
    pub lf_ally_ab: f64,
    pub of_plain_ab: f64,
    pub of_ally_ab: f64,
    pub comp_plain: Complementarity,
    pub comp_ally: Complementarity,
    pub verification: Option<VerificationOutcome>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerificationOutcome {
    pub eer_a: f64,
    pub eer_plain_b: f64,
    pub eer_ally_b: f64,
    pub eer_of_plain_ab: f64,
    pub eer_of_ally_ab: f64,
}

fn record(track: &str, regime: &str, fusion: &str, members: &str, value: f64) -> EvalRecord {
    EvalRecord {
        track: track.into(),
        metric: if track == "verification" { "eer" } else { "accuracy" }.into(),
        regime: regime.into(),
        fusion: fusion.into(),
        members: members.into(),
        value,
    }
}

struct Members {
    a: TrainRun,
    plain_b: TrainRun,
    ally_b: TrainRun,
}

fn train_members(ctx: &RunContext, cfg: &ExperimentConfig, data: &Dataset, splits: &Splits, suffix: &str) -> Result<Members> {
    let spec = cfg.model.to_spec(data.dim, data.num_classes)?;
    let eval = ctx.eval_set(&spec.head, data, splits)?;
    let a_seed = member_seed(ctx.seed, &format!("A{suffix}"));
    let b_seed = member_seed(ctx.seed, &format!("B{suffix}"));
    let snaps = &cfg.snapshot_epochs;
    let a = train_plain(&spec, data, &splits.train, &eval, &cfg.train, a_seed, snaps)?;
    let plain_b = train_plain(&spec, data, &splits.train, &eval, &cfg.train, b_seed, snaps)?;
    let ally_b = train_alliance(
        &spec,
        data,
        &splits.train,
        &eval,
        &cfg.train,
        &cfg.acorl.to_config(),
        std::slice::from_ref(&a.model),
        b_seed,
        snaps,
    )?;
    Ok(Members { a, plain_b, ally_b })
}

fn save_run(ctx: &RunContext, name: &str, run: &TrainRun) -> Result<()> {
    save_model(&run.model, &ctx.checkpoint_path(name))?;
    for (e, m) in &run.snapshots {
        save_model(m, &ctx.checkpoint_path(&format!("{name}.epoch{e}")))?;
    }
    write_metrics(&ctx.metrics_path(name), &run.metrics)
}

fn late(
    ctx: &RunContext,
    members: &[Mlp],
    data: &Dataset,
    splits: &Splits,
    name: &str,
    member_names: &[&str],
) -> Result<f64> {
    let eval = EvalSet {
        rows: splits.eval.clone(),
        trials: None,
    };
    let (fusion, run) = train_late_fusion(members, data, &splits.train, &eval, &ctx.cfg.fusion.late, subseed(ctx.seed, "fusion.late"))?;
    let bundle = FusionBundle {
        members: member_names.iter().map(|m| format!("checkpoints/{m}.ckpt")).collect(),
        head: FusionHead::Late(fusion.head),
    };
    bundle.to_container().save(&ctx.checkpoint_path(name))?;
    write_metrics(&ctx.metrics_path(name), &run.metrics)?;
    Ok(evaluate_fusion(&bundle, members, data, splits, None)?.1)
}

fn output_weighted(ctx: &RunContext, members: &[Mlp], data: &Dataset, splits: &Splits, name: &str, member_names: &[&str]) -> Result<f64> {
    let batch = data.batch(&splits.calibration);
    let logits = members
        .iter()
        .map(|m| m.predict(&batch).map(|o| o.task_out))
        .collect::<Result<Vec<_>>>()?;
    let (w, _) = fit_output_weights(&logits, &data.labels_of(&splits.calibration))?;
    let bundle = FusionBundle {
        members: member_names.iter().map(|m| format!("checkpoints/{m}.ckpt")).collect(),
        head: FusionHead::OutputWeighted(w),
    };
    bundle.to_container().save(&ctx.checkpoint_path(name))?;
    Ok(evaluate_fusion(&bundle, members, data, splits, None)?.1)
}

fn attributions(ctx: &RunContext, model: &Mlp, id: &str, data: &Dataset, splits: &Splits) -> Result<Vec<AttributionMap>> {
    let n = ctx.cfg.attribute.samples.min(splits.eval.len());
    let baseline = match ctx.cfg.attribute.baseline {
        crate::config::BaselineKind::Mean => data.feature_mean(&splits.train),
        crate::config::BaselineKind::Zero => vec![0.0; data.dim],
    };
    let maps = attribute_rows(model, id, data, &splits.eval[..n], &baseline, ctx.cfg.attribute.steps, None)?;
    write_attributions(&ctx.out.join("attributions").join(format!("{id}.csv")), &maps)?;
    Ok(maps)
}

fn verification_track(ctx: &RunContext, data: &Dataset, splits: &Splits, records: &mut Vec<EvalRecord>) -> Result<VerificationOutcome> {
    let mut cfg = ctx.cfg.clone();
    cfg.model.head = HeadKind::Embedding;
    let m = train_members(ctx, &cfg, data, splits, "_e")?;
    save_run(ctx, "A_e", &m.a)?;
    save_run(ctx, "B_e.plain", &m.plain_b)?;
    save_run(ctx, "B_e.acorl", &m.ally_b)?;
    let (eval_trials, calib_trials) = ctx.trials(data, splits)?;
    eval_trials.write(&ctx.out.join("data").join("trials_eval.txt"))?;
    calib_trials.write(&ctx.out.join("data").join("trials_calibration.txt"))?;
    let single = |model: &Mlp| evaluate_model(model, data, splits, Some(&eval_trials)).map(|r| r.1);
    let eer_a = single(&m.a.model)?;
    let eer_plain_b = single(&m.plain_b.model)?;
    let eer_ally_b = single(&m.ally_b.model)?;
    let fuse = |b: &Mlp, b_name: &str, name: &str| -> Result<f64> {
        let members = [m.a.model.clone(), b.clone()];
        let scores = member_trial_scores(&members, data, &splits.calibration, &calib_trials)?;
        let lr = fit_logreg(&scores, &calib_trials.genuine_mask())?;
        let bundle = FusionBundle {
            members: vec!["checkpoints/A_e.ckpt".into(), format!("checkpoints/{b_name}.ckpt")],
            head: FusionHead::OutputLogreg(lr),
        };
        bundle.to_container().save(&ctx.checkpoint_path(name))?;
        Ok(evaluate_fusion(&bundle, &members, data, splits, Some(&eval_trials))?.1)
    };
    let eer_of_plain_ab = fuse(&m.plain_b.model, "B_e.plain", "fusion_e.output.plain")?;
    let eer_of_ally_ab = fuse(&m.ally_b.model, "B_e.acorl", "fusion_e.output.acorl")?;
    records.extend([
        record("verification", "plain", "single", "A", eer_a),
        record("verification", "plain", "single", "B", eer_plain_b),
        record("verification", "acorl", "single", "A", eer_a),
        record("verification", "acorl", "single", "B", eer_ally_b),
        record("verification", "plain", "output", "A+B", eer_of_plain_ab),
        record("verification", "acorl", "output", "A+B", eer_of_ally_ab),
    ]);
    Ok(VerificationOutcome {
        eer_a,
        eer_plain_b,
        eer_ally_b,
        eer_of_plain_ab,
        eer_of_ally_ab,
    })
}

/// Run the whole experiment for `ctx.seed`, writing every artifact under
/// `ctx.out`. The configured model head must be a classifier; the
/// verification track switches to embedding heads itself.
pub fn run_seed(ctx: &RunContext, verification: bool) -> Result<SeedOutcome> {
    let start = Instant::now();
    if ctx.cfg.model.head != HeadKind::Classifier {
        return Err(Error::config("the canonical experiment expects a classifier head"));
    }
    let (data, _) = ctx.dataset()?;
    write_dataset(&ctx.out.join("data").join("dataset.csv"), &data)?;
    let splits = ctx.splits(&data);
    let m = train_members(ctx, &ctx.cfg, &data, &splits, "")?;
    save_run(ctx, "A", &m.a)?;
    save_run(ctx, "B.plain", &m.plain_b)?;
    save_run(ctx, "B.acorl", &m.ally_b)?;

    let single = |model: &Mlp| evaluate_model(model, &data, &splits, None).map(|r| r.1);
    let acc_a = single(&m.a.model)?;
    let acc_plain_b = single(&m.plain_b.model)?;
    let acc_ally_b = single(&m.ally_b.model)?;

    let a = m.a.model.clone();
    let pb = m.plain_b.model.clone();
    let ab = m.ally_b.model.clone();
    let lf_a = late(ctx, std::slice::from_ref(&a), &data, &splits, "fusion.late.A", &["A"])?;
    let lf_aa = late(ctx, &[a.clone(), a.clone()], &data, &splits, "fusion.late.A+A", &["A", "A"])?;
    let lf_plain_ab = late(ctx, &[a.clone(), pb.clone()], &data, &splits, "fusion.late.plain", &["A", "B.plain"])?;
    let lf_ally_ab = late(ctx, &[a.clone(), ab.clone()], &data, &splits, "fusion.late.acorl", &["A", "B.acorl"])?;
    let of_plain_ab = output_weighted(ctx, &[a.clone(), pb.clone()], &data, &splits, "fusion.output.plain", &["A", "B.plain"])?;
    let of_ally_ab = output_weighted(ctx, &[a.clone(), ab.clone()], &data, &splits, "fusion.output.acorl", &["A", "B.acorl"])?;

    let ia = attributions(ctx, &a, "A", &data, &splits)?;
    let ipb = attributions(ctx, &pb, "B.plain", &data, &splits)?;
    let iab = attributions(ctx, &ab, "B.acorl", &data, &splits)?;
    let comp_plain = complementarity_score(&ia, &ipb)?;
    let comp_ally = complementarity_score(&ia, &iab)?;
    write_jsonl(
        &ctx.out.join("attributions").join("complementarity.json"),
        &[
            serde_json::json!({"pair": "A,B.plain", "result": comp_plain}),
            serde_json::json!({"pair": "A,B.acorl", "result": comp_ally}),
        ],
    )?;

    let mut records = vec![
        record("classification", "plain", "single", "A", acc_a),
        record("classification", "plain", "single", "B", acc_plain_b),
        record("classification", "acorl", "single", "A", acc_a),
        record("classification", "acorl", "single", "B", acc_ally_b),
        record("classification", "plain", "late", "A", lf_a),
        record("classification", "plain", "late", "A+A", lf_aa),
        record("classification", "plain", "late", "A+B", lf_plain_ab),
        record("classification", "acorl", "late", "A+B", lf_ally_ab),
        record("classification", "plain", "output", "A+B", of_plain_ab),
        record("classification", "acorl", "output", "A+B", of_ally_ab),
    ];
    records.push(EvalRecord {
        track: "attribution".into(),
        metric: "complementarity".into(),
        regime: "plain".into(),
        fusion: "none".into(),
        members: "A+B".into(),
        value: comp_plain.score,
    });
    records.push(EvalRecord {
        track: "attribution".into(),
        metric: "complementarity".into(),
        regime: "acorl".into(),
        fusion: "none".into(),
        members: "A+B".into(),
        value: comp_ally.score,
    });

    let verification = if verification {
        Some(verification_track(ctx, &data, &splits, &mut records)?)
    } else {
        None
    };
    write_jsonl(&ctx.out.join("metrics").join("eval.jsonl"), &records)?;
    Ok(SeedOutcome {
        seed: ctx.seed,
        acc_a,
        acc_plain_b,
        acc_ally_b,
        lf_a,
        lf_aa,
        lf_plain_ab,
        lf_ally_ab,
        of_plain_ab,
        of_ally_ab,
        comp_plain,
        comp_ally,
        verification,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Convenience wrapper: run the canonical experiment for `seed` into `out`.
pub fn run_canonical(cfg: &ExperimentConfig, seed: u64, out: &Path, verification: bool) -> Result<SeedOutcome> {
    let ctx = RunContext::new(cfg.clone(), seed, out.to_path_buf());
    run_seed(&ctx, verification)
}
