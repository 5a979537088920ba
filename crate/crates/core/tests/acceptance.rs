//! Acceptance suite: one line per criterion, then a summary.
//!
//! Runs as a plain binary (`harness = false`) so the report is always visible:
//!
//! ```text
//! cargo test -p acorl --test acceptance
//! ```
//!
//! Criteria listed in `KNOWN_UNMET` are reported as `FAIL (known)` without
//! failing the process; `ACORL_ACCEPTANCE_STRICT=1` makes every failure fatal.
//! The README explains each known gap.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use acorl::alliance::{train_alliance, train_plain, AcorlConfig, EvalSet};
use acorl::checkpoint::{load_model, save_model};
use acorl::config::{member_seed, ExperimentConfig};
use acorl::data::{read_dataset, write_dataset, Dataset, Trial, TrialList};
use acorl::experiment::{run_canonical, SeedOutcome};
use acorl::losses::{aam_softmax, kl_divergence, AamParams};
use acorl::metrics::{eer, integrated_gradients, Selector};
use acorl::nn::{Mlp, ModelSpec};
use acorl::report::{build_report, mean_stdev};
use acorl::rng::Rng;
use acorl::{Tape, Tensor};

const KNOWN_UNMET: &[usize] = &[6, 7];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

// 1 -------------------------------------------------------------------------

fn autodiff_correctness() -> Outcome {
    let start = Instant::now();
    let report = acorl::gradcheck::run_suite(0, 100).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .primitives
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .unwrap_or_default();
    outcome(
        report.max_rel_err < 1e-6 && secs < 10.0,
        format!(
            "{} primitives + {} compositions, max rel err {:.2e} (worst primitive {worst}), {secs:.2}s",
            report.primitives.len(),
            report.compositions,
            report.max_rel_err
        ),
    )
}

// 2 -------------------------------------------------------------------------

/// Random elementwise chain over a 3×4 tensor; `ops` picks each step.
fn chain(t: &mut Tape, x: &Tensor, ops: &[usize], m: &Tensor) -> Tensor {
    let mut y = x.clone();
    for &op in ops {
        y = match op {
            0 => {
                let s = t.scale(&y, 0.3).unwrap();
                t.exp(&s).unwrap()
            }
            1 => t.mul(&y, m).unwrap(),
            2 => t.softmax_rows(&y).unwrap(),
            3 => t.row_l2_normalize(&y).unwrap(),
            4 => t.relu(&y).unwrap(),
            _ => t.add(&y, m).unwrap(),
        };
    }
    y
}

fn grl_contract() -> Outcome {
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    let mut forward_ok = true;
    for _ in 0..50 {
        let x0 = random(&mut rng, 3, 4);
        let m = random(&mut rng, 3, 4);
        let w = random(&mut rng, 3, 4);
        let before: Vec<usize> = (0..rng.below(4) + 1).map(|_| rng.below(6)).collect();
        let after: Vec<usize> = (0..rng.below(4) + 1).map(|_| rng.below(6)).collect();
        let grad = |lambda: Option<f64>, forward_ok: &mut bool| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.param(&x0);
            let h = chain(&mut t, &x, &before, &m);
            let r = match lambda {
                Some(l) => {
                    let r = t.grad_reverse(&h, l).unwrap();
                    let same = r.data().iter().zip(h.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                    *forward_ok &= same && r.shape() == h.shape();
                    r
                }
                None => h,
            };
            let y = chain(&mut t, &r, &after, &m);
            let p = t.mul(&y, &w).unwrap();
            let loss = t.sum(&p).unwrap();
            t.backward(&loss).unwrap().wrt(&x).unwrap().data().to_vec()
        };
        let plain = grad(None, &mut forward_ok);
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let reversed = grad(Some(lambda), &mut forward_ok);
            for (r, p) in reversed.iter().zip(&plain) {
                worst = worst.max((r - (-lambda * p)).abs());
            }
        }
    }
    outcome(
        forward_ok && worst <= 1e-12,
        format!("50 graphs × λ∈{{0,0.5,1,2}}: forward bitwise identity {forward_ok}, max |g + λ·g₀| = {worst:.1e}"),
    )
}

// 3 -------------------------------------------------------------------------

fn bits(m: &Mlp) -> Vec<u64> {
    m.params().iter().flat_map(|p| p.data().iter().map(|x| x.to_bits())).collect()
}

fn reduction(cli: &Path, work: &Path) -> Outcome {
    // Library level, full f64 state.
    let cfg = ExperimentConfig::canonical();
    let (data, _) = acorl::data::gen_complementary_classes(&cfg.data.generate.as_ref().unwrap().to_spec(0)).unwrap();
    let splits = acorl::data::split(data.len(), 0);
    let spec = cfg.model.to_spec(data.dim, data.num_classes).unwrap();
    let eval = EvalSet::default();
    let snaps = [1, 5];
    let a = train_plain(&spec, &data, &splits.train, &eval, &cfg.train, member_seed(0, "A"), &[]).unwrap();
    let seed = member_seed(0, "B");
    let plain = train_plain(&spec, &data, &splits.train, &eval, &cfg.train, seed, &snaps).unwrap();
    let zero = AcorlConfig {
        lambda: 0.0,
        ..cfg.acorl.to_config()
    };
    let ally = train_alliance(&spec, &data, &splits.train, &eval, &cfg.train, &zero, &[a.model], seed, &snaps).unwrap();
    let mut lib_ok = bits(&plain.model) == bits(&ally.model) && plain.snapshots.len() == 2;
    for ((e1, m1), (e2, m2)) in plain.snapshots.iter().zip(&ally.snapshots) {
        lib_ok &= e1 == e2 && bits(m1) == bits(m2);
    }

    // CLI level, checkpoint files.
    let text = acorl::config::CANONICAL_CONFIG.replace("lambda = 1.0", "lambda = 0.0");
    let cfg_path = work.join("reduction.toml");
    std::fs::write(&cfg_path, text).unwrap();
    let avoid_dir = work.join("reduction-a");
    let plain_dir = work.join("reduction-plain");
    let ally_dir = work.join("reduction-acorl");
    run(cli, &["train", "--seed", "0"], &cfg_path, &avoid_dir);
    let avoid = avoid_dir.join("checkpoints/model.ckpt");
    let with_avoid = std::fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("avoid = []", &format!("avoid = [{:?}]", avoid.display().to_string()));
    let cfg2 = work.join("reduction-avoid.toml");
    std::fs::write(&cfg2, with_avoid).unwrap();
    run(cli, &["train", "--seed", "7"], &cfg2, &plain_dir);
    run(cli, &["train-acorl", "--seed", "7"], &cfg2, &ally_dir);
    let mut cli_ok = true;
    for f in ["model.epoch1.ckpt", "model.epoch5.ckpt", "model.ckpt"] {
        let a = std::fs::read(plain_dir.join("checkpoints").join(f)).unwrap();
        let b = std::fs::read(ally_dir.join("checkpoints").join(f)).unwrap();
        cli_ok &= a == b;
    }
    outcome(
        lib_ok && cli_ok,
        format!("f64 parameters equal at epochs 1, 5, 20: {lib_ok}; CLI checkpoints byte-identical: {cli_ok}"),
    )
}

// 4 -------------------------------------------------------------------------

fn random_simplex(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut v = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| (2.0 * rng.normal()).exp()).collect();
        let s: f64 = raw.iter().sum();
        v.extend(raw.iter().map(|x| x / s));
    }
    Tensor::matrix(rows, cols, v).unwrap()
}

/// Mean cross-entropy of `labels` under softmax of cosine logits, computed
/// directly.
fn cosine_ce_oracle(e: &Tensor, w: &Tensor, labels: &[usize]) -> f64 {
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let er = e.row(i);
        let logits: Vec<f64> = (0..w.rows())
            .map(|j| {
                let wr = w.row(j);
                er.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() / (norm(er) * norm(wr))
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / labels.len() as f64
}

fn loss_identities() -> Outcome {
    let mut rng = Rng::new(4);
    let mut self_kl: f64 = 0.0;
    for _ in 0..100 {
        let cols = rng.below(6) + 2;
        let p = random_simplex(&mut rng, 1, cols);
        let mut t = Tape::new();
        self_kl = self_kl.max(kl_divergence(&mut t, &p, &p).unwrap().item().abs());
    }
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let cols = rng.below(6) + 2;
        let p = random_simplex(&mut rng, 1, cols);
        let q = random_simplex(&mut rng, 1, cols);
        let mut t = Tape::new();
        min_kl = min_kl.min(kl_divergence(&mut t, &p, &q).unwrap().item());
    }
    let mut aam_err: f64 = 0.0;
    for _ in 0..100 {
        let (b, d, c) = (rng.below(5) + 1, rng.below(5) + 2, rng.below(5) + 2);
        let e = random(&mut rng, b, d);
        let w = random(&mut rng, c, d);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let mut t = Tape::new();
        let aam = aam_softmax(&mut t, &e, &w, &labels, AamParams { margin: 0.0, scale: 1.0 }).unwrap();
        aam_err = aam_err.max((aam.item() - cosine_ce_oracle(&e, &w, &labels)).abs());
    }
    outcome(
        self_kl <= 1e-12 && min_kl >= 0.0 && aam_err <= 1e-10,
        format!("max |KL(p‖p)| {self_kl:.1e}; min KL over 1000 pairs {min_kl:.3e}; max |AAM(0,1) − CE| {aam_err:.1e}"),
    )
}

// 5 -------------------------------------------------------------------------

/// Every candidate threshold (unique scores and midpoints), counted from
/// scratch; ties go to the lowest threshold.
fn brute_force_eer(scores: &[f64], genuine: &[bool]) -> (f64, f64) {
    let mut unique = scores.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let mut candidates = unique.clone();
    candidates.extend(unique.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.sort_by(f64::total_cmp);
    let n_gen = genuine.iter().filter(|&&g| g).count() as f64;
    let n_imp = genuine.len() as f64 - n_gen;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for &t in &candidates {
        let fa = scores.iter().zip(genuine).filter(|&(&s, &g)| !g && s >= t).count() as f64;
        let fr = scores.iter().zip(genuine).filter(|&(&s, &g)| g && s < t).count() as f64;
        let (far, frr) = (fa / n_imp, fr / n_gen);
        if (far - frr).abs() < best.0 {
            best = ((far - frr).abs(), (far + frr) / 2.0, t);
        }
    }
    (best.1, best.2)
}

fn eer_oracle() -> Outcome {
    let mut rng = Rng::new(5);
    let mut mismatches = 0;
    let mut not_invariant = 0;
    for i in 0..500 {
        let n = rng.below(11) + 2;
        // Coarse grid on half the instances to force ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| if i % 2 == 0 { rng.below(5) as f64 / 4.0 } else { rng.normal() })
            .collect();
        let mut genuine: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
        genuine[0] = true;
        genuine[1] = false;
        let r = eer(&scores, &genuine).unwrap();
        let (e, t) = brute_force_eer(&scores, &genuine);
        if r.eer != e || r.threshold != t {
            mismatches += 1;
        }
        let transforms: [fn(f64) -> f64; 3] = [f64::tanh, |x| 3.0 * x + 1.0, |x| x * x * x];
        for f in transforms {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            if eer(&mapped, &genuine).unwrap().eer != r.eer {
                not_invariant += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && not_invariant == 0,
        format!("500 instances: {mismatches} oracle mismatches, {not_invariant} transform variations"),
    )
}

// 6 -------------------------------------------------------------------------

fn integrated_gradients_criterion() -> Outcome {
    let mut rng = Rng::new(6);
    let mut linear_err: f64 = 0.0;
    for k in 0..50 {
        let d = rng.below(6) + 1;
        let spec = ModelSpec::classifier(d, vec![], 2);
        let w = random(&mut rng, d, 2);
        let b = Tensor::vector(vec![rng.normal(), rng.normal()]);
        let model = Mlp::from_parts(spec, vec![w.clone(), b]).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let x0: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let steps = [1, 7, 64, 512][k % 4];
        let (ig, _, _) = integrated_gradients(&model, &Selector::ClassLogit(1), &x, &x0, steps).unwrap();
        for i in 0..d {
            linear_err = linear_err.max((ig[i] - w.row(i)[1] * (x[i] - x0[i])).abs());
        }
    }
    // Small ReLU MLPs, inputs and baselines drawn from N(0, I).
    let instances = 100;
    let mut within = 0;
    let mut monotone = 0;
    let mut ratios = Vec::new();
    for k in 0..instances {
        let model = Mlp::init(ModelSpec::classifier(4, vec![8], 3), 600 + k).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let x0: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let gaps: Vec<(f64, f64)> = [8, 64, 512]
            .iter()
            .map(|&s| {
                let (_, gap, delta) = integrated_gradients(&model, &Selector::ClassLogit(0), &x, &x0, s).unwrap();
                (gap, delta)
            })
            .collect();
        let (gap, delta) = gaps[2];
        ratios.push(gap / delta.abs());
        within += usize::from(gap < 1e-3 * delta.abs());
        monotone += usize::from(gaps[1].0 <= gaps[0].0 && gaps[2].0 <= gaps[1].0);
    }
    ratios.sort_by(f64::total_cmp);
    let linear_ok = linear_err <= 1e-12;
    outcome(
        linear_ok && within == instances as usize && monotone == instances as usize,
        format!(
            "linear max err {linear_err:.1e} ({}); [4→8→3] MLPs: gap < 1e-3·|Δf| at S=512 on {within}/{instances} \
             (median ratio {:.2e}), gap non-increasing over S∈{{8,64,512}} on {monotone}/{instances}",
            if linear_ok { "ok" } else { "FAIL" },
            ratios[ratios.len() / 2]
        ),
    )
}

// 7-10 ----------------------------------------------------------------------

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    mean_stdev(&v).0
}

fn trend(outcomes: &[SeedOutcome]) -> Outcome {
    let lf_plain = mean(outcomes.iter().map(|o| o.lf_plain_ab)) * 100.0;
    let lf_ally = mean(outcomes.iter().map(|o| o.lf_ally_ab)) * 100.0;
    let b_plain = mean(outcomes.iter().map(|o| o.acc_plain_b)) * 100.0;
    let b_ally = mean(outcomes.iter().map(|o| o.acc_ally_b)) * 100.0;
    let slowest = outcomes.iter().map(|o| o.seconds).fold(0.0, f64::max);
    let gain = lf_ally - lf_plain;
    outcome(
        gain >= 1.0 && b_ally <= b_plain + 0.5 && slowest < 600.0,
        format!(
            "LF A+B: acorl {lf_ally:.2}% vs plain {lf_plain:.2}% (gain {gain:+.2}, need ≥ +1.00); \
             B: acorl {b_ally:.2}% vs plain {b_plain:.2}%; slowest seed {slowest:.1}s"
        ),
    )
}

fn complementarity(outcomes: &[SeedOutcome]) -> Outcome {
    let plain = mean(outcomes.iter().map(|o| o.comp_plain.score));
    let ally = mean(outcomes.iter().map(|o| o.comp_ally.score));
    outcome(
        ally < plain,
        format!("mean score A/acorl-B {ally:.4} vs A/plain-B {plain:.4} (gap {:.4})", plain - ally),
    )
}

fn verification(outcomes: &[SeedOutcome]) -> Outcome {
    let v: Vec<_> = outcomes.iter().map(|o| o.verification.clone().unwrap()).collect();
    let a = mean(v.iter().map(|x| x.eer_a));
    let b = mean(v.iter().map(|x| x.eer_ally_b));
    let fused = mean(v.iter().map(|x| x.eer_of_ally_ab));
    let plain_b = mean(v.iter().map(|x| x.eer_plain_b));
    let best = a.min(b);
    outcome(
        a <= 0.05 && fused <= best,
        format!(
            "single-model mean EER {:.2}% (B: plain {:.2}%, acorl {:.2}%); LR fusion of allies {:.2}% vs best member {:.2}%",
            a * 100.0,
            plain_b * 100.0,
            b * 100.0,
            fused * 100.0,
            best * 100.0
        ),
    )
}

fn redundancy(outcomes: &[SeedOutcome]) -> Outcome {
    let a = mean(outcomes.iter().map(|o| o.acc_a)) * 100.0;
    let lf_a = mean(outcomes.iter().map(|o| o.lf_a)) * 100.0;
    let lf_aa = mean(outcomes.iter().map(|o| o.lf_aa)) * 100.0;
    outcome(
        lf_aa - a < 0.5,
        format!("LF A+A {lf_aa:.2}% vs A {a:.2}% (diff {:+.2}); LF A alone {lf_a:.2}%", lf_aa - a),
    )
}

// 11 ------------------------------------------------------------------------

fn run(cli: &Path, args: &[&str], config: &Path, out: &Path) {
    let status = Command::new(cli)
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "acorl {args:?} failed with {status}");
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL_CONFIG: &str = r#"
seed = 11
name = "A"
snapshot_epochs = [1]
[data.generate]
num_classes = 4
samples_per_class = 120
noise_dims = 4
groups = [{ dims = 4, separation = 6.0 }, { dims = 4, separation = 4.0 }]
[model]
hidden_dims = [16, 4]
[train]
epochs = 3
batch_size = 32
[acorl]
avoid = ["checkpoints/A.ckpt"]
[fusion]
members = ["checkpoints/A.ckpt", "checkpoints/B.ckpt"]
[fusion.late]
hidden = 16
train = { epochs = 2, batch_size = 32 }
[trials]
eval_genuine_per_class = 20
eval_impostor_total = 100
calibration_genuine_per_class = 5
calibration_impostor_total = 40
[[eval.entries]]
checkpoint = "checkpoints/A.ckpt"
members = "A"
[[eval.entries]]
checkpoint = "checkpoints/fusion.ckpt"
regime = "acorl"
fusion = "late"
members = "A+B"
[attribute]
checkpoints = ["checkpoints/A.ckpt", "checkpoints/B.ckpt"]
samples = 4
steps = 8
"#;

fn pipeline(cli: &Path, work: &Path, out: &Path) {
    let a = work.join("det-a.toml");
    let b = work.join("det-b.toml");
    std::fs::write(&a, SMALL_CONFIG).unwrap();
    std::fs::write(&b, SMALL_CONFIG.replace("name = \"A\"", "name = \"B\"")).unwrap();
    run(cli, &["gen-data"], &a, out);
    run(cli, &["train"], &a, out);
    run(cli, &["train-acorl"], &b, out);
    run(cli, &["fuse-late"], &a, out);
    run(cli, &["eval"], &a, out);
    run(cli, &["attribute"], &a, out);
    run(cli, &["report"], &a, out);
}

fn determinism(cli: &Path, work: &Path) -> Outcome {
    let mut rng = Rng::new(11);
    // Dataset CSV: exact f64 round trip, including awkward values.
    let mut features: Vec<f64> = (0..60).map(|_| rng.normal() * 10f64.powi(rng.below(20) as i32 - 10)).collect();
    features[0] = f64::MIN_POSITIVE / 3.0;
    features[1] = -0.0;
    features[2] = f64::MAX;
    let data = Dataset::new(features, (0..20).map(|i| i % 3).collect(), 3).unwrap();
    let csv = work.join("round.csv");
    write_dataset(&csv, &data).unwrap();
    let back = read_dataset(&csv).unwrap();
    let data_ok = back.labels == data.labels
        && back.features.iter().zip(&data.features).all(|(a, b)| a.to_bits() == b.to_bits());

    // Checkpoint: parameters come back rounded to f32; a second save is byte-identical.
    let model = Mlp::init(ModelSpec::embedding(5, vec![7, 3], 4), 9).unwrap();
    let ckpt = work.join("round.ckpt");
    save_model(&model, &ckpt).unwrap();
    let loaded = load_model(&ckpt).unwrap();
    let rounded = model
        .params()
        .iter()
        .zip(loaded.params())
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| (*x as f32) as f64 == *y));
    let ckpt2 = work.join("round2.ckpt");
    save_model(&loaded, &ckpt2).unwrap();
    let ckpt_ok = rounded && loaded.spec() == model.spec() && std::fs::read(&ckpt).unwrap() == std::fs::read(&ckpt2).unwrap();

    // Trial list.
    let trials = TrialList {
        trials: (0..50)
            .map(|_| Trial {
                genuine: rng.uniform() < 0.5,
                enroll: rng.below(1000),
                test: rng.below(1000),
            })
            .collect(),
    };
    let tpath = work.join("round.trials");
    trials.write(&tpath).unwrap();
    let trials_ok = TrialList::read(&tpath).unwrap() == trials;

    // Full pipeline twice into the same directory.
    let out = work.join("determinism");
    pipeline(cli, work, &out);
    let first = tree(&out);
    std::fs::remove_dir_all(&out).unwrap();
    pipeline(cli, work, &out);
    let second = tree(&out);
    let differing: Vec<_> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let artifacts_ok = differing.is_empty() && first.len() == second.len();
    outcome(
        data_ok && ckpt_ok && trials_ok && artifacts_ok,
        format!(
            "dataset {data_ok}, checkpoint {ckpt_ok}, trial list {trials_ok}; {} pipeline artifacts byte-identical across reruns: {artifacts_ok}{}",
            first.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {differing:?})") }
        ),
    )
}

fn main() {
    // libtest flags such as --nocapture may be forwarded; they are ignored.
    let strict = std::env::var("ACORL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let cli = PathBuf::from(env!("CARGO_BIN_EXE_acorl"));
    let work = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        let status = match (o.pass, KNOWN_UNMET.contains(&n)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {n:>2} {status:<12} {name}: {}", o.detail);
        results.push((n, name, o));
    };

    record(1, "autodiff correctness", autodiff_correctness());
    record(2, "gradient reversal contract", grl_contract());
    record(3, "lambda = 0 reduction", reduction(&cli, work.path()));
    record(4, "loss identities", loss_identities());
    record(5, "EER oracle equivalence", eer_oracle());
    record(6, "integrated gradients", integrated_gradients_criterion());

    let cfg = ExperimentConfig::canonical();
    let runs_dir = work.path().join("canonical");
    let outcomes: Vec<SeedOutcome> = SEEDS
        .iter()
        .map(|&s| {
            let o = run_canonical(&cfg, s, &runs_dir.join(format!("seed-{s}")), true).unwrap();
            println!(
                "  seed {s}: A {:.2}  B plain {:.2} acorl {:.2}  LF A+A {:.2}  LF A+B plain {:.2} acorl {:.2}  OF A+B plain {:.2} acorl {:.2}  ({:.1}s)",
                o.acc_a * 100.0,
                o.acc_plain_b * 100.0,
                o.acc_ally_b * 100.0,
                o.lf_aa * 100.0,
                o.lf_plain_ab * 100.0,
                o.lf_ally_ab * 100.0,
                o.of_plain_ab * 100.0,
                o.of_ally_ab * 100.0,
                o.seconds
            );
            o
        })
        .collect();
    record(7, "fusion trend", trend(&outcomes));
    record(8, "complementarity trend", complementarity(&outcomes));
    record(9, "verification track", verification(&outcomes));
    record(10, "redundancy control", redundancy(&outcomes));
    record(11, "determinism and I/O", determinism(&cli, work.path()));

    let runs: Vec<PathBuf> = SEEDS.iter().map(|s| runs_dir.join(format!("seed-{s}"))).collect();
    println!("\n{}", build_report(&runs).unwrap().render());

    let passed = results.iter().filter(|r| r.2.pass).count();
    let unexpected: Vec<usize> = results
        .iter()
        .filter(|r| !r.2.pass && (strict || !KNOWN_UNMET.contains(&r.0)))
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {passed}/{} criteria pass in {:.1}s{}",
        results.len(),
        start.elapsed().as_secs_f64(),
        if unexpected.is_empty() { String::new() } else { format!("; unexpected failures: {unexpected:?}") }
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
