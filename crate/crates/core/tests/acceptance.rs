//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (bypassing libtest capture) before asserting.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use genlie_core::config::RunConfig;
use genlie_core::cues::{FrameCueRecord, Label, VideoCueTrack, GAZE_DIM};
use genlie_core::encoder::SyntheticEncoder;
use genlie_core::gradcheck::{self, TOLERANCE};
use genlie_core::heads::LossWeights;
use genlie_core::metrics;
use genlie_core::model::{loss_and_gradients, ModelDims, PassOptions, SpeakerBranch, Terms, ALIGNER_TENSORS};
use genlie_core::optim::{adam_step, AdamConfig, AdamState};
use genlie_core::preprocess::{preprocess, PreprocessConfig, Strategy, FRAME_BUDGET};
use genlie_core::probe::{self, ProbeConfig};
use genlie_core::rng::{stream_rng, Stream};
use genlie_core::synth::{generate_corpus, selection_hit_rate, SynthConfig};
use genlie_core::trainer::{train, Dataset, TrainConfig};
use rand::Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[acceptance {id:>2}] {status} {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn toy_dims() -> ModelDims {
    ModelDims {
        d: 6,
        hidden: 5,
        d_out: 4,
        n_speakers: 3,
    }
}

#[test]
fn c01_full_model_gradient_oracle() {
    let start = Instant::now();
    let weights = LossWeights {
        alpha: 0.1,
        beta: 0.1,
        lambda: 1.0,
        margin: 0.2,
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    let mut all_tensors = true;
    for seed in 0..20 {
        let report = gradcheck::run_seed(seed, toy_dims(), 4, &weights).unwrap();
        worst = worst.max(report.max_rel_error());
        all_tensors &= report.tensors.iter().all(|t| t.checked > 0);
        checked += report.tensors.iter().map(|t| t.checked).sum::<usize>();
        skipped += report.tensors.iter().map(|t| t.skipped).sum::<usize>();
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "full-model gradient oracle",
        worst < TOLERANCE && all_tensors && elapsed < Duration::from_secs(5),
        &format!("max rel err {worst:.2e} over {checked} entries ({skipped} at kinks), {elapsed:.2?}"),
    );
}

#[test]
fn c02_grl_sign_law() {
    let mut worst = 0.0f64;
    let mut heads_equal = true;
    for &lambda in &[0.0, 0.5, 1.0] {
        let weights = LossWeights {
            lambda,
            ..LossWeights::default()
        };
        for seed in 0..10 {
            let (mut params, samples) = gradcheck::fixture(seed, toy_dims(), 6).unwrap();
            params.aligner.dropout_rate = 0.3;
            let batch: Vec<_> = samples.iter().collect();
            let pass = |branch| {
                let options = PassOptions {
                    branch,
                    terms: Terms::ID_ONLY,
                    ..PassOptions::default()
                };
                let mut rng = stream_rng(seed, Stream::Dropout, 0);
                loss_and_gradients(&params, &batch, &weights, &options, &mut rng).unwrap().grads
            };
            let reversed = pass(SpeakerBranch::Reversed);
            let identity = pass(SpeakerBranch::Identity);
            for (slot, ((_, r), (_, i))) in reversed.tensors().iter().zip(identity.tensors().iter()).enumerate() {
                for (&a, &b) in r.iter().zip(i.iter()) {
                    if slot < ALIGNER_TENSORS {
                        let expected = -lambda * b;
                        let scale = a.abs().max(expected.abs());
                        if scale > 0.0 {
                            worst = worst.max((a - expected).abs() / scale);
                        }
                    } else {
                        heads_equal &= a == b;
                    }
                }
            }
        }
    }
    verdict(
        2,
        "GRL sign law",
        worst < 1e-12 && heads_equal,
        &format!("max rel diff {worst:.2e} for lambda in {{0, 0.5, 1}}, head grads unchanged: {heads_equal}"),
    );
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut doubled: u64 = 0;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &y) in labels.iter().enumerate() {
        if y == 1 {
            p += 1;
        } else {
            n += 1;
            continue;
        }
        for (j, &z) in labels.iter().enumerate() {
            if z == 0 {
                doubled += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (100 * doubled) as f64 / (2 * p * n) as f64
}

#[test]
fn c03_metric_oracles() {
    let mut rng = stream_rng(3, Stream::Fixture, 0);
    let mut mismatches = Vec::new();
    for instance in 0..100 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let levels = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let predictions: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();

        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &y) in predictions.iter().zip(&labels) {
            match (p, y) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 0) => tn += 1,
                _ => fn_ += 1,
            }
        }
        let f1_oracle = if tp == 0 {
            0.0
        } else {
            (200 * tp) as f64 / (2 * tp + fp + fn_) as f64
        };
        let acc_oracle = (100 * (tp + tn)) as f64 / n as f64;

        let auc = metrics::auc(&scores, &labels).unwrap();
        let f1 = metrics::f1_positive(&predictions, &labels).unwrap();
        let acc = metrics::accuracy(&predictions, &labels).unwrap();
        if auc.to_bits() != pairwise_auc(&scores, &labels).to_bits()
            || f1.to_bits() != f1_oracle.to_bits()
            || acc.to_bits() != acc_oracle.to_bits()
        {
            mismatches.push(instance);
        }
    }
    verdict(
        3,
        "metric oracles",
        mismatches.is_empty(),
        &format!("100 tied instances, bit mismatches: {mismatches:?}"),
    );
}

fn random_track<R: Rng>(rng: &mut R, t: usize) -> VideoCueTrack {
    let frames = (0..t)
        .map(|i| FrameCueRecord {
            frame_index: i,
            au_intensities: (0..4).map(|_| rng.random_range(0..6) as f64).collect(),
            gaze_descriptor: (0..GAZE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            pose_keypoints: (0..2).map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))).collect(),
        })
        .collect();
    VideoCueTrack {
        video_id: "fixture".into(),
        speaker_id: "s".into(),
        label: Label::Truthful,
        fps: 30.0,
        au_count: 4,
        keypoint_count: 2,
        frames,
    }
}

#[test]
fn c04_selection_budget_invariants() {
    let mut rng = stream_rng(4, Stream::Fixture, 0);
    let strategies = [
        Strategy::Uniform,
        Strategy::Au,
        Strategy::MicroExpression,
        Strategy::Gaze,
        Strategy::Posture,
        Strategy::Fusion,
    ];
    let mut failures = Vec::new();
    for fixture in 0..50 {
        let n = 1usize << rng.random_range(0..=7u32);
        let k = FRAME_BUDGET / n;
        let t = rng.random_range(1..=1000);
        let track = random_track(&mut rng, t);
        let ranges = genlie_core::preprocess::segment_ranges(t, n).unwrap();
        for strategy in strategies {
            let cfg = PreprocessConfig {
                n_segments: n,
                frames_per_segment: k,
                strategy,
                ..PreprocessConfig::default()
            };
            let sel = preprocess(&track, &cfg).unwrap();
            let per_segment_ok = sel.segments.len() == n
                && sel
                    .segments
                    .iter()
                    .zip(&ranges)
                    .all(|(s, r)| s.len() == k.min(r.len()) && s.iter().all(|i| r.contains(i)));
            if sel.total_selected() != t.min(FRAME_BUDGET) || !per_segment_ok {
                failures.push(format!("#{fixture} T={t} N={n} K={k} {strategy}"));
            }
            if strategy == Strategy::Uniform {
                let again: Vec<_> = (0..2).map(|_| preprocess(&track, &cfg).unwrap()).collect();
                if again.iter().any(|a| *a != sel) {
                    failures.push(format!("#{fixture} uniform not reproducible"));
                }
            }
        }
    }
    verdict(
        4,
        "selection budget invariants",
        failures.is_empty(),
        &format!("50 fixtures x 6 strategies, failures: {failures:?}"),
    );
}

#[test]
fn c05_adam_oracle() {
    // Scalar loss (p - 3)^2, so each gradient depends on the trajectory.
    let grad = |p: f64| 2.0 * (p - 3.0);
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut oracle = Vec::new();
    let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        let g = grad(p);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        p -= lr * m_hat / (v_hat.sqrt() + eps);
        oracle.push(p);
    }

    let cfg = AdamConfig {
        lr,
        weight_decay: 0.0,
        beta1: b1,
        beta2: b2,
        eps,
    };
    let mut state = AdamState::new(&[1]);
    let mut param = [0.5f64];
    let mut worst = 0.0f64;
    for expected in &oracle {
        let g = [grad(param[0])];
        adam_step(&mut [("p", &mut param[..])], &[("p", Some(&g[..]))], &mut state, &cfg).unwrap();
        worst = worst.max((param[0] - expected).abs());
    }
    verdict(
        5,
        "Adam oracle",
        worst < 1e-12,
        &format!("3-step trajectory {oracle:?}, max abs err {worst:.2e}"),
    );
}

#[test]
fn c06_overfit_sanity() {
    let start = Instant::now();
    let synth = SynthConfig {
        n_speakers: 4,
        videos_per_speaker: 4,
        noise_std: 0.2,
        cue_burst_strength: 1.0,
        seed: 6,
        ..SynthConfig::default()
    };
    let (manifest, truth) = generate_corpus(&synth).unwrap();
    let encoder = SyntheticEncoder::new(synth.seed, synth.feature_dim, synth.au_count, synth.keypoint_count)
        .with_confound(truth.confound)
        .unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model.hidden = 64;
    cfg.model.d_out = 32;
    cfg.train.learning_rate = 1e-3;
    cfg.train.epochs = 500;
    cfg.train.seed = 6;
    cfg.preprocess.strategy = Strategy::Au;
    let data = Dataset::build(&manifest, &encoder, &cfg.effective_preprocess()).unwrap();
    let out = train(&data, None, &cfg, None, |_| Ok(())).unwrap();
    let reached = out.history.iter().find(|r| {
        r.losses.l_cls < 0.05 && r.eval.as_ref().is_some_and(|e| e.metrics.acc == 100.0)
    });
    let elapsed = start.elapsed();
    let last = out.history.last().unwrap();
    let detail = match reached {
        Some(r) => format!("16 videos, l_cls {:.4} and ACC 100 at epoch {}, {elapsed:.2?}", r.losses.l_cls, r.epoch),
        None => format!(
            "not reached in 500 epochs (final l_cls {:.4}, ACC {:?}), {elapsed:.2?}",
            last.losses.l_cls,
            last.eval.as_ref().map(|e| e.metrics.acc)
        ),
    };
    verdict(
        6,
        "overfit sanity",
        reached.is_some() && elapsed < Duration::from_secs(30),
        &detail,
    );
}

struct DecorrelationRun {
    probe: f64,
    auc: f64,
}

fn decorrelation_run(alpha: f64) -> DecorrelationRun {
    let synth = SynthConfig {
        n_speakers: 20,
        videos_per_speaker: 20,
        identity_confound: 0.5,
        seed: 7,
        ..SynthConfig::default()
    };
    let (manifest, truth) = generate_corpus(&synth).unwrap();
    let encoder = SyntheticEncoder::new(synth.seed, synth.feature_dim, synth.au_count, synth.keypoint_count)
        .with_confound(truth.confound)
        .unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model.hidden = 16;
    cfg.model.d_out = 8;
    cfg.model.dropout = 0.0;
    cfg.train.learning_rate = 1e-3;
    cfg.train.weight_decay = 1e-2;
    cfg.train.epochs = 300;
    cfg.train.eval_every = 0;
    cfg.loss.alpha = alpha;
    cfg.preprocess.strategy = Strategy::Au;
    let full = Dataset::build(&manifest, &encoder, &cfg.effective_preprocess()).unwrap();
    let speakers: Vec<usize> = full.samples.iter().map(|s| s.speaker).collect();
    let (train_idx, held_idx) = probe::split(&speakers);
    let (train_set, held_out) = (full.subset(&train_idx), full.subset(&held_idx));
    let out = train(&train_set, None, &cfg, None, |_| Ok(())).unwrap();
    let eval = genlie_core::trainer::evaluate(&out.params, &held_out, true, Some(&ProbeConfig::default())).unwrap();
    DecorrelationRun {
        probe: eval.speaker_probe_accuracy.unwrap(),
        auc: eval.metrics.auc.unwrap(),
    }
}

#[test]
fn c07_decorrelation_experiment() {
    let start = Instant::now();
    let chance = 100.0 / 20.0;
    let adversarial = decorrelation_run(0.1);
    let plain = decorrelation_run(0.0);
    let elapsed = start.elapsed();
    let pass = (adversarial.probe - chance).abs() <= 10.0
        && adversarial.auc >= 85.0
        && plain.probe - chance >= 20.0
        && elapsed < Duration::from_secs(300);
    verdict(
        7,
        "decorrelation experiment",
        pass,
        &format!(
            "alpha=0.1 probe {:.1}% AUC {:.2}; alpha=0 probe {:.1}% AUC {:.2}; chance {chance}%; {elapsed:.2?}",
            adversarial.probe, adversarial.auc, plain.probe, plain.auc
        ),
    );
}

const STRATEGIES: [Strategy; 6] = [
    Strategy::Uniform,
    Strategy::Au,
    Strategy::MicroExpression,
    Strategy::Gaze,
    Strategy::Posture,
    Strategy::Fusion,
];

#[test]
fn c08_selection_strategy_experiment() {
    let mut losing = Vec::new();
    let mut margins = Vec::new();
    for seed in 0..10 {
        let synth = SynthConfig {
            frames_per_video: 512,
            cue_burst_strength: 2.0,
            noise_std: 0.1,
            seed,
            ..SynthConfig::default()
        };
        let (manifest, truth) = generate_corpus(&synth).unwrap();
        let rate = |strategy| {
            let cfg = PreprocessConfig {
                strategy,
                ..PreprocessConfig::default()
            };
            let rates: Vec<f64> = truth
                .bursts
                .iter()
                .map(|(id, b)| selection_hit_rate(&preprocess(manifest.video(id).unwrap(), &cfg).unwrap(), id, b).unwrap())
                .collect();
            rates.iter().sum::<f64>() / rates.len() as f64
        };
        let (au, uniform) = (rate(Strategy::Au), rate(Strategy::Uniform));
        margins.push(au - uniform);
        if au <= uniform {
            losing.push(seed);
        }
    }

    let mut mean_aucs = Vec::new();
    for strategy in STRATEGIES {
        let mut total = 0.0;
        for seed in 0..10u64 {
            let base = SynthConfig {
                n_speakers: 8,
                videos_per_speaker: 8,
                frames_per_video: 512,
                cue_burst_strength: 0.0,
                seed,
                ..SynthConfig::default()
            };
            let held = SynthConfig {
                n_speakers: 10,
                videos_per_speaker: 20,
                seed: seed + 1000,
                ..base.clone()
            };
            let encoder = SyntheticEncoder::new(42, base.feature_dim, base.au_count, base.keypoint_count);
            let mut cfg = TrainConfig::default();
            cfg.model.hidden = 16;
            cfg.model.d_out = 8;
            cfg.train.learning_rate = 1e-3;
            cfg.train.epochs = 20;
            cfg.train.eval_every = 0;
            cfg.train.seed = seed;
            cfg.preprocess.strategy = strategy;
            let pre = cfg.effective_preprocess();
            let train_set = Dataset::build(&generate_corpus(&base).unwrap().0, &encoder, &pre).unwrap();
            let held_set = Dataset::build(&generate_corpus(&held).unwrap().0, &encoder, &pre).unwrap();
            let out = train(&train_set, None, &cfg, None, |_| Ok(())).unwrap();
            let eval = genlie_core::trainer::evaluate(&out.params, &held_set, true, None).unwrap();
            total += eval.metrics.auc.unwrap();
        }
        mean_aucs.push((strategy, total / 10.0));
    }
    let null_ok = mean_aucs.iter().all(|&(_, a)| (a - 50.0).abs() <= 5.0);
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let aucs: Vec<String> = mean_aucs.iter().map(|(s, a)| format!("{s} {a:.1}")).collect();
    verdict(
        8,
        "selection-strategy experiment",
        losing.is_empty() && null_ok,
        &format!(
            "AU beats uniform on {}/10 fixtures (min hit-rate margin {min_margin:.3}); s=0 mean AUC over 10 seeds: {}",
            10 - losing.len(),
            aucs.join(", ")
        ),
    );
}

fn genlie(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_genlie"))
        .args(args)
        .env_remove("GENLIE_OUTPUT_DIR")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "genlie {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes a small corpus and returns its effective config with a
/// desk-scale model and training schedule appended.
fn cli_corpus(root: &Path) -> PathBuf {
    let corpus = root.join("corpus");
    genlie(&[
        "synth",
        "--out",
        s(&corpus),
        "--n-speakers",
        "3",
        "--videos-per-speaker",
        "4",
        "--identity-confound",
        "0.5",
    ]);
    let mut cfg = RunConfig::load(&corpus.join("effective-config.toml")).unwrap();
    cfg.paths.output_dir = None;
    cfg.model.hidden = 16;
    cfg.model.d_out = 8;
    cfg.train.epochs = 3;
    cfg.train.learning_rate = 1e-3;
    let path = root.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn c09_determinism() {
    let root = tempfile::tempdir().unwrap();
    let config = cli_corpus(root.path());
    let history = |name: &str| {
        let out = root.path().join(name);
        genlie(&["train", "--config", s(&config), "--out", s(&out)]);
        std::fs::read(out.join("history.csv")).unwrap()
    };
    let (a, b) = (history("a"), history("b"));
    verdict(
        9,
        "determinism",
        a == b && !a.is_empty(),
        &format!("two train runs, {} vs {} history bytes, identical: {}", a.len(), b.len(), a == b),
    );
}

#[test]
fn c10_ablation_completeness() {
    let root = tempfile::tempdir().unwrap();
    let config = cli_corpus(root.path());
    let effective = |name: &str, flag: Option<&str>| {
        let out = root.path().join(name);
        let mut args = vec!["train", "--config", s(&config), "--out", s(&out)];
        args.extend(flag);
        genlie(&args);
        let mut cfg = RunConfig::load(&out.join("effective-config.toml")).unwrap();
        cfg.paths.output_dir = None;
        cfg
    };
    let full = effective("full", None);
    type Toggle = fn(&mut RunConfig);
    let rows: [(&str, Toggle); 4] = [
        ("--no-temporal-segmentation", |c| c.ablation.use_temporal_segmentation = false),
        ("--no-reembedding", |c| c.ablation.use_reembedding = false),
        ("--no-id-loss", |c| c.ablation.use_id_loss = false),
        ("--no-triplet-loss", |c| c.ablation.use_triplet_loss = false),
    ];
    let mut failures = Vec::new();
    for (i, (flag, toggle)) in rows.iter().enumerate() {
        let ablated = effective(&format!("ablation{i}"), Some(flag));
        let mut expected = full.clone();
        toggle(&mut expected);
        if ablated != expected || ablated == full {
            failures.push(*flag);
        }
    }
    verdict(
        10,
        "ablation completeness",
        failures.is_empty(),
        &format!("4 single-flag runs differ from the full model in one key only; failures: {failures:?}"),
    );
}
