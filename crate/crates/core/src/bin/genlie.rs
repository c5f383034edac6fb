use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use genlie_core::config::RunConfig;
use genlie_core::cues::{load_manifest, CorpusManifest};
use genlie_core::error::{Error, Result};
use genlie_core::gradcheck::{self, TOLERANCE};
use genlie_core::heads::LossWeights;
use genlie_core::model::{self, ModelDims, Sample};
use genlie_core::preprocess::{preprocess, Strategy};
use genlie_core::probe::ProbeConfig;
use genlie_core::synth::generate_corpus;
use genlie_core::trainer::{self, Dataset, HistoryRow};

const DEFAULT_OUTPUT_DIR: &str = "genlie-out";

#[derive(Parser)]
#[command(name = "genlie", version, about = "Identity-decorrelated deception detection from cue tracks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted bursts.
    Synth(SynthArgs),
    /// Run frame selection and write selections.jsonl.
    SelectFrames(SelectArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: $GENLIE_OUTPUT_DIR, then genlie-out].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_speakers: Option<usize>,
    #[arg(long)]
    videos_per_speaker: Option<usize>,
    #[arg(long)]
    frames_per_video: Option<usize>,
    #[arg(long)]
    burst_strength: Option<f64>,
    #[arg(long)]
    identity_confound: Option<f64>,
}

#[derive(Args)]
struct PreprocessFlags {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    frames_per_segment: Option<usize>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pre: PreprocessFlags,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pre: PreprocessFlags,
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Whole video as one segment with the full frame budget.
    #[arg(long)]
    no_temporal_segmentation: bool,
    /// Feed the pooled feature straight to the heads.
    #[arg(long)]
    no_reembedding: bool,
    /// Drop the adversarial identity loss.
    #[arg(long)]
    no_id_loss: bool,
    /// Drop the triplet loss.
    #[arg(long)]
    no_triplet_loss: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pre: PreprocessFlags,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// D,H,D_out[,C]
    #[arg(long, default_value = "6,5,4,3")]
    dims: String,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.paths.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .paths
        .output_dir
        .clone()
        .or_else(|| std::env::var_os("GENLIE_OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_effective(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join("effective-config.toml"), cfg.to_toml())
}

fn apply_preprocess(cfg: &mut RunConfig, pre: &PreprocessFlags) {
    if let Some(m) = &pre.manifest {
        cfg.paths.manifest = Some(m.clone());
    }
    if let Some(s) = pre.strategy {
        cfg.preprocess.strategy = s;
    }
    if let Some(n) = pre.segments {
        cfg.preprocess.n_segments = n;
    }
    if let Some(k) = pre.frames_per_segment {
        cfg.preprocess.frames_per_segment = k;
    }
}

fn manifest_from(path: Option<&PathBuf>, what: &str) -> Result<CorpusManifest> {
    let path = path.ok_or_else(|| Error::Config(format!("no {what} given (flag or [paths] entry)")))?;
    load_manifest(path)
}

fn dataset(cfg: &RunConfig, manifest: &CorpusManifest) -> Result<Dataset> {
    let tc = cfg.train_config();
    let pre = tc.effective_preprocess();
    pre.validate_budget()?;
    let encoder = cfg.build_encoder(manifest.au_count, manifest.keypoint_count)?;
    Dataset::build(manifest, encoder.as_ref(), &pre)
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let s = &mut cfg.synth;
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.n_speakers {
        s.n_speakers = v;
    }
    if let Some(v) = args.videos_per_speaker {
        s.videos_per_speaker = v;
    }
    if let Some(v) = args.frames_per_video {
        s.frames_per_video = v;
    }
    if let Some(v) = args.burst_strength {
        s.cue_burst_strength = v;
    }
    if let Some(v) = args.identity_confound {
        s.identity_confound = v;
    }
    let dir = output_dir(&cfg)?;
    let (manifest, truth) = generate_corpus(&cfg.synth)?;
    let manifest_path = manifest.write_to_dir(&dir)?;
    let truth_path = dir.join("ground-truth.json");
    truth.write(&truth_path)?;
    cfg.paths.manifest = Some(manifest_path.clone());
    cfg.encoder.dim = cfg.synth.feature_dim;
    cfg.encoder.seed = cfg.synth.seed;
    cfg.encoder.confound = Some(truth_path);
    write_effective(&dir, &cfg)?;
    println!(
        "wrote {} videos ({} speakers) to {}",
        manifest.len(),
        manifest.n_speakers(),
        manifest_path.display()
    );
    Ok(())
}

fn run_select(args: SelectArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_preprocess(&mut cfg, &args.pre);
    let pre = cfg.train_config().effective_preprocess();
    pre.validate_budget()?;
    let manifest = manifest_from(cfg.paths.manifest.as_ref(), "manifest")?;
    let dir = output_dir(&cfg)?;
    let path = dir.join("selections.jsonl");
    let mut out = Vec::new();
    for track in manifest.videos() {
        let sel = preprocess(track, &pre)?;
        serde_json::to_writer(&mut out, &sel).map_err(|e| Error::format("selection", e.to_string()))?;
        out.push(b'\n');
    }
    write_file(&path, out)?;
    write_effective(&dir, &cfg)?;
    println!("wrote {} selections to {}", manifest.len(), path.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_preprocess(&mut cfg, &args.pre);
    if let Some(p) = args.eval_manifest {
        cfg.paths.eval_manifest = Some(p);
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    let a = &mut cfg.ablation;
    a.use_temporal_segmentation &= !args.no_temporal_segmentation;
    a.use_reembedding &= !args.no_reembedding;
    a.use_id_loss &= !args.no_id_loss;
    a.use_triplet_loss &= !args.no_triplet_loss;

    let tc = cfg.train_config();
    tc.validate()?;
    let manifest = manifest_from(cfg.paths.manifest.as_ref(), "manifest")?;
    let train_data = dataset(&cfg, &manifest)?;
    let eval_data = match &cfg.paths.eval_manifest {
        Some(p) => Some(dataset(&cfg, &load_manifest(p)?)?),
        None => None,
    };
    let dir = output_dir(&cfg)?;
    write_effective(&dir, &cfg)?;
    let ckpt_dir = dir.join("checkpoints");
    let every = cfg.train.checkpoint_every;
    let history_path = dir.join("history.csv");
    let probe = ProbeConfig::default();
    let output = trainer::train(&train_data, eval_data.as_ref(), &tc, Some(&probe), |ev| {
        if every > 0 && ev.epoch % every == 0 {
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            model::write_checkpoint(&ckpt_dir.join(format!("epoch-{:04}.glm", ev.epoch)), ev.params)?;
        }
        Ok(())
    })?;
    write_file(&history_path, trainer::history_csv(&output.history))?;
    let model_path = dir.join("model.glm");
    model::write_checkpoint(&model_path, &output.params)?;
    if let Some(eval) = output.history.last().and_then(|r| r.eval.as_ref()) {
        println!("{}", eval.metrics);
        if let Some(p) = eval.speaker_probe_accuracy {
            println!("speaker probe accuracy {p:.2}");
        }
    }
    println!("model written to {}", model_path.display());
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_preprocess(&mut cfg, &args.pre);
    let tc = cfg.train_config();
    let manifest = manifest_from(cfg.paths.manifest.as_ref(), "manifest")?;
    let data = dataset(&cfg, &manifest)?;
    let params = model::read_checkpoint(&args.checkpoint, tc.model.dropout)?;
    let use_re = tc.ablation.use_reembedding;
    if params.dims().d != data.feature_dim {
        return Err(Error::Dimension {
            what: format!("checkpoint input width ({})", args.checkpoint.display()),
            expected: data.feature_dim,
            found: params.dims().d,
        });
    }
    let probe = ProbeConfig::default();
    let eval = trainer::evaluate(&params, &data, use_re, Some(&probe))?;
    // Speaker classes only line up with the checkpoint's head when the
    // manifest has the same speaker set size; otherwise L_id is reported as NaN.
    let batch: Vec<&Sample> = data.samples.iter().collect();
    let mut losses = if data.n_speakers() == params.dims().n_speakers {
        model::batch_losses(&params, &batch, &tc.effective_weights(), use_re)?.0
    } else {
        log::warn!("manifest speakers differ from the checkpoint's speaker head; L_id not scored");
        let remapped: Vec<Sample> = data.samples.iter().map(|s| Sample { speaker: 0, ..s.clone() }).collect();
        let batch: Vec<&Sample> = remapped.iter().collect();
        let mut l = model::batch_losses(&params, &batch, &tc.effective_weights(), use_re)?.0;
        l.l_id = f64::NAN;
        l
    };
    losses.l_total = if losses.l_id.is_nan() { f64::NAN } else { losses.l_total };
    let dir = output_dir(&cfg)?;
    write_effective(&dir, &cfg)?;
    let json = serde_json::json!({
        "f1": eval.metrics.f1,
        "acc": eval.metrics.acc,
        "auc": eval.metrics.auc,
        "counts": eval.metrics.counts,
        "n_pos": eval.metrics.n_pos,
        "n_neg": eval.metrics.n_neg,
        "speaker_probe_acc": eval.speaker_probe_accuracy,
    });
    write_file(
        &dir.join("metrics.json"),
        serde_json::to_string_pretty(&json).expect("plain json"),
    )?;
    let row = HistoryRow {
        epoch: 0,
        losses,
        eval: Some(eval.clone()),
    };
    write_file(&dir.join("history.csv"), trainer::history_csv(&[row]))?;
    println!("{}", eval.metrics);
    if let Some(p) = eval.speaker_probe_accuracy {
        println!("speaker probe accuracy {p:.2}");
    }
    Ok(())
}

fn parse_dims(s: &str) -> Result<ModelDims> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("--dims expects D,H,D_out[,C], got `{s}`")))?;
    match v.as_slice() {
        &[d, hidden, d_out] | &[d, hidden, d_out, _] if d * hidden * d_out == 0 => {
            Err(Error::Config("--dims entries must be positive".into()))
        }
        &[d, hidden, d_out] => Ok(ModelDims { d, hidden, d_out, n_speakers: 3 }),
        &[d, hidden, d_out, c] if c >= 1 => Ok(ModelDims { d, hidden, d_out, n_speakers: c }),
        _ => Err(Error::Config(format!("--dims expects D,H,D_out[,C], got `{s}`"))),
    }
}

fn run_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let dims = parse_dims(&args.dims)?;
    let weights = LossWeights::default();
    let mut worst: f64 = 0.0;
    let mut stdout = std::io::stdout().lock();
    for seed in args.seed..args.seed + args.seeds {
        let report = gradcheck::run_seed(seed, dims, args.batch, &weights)?;
        writeln!(stdout, "seed {seed}").ok();
        writeln!(stdout, "{:<12}{:>16}{:>9}{:>9}", "tensor", "max_rel_error", "checked", "skipped").ok();
        for t in &report.tensors {
            writeln!(stdout, "{:<12}{:>16.3e}{:>9}{:>9}", t.name, t.max_rel_error, t.checked, t.skipped).ok();
        }
        worst = worst.max(report.max_rel_error());
    }
    let pass = worst < TOLERANCE;
    writeln!(
        stdout,
        "max relative error {worst:.3e} ({} tolerance {TOLERANCE:e})",
        if pass { "within" } else { "EXCEEDS" }
    )
    .ok();
    Ok(pass)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a).map(|_| true),
        Command::SelectFrames(a) => run_select(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Evaluate(a) => run_evaluate(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
