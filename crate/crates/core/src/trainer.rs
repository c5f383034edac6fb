//! Batching, the epoch loop and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aligner::mean_pool;
use crate::cues::{CorpusManifest, Label};
use crate::encoder::SegmentEncoder;
use crate::error::{Error, Result};
use crate::heads::{LossBreakdown, LossWeights};
use crate::metrics::{self, MetricsReport};
use crate::model::{self, ModelDims, ModelParams, PassOptions, Sample, ALIGNER_TENSORS};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::preprocess::{preprocess, PreprocessConfig, FRAME_BUDGET};
use crate::probe::{speaker_probe_accuracy, ProbeConfig};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
    /// Checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 10,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub d_out: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 1024,
            d_out: 768,
            dropout: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_temporal_segmentation: bool,
    pub use_reembedding: bool,
    pub use_id_loss: bool,
    pub use_triplet_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_temporal_segmentation: true,
            use_reembedding: true,
            use_id_loss: true,
            use_triplet_loss: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train: TrainParams,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub preprocess: PreprocessConfig,
    pub ablation: Ablation,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        let range_ok = (0.0..f64::INFINITY).contains(&t.weight_decay)
            && (0.0..1.0).contains(&t.beta1)
            && (0.0..1.0).contains(&t.beta2)
            && (f64::MIN_POSITIVE..f64::INFINITY).contains(&t.eps);
        if !range_ok {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        let w = self.effective_weights();
        let min_batch = if w.alpha > 0.0 || w.beta > 0.0 { 2 } else { 1 };
        if t.batch_size < min_batch {
            return Err(Error::Config(format!(
                "train.batch_size must be at least {min_batch} with the enabled losses"
            )));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        if self.model.hidden == 0 || self.model.d_out == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.loss.validate()?;
        self.effective_preprocess().validate()
    }

    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            alpha: if self.ablation.use_id_loss { self.loss.alpha } else { 0.0 },
            beta: if self.ablation.use_triplet_loss { self.loss.beta } else { 0.0 },
            ..self.loss
        }
    }

    /// Without temporal segmentation the whole video is one segment with the
    /// full frame budget.
    pub fn effective_preprocess(&self) -> PreprocessConfig {
        if self.ablation.use_temporal_segmentation {
            self.preprocess.clone()
        } else {
            PreprocessConfig {
                n_segments: 1,
                frames_per_segment: FRAME_BUDGET,
                ..self.preprocess.clone()
            }
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
        }
    }

    /// Head width: the pooled feature width when re-embedding is bypassed.
    pub fn dims(&self, feature_dim: usize, n_speakers: usize) -> ModelDims {
        ModelDims {
            d: feature_dim,
            hidden: self.model.hidden,
            d_out: if self.ablation.use_reembedding {
                self.model.d_out
            } else {
                feature_dim
            },
            n_speakers,
        }
    }
}

/// Pooled segment features and targets for every video of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub speaker_names: Vec<String>,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn build(manifest: &CorpusManifest, encoder: &dyn SegmentEncoder, preprocess_cfg: &PreprocessConfig) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::EmptyInput("manifest has no videos".into()));
        }
        let samples = manifest
            .videos()
            .iter()
            .map(|track| {
                let selection = preprocess(track, preprocess_cfg)?;
                let features = encoder.encode_video(track, &selection)?;
                let rows: Vec<&[f64]> = features.iter().map(|f| f.values.as_slice()).collect();
                Ok(Sample {
                    video_id: track.video_id.clone(),
                    pooled: mean_pool(&rows)?,
                    label: track.label,
                    speaker: manifest
                        .speaker_class(&track.speaker_id)
                        .expect("manifest indexes its own speakers"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let speaker_names = manifest.speaker_index().keys().cloned().collect();
        Ok(Self {
            samples,
            speaker_names,
            feature_dim: encoder.dim(),
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.speaker_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keeps the speaker classes of the full dataset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            speaker_names: self.speaker_names.clone(),
            feature_dim: self.feature_dim,
        }
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label.as_u8()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batches {
    pub batches: Vec<Vec<usize>>,
    /// Only one label present: triplet loss is identically zero.
    pub single_label: bool,
}

/// Seeded, label-stratified batching.
///
/// Within each label, speakers are visited round-robin in shuffled order so
/// consecutive picks come from different speakers. The two label streams
/// are then interleaved in proportion to their sizes and cut into batches.
pub fn make_batches(items: &[(Label, usize)], batch_size: usize, seed: u64, epoch: usize) -> Result<Batches> {
    if items.is_empty() {
        return Err(Error::EmptyInput("no videos to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = stream_rng(seed, Stream::Batching, epoch as u32);
    let mut streams: Vec<Vec<usize>> = Vec::new();
    for label in [Label::Deceptive, Label::Truthful] {
        let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &(l, s)) in items.iter().enumerate() {
            if l == label {
                by_speaker.entry(s).or_default().push(i);
            }
        }
        let mut queues: Vec<Vec<usize>> = by_speaker.into_values().collect();
        for q in &mut queues {
            q.shuffle(&mut rng);
        }
        queues.shuffle(&mut rng);
        let mut stream = Vec::new();
        let mut depth = 0;
        while stream.len() < queues.iter().map(Vec::len).sum() {
            stream.extend(queues.iter().filter_map(|q| q.get(depth)));
            depth += 1;
        }
        streams.push(stream);
    }
    let single_label = streams.iter().any(Vec::is_empty);
    let (a, b) = (&streams[0], &streams[1]);
    let mut order = Vec::with_capacity(items.len());
    let (mut ia, mut ib) = (0, 0);
    while ia + ib < items.len() {
        // Take from the stream that is furthest behind its share.
        let take_a = ib == b.len() || (ia < a.len() && ia * b.len() <= ib * a.len());
        if take_a {
            order.push(a[ia]);
            ia += 1;
        } else {
            order.push(b[ib]);
            ib += 1;
        }
    }
    Ok(Batches {
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        single_label,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub speaker_probe_accuracy: Option<f64>,
    pub probabilities: Vec<f64>,
}

/// Eval-mode forward on every sample.
pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    use_reembedding: bool,
    probe: Option<&ProbeConfig>,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let mut zs = Vec::with_capacity(data.len());
    for s in &data.samples {
        let (z, _) = model::embed(params, &s.pooled, use_reembedding)?;
        zs.push(z);
    }
    let probabilities = crate::heads::cls_probabilities(&zs, &params.heads);
    let metrics = metrics::report(&probabilities, &data.labels())?;
    let speaker_probe_accuracy = match probe {
        Some(cfg) => {
            let speakers: Vec<usize> = data.samples.iter().map(|s| s.speaker).collect();
            speaker_probe_accuracy(&zs, &speakers, data.n_speakers(), cfg)?
        }
        None => None,
    };
    Ok(Evaluation {
        metrics,
        speaker_probe_accuracy,
        probabilities,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub eval: Option<Evaluation>,
}

pub const HISTORY_HEADER: &str = "epoch,l_cls,l_id,l_tri,l_total,f1,acc,auc,speaker_probe_acc";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl HistoryRow {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        let e = self.eval.as_ref();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            l.l_cls,
            l.l_id,
            l.l_tri,
            l.l_total,
            opt(e.map(|e| e.metrics.f1)),
            opt(e.map(|e| e.metrics.acc)),
            opt(e.and_then(|e| e.metrics.auc)),
            opt(e.and_then(|e| e.speaker_probe_accuracy)),
        )
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub struct EpochEvent<'a> {
    pub epoch: usize,
    pub params: &'a ModelParams,
    pub row: &'a HistoryRow,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub history: Vec<HistoryRow>,
}

pub fn init_params(cfg: &TrainConfig, feature_dim: usize, n_speakers: usize) -> Result<ModelParams> {
    let mut rng = stream_rng(cfg.train.seed, Stream::Init, 0);
    ModelParams::init(cfg.dims(feature_dim, n_speakers), cfg.model.dropout, &mut rng)
}

/// One Adam update from a batch. Aligner tensors are frozen when the
/// re-embedding is bypassed.
pub fn train_step<R: rand::Rng + ?Sized>(
    params: &mut ModelParams,
    state: &mut AdamState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let options = PassOptions {
        use_reembedding: cfg.ablation.use_reembedding,
        ..PassOptions::default()
    };
    let result = model::loss_and_gradients(params, batch, &cfg.effective_weights(), &options, rng)?;
    if !result.breakdown.l_total.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    let grads = result.grads.tensors();
    let grads: Vec<(&'static str, Option<&[f64]>)> = grads
        .iter()
        .enumerate()
        .map(|(k, &(name, g))| {
            let frozen = k < ALIGNER_TENSORS && !cfg.ablation.use_reembedding;
            (name, (!frozen).then_some(g))
        })
        .collect();
    adam_step(&mut params.tensors_mut(), &grads, state, &cfg.adam())?;
    Ok(result.breakdown)
}

pub fn train(
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    cfg: &TrainConfig,
    probe: Option<&ProbeConfig>,
    mut observer: impl FnMut(&EpochEvent) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let mut params = init_params(cfg, train_data.feature_dim, train_data.n_speakers())?;
    let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut state = AdamState::new(&shapes);
    let mut dropout_rng = stream_rng(cfg.train.seed, Stream::Dropout, 0);
    let items: Vec<(Label, usize)> = train_data.samples.iter().map(|s| (s.label, s.speaker)).collect();
    let eval_set = eval_data.unwrap_or(train_data);
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut warned = false;

    for epoch in 1..=cfg.train.epochs {
        let batches = make_batches(&items, cfg.train.batch_size, cfg.train.seed, epoch)?;
        if batches.single_label && !warned {
            log::warn!("training set holds a single label; triplet loss is zero");
            warned = true;
        }
        let mut sum = LossBreakdown::default();
        for (b, idx) in batches.batches.iter().enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_data.samples[i]).collect();
            let l = train_step(&mut params, &mut state, &batch, cfg, &mut dropout_rng).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {b})")),
                other => other,
            })?;
            let n = batch.len() as f64;
            sum.l_cls += n * l.l_cls;
            sum.l_id += n * l.l_id;
            sum.l_tri += n * l.l_tri;
            sum.l_total += n * l.l_total;
            sum.triplet_count += l.triplet_count;
            sum.active_triplets += l.active_triplets;
        }
        let n = items.len() as f64;
        let losses = LossBreakdown {
            l_cls: sum.l_cls / n,
            l_id: sum.l_id / n,
            l_tri: sum.l_tri / n,
            l_total: sum.l_total / n,
            ..sum
        };
        let every = cfg.train.eval_every;
        let eval = if every > 0 && (epoch % every == 0 || epoch == cfg.train.epochs) {
            Some(evaluate(&params, eval_set, cfg.ablation.use_reembedding, probe)?)
        } else {
            None
        };
        let row = HistoryRow { epoch, losses, eval };
        log::info!("{}", row.csv_line());
        observer(&EpochEvent {
            epoch,
            params: &params,
            row: &row,
        })?;
        history.push(row);
    }
    Ok(TrainOutput { params, history })
}
