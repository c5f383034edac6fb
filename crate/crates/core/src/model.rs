//! The trainable model (re-embedding MLP + heads), the batch objective with
//! its analytic gradient, and the checkpoint format.
//!
//! Checkpoint file (`GLM1`, little endian):
//!
//! ```text
//! magic "GLM1" | u32 D | u32 H | u32 D_out | u32 C
//! 8 × { u32 name_len | name bytes | row-major f64 values }
//! ```
//!
//! Tensor lengths follow from the header dimensions and the tensor name.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;

use crate::aligner::{self, AlignerGrads, AlignerParams, Mode};
use crate::cues::Label;
use crate::error::{Error, Result};
use crate::heads::{self, HeadGrads, HeadParams, LossBreakdown, LossWeights};
use crate::linalg::axpy;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLM1";

pub const TENSOR_NAMES: [&str; 8] = [
    "aligner.w1",
    "aligner.b1",
    "aligner.w2",
    "aligner.b2",
    "cls.w",
    "cls.b",
    "spk.w",
    "spk.b",
];

/// Tensors 0..4 belong to the re-embedding MLP.
pub const ALIGNER_TENSORS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Segment feature width.
    pub d: usize,
    pub hidden: usize,
    /// Embedding width seen by the heads.
    pub d_out: usize,
    pub n_speakers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub aligner: AlignerParams,
    pub heads: HeadParams,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, dropout_rate: f64, rng: &mut R) -> Result<Self> {
        let aligner = AlignerParams::init(dims.d, dims.hidden, dims.d_out, dropout_rate, rng)?;
        let heads = HeadParams::init(dims.d_out, dims.n_speakers, rng);
        Ok(Self { aligner, heads })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d: self.aligner.input_dim(),
            hidden: self.aligner.hidden(),
            d_out: self.heads.embedding_dim(),
            n_speakers: self.heads.n_speakers(),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 8] {
        let a = &self.aligner;
        let h = &self.heads;
        [
            (TENSOR_NAMES[0], a.w1.as_slice()),
            (TENSOR_NAMES[1], &a.b1),
            (TENSOR_NAMES[2], a.w2.as_slice()),
            (TENSOR_NAMES[3], &a.b2),
            (TENSOR_NAMES[4], &h.cls_w),
            (TENSOR_NAMES[5], std::slice::from_ref(&h.cls_b)),
            (TENSOR_NAMES[6], h.spk_w.as_slice()),
            (TENSOR_NAMES[7], &h.spk_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 8] {
        let a = &mut self.aligner;
        let h = &mut self.heads;
        [
            (TENSOR_NAMES[0], a.w1.as_mut_slice()),
            (TENSOR_NAMES[1], &mut a.b1),
            (TENSOR_NAMES[2], a.w2.as_mut_slice()),
            (TENSOR_NAMES[3], &mut a.b2),
            (TENSOR_NAMES[4], &mut h.cls_w),
            (TENSOR_NAMES[5], std::slice::from_mut(&mut h.cls_b)),
            (TENSOR_NAMES[6], h.spk_w.as_mut_slice()),
            (TENSOR_NAMES[7], &mut h.spk_b),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub aligner: AlignerGrads,
    pub heads: HeadGrads,
}

impl ModelGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            aligner: AlignerGrads::zeros_like(&p.aligner),
            heads: HeadGrads::zeros_like(&p.heads),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 8] {
        let a = &self.aligner;
        let h = &self.heads;
        [
            (TENSOR_NAMES[0], a.w1.as_slice()),
            (TENSOR_NAMES[1], &a.b1),
            (TENSOR_NAMES[2], a.w2.as_slice()),
            (TENSOR_NAMES[3], &a.b2),
            (TENSOR_NAMES[4], &h.cls_w),
            (TENSOR_NAMES[5], std::slice::from_ref(&h.cls_b)),
            (TENSOR_NAMES[6], h.spk_w.as_slice()),
            (TENSOR_NAMES[7], &h.spk_b),
        ]
    }
}

/// One video as seen by the model: its pooled segment feature and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub video_id: String,
    pub pooled: Vec<f64>,
    pub label: Label,
    pub speaker: usize,
}

/// How the speaker-head gradient joins the shared embedding gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeakerBranch {
    /// Through the gradient reversal layer.
    Reversed,
    /// GRL replaced by the identity (for diagnostics).
    Identity,
}

/// Which loss terms contribute gradients. Reported losses are always complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub cls: bool,
    pub id: bool,
    pub tri: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        cls: true,
        id: true,
        tri: true,
    };
    pub const ID_ONLY: Terms = Terms {
        cls: false,
        id: true,
        tri: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassOptions {
    /// `false` feeds the pooled feature straight to the heads.
    pub use_reembedding: bool,
    pub branch: SpeakerBranch,
    pub terms: Terms,
}

impl Default for PassOptions {
    fn default() -> Self {
        Self {
            use_reembedding: true,
            branch: SpeakerBranch::Reversed,
            terms: Terms::ALL,
        }
    }
}

/// Which side of every non-differentiable point the batch sits on: the sign
/// of each hidden pre-activation and whether each mined triplet is active.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActivationPattern {
    pub relu: Vec<bool>,
    pub triplets: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub breakdown: LossBreakdown,
    pub grads: ModelGrads,
    pub probabilities: Vec<f64>,
    pub pattern: ActivationPattern,
}

fn check_samples(params: &ModelParams, batch: &[&Sample], use_reembedding: bool) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dims = params.dims();
    if !use_reembedding && dims.d != dims.d_out {
        return Err(Error::Dimension {
            what: "head width without re-embedding".into(),
            expected: dims.d,
            found: dims.d_out,
        });
    }
    for s in batch {
        if s.pooled.len() != dims.d {
            return Err(Error::Dimension {
                what: format!("pooled feature of `{}`", s.video_id),
                expected: dims.d,
                found: s.pooled.len(),
            });
        }
    }
    Ok(())
}

fn triplet_pattern(zs: &[Vec<f64>], triplets: &[heads::Triplet], margin: f64) -> Vec<bool> {
    use crate::linalg::squared_distance as sq;
    triplets
        .iter()
        .map(|t| sq(&zs[t.anchor], &zs[t.positive]) - sq(&zs[t.anchor], &zs[t.negative]) + margin > 0.0)
        .collect()
}

/// Dropout-free forward pass: per-sample embeddings and the ReLU pattern.
pub fn embed(params: &ModelParams, pooled: &[f64], use_reembedding: bool) -> Result<(Vec<f64>, Vec<bool>)> {
    if !use_reembedding {
        return Ok((pooled.to_vec(), Vec::new()));
    }
    let pre = params.aligner.w1.affine(pooled, &params.aligner.b1);
    let pattern = pre.iter().map(|&a| a > 0.0).collect();
    Ok((aligner::reembed_eval(pooled, &params.aligner)?, pattern))
}

/// Losses of a batch in evaluation mode (no dropout, no gradients).
pub fn batch_losses(
    params: &ModelParams,
    batch: &[&Sample],
    weights: &LossWeights,
    use_reembedding: bool,
) -> Result<(LossBreakdown, Vec<f64>, ActivationPattern)> {
    check_samples(params, batch, use_reembedding)?;
    let mut zs = Vec::with_capacity(batch.len());
    let mut relu = Vec::new();
    for s in batch {
        let (z, pattern) = embed(params, &s.pooled, use_reembedding)?;
        zs.push(z);
        relu.extend(pattern);
    }
    let labels: Vec<Label> = batch.iter().map(|s| s.label).collect();
    let speakers: Vec<usize> = batch.iter().map(|s| s.speaker).collect();
    let cls = heads::cls_forward_backward(&zs, &labels, &params.heads)?;
    let spk = heads::speaker_forward_backward(&zs, &speakers, &params.heads, weights.lambda)?;
    let triplets = heads::mine_triplets(&zs, &labels, &speakers);
    let tri = heads::batch_triplet_loss(&zs, &triplets, weights.margin)?;
    let mut breakdown = heads::total_loss(cls.loss, spk.loss, tri.loss, weights);
    breakdown.triplet_count = triplets.len();
    breakdown.active_triplets = tri.active;
    let pattern = ActivationPattern {
        relu,
        triplets: triplet_pattern(&zs, &triplets, weights.margin),
    };
    Ok((breakdown, cls.probabilities, pattern))
}

/// Training-mode forward and backward pass over one batch.
///
/// The gradient reaching `z` is `∂L_cls/∂z + α·GRL(∂L_id/∂z) + β·∂L_tri/∂z`;
/// the speaker head itself receives the unreversed `α·∂L_id/∂θ`.
pub fn loss_and_gradients<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[&Sample],
    weights: &LossWeights,
    options: &PassOptions,
    rng: &mut R,
) -> Result<BatchResult> {
    check_samples(params, batch, options.use_reembedding)?;
    let mut zs = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    let mut relu = Vec::new();
    for s in batch {
        if options.use_reembedding {
            let (z, cache) = aligner::reembed_forward(&s.pooled, &params.aligner, Mode::Train, rng)?;
            let cache = cache.expect("training-mode forward returns a cache");
            relu.extend(cache.pre_activation.iter().map(|&a| a > 0.0));
            zs.push(z);
            caches.push(cache);
        } else {
            zs.push(s.pooled.clone());
        }
    }
    let labels: Vec<Label> = batch.iter().map(|s| s.label).collect();
    let speakers: Vec<usize> = batch.iter().map(|s| s.speaker).collect();
    let cls = heads::cls_forward_backward(&zs, &labels, &params.heads)?;
    let spk = heads::speaker_forward_backward(&zs, &speakers, &params.heads, weights.lambda)?;
    let triplets = heads::mine_triplets(&zs, &labels, &speakers);
    let tri = heads::batch_triplet_loss(&zs, &triplets, weights.margin)?;

    let mut grads = ModelGrads::zeros_like(params);
    let t = options.terms;
    if t.cls {
        grads.heads.cls_w = cls.grad_w;
        grads.heads.cls_b = cls.grad_b;
    }
    if t.id {
        axpy(grads.heads.spk_w.as_mut_slice(), spk.grad_w.as_slice(), weights.alpha);
        axpy(&mut grads.heads.spk_b, &spk.grad_b, weights.alpha);
    }
    let d_out = params.heads.embedding_dim();
    for i in 0..zs.len() {
        let mut d_z = if t.cls { cls.d_z[i].clone() } else { vec![0.0; d_out] };
        if t.id {
            let branch = match options.branch {
                SpeakerBranch::Reversed => &spk.d_z_reversed[i],
                SpeakerBranch::Identity => &spk.d_z[i],
            };
            axpy(&mut d_z, branch, weights.alpha);
        }
        if t.tri {
            axpy(&mut d_z, &tri.d_z[i], weights.beta);
        }
        if options.use_reembedding {
            aligner::accumulate_backward(&params.aligner, &caches[i], &d_z, &mut grads.aligner)?;
        }
    }

    let mut breakdown = heads::total_loss(cls.loss, spk.loss, tri.loss, weights);
    breakdown.triplet_count = triplets.len();
    breakdown.active_triplets = tri.active;
    let pattern = ActivationPattern {
        relu,
        triplets: triplet_pattern(&zs, &triplets, weights.margin),
    };
    Ok(BatchResult {
        breakdown,
        grads,
        probabilities: cls.probabilities,
        pattern,
    })
}

fn tensor_len(name: &str, dims: ModelDims) -> usize {
    match name {
        "aligner.w1" => dims.hidden * dims.d,
        "aligner.b1" => dims.hidden,
        "aligner.w2" => dims.d_out * dims.hidden,
        "aligner.b2" | "cls.w" => dims.d_out,
        "cls.b" => 1,
        "spk.w" => dims.n_speakers * dims.d_out,
        "spk.b" => dims.n_speakers,
        _ => unreachable!("unknown tensor {name}"),
    }
}

pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let dims = params.dims();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [dims.d, dims.hidden, dims.d_out, dims.n_speakers] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (name, values) in params.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn params_from_checkpoint(mut bytes: &[u8], dropout_rate: f64) -> Result<ModelParams> {
    let fmt = |m: String| Error::format("checkpoint", m);
    let mut magic = [0u8; 4];
    bytes
        .read_exact(&mut magic)
        .map_err(|_| fmt("truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic, expected GLM1".into()));
    }
    let mut header = [0usize; 4];
    for h in &mut header {
        let mut b = [0u8; 4];
        bytes
            .read_exact(&mut b)
            .map_err(|_| fmt("truncated header".into()))?;
        *h = u32::from_le_bytes(b) as usize;
    }
    let dims = ModelDims {
        d: header[0],
        hidden: header[1],
        d_out: header[2],
        n_speakers: header[3],
    };
    let mut params = ModelParams {
        aligner: AlignerParams::zeros(dims.d, dims.hidden, dims.d_out, dropout_rate),
        heads: HeadParams::zeros(dims.d_out, dims.n_speakers),
    };
    let mut seen = [false; 8];
    while !bytes.is_empty() {
        let mut b = [0u8; 4];
        bytes
            .read_exact(&mut b)
            .map_err(|_| fmt("truncated tensor header".into()))?;
        let mut name = vec![0u8; u32::from_le_bytes(b) as usize];
        bytes
            .read_exact(&mut name)
            .map_err(|_| fmt("truncated tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|_| fmt("tensor name is not UTF-8".into()))?;
        let slot = TENSOR_NAMES
            .iter()
            .position(|&n| n == name)
            .ok_or_else(|| fmt(format!("unknown tensor `{name}`")))?;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(fmt(format!("tensor `{name}` repeated")));
        }
        let len = tensor_len(&name, dims);
        let mut tensors = params.tensors_mut();
        let target = &mut tensors[slot].1;
        debug_assert_eq!(target.len(), len);
        for v in target.iter_mut() {
            let mut b = [0u8; 8];
            bytes
                .read_exact(&mut b)
                .map_err(|_| fmt(format!("tensor `{name}` truncated")))?;
            *v = f64::from_le_bytes(b);
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(fmt(format!("tensor `{}` missing", TENSOR_NAMES[missing])));
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path, dropout_rate: f64) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_checkpoint(&bytes, dropout_rate)
}
