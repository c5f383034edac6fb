//! Discriminative heads on the video embedding `z`.
//!
//! * deception classifier: one sigmoid logit, binary cross-entropy;
//! * speaker classifier behind a gradient reversal layer: softmax over the
//!   `C` speaker identities, categorical cross-entropy;
//! * batch-all triplet loss with squared Euclidean distances;
//! * the joint objective `L_cls + α·L_id + β·L_tri`.
//!
//! All functions return analytic gradients alongside values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cues::Label;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, squared_distance, Matrix};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub cls_w: Vec<f64>,
    pub cls_b: f64,
    /// `C × D_out`
    pub spk_w: Matrix,
    pub spk_b: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(d_out: usize, n_speakers: usize) -> Self {
        Self {
            cls_w: vec![0.0; d_out],
            cls_b: 0.0,
            spk_w: Matrix::zeros(n_speakers, d_out),
            spk_b: vec![0.0; n_speakers],
        }
    }

    pub fn init<R: Rng + ?Sized>(d_out: usize, n_speakers: usize, rng: &mut R) -> Self {
        let cls = Matrix::xavier_uniform(1, d_out, rng);
        Self {
            cls_w: cls.as_slice().to_vec(),
            cls_b: 0.0,
            spk_w: Matrix::xavier_uniform(n_speakers, d_out, rng),
            spk_b: vec![0.0; n_speakers],
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.cls_w.len()
    }

    pub fn n_speakers(&self) -> usize {
        self.spk_b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub cls_w: Vec<f64>,
    pub cls_b: f64,
    pub spk_w: Matrix,
    pub spk_b: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros_like(p: &HeadParams) -> Self {
        Self {
            cls_w: vec![0.0; p.cls_w.len()],
            cls_b: 0.0,
            spk_w: Matrix::zeros(p.spk_w.rows(), p.spk_w.cols()),
            spk_b: vec![0.0; p.spk_b.len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            lambda: 1.0,
            margin: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.alpha) && ok(self.beta) && ok(self.lambda) && ok(self.margin)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_id: f64,
    pub l_tri: f64,
    pub l_total: f64,
    /// Triplets mined from the batch.
    pub triplet_count: usize,
    /// Mined triplets with a positive hinge.
    pub active_triplets: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_batch(zs: &[Vec<f64>], labels: usize, dim: usize) -> Result<()> {
    if zs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if labels != zs.len() {
        return Err(Error::LengthMismatch {
            what: "labels vs embeddings".into(),
            expected: zs.len(),
            found: labels,
        });
    }
    if let Some(z) = zs.iter().find(|z| z.len() != dim) {
        return Err(Error::Dimension {
            what: "embedding".into(),
            expected: dim,
            found: z.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ClsOutput {
    pub probabilities: Vec<f64>,
    pub loss: f64,
    /// `∂L_cls/∂z_i` per sample.
    pub d_z: Vec<Vec<f64>>,
    pub grad_w: Vec<f64>,
    pub grad_b: f64,
}

/// Deceptive-class probabilities only (eval path).
pub fn cls_probabilities(zs: &[Vec<f64>], params: &HeadParams) -> Vec<f64> {
    zs.iter()
        .map(|z| sigmoid(dot(&params.cls_w, z) + params.cls_b))
        .collect()
}

/// Mean binary cross-entropy of the sigmoid classifier, with gradients.
pub fn cls_forward_backward(zs: &[Vec<f64>], labels: &[Label], params: &HeadParams) -> Result<ClsOutput> {
    check_batch(zs, labels.len(), params.embedding_dim())?;
    let n = zs.len() as f64;
    let probabilities = cls_probabilities(zs, params);
    let mut loss = 0.0;
    let mut d_z = Vec::with_capacity(zs.len());
    let mut grad_w = vec![0.0; params.cls_w.len()];
    let mut grad_b = 0.0;
    for ((z, &y), &p) in zs.iter().zip(labels).zip(&probabilities) {
        let y = y.as_f64();
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        let d_logit = (p - y) / n;
        axpy(&mut grad_w, z, d_logit);
        grad_b += d_logit;
        d_z.push(params.cls_w.iter().map(|w| w * d_logit).collect());
    }
    Ok(ClsOutput {
        probabilities,
        loss: loss / n,
        d_z,
        grad_w,
        grad_b,
    })
}

/// Gradient reversal: identity forward, `-λ·g` backward.
pub fn grl_transform(grad: &[f64], lambda: f64) -> Vec<f64> {
    grad.iter().map(|g| -lambda * g).collect()
}

#[derive(Debug, Clone)]
pub struct SpeakerOutput {
    pub probabilities: Vec<Vec<f64>>,
    pub loss: f64,
    /// `∂L_id/∂z_i` as if the GRL were the identity.
    pub d_z: Vec<Vec<f64>>,
    /// `d_z` after the GRL; this is what reaches the shared embedding.
    pub d_z_reversed: Vec<Vec<f64>>,
    /// Head gradients; never reversed.
    pub grad_w: Matrix,
    pub grad_b: Vec<f64>,
}

pub fn speaker_probabilities(z: &[f64], params: &HeadParams) -> Vec<f64> {
    softmax(&params.spk_w.affine(z, &params.spk_b))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean categorical cross-entropy of the speaker head with gradients; the
/// gradient into `z` is also returned after gradient reversal.
pub fn speaker_forward_backward(
    zs: &[Vec<f64>],
    speakers: &[usize],
    params: &HeadParams,
    lambda: f64,
) -> Result<SpeakerOutput> {
    check_batch(zs, speakers.len(), params.embedding_dim())?;
    let c = params.n_speakers();
    if let Some(&bad) = speakers.iter().find(|&&s| s >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    let n = zs.len() as f64;
    let mut out = SpeakerOutput {
        probabilities: Vec::with_capacity(zs.len()),
        loss: 0.0,
        d_z: Vec::with_capacity(zs.len()),
        d_z_reversed: Vec::with_capacity(zs.len()),
        grad_w: Matrix::zeros(c, params.embedding_dim()),
        grad_b: vec![0.0; c],
    };
    for (z, &s) in zs.iter().zip(speakers) {
        let probs = speaker_probabilities(z, params);
        out.loss -= probs[s].clamp(PROB_EPS, 1.0).ln();
        let d_logits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| (p - if k == s { 1.0 } else { 0.0 }) / n)
            .collect();
        out.grad_w.add_outer(&d_logits, z, 1.0);
        axpy(&mut out.grad_b, &d_logits, 1.0);
        let d_z = params.spk_w.transpose_mul(&d_logits);
        out.d_z_reversed.push(grl_transform(&d_z, lambda));
        out.d_z.push(d_z);
        out.probabilities.push(probs);
    }
    out.loss /= n;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletValue {
    pub value: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negative: Vec<f64>,
}

/// `max(0, |a−p|² − |a−n|² + m)` and its subgradients (zero on the flat side).
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<TripletValue> {
    let d = anchor.len();
    for (what, v) in [("positive", positive), ("negative", negative)] {
        if v.len() != d {
            return Err(Error::Dimension {
                what: format!("triplet {what}"),
                expected: d,
                found: v.len(),
            });
        }
    }
    let value = squared_distance(anchor, positive) - squared_distance(anchor, negative) + margin;
    if value <= 0.0 {
        return Ok(TripletValue {
            value: 0.0,
            d_anchor: vec![0.0; d],
            d_positive: vec![0.0; d],
            d_negative: vec![0.0; d],
        });
    }
    let zip3 = |f: fn(f64, f64, f64) -> f64| -> Vec<f64> {
        (0..d)
            .map(|i| f(anchor[i], positive[i], negative[i]))
            .collect()
    };
    Ok(TripletValue {
        value,
        d_anchor: zip3(|_, p, n| 2.0 * (n - p)),
        d_positive: zip3(|a, p, _| 2.0 * (p - a)),
        d_negative: zip3(|a, _, n| 2.0 * (a - n)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// Anchor and positive come from the same speaker.
    pub same_speaker: bool,
}

/// Batch-all mining: every ordered `(a, p, n)` with `label(a) == label(p)`,
/// `a ≠ p` and `label(n) ≠ label(a)`.
pub fn mine_triplets<E>(embeddings: &[E], labels: &[Label], speakers: &[usize]) -> Vec<Triplet> {
    let n = embeddings.len().min(labels.len()).min(speakers.len());
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for neg in 0..n {
                if labels[neg] != labels[a] {
                    out.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: neg,
                        same_speaker: speakers[a] == speakers[p],
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct BatchTriplet {
    /// Mean loss over triplets with a positive hinge, 0 if there are none.
    pub loss: f64,
    pub active: usize,
    pub d_z: Vec<Vec<f64>>,
}

pub fn batch_triplet_loss(zs: &[Vec<f64>], triplets: &[Triplet], margin: f64) -> Result<BatchTriplet> {
    let dim = zs.first().map_or(0, Vec::len);
    let mut d_z = vec![vec![0.0; dim]; zs.len()];
    let mut sum = 0.0;
    let mut active = 0usize;
    let mut parts = Vec::new();
    for t in triplets {
        let v = triplet_loss(&zs[t.anchor], &zs[t.positive], &zs[t.negative], margin)?;
        if v.value > 0.0 {
            sum += v.value;
            active += 1;
            parts.push((t, v));
        }
    }
    if active > 0 {
        let scale = 1.0 / active as f64;
        for (t, v) in &parts {
            axpy(&mut d_z[t.anchor], &v.d_anchor, scale);
            axpy(&mut d_z[t.positive], &v.d_positive, scale);
            axpy(&mut d_z[t.negative], &v.d_negative, scale);
        }
        sum *= scale;
    }
    Ok(BatchTriplet {
        loss: sum,
        active,
        d_z,
    })
}

/// `L_total = L_cls + α·L_id + β·L_tri`.
pub fn total_loss(l_cls: f64, l_id: f64, l_tri: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_cls,
        l_id,
        l_tri,
        l_total: l_cls + weights.alpha * l_id + weights.beta * l_tri,
        triplet_count: 0,
        active_triplets: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use std::collections::BTreeSet;
    use std::f64::consts::LN_2;

    #[test]
    fn cls_zero_logit() {
        let params = HeadParams::zeros(3, 2);
        let out = cls_forward_backward(&[vec![1.0, 2.0, 3.0]], &[Label::Deceptive], &params).unwrap();
        assert_eq!(out.probabilities, vec![0.5]);
        assert!((out.loss - LN_2).abs() < 1e-15);
    }

    #[test]
    fn cls_confident_correct() {
        let mut params = HeadParams::zeros(1, 2);
        params.cls_w = vec![100.0];
        let out = cls_forward_backward(&[vec![1.0]], &[Label::Deceptive], &params).unwrap();
        assert!(out.loss < 1e-12);
        let out = cls_forward_backward(&[vec![1.0]], &[Label::Truthful], &params).unwrap();
        assert_eq!(out.loss, -(1.0 - (1.0 - PROB_EPS)).ln());
        assert!(matches!(cls_forward_backward(&[], &[], &params), Err(Error::EmptyBatch)));
    }

    #[test]
    fn grl_examples() {
        assert_eq!(grl_transform(&[1.5, -2.0], 1.0), vec![-1.5, 2.0]);
        assert!(grl_transform(&[1.5, -2.0], 0.0).iter().all(|&v| v == 0.0));
        assert_eq!(grl_transform(&[2.0, -4.0], 0.5), vec![-1.0, 2.0]);
    }

    #[test]
    fn speaker_uniform_and_confident() {
        let params = HeadParams::zeros(2, 2);
        let out = speaker_forward_backward(&[vec![0.3, 0.1]], &[1], &params, 1.0).unwrap();
        assert!((out.loss - LN_2).abs() < 1e-15);

        let mut params = HeadParams::zeros(1, 2);
        params.spk_b = vec![0.0, 60.0];
        let out = speaker_forward_backward(&[vec![0.0]], &[1], &params, 1.0).unwrap();
        assert!(out.loss < 1e-20);
        assert!(matches!(
            speaker_forward_backward(&[vec![0.0]], &[2], &params, 1.0),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    fn random_batch(seed: u64, n: usize, d: usize, c: usize) -> (Vec<Vec<f64>>, HeadParams) {
        let mut rng = stream_rng(seed, Stream::Fixture, 0);
        let zs = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        (zs, HeadParams::init(d, c, &mut rng))
    }

    fn rel(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn cls_gradients_match_finite_differences() {
        let h = 1e-5;
        let labels = [Label::Deceptive, Label::Truthful, Label::Truthful];
        for seed in 0..5 {
            let (zs, p) = random_batch(seed, 3, 4, 2);
            let out = cls_forward_backward(&zs, &labels, &p).unwrap();
            let loss = |p: &HeadParams, zs: &[Vec<f64>]| cls_forward_backward(zs, &labels, p).unwrap().loss;
            for i in 0..4 {
                let (mut a, mut b) = (p.clone(), p.clone());
                a.cls_w[i] += h;
                b.cls_w[i] -= h;
                assert!(rel(out.grad_w[i], (loss(&a, &zs) - loss(&b, &zs)) / (2.0 * h)) < 1e-4);
                for s in 0..3 {
                    let (mut za, mut zb) = (zs.clone(), zs.clone());
                    za[s][i] += h;
                    zb[s][i] -= h;
                    assert!(rel(out.d_z[s][i], (loss(&p, &za) - loss(&p, &zb)) / (2.0 * h)) < 1e-4);
                }
            }
            let (mut a, mut b) = (p.clone(), p.clone());
            a.cls_b += h;
            b.cls_b -= h;
            assert!(rel(out.grad_b, (loss(&a, &zs) - loss(&b, &zs)) / (2.0 * h)) < 1e-4);
        }
    }

    #[test]
    fn speaker_gradients_and_reversal() {
        let h = 1e-5;
        let speakers = [0, 2, 1, 2];
        for seed in 0..5 {
            let (zs, p) = random_batch(seed, 4, 3, 3);
            let out = speaker_forward_backward(&zs, &speakers, &p, 0.7).unwrap();
            let loss = |p: &HeadParams, zs: &[Vec<f64>]| speaker_forward_backward(zs, &speakers, p, 0.7).unwrap().loss;
            for i in 0..p.spk_w.as_slice().len() {
                let (mut a, mut b) = (p.clone(), p.clone());
                a.spk_w.as_mut_slice()[i] += h;
                b.spk_w.as_mut_slice()[i] -= h;
                assert!(rel(out.grad_w.as_slice()[i], (loss(&a, &zs) - loss(&b, &zs)) / (2.0 * h)) < 1e-4);
            }
            for s in 0..4 {
                for i in 0..3 {
                    let (mut za, mut zb) = (zs.clone(), zs.clone());
                    za[s][i] += h;
                    zb[s][i] -= h;
                    let numeric = (loss(&p, &za) - loss(&p, &zb)) / (2.0 * h);
                    assert!(rel(out.d_z[s][i], numeric) < 1e-4);
                    assert_eq!(out.d_z_reversed[s][i], -0.7 * out.d_z[s][i]);
                }
            }
        }
    }

    #[test]
    fn triplet_examples() {
        let a = [0.0, 0.0];
        let v = triplet_loss(&a, &a, &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.d_anchor.iter().all(|&x| x == 0.0));
        let v = triplet_loss(&a, &[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert_eq!(v.value, 0.5);
    }

    #[test]
    fn triplet_subgradients_match_finite_differences() {
        let h = 1e-5;
        for seed in 0..20 {
            let (zs, _) = random_batch(seed, 3, 4, 2);
            let v = triplet_loss(&zs[0], &zs[1], &zs[2], 0.2).unwrap();
            if v.value.abs() < 1e-4 {
                continue;
            }
            let f = |z: &[Vec<f64>]| triplet_loss(&z[0], &z[1], &z[2], 0.2).unwrap().value;
            for (which, grad) in [&v.d_anchor, &v.d_positive, &v.d_negative].into_iter().enumerate() {
                for i in 0..4 {
                    let (mut a, mut b) = (zs.clone(), zs.clone());
                    a[which][i] += h;
                    b[which][i] -= h;
                    let numeric = (f(&a) - f(&b)) / (2.0 * h);
                    assert!((grad[i] - numeric).abs() < 1e-6, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn mining_examples() {
        let l = |v: &[u8]| v.iter().map(|&x| Label::from_u8(x).unwrap()).collect::<Vec<_>>();
        let got: Vec<(usize, usize, usize)> = mine_triplets(&[(); 3], &l(&[1, 1, 0]), &[0, 1, 0])
            .into_iter()
            .map(|t| (t.anchor, t.positive, t.negative))
            .collect();
        assert_eq!(got, vec![(0, 1, 2), (1, 0, 2)]);
        assert!(mine_triplets(&[(); 3], &l(&[0, 0, 0]), &[0, 1, 2]).is_empty());
        let zs = vec![vec![0.0]; 3];
        assert_eq!(batch_triplet_loss(&zs, &[], 0.2).unwrap().loss, 0.0);
    }

    /// Labels [1,1,0,0]: brute-force over all index triples.
    #[test]
    fn mining_brute_force() {
        let labels = [Label::Deceptive, Label::Deceptive, Label::Truthful, Label::Truthful];
        let speakers = [0, 1, 0, 1];
        let mut oracle = BTreeSet::new();
        for a in 0..4 {
            for p in 0..4 {
                for n in 0..4 {
                    if a != p && labels[a] == labels[p] && labels[n] != labels[a] {
                        oracle.insert((a, p, n));
                    }
                }
            }
        }
        let got: BTreeSet<_> = mine_triplets(&[(); 4], &labels, &speakers)
            .into_iter()
            .map(|t| (t.anchor, t.positive, t.negative))
            .collect();
        assert_eq!(oracle.len(), 8);
        assert_eq!(got, oracle);
    }

    #[test]
    fn mining_keeps_both_speaker_kinds() {
        let labels = [Label::Deceptive; 3].into_iter().chain([Label::Truthful]).collect::<Vec<_>>();
        let t = mine_triplets(&[(); 4], &labels, &[0, 0, 1, 2]);
        assert!(t.iter().any(|t| t.same_speaker));
        assert!(t.iter().any(|t| !t.same_speaker));
    }

    #[test]
    fn total_loss_examples() {
        let w0 = LossWeights { alpha: 0.0, beta: 0.0, ..Default::default() };
        assert_eq!(total_loss(0.6, 0.7, 0.2, &w0).l_total, 0.6);
        let w = LossWeights::default();
        assert!((total_loss(0.6, 0.7, 0.2, &w).l_total - 0.69).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).l_total, 0.0);
    }
}
