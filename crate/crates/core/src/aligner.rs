//! Segment pooling and the two-layer re-embedding MLP:
//! `z = W2 · dropout(relu(W1 · mean(H) + b1)) + b2`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignerParams {
    /// `H × D`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `D_out × H`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub dropout_rate: f64,
}

impl AlignerParams {
    pub fn zeros(d: usize, hidden: usize, d_out: usize, dropout_rate: f64) -> Self {
        Self {
            w1: Matrix::zeros(hidden, d),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(d_out, hidden),
            b2: vec![0.0; d_out],
            dropout_rate,
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        hidden: usize,
        d_out: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        Ok(Self {
            w1: Matrix::xavier_uniform(hidden, d, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::xavier_uniform(d_out, hidden, rng),
            b2: vec![0.0; d_out],
            dropout_rate,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignerGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl AlignerGrads {
    pub fn zeros_like(p: &AlignerParams) -> Self {
        Self {
            w1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
            b1: vec![0.0; p.b1.len()],
            w2: Matrix::zeros(p.w2.rows(), p.w2.cols()),
            b2: vec![0.0; p.b2.len()],
        }
    }
}

/// Intermediates kept by a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerCache {
    pub pooled: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub activation: Vec<f64>,
    /// Per hidden unit: 0 for dropped units, `1 / (1 - p)` for kept ones.
    pub dropout_mask: Vec<f64>,
}

/// Column-wise mean of the segment feature rows.
pub fn mean_pool<V: AsRef<[f64]>>(rows: &[V]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or(Error::EmptySegment)?.as_ref();
    let mut out = vec![0.0; first.len()];
    for row in rows {
        let row = row.as_ref();
        if row.len() != out.len() {
            return Err(Error::Dimension {
                what: "segment feature".into(),
                expected: out.len(),
                found: row.len(),
            });
        }
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Evaluation-mode forward pass: no dropout, no cache.
pub fn reembed_eval(pooled: &[f64], params: &AlignerParams) -> Result<Vec<f64>> {
    if pooled.len() != params.input_dim() {
        return Err(Error::Dimension {
            what: "pooled feature".into(),
            expected: params.input_dim(),
            found: pooled.len(),
        });
    }
    let act: Vec<f64> = params
        .w1
        .affine(pooled, &params.b1)
        .into_iter()
        .map(|a| a.max(0.0))
        .collect();
    Ok(params.w2.affine(&act, &params.b2))
}

/// Forward pass. A cache is returned only in training mode.
pub fn reembed_forward<R: Rng + ?Sized>(
    pooled: &[f64],
    params: &AlignerParams,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<f64>, Option<AlignerCache>)> {
    if mode == Mode::Eval {
        return Ok((reembed_eval(pooled, params)?, None));
    }
    if pooled.len() != params.input_dim() {
        return Err(Error::Dimension {
            what: "pooled feature".into(),
            expected: params.input_dim(),
            found: pooled.len(),
        });
    }
    let pre = params.w1.affine(pooled, &params.b1);
    let act: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
    let p = params.dropout_rate;
    let mask: Vec<f64> = if p > 0.0 {
        let keep = 1.0 / (1.0 - p);
        (0..act.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect()
    } else {
        vec![1.0; act.len()]
    };
    let dropped: Vec<f64> = act.iter().zip(&mask).map(|(a, m)| a * m).collect();
    let z = params.w2.affine(&dropped, &params.b2);
    let cache = AlignerCache {
        pooled: pooled.to_vec(),
        pre_activation: pre,
        activation: act,
        dropout_mask: mask,
    };
    Ok((z, Some(cache)))
}

/// Accumulates `∂L/∂θ` into `grads` and returns `∂L/∂pooled`. The ReLU
/// subgradient at exactly zero is zero.
pub fn accumulate_backward(
    params: &AlignerParams,
    cache: &AlignerCache,
    d_z: &[f64],
    grads: &mut AlignerGrads,
) -> Result<Vec<f64>> {
    let h = params.hidden();
    if cache.pooled.len() != params.input_dim()
        || cache.pre_activation.len() != h
        || cache.activation.len() != h
        || cache.dropout_mask.len() != h
    {
        return Err(Error::StaleCache(format!(
            "cache shapes (D={}, H={}) do not match parameters (D={}, H={h})",
            cache.pooled.len(),
            cache.pre_activation.len(),
            params.input_dim()
        )));
    }
    if d_z.len() != params.output_dim() {
        return Err(Error::Dimension {
            what: "upstream gradient dL/dz".into(),
            expected: params.output_dim(),
            found: d_z.len(),
        });
    }
    let dropped: Vec<f64> = cache
        .activation
        .iter()
        .zip(&cache.dropout_mask)
        .map(|(a, m)| a * m)
        .collect();
    grads.w2.add_outer(d_z, &dropped, 1.0);
    for (g, &d) in grads.b2.iter_mut().zip(d_z) {
        *g += d;
    }
    let d_dropped = params.w2.transpose_mul(d_z);
    let d_pre: Vec<f64> = d_dropped
        .iter()
        .zip(&cache.dropout_mask)
        .zip(&cache.pre_activation)
        .map(|((d, m), &a)| if a > 0.0 { d * m } else { 0.0 })
        .collect();
    grads.w1.add_outer(&d_pre, &cache.pooled, 1.0);
    for (g, &d) in grads.b1.iter_mut().zip(&d_pre) {
        *g += d;
    }
    Ok(params.w1.transpose_mul(&d_pre))
}

pub fn reembed_backward(
    params: &AlignerParams,
    cache: &AlignerCache,
    d_z: &[f64],
) -> Result<(AlignerGrads, Vec<f64>)> {
    let mut grads = AlignerGrads::zeros_like(params);
    let d_pooled = accumulate_backward(params, cache, d_z, &mut grads)?;
    Ok((grads, d_pooled))
}
