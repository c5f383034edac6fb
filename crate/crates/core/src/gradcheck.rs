//! Central finite-difference check of the full model gradient.
//!
//! The numeric side only evaluates forward losses. Because of the gradient
//! reversal layer, the analytic update for a parameter upstream of `z` is not
//! the gradient of `L_total`; it is the gradient of
//! `L_cls − λ·α·L_id + β·L_tri`. The oracle therefore differentiates the three
//! loss terms separately and recombines them with the sign each parameter
//! actually sees.
//!
//! Elements whose ±step perturbation flips a ReLU or a triplet hinge are not
//! differentiable there and are skipped (and counted).

use rand::Rng;

use crate::cues::Label;
use crate::error::{Error, Result};
use crate::heads::LossWeights;
use crate::model::{
    batch_losses, loss_and_gradients, ModelDims, ModelGrads, ModelParams, PassOptions, Sample, ALIGNER_TENSORS,
    TENSOR_NAMES,
};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradient entries.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tensors: Vec<TensorReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Random toy model (dropout 0) and batch. Labels alternate in pairs
/// (`1, 1, 0, 0, ...`) so triplets exist; speakers are random.
pub fn fixture(seed: u64, dims: ModelDims, batch: usize) -> Result<(ModelParams, Vec<Sample>)> {
    if batch < 2 {
        return Err(Error::Config("gradient check needs a batch of at least 2".into()));
    }
    let mut rng = stream_rng(seed, Stream::Fixture, 0);
    let params = ModelParams::init(dims, 0.0, &mut rng)?;
    let samples = (0..batch)
        .map(|i| Sample {
            video_id: format!("g{i}"),
            pooled: (0..dims.d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: if (i / 2) % 2 == 0 {
                Label::Deceptive
            } else {
                Label::Truthful
            },
            speaker: rng.random_range(0..dims.n_speakers),
        })
        .collect();
    Ok((params, samples))
}

/// Compares the model's analytic gradients with the numeric ones.
pub fn check_gradients(
    params: &ModelParams,
    samples: &[Sample],
    weights: &LossWeights,
    step: f64,
) -> Result<Vec<TensorReport>> {
    if params.aligner.dropout_rate != 0.0 {
        return Err(Error::Config("gradient check requires dropout 0".into()));
    }
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut rng = stream_rng(0, Stream::Dropout, 0);
    let analytic = loss_and_gradients(params, &batch, weights, &PassOptions::default(), &mut rng)?;
    compare_gradients(params, samples, weights, step, &analytic.grads)
}

/// Compares the supplied gradients with the numeric ones.
pub fn compare_gradients(
    params: &ModelParams,
    samples: &[Sample],
    weights: &LossWeights,
    step: f64,
    analytic: &ModelGrads,
) -> Result<Vec<TensorReport>> {
    let batch: Vec<&Sample> = samples.iter().collect();
    let (_, _, base_pattern) = batch_losses(params, &batch, weights, true)?;

    let mut reports = Vec::with_capacity(TENSOR_NAMES.len());
    let grads = analytic.tensors();
    for (slot, (name, grad)) in grads.iter().enumerate() {
        let id_sign = if slot < ALIGNER_TENSORS {
            -weights.lambda
        } else {
            1.0
        };
        let mut report = TensorReport {
            name,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for (i, &a) in grad.iter().enumerate() {
            let eval = |delta: f64| -> Result<_> {
                let mut p = params.clone();
                p.tensors_mut()[slot].1[i] += delta;
                batch_losses(&p, &batch, weights, true)
            };
            let (up, _, up_pattern) = eval(step)?;
            let (down, _, down_pattern) = eval(-step)?;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                report.skipped += 1;
                continue;
            }
            let fd = |hi: f64, lo: f64| (hi - lo) / (2.0 * step);
            let numeric = fd(up.l_cls, down.l_cls)
                + weights.alpha * id_sign * fd(up.l_id, down.l_id)
                + weights.beta * fd(up.l_tri, down.l_tri);
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.checked += 1;
        }
        reports.push(report);
    }
    Ok(reports)
}

pub fn run_seed(seed: u64, dims: ModelDims, batch: usize, weights: &LossWeights) -> Result<GradcheckReport> {
    let (params, samples) = fixture(seed, dims, batch)?;
    Ok(GradcheckReport {
        seed,
        tensors: check_gradients(&params, &samples, weights, DEFAULT_STEP)?,
    })
}
