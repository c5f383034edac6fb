//! Post-hoc linear speaker probe on frozen embeddings.
//!
//! Per speaker, videos at even positions train the probe and videos at odd
//! positions score it. Features are standardized with training-split
//! statistics. The probe is multinomial logistic regression fitted with
//! full-batch Adam.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            adam: AdamConfig {
                lr: 0.05,
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
        }
    }
}

/// Train/test split by within-speaker position.
pub fn split(speakers: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::HashMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, &s) in speakers.iter().enumerate() {
        let k = seen.entry(s).or_insert(0usize);
        if *k % 2 == 0 {
            train.push(i);
        } else {
            test.push(i);
        }
        *k += 1;
    }
    (train, test)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Held-out accuracy in percent, or `None` when the split leaves no test
/// videos.
pub fn speaker_probe_accuracy(
    embeddings: &[Vec<f64>],
    speakers: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<Option<f64>> {
    if embeddings.len() != speakers.len() {
        return Err(Error::LengthMismatch {
            what: "probe embeddings vs speakers".into(),
            expected: speakers.len(),
            found: embeddings.len(),
        });
    }
    if let Some(&bad) = speakers.iter().find(|&&s| s >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: n_classes,
        });
    }
    let (train, test) = split(speakers);
    if train.is_empty() || test.is_empty() {
        return Ok(None);
    }
    let d = embeddings[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        crate::linalg::axpy(&mut mean, &embeddings[i], 1.0 / n);
    }
    let mut std = vec![0.0; d];
    for &i in &train {
        for (k, s) in std.iter_mut().enumerate() {
            *s += (embeddings[i][k] - mean[k]).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.iter().map(|v| v.sqrt().max(1e-12)).collect();
    let x: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();

    let mut w = Matrix::zeros(n_classes, d);
    let mut b = vec![0.0; n_classes];
    let mut state = AdamState::new(&[n_classes * d, n_classes]);
    for _ in 0..cfg.iterations {
        let mut gw = Matrix::zeros(n_classes, d);
        let mut gb = vec![0.0; n_classes];
        for &i in &train {
            let mut p = w.affine(&x[i], &b);
            softmax_in_place(&mut p);
            p[speakers[i]] -= 1.0;
            gw.add_outer(&p, &x[i], 1.0 / n);
            crate::linalg::axpy(&mut gb, &p, 1.0 / n);
        }
        adam_step(
            &mut [("probe.w", w.as_mut_slice()), ("probe.b", &mut b)],
            &[("probe.w", Some(gw.as_slice())), ("probe.b", Some(&gb))],
            &mut state,
            &cfg.adam,
        )?;
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let logits = w.affine(&x[i], &b);
            let best = (0..n_classes)
                .max_by(|&a, &c| logits[a].total_cmp(&logits[c]).then(c.cmp(&a)))
                .expect("at least one class");
            best == speakers[i]
        })
        .count();
    Ok(Some(100.0 * correct as f64 / test.len() as f64))
}
