//! Positive-class F1, accuracy and ROC AUC, all in percent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[u8], labels: &[u8]) -> Result<Self> {
        check_pair(predictions.len(), labels.len())?;
        let mut c = Confusion::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                (0, 1) => c.fn_ += 1,
                _ => {
                    return Err(Error::Validation(format!(
                        "binary values expected, got prediction {p} label {y}"
                    )))
                }
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        // 2·P·R/(P+R) reduced to counts: one correctly rounded division.
        (200 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }

    pub fn accuracy(&self) -> f64 {
        (100 * (self.tp + self.tn)) as f64 / self.total() as f64
    }
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    if a != b {
        return Err(Error::LengthMismatch {
            what: "predictions vs labels".into(),
            expected: b,
            found: a,
        });
    }
    Ok(())
}

pub fn f1_positive(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    Ok(Confusion::from_predictions(predictions, labels)?.f1())
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    Ok(Confusion::from_predictions(predictions, labels)?.accuracy())
}

/// Mann–Whitney AUC via average ranks: pairs with a higher positive score
/// count 1, ties count ½.
///
/// Ranks are kept doubled so every intermediate is an exact integer; the
/// result equals the pairwise count to the last bit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum over positives of 2·rank, ranks 1-based and averaged over ties.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_rank = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += doubled_rank * pos_in_group;
        i = j + 1;
    }
    let np = n_pos as u128;
    let doubled_u = doubled_rank_sum - np * (np + 1);
    Ok((100 * doubled_u) as f64 / (2 * np * n_neg as u128) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub acc: f64,
    /// `None` when the evaluation set holds a single class.
    pub auc: Option<f64>,
    pub counts: Confusion,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Scores are deceptive-class probabilities; the decision threshold is 0.5.
pub fn report(scores: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    let predictions: Vec<u8> = scores.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let counts = Confusion::from_predictions(&predictions, labels)?;
    let auc = match auc(scores, labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedAuc) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        f1: counts.f1(),
        acc: counts.accuracy(),
        auc,
        counts,
        n_pos: counts.tp + counts.fn_,
        n_neg: counts.tn + counts.fp,
    })
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let auc = self
            .auc
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        writeln!(f, "{:<8}{:>10}", "metric", "value")?;
        writeln!(f, "{:<8}{:>10.2}", "F1", self.f1)?;
        writeln!(f, "{:<8}{:>10.2}", "ACC", self.acc)?;
        writeln!(f, "{:<8}{:>10}", "AUC", auc)?;
        write!(
            f,
            "tp={} fp={} tn={} fn={} (pos={} neg={})",
            self.counts.tp, self.counts.fp, self.counts.tn, self.counts.fn_, self.n_pos, self.n_neg
        )
    }
}
