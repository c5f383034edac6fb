//! Temporal segmentation and per-segment frame selection.
//!
//! A video of `T` frames is split into `N` contiguous segments and up to `K`
//! frames are kept per segment, `N × K = 128` by default. Short videos
//! (`T < 128`) keep every frame. Non-uniform strategies rank frames by a
//! per-frame importance score computed from the cue track.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cues::VideoCueTrack;
use crate::error::{Error, Result};

/// Total frame budget across all segments.
pub const FRAME_BUDGET: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Uniform,
    Au,
    MicroExpression,
    Gaze,
    Posture,
    Fusion,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Uniform,
        Strategy::Au,
        Strategy::MicroExpression,
        Strategy::Gaze,
        Strategy::Posture,
        Strategy::Fusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Au => "au",
            Strategy::MicroExpression => "micro-expression",
            Strategy::Gaze => "gaze",
            Strategy::Posture => "posture",
            Strategy::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy `{s}` (expected one of uniform, au, micro-expression, gaze, posture, fusion)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub n_segments: usize,
    pub frames_per_segment: usize,
    pub strategy: Strategy,
    /// AU intensity at or above which a channel counts as active.
    pub au_active_threshold: f64,
    /// Activation episodes shorter than this (seconds) are micro-expressions.
    pub micro_expression_max_duration: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            n_segments: 8,
            frames_per_segment: 16,
            strategy: Strategy::Uniform,
            au_active_threshold: 1.0,
            micro_expression_max_duration: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn budget(&self) -> usize {
        self.n_segments * self.frames_per_segment
    }

    /// Structural validation. The `N × K = 128` budget is enforced separately by
    /// [`PreprocessConfig::validate_budget`] so tests may use other budgets.
    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 || self.frames_per_segment == 0 {
            return Err(Error::Config(
                "n_segments and frames_per_segment must be at least 1".into(),
            ));
        }
        if !(self.micro_expression_max_duration.is_finite() && self.micro_expression_max_duration > 0.0) || !self.au_active_threshold.is_finite() {
            return Err(Error::Config(
                "micro_expression_max_duration must be positive and au_active_threshold finite"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn validate_budget(&self) -> Result<()> {
        self.validate()?;
        if self.budget() != FRAME_BUDGET {
            return Err(Error::Config(format!(
                "n_segments × frames_per_segment = {} × {} = {}, expected {FRAME_BUDGET}",
                self.n_segments,
                self.frames_per_segment,
                self.budget()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSelection {
    pub video_id: String,
    pub strategy: Strategy,
    pub n_segments: usize,
    pub frames_per_segment: usize,
    /// One ascending list of frame indices per segment.
    pub segments: Vec<Vec<usize>>,
    /// Per-frame importance scores; `None` for score-free uniform sampling.
    pub scores: Option<Vec<f64>>,
}

impl SegmentSelection {
    pub fn total_selected(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }

    pub fn all_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments.iter().flatten().copied()
    }
}

/// Splits `[0, t)` into `n` contiguous ranges whose lengths differ by at most
/// one; the remainder goes to the earliest segments.
pub fn segment_ranges(t: usize, n: usize) -> Result<Vec<Range<usize>>> {
    if t == 0 {
        return Err(Error::EmptyVideo);
    }
    if n == 0 {
        return Err(Error::Config("segment count must be at least 1".into()));
    }
    let base = t / n;
    let extra = t % n;
    let mut start = 0;
    Ok((0..n)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Sum of AU intensities per frame.
pub fn score_au(track: &VideoCueTrack) -> Vec<f64> {
    track
        .frames
        .iter()
        .map(|f| f.au_intensities.iter().sum())
        .collect()
}

/// Number of AU channels whose activation episode covering frame `t` is
/// transient. An episode is a maximal run of frames with intensity ≥
/// `threshold`; it is transient when `run_length / fps < max_duration`.
pub fn score_micro_expression(track: &VideoCueTrack, threshold: f64, max_duration: f64) -> Vec<f64> {
    let t_len = track.len();
    let mut scores = vec![0.0; t_len];
    for channel in 0..track.au_count {
        let mut t = 0;
        while t < t_len {
            if track.frames[t].au_intensities[channel] < threshold {
                t += 1;
                continue;
            }
            let start = t;
            while t < t_len && track.frames[t].au_intensities[channel] >= threshold {
                t += 1;
            }
            let duration = (t - start) as f64 / track.fps;
            if duration < max_duration {
                for s in &mut scores[start..t] {
                    *s += 1.0;
                }
            }
        }
    }
    scores
}

/// Euclidean distance of each frame's gaze descriptor from the video mean.
pub fn score_gaze(track: &VideoCueTrack) -> Vec<f64> {
    let dim = track.frames[0].gaze_descriptor.len();
    let mut mean = vec![0.0; dim];
    for f in &track.frames {
        for (m, &g) in mean.iter_mut().zip(&f.gaze_descriptor) {
            *m += g;
        }
    }
    let n = track.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    track
        .frames
        .iter()
        .map(|f| crate::linalg::squared_distance(&f.gaze_descriptor, &mean).sqrt())
        .collect()
}

/// Summed keypoint displacement from the previous frame; the first frame is 0.
pub fn score_posture(track: &VideoCueTrack) -> Vec<f64> {
    let mut scores = Vec::with_capacity(track.len());
    scores.push(0.0);
    for pair in track.frames.windows(2) {
        let moved = pair[1]
            .pose_keypoints
            .iter()
            .zip(&pair[0].pose_keypoints)
            .map(|(&(x1, y1), &(x0, y0))| (x1 - x0).hypot(y1 - y0))
            .sum();
        scores.push(moved);
    }
    scores
}

fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / span).collect()
}

/// Equal-weight mean of the four per-video min-max normalized score vectors.
pub fn fuse_scores(au: &[f64], micro: &[f64], gaze: &[f64], posture: &[f64]) -> Result<Vec<f64>> {
    let t = au.len();
    for (name, v) in [("micro-expression", micro), ("gaze", gaze), ("posture", posture)] {
        if v.len() != t {
            return Err(Error::LengthMismatch {
                what: format!("{name} scores vs au scores"),
                expected: t,
                found: v.len(),
            });
        }
    }
    let parts = [au, micro, gaze, posture].map(min_max_normalize);
    Ok((0..t)
        .map(|i| parts.iter().map(|p| p[i]).sum::<f64>() / 4.0)
        .collect())
}

/// Per range, keeps the `k` highest-scoring frames (ties to the lower index),
/// returned in temporal order.
pub fn select_top_k(scores: &[f64], ranges: &[Range<usize>], k: usize) -> Vec<Vec<usize>> {
    ranges
        .iter()
        .map(|r| {
            let mut idx: Vec<usize> = r.clone().collect();
            if idx.len() > k {
                idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                idx.truncate(k);
                idx.sort_unstable();
            }
            idx
        })
        .collect()
}

/// Evenly spaced frames within `range`, endpoints included; the midpoint when
/// `k == 1`.
pub fn select_uniform(range: Range<usize>, k: usize) -> Vec<usize> {
    let len = range.len();
    if len == 0 || k == 0 {
        return Vec::new();
    }
    if k == 1 {
        return vec![range.start + (len - 1) / 2];
    }
    let step = (len - 1) as f64 / (k - 1) as f64;
    let mut out: Vec<usize> = (0..k)
        .map(|j| range.start + (j as f64 * step).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Importance scores for a scored strategy; `None` for uniform.
pub fn strategy_scores(track: &VideoCueTrack, config: &PreprocessConfig) -> Result<Option<Vec<f64>>> {
    let micro =
        || score_micro_expression(track, config.au_active_threshold, config.micro_expression_max_duration);
    Ok(match config.strategy {
        Strategy::Uniform => None,
        Strategy::Au => Some(score_au(track)),
        Strategy::MicroExpression => Some(micro()),
        Strategy::Gaze => Some(score_gaze(track)),
        Strategy::Posture => Some(score_posture(track)),
        Strategy::Fusion => Some(fuse_scores(
            &score_au(track),
            &micro(),
            &score_gaze(track),
            &score_posture(track),
        )?),
    })
}

/// Segments the track and selects frames per the configured strategy.
pub fn preprocess(track: &VideoCueTrack, config: &PreprocessConfig) -> Result<SegmentSelection> {
    config.validate()?;
    let t = track.len();
    let ranges = segment_ranges(t, config.n_segments)?;
    let scores = strategy_scores(track, config)?;
    let k = config.frames_per_segment;
    let segments = if t < FRAME_BUDGET {
        ranges.iter().map(|r| r.clone().collect()).collect()
    } else {
        match &scores {
            None => ranges.iter().map(|r| select_uniform(r.clone(), k)).collect(),
            Some(s) => select_top_k(s, &ranges, k),
        }
    };
    Ok(SegmentSelection {
        video_id: track.video_id.clone(),
        strategy: config.strategy,
        n_segments: config.n_segments,
        frames_per_segment: k,
        segments,
        scores,
    })
}
