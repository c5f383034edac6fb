//! Synthetic cue corpora with planted deception bursts and a per-speaker
//! feature offset.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cues::{CorpusManifest, FrameCueRecord, Label, VideoCueTrack, AU_MAX, AU_MIN, GAZE_DIM};
use crate::encoder::SpeakerConfound;
use crate::error::{Error, Result};
use crate::preprocess::SegmentSelection;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub videos_per_speaker: usize,
    pub frames_per_video: usize,
    pub deception_rate: f64,
    /// Amplitude added to every AU channel inside a burst.
    pub cue_burst_strength: f64,
    pub burst_length_frames: usize,
    pub bursts_per_video: usize,
    /// Fraction of feature dimensions carrying the speaker offset.
    pub identity_confound: f64,
    /// Standard deviation of the offset entries.
    pub confound_scale: f64,
    pub noise_std: f64,
    pub au_count: usize,
    pub keypoint_count: usize,
    pub fps: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            videos_per_speaker: 4,
            frames_per_video: 256,
            deception_rate: 0.5,
            cue_burst_strength: 1.0,
            burst_length_frames: 8,
            bursts_per_video: 3,
            identity_confound: 0.0,
            confound_scale: 1.0,
            noise_std: 0.2,
            au_count: 17,
            keypoint_count: 5,
            fps: 30.0,
            feature_dim: 32,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_speakers", self.n_speakers),
            ("videos_per_speaker", self.videos_per_speaker),
            ("frames_per_video", self.frames_per_video),
            ("burst_length_frames", self.burst_length_frames),
            ("bursts_per_video", self.bursts_per_video),
            ("au_count", self.au_count),
            ("keypoint_count", self.keypoint_count),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synth.{name} must be at least 1")));
            }
        }
        let checks = [
            ("deception_rate", self.deception_rate > 0.0 && self.deception_rate < 1.0),
            ("cue_burst_strength", self.cue_burst_strength >= 0.0),
            ("identity_confound", (0.0..=1.0).contains(&self.identity_confound)),
            ("confound_scale", self.confound_scale >= 0.0),
            ("noise_std", self.noise_std >= 0.0),
            ("fps", self.fps > 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Config(format!("synth.{name} is out of range")));
            }
        }
        self.burst_slots().map(|_| ())
    }

    /// Equal slots inside `[L, T − L)`, one burst per slot.
    fn burst_slots(&self) -> Result<Vec<Range<usize>>> {
        let l = self.burst_length_frames;
        let t = self.frames_per_video;
        let n = self.bursts_per_video;
        let usable = t.saturating_sub(2 * l);
        if usable / n < l {
            return Err(Error::InfeasibleConfig(format!(
                "{n} bursts of {l} frames do not fit in {t} frames with {l}-frame margins"
            )));
        }
        let width = usable / n;
        Ok((0..n).map(|i| l + i * width..l + (i + 1) * width).collect())
    }

    pub fn n_videos(&self) -> usize {
        self.n_speakers * self.videos_per_speaker
    }
}

/// Planted burst frames per deceptive video and the speaker offsets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub bursts: BTreeMap<String, Vec<Range<usize>>>,
    pub confound: SpeakerConfound,
}

impl SynthTruth {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format("ground truth", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("ground truth", e.to_string()))
    }
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{i:03}")
}

fn speaker_offsets(cfg: &SynthConfig) -> SpeakerConfound {
    let mut rng = stream_rng(cfg.seed, Stream::Synth, 0);
    let d = cfg.feature_dim;
    let carried = (cfg.identity_confound * d as f64).round() as usize;
    let mut dims: Vec<usize> = (0..d).collect();
    dims.shuffle(&mut rng);
    dims.truncate(carried);
    let offsets = (0..cfg.n_speakers)
        .map(|s| {
            let mut v = vec![0.0; d];
            for &k in &dims {
                let z: f64 = StandardNormal.sample(&mut rng);
                v[k] = cfg.confound_scale * z;
            }
            (speaker_name(s), v)
        })
        .collect();
    SpeakerConfound { offsets }
}

/// Per speaker, `floor(rate·V)` deceptive videos plus one more with
/// probability equal to the remainder, at shuffled positions.
fn speaker_labels<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<Label> {
    let expected = cfg.deception_rate * cfg.videos_per_speaker as f64;
    let mut n_dec = expected.floor() as usize;
    if rng.random::<f64>() < expected - expected.floor() {
        n_dec += 1;
    }
    let mut labels: Vec<Label> = (0..cfg.videos_per_speaker)
        .map(|i| if i < n_dec { Label::Deceptive } else { Label::Truthful })
        .collect();
    labels.shuffle(rng);
    labels
}

fn video_track<R: Rng>(
    cfg: &SynthConfig,
    video_id: String,
    speaker_id: String,
    label: Label,
    slots: &[Range<usize>],
    rng: &mut R,
) -> (VideoCueTrack, Vec<Range<usize>>) {
    let l = cfg.burst_length_frames;
    let bursts: Vec<Range<usize>> = if label == Label::Deceptive {
        slots
            .iter()
            .map(|slot| {
                let start = rng.random_range(slot.start..=slot.end - l);
                start..start + l
            })
            .collect()
    } else {
        Vec::new()
    };
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    let au_base: Vec<f64> = (0..cfg.au_count).map(|_| rng.random_range(0.5..1.5)).collect();
    let gaze_base: Vec<f64> = (0..GAZE_DIM)
        .map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    let pose_base: Vec<(f64, f64)> = (0..cfg.keypoint_count)
        .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
        .collect();
    let frames = (0..cfg.frames_per_video)
        .map(|t| {
            let boost = if bursts.iter().any(|b| b.contains(&t)) {
                cfg.cue_burst_strength
            } else {
                0.0
            };
            FrameCueRecord {
                frame_index: t,
                au_intensities: au_base
                    .iter()
                    .map(|b| (b + boost + noise.sample(rng)).clamp(AU_MIN, AU_MAX))
                    .collect(),
                gaze_descriptor: gaze_base.iter().map(|b| b + noise.sample(rng)).collect(),
                pose_keypoints: pose_base
                    .iter()
                    .map(|&(x, y)| (x + noise.sample(rng), y + noise.sample(rng)))
                    .collect(),
            }
        })
        .collect();
    let track = VideoCueTrack {
        video_id,
        speaker_id,
        label,
        fps: cfg.fps,
        au_count: cfg.au_count,
        keypoint_count: cfg.keypoint_count,
        frames,
    };
    (track, bursts)
}

/// Each speaker draws from its own RNG stream, so corpora with more speakers
/// extend rather than reshuffle smaller ones.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<(CorpusManifest, SynthTruth)> {
    cfg.validate()?;
    let slots = cfg.burst_slots()?;
    let mut tracks = Vec::with_capacity(cfg.n_videos());
    let mut bursts = BTreeMap::new();
    for s in 0..cfg.n_speakers {
        let mut rng = stream_rng(cfg.seed, Stream::Synth, 1 + s as u32);
        let speaker = speaker_name(s);
        for (v, label) in speaker_labels(cfg, &mut rng).into_iter().enumerate() {
            let id = format!("{speaker}_v{v:03}");
            let (track, planted) = video_track(cfg, id.clone(), speaker.clone(), label, &slots, &mut rng);
            if !planted.is_empty() {
                bursts.insert(id, planted);
            }
            tracks.push(track);
        }
    }
    let manifest = CorpusManifest::from_tracks(tracks, cfg.au_count, cfg.keypoint_count)?;
    Ok((
        manifest,
        SynthTruth {
            bursts,
            confound: speaker_offsets(cfg),
        },
    ))
}

/// Fraction of planted burst frames present in the selection.
pub fn selection_hit_rate(selection: &SegmentSelection, video_id: &str, bursts: &[Range<usize>]) -> Result<f64> {
    if selection.video_id != video_id {
        return Err(Error::VideoMismatch {
            selection: selection.video_id.clone(),
            truth: video_id.to_string(),
        });
    }
    let planted: usize = bursts.iter().map(|b| b.len()).sum();
    if planted == 0 {
        return Err(Error::NoBursts(video_id.to_string()));
    }
    let hits = selection
        .all_indices()
        .filter(|i| bursts.iter().any(|b| b.contains(i)))
        .count();
    Ok(hits as f64 / planted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{preprocess, PreprocessConfig, Strategy};

    #[test]
    fn deterministic() {
        let cfg = SynthConfig { identity_confound: 0.5, ..Default::default() };
        let (a, ta) = generate_corpus(&cfg).unwrap();
        let (b, tb) = generate_corpus(&cfg).unwrap();
        assert_eq!(a.videos(), b.videos());
        assert_eq!(ta, tb);
        let other = SynthConfig { seed: 7, ..cfg };
        assert_ne!(generate_corpus(&other).unwrap().0.videos(), a.videos());
    }

    #[test]
    fn zero_confound_is_zero() {
        let (_, truth) = generate_corpus(&SynthConfig::default()).unwrap();
        assert_eq!(truth.confound.offsets.len(), 4);
        assert!(truth.confound.offsets.values().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn confound_fraction() {
        let cfg = SynthConfig { identity_confound: 0.25, feature_dim: 16, ..Default::default() };
        let (_, truth) = generate_corpus(&cfg).unwrap();
        for v in truth.confound.offsets.values() {
            assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 4);
        }
    }

    #[test]
    fn tracks_are_valid_and_bursts_sit_in_margins() {
        let cfg = SynthConfig { cue_burst_strength: 2.0, ..Default::default() };
        let (m, truth) = generate_corpus(&cfg).unwrap();
        for v in m.videos() {
            v.validate().unwrap();
            let planted = truth.bursts.get(&v.video_id);
            assert_eq!(planted.is_some(), v.label == Label::Deceptive);
            for b in planted.into_iter().flatten() {
                assert_eq!(b.len(), cfg.burst_length_frames);
                assert!(b.start >= cfg.burst_length_frames);
                assert!(b.end <= cfg.frames_per_video - cfg.burst_length_frames);
            }
        }
    }

    #[test]
    fn burst_strength_changes_only_burst_frames() {
        let cfg = SynthConfig { cue_burst_strength: 0.0, ..Default::default() };
        let (flat, _) = generate_corpus(&cfg).unwrap();
        let boosted_cfg = SynthConfig { cue_burst_strength: 3.0, ..cfg };
        let (boosted, _) = generate_corpus(&boosted_cfg).unwrap();
        // Same random draws; only burst frames differ.
        for (a, b) in flat.videos().iter().zip(boosted.videos()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.frames[0], b.frames[0]);
        }
    }

    #[test]
    fn infeasible_burst() {
        let cfg = SynthConfig { frames_per_video: 20, burst_length_frames: 8, ..Default::default() };
        assert!(matches!(generate_corpus(&cfg), Err(Error::InfeasibleConfig(_))));
    }

    #[test]
    fn label_rate_over_many_videos() {
        let cfg = SynthConfig {
            n_speakers: 200,
            videos_per_speaker: 7,
            frames_per_video: 40,
            burst_length_frames: 4,
            bursts_per_video: 1,
            deception_rate: 0.3,
            ..Default::default()
        };
        let (m, _) = generate_corpus(&cfg).unwrap();
        let n = m.len() as f64;
        let dec = m.videos().iter().filter(|v| v.label == Label::Deceptive).count() as f64;
        let sd = (0.3 * 0.7 / n).sqrt();
        assert!((dec / n - 0.3).abs() < 4.0 * sd);
    }

    #[test]
    fn hit_rate_examples() {
        let cfg = SynthConfig {
            frames_per_video: 100,
            cue_burst_strength: 3.0,
            deception_rate: 0.9,
            ..Default::default()
        };
        let (m, truth) = generate_corpus(&cfg).unwrap();
        let (id, bursts) = truth.bursts.iter().next().unwrap();
        let sel = preprocess(m.video(id).unwrap(), &PreprocessConfig::default()).unwrap();
        assert_eq!(selection_hit_rate(&sel, id, bursts).unwrap(), 1.0);
        let disjoint = SegmentSelection { segments: vec![vec![0, 1, 2]], ..sel.clone() };
        assert_eq!(selection_hit_rate(&disjoint, id, bursts).unwrap(), 0.0);
        assert!(matches!(
            selection_hit_rate(&sel, "other", bursts),
            Err(Error::VideoMismatch { .. })
        ));
    }

    #[test]
    fn au_beats_uniform_on_strong_bursts() {
        let cfg = SynthConfig {
            frames_per_video: 512,
            cue_burst_strength: 2.0,
            noise_std: 0.1,
            ..Default::default()
        };
        let (m, truth) = generate_corpus(&cfg).unwrap();
        let rate = |strategy| {
            let pc = PreprocessConfig { strategy, ..Default::default() };
            truth
                .bursts
                .iter()
                .map(|(id, b)| selection_hit_rate(&preprocess(m.video(id).unwrap(), &pc).unwrap(), id, b).unwrap())
                .sum::<f64>()
        };
        assert!(rate(Strategy::Au) > rate(Strategy::Uniform));
    }
}
