//! Frozen segment encoders.
//!
//! The pipeline treats the video encoder as a black box mapping a segment's
//! selected frames to a `D`-dimensional feature. Two implementations exist:
//! [`FeatureBank`], which serves features extracted offline, and
//! [`SyntheticEncoder`], a seeded random projection of cue statistics used
//! for desk-scale experiments. Neither has trainable state.
//!
//! Feature bank file (`GLF1`, little endian):
//!
//! ```text
//! magic "GLF1" | u32 D | u32 entry_count
//! entry_count × { u16 id_len | id bytes | u32 segment_index | D × f32 }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cues::{FrameCueRecord, VideoCueTrack, GAZE_DIM};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::preprocess::SegmentSelection;
use crate::rng::{stream_rng, Stream};

pub const BANK_MAGIC: &[u8; 4] = b"GLF1";

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeature {
    pub values: Vec<f64>,
}

impl SegmentFeature {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Anything that turns a video's selected segments into segment features.
pub trait SegmentEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// One feature per non-empty segment, in segment order.
    fn encode_video(
        &self,
        track: &VideoCueTrack,
        selection: &SegmentSelection,
    ) -> Result<Vec<SegmentFeature>>;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    entries: BTreeMap<(String, u32), Vec<f32>>,
}

impl FeatureBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, video_id: &str, segment_index: u32, values: Vec<f32>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Dimension {
                what: format!("feature for `{video_id}` segment {segment_index}"),
                expected: self.dim,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature for `{video_id}` segment {segment_index}"
            )));
        }
        if video_id.len() > u16::MAX as usize {
            return Err(Error::Validation(format!("video_id `{video_id}` too long")));
        }
        self.entries
            .insert((video_id.to_string(), segment_index), values);
        Ok(())
    }

    /// The stored vector, widened to `f64` (exact).
    pub fn encode_from_bank(&self, video_id: &str, segment_index: u32) -> Result<SegmentFeature> {
        self.entries
            .get(&(video_id.to_string(), segment_index))
            .map(|v| SegmentFeature {
                values: v.iter().map(|&x| x as f64).collect(),
            })
            .ok_or_else(|| Error::MissingFeature {
                video_id: video_id.to_string(),
                segment_index,
            })
    }

    /// Segment count per video; errors unless every video has the same
    /// contiguous set `0..N`.
    pub fn n_segments(&self) -> Result<usize> {
        let mut per_video: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for (vid, seg) in self.entries.keys() {
            per_video.entry(vid.as_str()).or_default().push(*seg);
        }
        let mut declared = None;
        for (vid, segs) in per_video {
            let n = segs.len();
            if segs.iter().enumerate().any(|(i, &s)| s as usize != i) {
                return Err(Error::Validation(format!(
                    "feature bank: segments of `{vid}` are not contiguous from 0"
                )));
            }
            match declared {
                None => declared = Some(n),
                Some(d) if d != n => {
                    return Err(Error::Validation(format!(
                        "feature bank: `{vid}` has {n} segments, others have {d}"
                    )))
                }
                _ => {}
            }
        }
        Ok(declared.unwrap_or(0))
    }

    /// Every video of the corpus must be present with all segments.
    pub fn check_complete<'a>(&self, video_ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let n = self.n_segments()?;
        for vid in video_ids {
            for seg in 0..n.max(1) as u32 {
                if !self.entries.contains_key(&(vid.to_string(), seg)) {
                    return Err(Error::MissingFeature {
                        video_id: vid.to_string(),
                        segment_index: seg,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.entries.len() * (10 + 4 * self.dim));
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for ((vid, seg), values) in &self.entries {
            out.extend_from_slice(&(vid.len() as u16).to_le_bytes());
            out.extend_from_slice(vid.as_bytes());
            out.extend_from_slice(&seg.to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::format("feature bank", m);
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if &magic != BANK_MAGIC {
            return Err(fmt("bad magic, expected GLF1"));
        }
        let dim = read_u32(&mut bytes).ok_or_else(|| fmt("truncated header"))? as usize;
        let count = read_u32(&mut bytes).ok_or_else(|| fmt("truncated header"))? as usize;
        let mut bank = FeatureBank::new(dim);
        for i in 0..count {
            let trunc = || fmt(&format!("entry {i} truncated"));
            let mut len = [0u8; 2];
            bytes.read_exact(&mut len).map_err(|_| trunc())?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            bytes.read_exact(&mut id).map_err(|_| trunc())?;
            let id = String::from_utf8(id).map_err(|_| fmt(&format!("entry {i}: video_id is not UTF-8")))?;
            let seg = read_u32(&mut bytes).ok_or_else(trunc)?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                bytes.read_exact(&mut b).map_err(|_| trunc())?;
                values.push(f32::from_le_bytes(b));
            }
            if bank.entries.contains_key(&(id.clone(), seg)) {
                return Err(fmt(&format!("duplicate entry ({id}, {seg})")));
            }
            bank.insert(&id, seg, values)?;
        }
        if !bytes.is_empty() {
            return Err(fmt("trailing bytes after last entry"));
        }
        Ok(bank)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a bank, rejecting it when its dimension differs from the one the
    /// model is configured for.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bank = Self::from_bytes(&bytes)?;
        if let Some(d) = expected_dim {
            if d != bank.dim {
                return Err(Error::Dimension {
                    what: format!("feature bank {}", path.display()),
                    expected: d,
                    found: bank.dim,
                });
            }
        }
        Ok(bank)
    }
}

fn read_u32(bytes: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    bytes.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

impl SegmentEncoder for FeatureBank {
    fn dim(&self) -> usize {
        self.dim
    }

    /// Bank features were extracted offline, so the selection is not consulted.
    fn encode_video(
        &self,
        track: &VideoCueTrack,
        _selection: &SegmentSelection,
    ) -> Result<Vec<SegmentFeature>> {
        let n = self.n_segments()?;
        (0..n as u32)
            .map(|seg| self.encode_from_bank(&track.video_id, seg))
            .collect()
    }
}

/// Per-speaker additive offsets on encoder features. Used by synthetic
/// corpora to plant a linearly recoverable identity signal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeakerConfound {
    pub offsets: BTreeMap<String, Vec<f64>>,
}

/// Length of the cue summary vector for `au_count` AUs and `keypoint_count`
/// keypoints.
pub fn summary_len(au_count: usize, keypoint_count: usize) -> usize {
    2 * (au_count + GAZE_DIM + 2 * keypoint_count)
}

/// Mean and population standard deviation of every AU channel, gaze
/// dimension and keypoint coordinate over the frames.
pub fn cue_summary(frames: &[&FrameCueRecord]) -> Result<Vec<f64>> {
    let first = frames.first().ok_or(Error::EmptySegment)?;
    let a = first.au_intensities.len();
    let j = first.pose_keypoints.len();
    let width = a + GAZE_DIM + 2 * j;
    let n = frames.len() as f64;
    let mut sum = vec![0.0; width];
    let mut sq = vec![0.0; width];
    let mut row = Vec::with_capacity(width);
    for f in frames {
        row.clear();
        row.extend_from_slice(&f.au_intensities);
        row.extend_from_slice(&f.gaze_descriptor);
        row.extend(f.pose_keypoints.iter().flat_map(|&(x, y)| [x, y]));
        if row.len() != width {
            return Err(Error::LengthMismatch {
                what: "cue vector width within a segment".into(),
                expected: width,
                found: row.len(),
            });
        }
        for (i, &v) in row.iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let mut out = Vec::with_capacity(2 * width);
    let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
    out.extend_from_slice(&means);
    out.extend(
        sq.iter()
            .zip(&means)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt()),
    );
    Ok(out)
}

/// A fixed random projection of cue statistics, `h = P · summary(X_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEncoder {
    seed: u64,
    projection: Matrix,
    confound: Option<SpeakerConfound>,
}

impl SyntheticEncoder {
    /// `P` has i.i.d. `N(0, 1/input_len)` entries from the seed's projection
    /// stream; rebuilding with the same arguments is bit-identical.
    pub fn new(seed: u64, dim: usize, au_count: usize, keypoint_count: usize) -> Self {
        let input = summary_len(au_count, keypoint_count);
        let mut rng = stream_rng(seed, Stream::Projection, 0);
        let scale = 1.0 / (input as f64).sqrt();
        let data = (0..dim * input)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            seed,
            projection: Matrix::from_vec(dim, input, data),
            confound: None,
        }
    }

    pub fn with_confound(mut self, confound: SpeakerConfound) -> Result<Self> {
        for (speaker, offset) in &confound.offsets {
            if offset.len() != self.projection.rows() {
                return Err(Error::Dimension {
                    what: format!("speaker confound for `{speaker}`"),
                    expected: self.projection.rows(),
                    found: offset.len(),
                });
            }
        }
        self.confound = Some(confound);
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode_frames(&self, frames: &[&FrameCueRecord]) -> Result<SegmentFeature> {
        let s = cue_summary(frames)?;
        if s.len() != self.projection.cols() {
            return Err(Error::Dimension {
                what: "cue summary width".into(),
                expected: self.projection.cols(),
                found: s.len(),
            });
        }
        let zero = vec![0.0; self.projection.rows()];
        Ok(SegmentFeature {
            values: self.projection.affine(&s, &zero),
        })
    }
}

impl SegmentEncoder for SyntheticEncoder {
    fn dim(&self) -> usize {
        self.projection.rows()
    }

    /// Empty segments (only possible when `T < N`) are skipped.
    fn encode_video(
        &self,
        track: &VideoCueTrack,
        selection: &SegmentSelection,
    ) -> Result<Vec<SegmentFeature>> {
        let offset = match &self.confound {
            Some(c) => Some(c.offsets.get(&track.speaker_id).ok_or_else(|| {
                Error::Validation(format!(
                    "speaker confound has no offset for `{}`",
                    track.speaker_id
                ))
            })?),
            None => None,
        };
        let mut out = Vec::with_capacity(selection.segments.len());
        for seg in selection.segments.iter().filter(|s| !s.is_empty()) {
            let frames: Vec<&FrameCueRecord> = seg
                .iter()
                .map(|&i| {
                    track.frames.get(i).ok_or_else(|| {
                        Error::Validation(format!(
                            "selection index {i} out of range for `{}`",
                            track.video_id
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            let mut feature = self.encode_frames(&frames)?;
            if let Some(off) = offset {
                crate::linalg::axpy(&mut feature.values, off, 1.0);
            }
            out.push(feature);
        }
        if out.is_empty() {
            return Err(Error::EmptySegment);
        }
        Ok(out)
    }
}

/// Pure-function form: `(X_i, seed, D) ↦ h_i`.
pub fn encode_synthetic(frames: &[&FrameCueRecord], seed: u64, dim: usize) -> Result<SegmentFeature> {
    let first = frames.first().ok_or(Error::EmptySegment)?;
    SyntheticEncoder::new(seed, dim, first.au_intensities.len(), first.pose_keypoints.len())
        .encode_frames(frames)
}
