//! Per-frame behavioral cue tracks and corpus manifests.
//!
//! A cue track is the stand-in for a raw video: one record per frame with
//! OpenFace AU intensities, the 36-dimensional OpenFace gaze descriptor and
//! MediaPipe pose keypoints, plus the video's label and speaker.
//!
//! Track file layout (UTF-8, `\n` line endings):
//!
//! ```text
//! # video_id=v0001\tspeaker_id=spk03\tlabel=1\tfps=30\tau=2\tkeypoints=1
//! 0\t0.5,1.5\t<36 comma-separated gaze values>\t0.25,0.75
//! 1\t...
//! ```
//!
//! Data lines are `frame_index`, `au`, `gaze`, `pose` separated by tabs;
//! `pose` is `x1,y1,x2,y2,...`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GAZE_DIM: usize = 36;
pub const AU_MIN: f64 = 0.0;
pub const AU_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Truthful,
    Deceptive,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Truthful => 0,
            Label::Deceptive => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Truthful),
            1 => Some(Label::Deceptive),
            _ => None,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.as_u8() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameCueRecord {
    pub frame_index: usize,
    pub au_intensities: Vec<f64>,
    pub gaze_descriptor: Vec<f64>,
    /// Normalized `(x, y)` image coordinates.
    pub pose_keypoints: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoCueTrack {
    pub video_id: String,
    pub speaker_id: String,
    pub label: Label,
    pub fps: f64,
    pub au_count: usize,
    pub keypoint_count: usize,
    pub frames: Vec<FrameCueRecord>,
}

impl VideoCueTrack {
    /// Checks every track invariant. Line numbers in errors are 1-based file
    /// lines (frame `t` lives on line `t + 2`).
    pub fn validate(&self) -> Result<()> {
        check_id("video_id", &self.video_id, 1)?;
        check_id("speaker_id", &self.speaker_id, 1)?;
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Parse {
                line: 1,
                message: format!("fps must be a positive number, got {}", self.fps),
            });
        }
        if self.frames.is_empty() {
            return Err(Error::EmptyInput(format!(
                "track `{}` has no frames",
                self.video_id
            )));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            let line = t + 2;
            if frame.frame_index != t {
                return Err(Error::Contiguity {
                    line,
                    expected: t,
                    found: frame.frame_index,
                });
            }
            check_len("au", line, self.au_count, frame.au_intensities.len())?;
            check_len("gaze", line, GAZE_DIM, frame.gaze_descriptor.len())?;
            check_len("pose", line, self.keypoint_count, frame.pose_keypoints.len())?;
            for &v in &frame.au_intensities {
                if !v.is_finite() || !(AU_MIN..=AU_MAX).contains(&v) {
                    return Err(Error::OutOfRange {
                        line,
                        field: "au",
                        value: v,
                        min: AU_MIN,
                        max: AU_MAX,
                    });
                }
            }
            let finite = frame.gaze_descriptor.iter().all(|v| v.is_finite())
                && frame
                    .pose_keypoints
                    .iter()
                    .all(|(x, y)| x.is_finite() && y.is_finite());
            if !finite {
                return Err(Error::Parse {
                    line,
                    message: "non-finite gaze or pose value".into(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Canonical text form; `parse_cue_track(serialize())` reproduces `self`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# video_id={}\tspeaker_id={}\tlabel={}\tfps={}\tau={}\tkeypoints={}",
            self.video_id,
            self.speaker_id,
            self.label.as_u8(),
            self.fps,
            self.au_count,
            self.keypoint_count
        );
        for frame in &self.frames {
            let _ = write!(out, "{}\t", frame.frame_index);
            write_csv(&mut out, frame.au_intensities.iter().copied());
            out.push('\t');
            write_csv(&mut out, frame.gaze_descriptor.iter().copied());
            out.push('\t');
            write_csv(
                &mut out,
                frame.pose_keypoints.iter().flat_map(|&(x, y)| [x, y]),
            );
            out.push('\n');
        }
        out
    }
}

fn write_csv(out: &mut String, values: impl Iterator<Item = f64>) {
    for (i, v) in values.enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v}");
    }
}

fn check_len(field: &'static str, line: usize, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Schema {
            line,
            field,
            expected,
            found,
        });
    }
    Ok(())
}

fn check_id(name: &str, id: &str, line: usize) -> Result<()> {
    if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(Error::Parse {
            line,
            message: format!("{name} `{id}` must be non-empty without whitespace or '='"),
        });
    }
    Ok(())
}

struct Header {
    video_id: String,
    speaker_id: String,
    label: Label,
    fps: f64,
    au_count: usize,
    keypoint_count: usize,
}

fn parse_header(line: &str) -> Result<Header> {
    let bad = |message: String| Error::Parse { line: 1, message };
    let body = line
        .strip_prefix("# ")
        .ok_or_else(|| bad("header must start with `# `".into()))?;
    let mut fields = BTreeMap::new();
    for part in body.split('\t') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("header field `{part}` is not key=value")))?;
        if fields.insert(k, v).is_some() {
            return Err(bad(format!("header key `{k}` repeated")));
        }
    }
    let mut take = |key: &str| {
        fields
            .remove(key)
            .ok_or_else(|| bad(format!("header is missing `{key}`")))
    };
    let video_id = take("video_id")?.to_string();
    let speaker_id = take("speaker_id")?.to_string();
    let label = match take("label")? {
        "0" => Label::Truthful,
        "1" => Label::Deceptive,
        other => return Err(bad(format!("label must be 0 or 1, got `{other}`"))),
    };
    let fps_raw = take("fps")?;
    let fps: f64 = fps_raw
        .parse()
        .map_err(|_| bad(format!("fps `{fps_raw}` is not a number")))?;
    let parse_count = |key: &str, raw: &str| {
        raw.parse::<usize>()
            .map_err(|_| bad(format!("{key} `{raw}` is not a non-negative integer")))
    };
    let au_raw = take("au")?;
    let kp_raw = take("keypoints")?;
    let au_count = parse_count("au", au_raw)?;
    let keypoint_count = parse_count("keypoints", kp_raw)?;
    if let Some(extra) = fields.keys().next() {
        return Err(bad(format!("unknown header key `{extra}`")));
    }
    check_id("video_id", &video_id, 1)?;
    check_id("speaker_id", &speaker_id, 1)?;
    Ok(Header {
        video_id,
        speaker_id,
        label,
        fps,
        au_count,
        keypoint_count,
    })
}

fn parse_csv(raw: &str, line: usize, field: &'static str) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("{field}: `{tok}` is not a decimal number"),
            })
        })
        .collect()
}

fn parse_frame(raw: &str, line: usize, header: &Header) -> Result<FrameCueRecord> {
    let parts: Vec<&str> = raw.split('\t').collect();
    if parts.len() != 4 {
        return Err(Error::Parse {
            line,
            message: format!(
                "expected 4 tab-separated fields (frame_index, au, gaze, pose), found {}",
                parts.len()
            ),
        });
    }
    let frame_index = parts[0].parse::<usize>().map_err(|_| Error::Parse {
        line,
        message: format!("frame_index `{}` is not a non-negative integer", parts[0]),
    })?;
    let au = parse_csv(parts[1], line, "au")?;
    let gaze = parse_csv(parts[2], line, "gaze")?;
    let pose_flat = parse_csv(parts[3], line, "pose")?;
    check_len("au", line, header.au_count, au.len())?;
    check_len("gaze", line, GAZE_DIM, gaze.len())?;
    check_len("pose", line, 2 * header.keypoint_count, pose_flat.len())?;
    Ok(FrameCueRecord {
        frame_index,
        au_intensities: au,
        gaze_descriptor: gaze,
        pose_keypoints: pose_flat.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
    })
}

/// Parses and validates one cue track.
pub fn parse_cue_track<R: BufRead>(reader: R) -> Result<VideoCueTrack> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        None => return Err(Error::EmptyInput("cue track stream is empty".into())),
        Some((_, line)) => {
            let line = line.map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?;
            parse_header(&line)?
        }
    };
    let mut frames = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let frame = parse_frame(&line, line_no, &header)?;
        let expected = frames.len();
        if frame.frame_index != expected {
            return Err(Error::Contiguity {
                line: line_no,
                expected,
                found: frame.frame_index,
            });
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::EmptyInput(format!(
            "track `{}` has a header but no frames",
            header.video_id
        )));
    }
    let track = VideoCueTrack {
        video_id: header.video_id,
        speaker_id: header.speaker_id,
        label: header.label,
        fps: header.fps,
        au_count: header.au_count,
        keypoint_count: header.keypoint_count,
        frames,
    };
    track.validate()?;
    Ok(track)
}

pub fn read_cue_track(path: &Path) -> Result<VideoCueTrack> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_cue_track(std::io::BufReader::new(file))
}

/// On-disk manifest (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub au_count: usize,
    pub keypoint_count: usize,
    pub videos: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub track: PathBuf,
}

/// A loaded corpus. Videos are kept sorted by `video_id`; speaker classes
/// follow the lexicographic order of `speaker_id`.
#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub au_count: usize,
    pub keypoint_count: usize,
    videos: Vec<VideoCueTrack>,
    speaker_index: BTreeMap<String, usize>,
}

impl CorpusManifest {
    pub fn from_tracks(
        mut tracks: Vec<VideoCueTrack>,
        au_count: usize,
        keypoint_count: usize,
    ) -> Result<Self> {
        tracks.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        for pair in tracks.windows(2) {
            if pair[0].video_id == pair[1].video_id {
                return Err(Error::DuplicateVideo(pair[0].video_id.clone()));
            }
        }
        for track in &tracks {
            if track.au_count != au_count || track.keypoint_count != keypoint_count {
                return Err(Error::Validation(format!(
                    "track `{}` declares au={} keypoints={} but the corpus declares au={} keypoints={}",
                    track.video_id, track.au_count, track.keypoint_count, au_count, keypoint_count
                )));
            }
            track.validate()?;
        }
        let speakers: BTreeSet<&str> = tracks.iter().map(|t| t.speaker_id.as_str()).collect();
        let speaker_index = speakers
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i))
            .collect();
        Ok(Self {
            au_count,
            keypoint_count,
            videos: tracks,
            speaker_index,
        })
    }

    pub fn videos(&self) -> &[VideoCueTrack] {
        &self.videos
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn speaker_index(&self) -> &BTreeMap<String, usize> {
        &self.speaker_index
    }

    pub fn n_speakers(&self) -> usize {
        self.speaker_index.len()
    }

    pub fn speaker_class(&self, speaker_id: &str) -> Option<usize> {
        self.speaker_index.get(speaker_id).copied()
    }

    pub fn speaker_name(&self, class: usize) -> Option<&str> {
        self.speaker_index
            .iter()
            .find(|(_, &c)| c == class)
            .map(|(s, _)| s.as_str())
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoCueTrack> {
        self.videos
            .binary_search_by(|t| t.video_id.as_str().cmp(video_id))
            .ok()
            .map(|i| &self.videos[i])
    }

    /// Training with the speaker head needs at least two identities.
    pub fn require_speakers(&self, min: usize) -> Result<()> {
        if self.n_speakers() < min {
            return Err(Error::Validation(format!(
                "speaker loss needs at least {min} speaker identities, corpus has {}",
                self.n_speakers()
            )));
        }
        Ok(())
    }

    /// Writes `manifest.toml` plus `tracks/<video_id>.cues` under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        let track_dir = dir.join("tracks");
        fs::create_dir_all(&track_dir).map_err(|e| Error::io(&track_dir, e))?;
        let mut entries = Vec::with_capacity(self.videos.len());
        for track in &self.videos {
            let rel = PathBuf::from("tracks").join(format!("{}.cues", track.video_id));
            let path = dir.join(&rel);
            fs::write(&path, track.serialize()).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                video_id: track.video_id.clone(),
                track: rel,
            });
        }
        let file = ManifestFile {
            au_count: self.au_count,
            keypoint_count: self.keypoint_count,
            videos: entries,
        };
        let text = toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join("manifest.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = BTreeSet::new();
    for entry in &file.videos {
        if !seen.insert(entry.video_id.as_str()) {
            return Err(Error::DuplicateVideo(entry.video_id.clone()));
        }
    }
    let mut tracks = Vec::with_capacity(file.videos.len());
    for entry in &file.videos {
        let track_path = base.join(&entry.track);
        let track = read_cue_track(&track_path).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Validation(format!("{}: {other}", track_path.display())),
        })?;
        if track.video_id != entry.video_id {
            return Err(Error::Validation(format!(
                "{}: header video_id `{}` does not match manifest entry `{}`",
                track_path.display(),
                track.video_id,
                entry.video_id
            )));
        }
        tracks.push(track);
    }
    CorpusManifest::from_tracks(tracks, file.au_count, file.keypoint_count)
}
