//! Episode and segmentation data model with JSONL / JSON file I/O.
//!
//! An episode file starts with a header line carrying the episode id, the
//! control frequency and the camera intrinsics, followed by one frame record
//! per line. Optional data is encoded by omitting the key; `null` is never
//! written and is rejected on read.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidence assigned to segments whose source did not report one.
pub const DEFAULT_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default = "one")]
    pub z_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            z_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.z_scale]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("camera intrinsics must be finite".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Validation(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }
}

/// Pixel location and depth of one tracked object in one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// object label -> camera id -> observation
pub type Tracks = BTreeMap<String, BTreeMap<String, TrackPoint>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub index: usize,
    pub action: Vec<f64>,
    pub joint_pos: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_vel: Option<Vec<f64>>,
    pub gripper: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracks: Option<Tracks>,
    /// Cartesian end-effector position, when the recording stack provides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ee_pos: Option<Vec<f64>>,
    /// Original frame index for frames of a compiled replica episode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_index: Option<usize>,
}

impl Frame {
    pub fn new(index: usize, action: Vec<f64>, joint_pos: Vec<f64>, gripper: Vec<f64>) -> Self {
        Self {
            index,
            action,
            joint_pos,
            joint_vel: None,
            gripper,
            tracks: None,
            ee_pos: None,
            source_index: None,
        }
    }

    pub fn track(&self, object: &str, camera: &str) -> Option<&TrackPoint> {
        self.tracks.as_ref()?.get(object)?.get(camera)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeHeader {
    id: String,
    control_hz: f64,
    #[serde(default)]
    cameras: BTreeMap<String, CameraIntrinsics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub frames: Vec<Frame>,
    pub control_hz: f64,
    pub cameras: BTreeMap<String, CameraIntrinsics>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn action_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.action.len())
    }

    pub fn joint_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.joint_pos.len())
    }

    pub fn gripper_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.gripper.len())
    }

    pub fn has_joint_vel(&self) -> bool {
        self.frames.first().is_some_and(|f| f.joint_vel.is_some())
    }

    pub fn has_ee_pos(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.ee_pos.is_some())
    }

    /// Checks every episode invariant. Errors name the offending file line
    /// (line 1 is the header, frame `t` sits on line `t + 2`).
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Validation(format!("episode {} has no frames", self.id)));
        }
        if !(self.control_hz.is_finite() && self.control_hz > 0.0) {
            return Err(Error::Validation(format!(
                "control_hz must be positive, got {}",
                self.control_hz
            )));
        }
        for (id, cam) in &self.cameras {
            cam.validate()
                .map_err(|e| Error::Validation(format!("camera {id}: {e}")))?;
        }

        let first = &self.frames[0];
        let d_a = first.action.len();
        let d_q = first.joint_pos.len();
        let d_v = first.joint_vel.as_ref().map(Vec::len);
        let d_g = first.gripper.len();
        let d_ee = first.ee_pos.as_ref().map(Vec::len);

        for (pos, frame) in self.frames.iter().enumerate() {
            let line = pos + 2;
            let fail = |msg: String| Err(Error::Validation(format!("{msg} at line {line}")));
            if frame.index != pos {
                return fail(format!(
                    "non-contiguous index {} (expected {pos})",
                    frame.index
                ));
            }
            if frame.action.len() != d_a {
                return fail(format!(
                    "action dimension {} differs from {d_a}",
                    frame.action.len()
                ));
            }
            if frame.joint_pos.len() != d_q {
                return fail(format!(
                    "joint_pos dimension {} differs from {d_q}",
                    frame.joint_pos.len()
                ));
            }
            if frame.joint_vel.as_ref().map(Vec::len) != d_v {
                return fail("joint_vel presence or dimension differs from first frame".into());
            }
            if frame.ee_pos.as_ref().map(Vec::len) != d_ee {
                return fail("ee_pos presence or dimension differs from first frame".into());
            }
            if frame.gripper.len() != d_g {
                return fail(format!(
                    "gripper count {} differs from {d_g}",
                    frame.gripper.len()
                ));
            }
            let vectors = [
                Some(&frame.action),
                Some(&frame.joint_pos),
                frame.joint_vel.as_ref(),
                frame.ee_pos.as_ref(),
                Some(&frame.gripper),
            ];
            if vectors
                .iter()
                .flatten()
                .any(|v| v.iter().any(|x| !x.is_finite()))
            {
                return fail("non-finite value".into());
            }
            if let Some(g) = frame.gripper.iter().find(|g| !(0.0..=1.0).contains(*g)) {
                return fail(format!("gripper value {g} outside [0,1]"));
            }
            if let Some(tracks) = &frame.tracks {
                for (object, per_cam) in tracks {
                    for (cam, p) in per_cam {
                        if !(p.u.is_finite() && p.v.is_finite() && p.depth.is_finite()) {
                            return fail(format!("non-finite track {object}/{cam}"));
                        }
                        if !self.cameras.contains_key(cam) {
                            return fail(format!("track {object} references unknown camera {cam}"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses an episode from JSONL text and validates it.
    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header: EpisodeHeader = loop {
            match lines.next() {
                None => {
                    return Err(Error::Parse {
                        line: 1,
                        message: "missing header line".into(),
                    })
                }
                Some((n, line)) => {
                    let line = line.map_err(|e| Error::Parse {
                        line: n + 1,
                        message: e.to_string(),
                    })?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break parse_line(&line, n + 1)?;
                }
            }
        };

        let mut frames = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let frame: Frame = parse_line(&line, n + 1)?;
            if frame.index != frames.len() {
                return Err(Error::Validation(format!(
                    "non-contiguous index at line {}",
                    n + 1
                )));
            }
            frames.push(frame);
        }

        let episode = Episode {
            id: header.id,
            frames,
            control_hz: header.control_hz,
            cameras: header.cameras,
        };
        episode.validate()?;
        Ok(episode)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = EpisodeHeader {
            id: self.id.clone(),
            control_hz: self.control_hz,
            cameras: self.cameras.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for frame in &self.frames {
            out.push_str(&serde_json::to_string(frame)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, line_no: usize) -> Result<T> {
    if line.contains("null") {
        // Cheap pre-check; the precise test is on the parsed value.
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if contains_null(&value) {
            return Err(Error::Parse {
                line: line_no,
                message: "null values are not allowed; omit absent keys".into(),
            });
        }
    }
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

fn contains_null(value: &serde_json::Value) -> bool {
    match value {
        serde_json::Value::Null => true,
        serde_json::Value::Array(items) => items.iter().any(contains_null),
        serde_json::Value::Object(map) => map.values().any(contains_null),
        _ => false,
    }
}

pub fn read_episode(path: impl AsRef<Path>) -> Result<Episode> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Episode::from_reader(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_episode(episode: &Episode, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    episode.validate()?;
    fs::write(path, episode.to_jsonl()?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Precision,
    Casual,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Precision => f.pad("precision"),
            Label::Casual => f.pad("casual"),
        }
    }
}

/// Inclusive labeled frame interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: Label,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    DEFAULT_CONFIDENCE
}

impl Segment {
    pub fn new(start: usize, end: usize, label: Label, confidence: f64) -> Self {
        Self {
            start,
            end,
            label,
            confidence,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segmentation {
    pub episode_id: String,
    pub segments: Vec<Segment>,
}

impl Segmentation {
    pub fn new(episode_id: impl Into<String>, segments: Vec<Segment>) -> Self {
        Self {
            episode_id: episode_id.into(),
            segments,
        }
    }

    /// Sortedness, non-overlap, `start <= end` and confidence range.
    pub fn validate(&self) -> Result<()> {
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.start > seg.end {
                return Err(Error::Validation(format!(
                    "segment {i} [{},{}] has start > end",
                    seg.start, seg.end
                )));
            }
            if !(0.0..=1.0).contains(&seg.confidence) {
                return Err(Error::Validation(format!(
                    "segment {i} confidence {} outside [0,1]",
                    seg.confidence
                )));
            }
        }
        for (i, pair) in self.segments.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if a.end >= b.start {
                return Err(Error::Validation(format!(
                    "segments {i} [{},{}] and {} [{},{}] overlap or are out of order",
                    a.start,
                    a.end,
                    i + 1,
                    b.start,
                    b.end
                )));
            }
        }
        Ok(())
    }

    /// Like [`Segmentation::validate`], plus every segment must lie in `[0, len-1]`.
    pub fn validate_within(&self, len: usize) -> Result<()> {
        self.validate()?;
        if let Some(seg) = self.segments.iter().find(|s| s.end >= len) {
            return Err(Error::Validation(format!(
                "segment [{},{}] exceeds episode length {len}",
                seg.start, seg.end
            )));
        }
        Ok(())
    }

    pub fn covers(&self, len: usize) -> bool {
        self.covered_frames() == len && self.segments.last().is_none_or(|s| s.end + 1 == len)
    }

    pub fn covered_frames(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.segments.iter().map(|s| s.label).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn read_segmentation(path: impl AsRef<Path>) -> Result<Segmentation> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let seg: Segmentation = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })?;
    seg.validate()?;
    Ok(seg)
}

pub fn write_segmentation(seg: &Segmentation, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    seg.validate()?;
    fs::write(path, seg.to_json()?).map_err(|e| Error::io(path, e))
}
