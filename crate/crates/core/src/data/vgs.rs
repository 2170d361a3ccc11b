//! VGS annotations as JSON lines.
//!
//! Each video contributes one header line (`"type":"video"`) written just
//! before its first record; every following `"type":"record"` line is one
//! person in one frame. Field order is fixed, so writing a parsed file
//! reproduces it byte for byte.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Speaker => "speaker",
            Role::Listener => "listener",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "speaker" => Some(Role::Speaker),
            "listener" => Some(Role::Listener),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoHeader {
    pub video: String,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
}

impl VideoHeader {
    /// Recording format of the original conversational videos.
    pub fn standard(video: impl Into<String>) -> Self {
        Self { video: video.into(), fps: 25.0, width: 1280, height: 720 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VgsRecord {
    pub video: String,
    pub frame: u32,
    pub person_id: u32,
    pub head: BBox,
    pub gaze: BBox,
    pub label: Option<Role>,
}

impl VgsRecord {
    pub fn key(&self) -> (String, u32, u32) {
        (self.video.clone(), self.frame, self.person_id)
    }

    pub fn frame_key(&self) -> FrameKey {
        FrameKey { video: self.video.clone(), frame: self.frame }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameKey {
    pub video: String,
    pub frame: u32,
}

impl FrameKey {
    pub fn new(video: impl Into<String>, frame: u32) -> Self {
        Self { video: video.into(), frame }
    }

    /// `<video>/<frame:06>`
    pub fn stem(&self) -> String {
        format!("{}/{:06}", self.video, self.frame)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VgsDataset {
    pub videos: Vec<VideoHeader>,
    pub records: Vec<VgsRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Video(VideoHeader),
    Record(VgsRecord),
}

impl VgsDataset {
    pub fn header(&self, video: &str) -> Option<&VideoHeader> {
        self.videos.iter().find(|v| v.video == video)
    }

    /// Distinct frames in order of first appearance.
    pub fn frame_keys(&self) -> Vec<FrameKey> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter_map(|r| {
                let k = r.frame_key();
                seen.insert(k.clone()).then_some(k)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let headers: HashMap<&str, &VideoHeader> = self.videos.iter().map(|v| (v.video.as_str(), v)).collect();
        let mut keys = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 1;
            let h = headers
                .get(r.video.as_str())
                .ok_or_else(|| DataError::parse(line, format!("record for unknown video {:?}", r.video)))?;
            check_record(r, h, line)?;
            if !keys.insert(r.key()) {
                return Err(DataError::DuplicateKey { line, key: format_key(r) });
            }
        }
        Ok(())
    }
}

fn format_key(r: &VgsRecord) -> String {
    format!("({}, {}, {})", r.video, r.frame, r.person_id)
}

fn check_record(r: &VgsRecord, h: &VideoHeader, line: usize) -> Result<(), DataError> {
    for (name, b) in [("head", &r.head), ("gaze", &r.gaze)] {
        if !b.is_finite() || !b.within(h.width as f64, h.height as f64) {
            return Err(DataError::OutOfBounds {
                line,
                message: format!(
                    "{name} box {:?} of {} outside {}x{} frame",
                    [b.x, b.y, b.w, b.h],
                    format_key(r),
                    h.width,
                    h.height
                ),
            });
        }
    }
    Ok(())
}

pub fn read_vgs(text: &str) -> Result<VgsDataset, DataError> {
    let mut ds = VgsDataset::default();
    let mut headers: HashMap<String, VideoHeader> = HashMap::new();
    let mut keys = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(raw).map_err(|e| DataError::parse(line, e.to_string()))?;
        match parsed {
            Line::Video(h) => {
                if headers.contains_key(&h.video) {
                    return Err(DataError::parse(line, format!("second header for video {:?}", h.video)));
                }
                if !(h.fps > 0.0) || h.width == 0 || h.height == 0 {
                    return Err(DataError::parse(line, format!("invalid header for video {:?}", h.video)));
                }
                headers.insert(h.video.clone(), h.clone());
                ds.videos.push(h);
            }
            Line::Record(r) => {
                let h = headers
                    .get(&r.video)
                    .ok_or_else(|| DataError::parse(line, format!("record before header of video {:?}", r.video)))?;
                check_record(&r, h, line)?;
                if !keys.insert(r.key()) {
                    return Err(DataError::DuplicateKey { line, key: format_key(&r) });
                }
                ds.records.push(r);
            }
        }
    }
    Ok(ds)
}

pub fn write_vgs(ds: &VgsDataset) -> Result<String, DataError> {
    ds.validate()?;
    let mut out = String::new();
    let mut emitted = HashSet::new();
    let push = |out: &mut String, line: &Line| {
        out.push_str(&serde_json::to_string(line).expect("annotation lines serialize"));
        out.push('\n');
    };
    for r in &ds.records {
        if emitted.insert(r.video.as_str()) {
            let h = ds.header(&r.video).expect("validated");
            push(&mut out, &Line::Video(h.clone()));
        }
        push(&mut out, &Line::Record(r.clone()));
    }
    for h in &ds.videos {
        if emitted.insert(h.video.as_str()) {
            push(&mut out, &Line::Video(h.clone()));
        }
    }
    Ok(out)
}
