//! End-to-end inference: face tracks, speaker labels, identity maps,
//! detection and matching, with overlays and JSON-lines outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::{mfcc_extract, MfccConfig};
use crate::data::{load_clip, tracks_from_records, IdentityRow, Role, VgsDataset, VgsRecord};
use crate::detector::{Detector, DetectorConfig, DetectorSample, GazeCandidate};
use crate::enhance::{build_identity_maps, enhance_frame, IdentityMaps};
use crate::eval::{write_detections, Detection, GroundTruth};
use crate::geometry::BBox;
use crate::matcher::{
    match_subjects, write_matches, MatchRecord, MatchResult, Matcher, MatcherSample, SubjectDescriptor,
};
use crate::nn::{SgdConfig, Tensor};
use crate::speaker::{classify_speakers, identity_rows, SyncModel, SyncTrainConfig};
use crate::util::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{stage}: checkpoint {path} not found")]
    MissingCheckpoint { stage: &'static str, path: String },
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("{stage} at frame {frame}: {message}")]
    Frame { stage: &'static str, frame: u32, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: e.to_string() }
}

fn at_frame<E: std::fmt::Display>(stage: &'static str, frame: u32) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Frame { stage, frame, message: e.to_string() }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Clip directory: `frames/`, `audio.wav`, `annotations.vgs.jsonl`.
    pub input: PathBuf,
    pub output: PathBuf,
    pub sync_checkpoint: PathBuf,
    pub detector_checkpoint: PathBuf,
    pub matcher_checkpoint: PathBuf,
    /// Speaker threshold; `None` uses the one stored with the sync checkpoint.
    pub tau: Option<f64>,
    /// Zero both identity channels and skip speaker identification.
    pub no_audio: bool,
    pub overlays: bool,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub sync: SyncTrainConfig,
    pub detector_sgd: SgdConfig,
    pub matcher_sgd: SgdConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::from("clip"),
            output: PathBuf::from("out"),
            sync_checkpoint: PathBuf::from("checkpoints/sync"),
            detector_checkpoint: PathBuf::from("checkpoints/detector"),
            matcher_checkpoint: PathBuf::from("checkpoints/matcher"),
            tau: None,
            no_audio: false,
            overlays: true,
            seed: 0,
            detector: DetectorConfig::default(),
            sync: SyncTrainConfig::default(),
            detector_sgd: SgdConfig::default(),
            matcher_sgd: crate::matcher::MatcherTrainConfig::default().sgd,
        }
    }
}

const UNITS: &[(&str, &str)] = &[
    ("tau", "embedding distance on the unit sphere; auto = checkpoint value"),
    ("detector.scales", "anchor side in pixels"),
    ("detector.ratios", "anchor height / width"),
    ("detector.nms_iou", "IoU"),
    ("detector.positive_iou", "IoU"),
    ("detector.negative_iou", "IoU"),
    ("detector.pre_nms", "proposals"),
    ("detector.post_nms", "proposals"),
    ("detector.backbone_channels", "channels per stride-2 layer"),
    ("sync.margin", "embedding distance"),
    ("sync.validation_fraction", "share of pairs"),
    ("sync.sgd.batch_size", "pairs"),
    ("detector_sgd.batch_size", "frames"),
    ("matcher_sgd.batch_size", "pairs"),
];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "auto".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

fn parse_like(template: &Value, text: &str) -> Result<Value, String> {
    let text = text.trim();
    let number = |t: &str, integer: bool| -> Result<Value, String> {
        if integer {
            t.parse::<u64>().map(Value::from).map_err(|_| format!("expected a non-negative integer, got {t:?}"))
        } else {
            let x: f64 = t.parse().map_err(|_| format!("expected a number, got {t:?}"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| format!("{t:?} is not finite"))
        }
    };
    match template {
        Value::Null if text == "auto" => Ok(Value::Null),
        Value::Null => number(text, false),
        Value::Bool(_) => {
            text.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got {text:?}"))
        }
        Value::Number(n) => number(text, n.is_u64()),
        Value::String(_) => Ok(Value::String(text.to_string())),
        Value::Array(items) => {
            let integer = items.first().is_some_and(Value::is_u64);
            if text.is_empty() {
                return Ok(Value::Array(vec![]));
            }
            text.split(',').map(|t| number(t.trim(), integer)).collect::<Result<Vec<_>, _>>().map(Value::Array)
        }
        Value::Object(_) => Err("nested value".into()),
    }
}

fn unflatten(entries: &[(String, Value)]) -> Value {
    let mut root = serde_json::Map::new();
    for (key, v) in entries {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(serde_json::Map::new()))
                .as_object_mut()
                .expect("object node");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl PipelineConfig {
    fn entries(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// `key = value` lines; comments start with `#` at the beginning of a line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# gazekit pipeline configuration\n");
        for (k, v) in self.entries() {
            if let Some((_, unit)) = UNITS.iter().find(|(u, _)| *u == k) {
                s.push_str(&format!("# {k}: {unit}\n"));
            }
            s.push_str(&format!("{k} = {}\n", render(&v)));
        }
        s
    }

    /// Missing keys keep their defaults; unknown or repeated keys are errors.
    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let defaults: BTreeMap<String, Value> = Self::default().entries().into_iter().collect();
        let mut values = defaults.clone();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| PipelineError::Config { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let k = k.trim();
            let template = defaults.get(k).ok_or_else(|| err(format!("unknown key {k:?}")))?;
            if seen.insert(k.to_string(), i + 1).is_some() {
                return Err(err(format!("key {k:?} given twice")));
            }
            values.insert(k.to_string(), parse_like(template, v).map_err(|m| err(format!("{k}: {m}")))?);
        }
        let entries: Vec<(String, Value)> = values.into_iter().collect();
        serde_json::from_value(unflatten(&entries))
            .map_err(|e| PipelineError::Config { line: 0, message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_text(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_atomic(path, self.to_text().as_bytes()).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePerson {
    pub person_id: u32,
    pub face: BBox,
    pub role: Role,
}

/// Persons of one frame from its records; roles from `labels` where given,
/// otherwise from the record label (unlabelled means listener).
pub fn frame_persons(records: &[&VgsRecord], labels: Option<&BTreeMap<u32, Role>>) -> Vec<FramePerson> {
    let mut out: Vec<FramePerson> = records
        .iter()
        .map(|r| FramePerson {
            person_id: r.person_id,
            face: r.head,
            role: labels
                .map(|l| l.get(&r.person_id).copied().unwrap_or(Role::Listener))
                .unwrap_or(r.label.unwrap_or(Role::Listener)),
        })
        .collect();
    out.sort_by_key(|p| p.person_id);
    out
}

/// Records grouped by frame index.
pub fn records_by_frame<'a>(ds: &'a VgsDataset, video: &str) -> BTreeMap<u32, Vec<&'a VgsRecord>> {
    let mut out: BTreeMap<u32, Vec<&VgsRecord>> = BTreeMap::new();
    for r in ds.records.iter().filter(|r| r.video == video) {
        out.entry(r.frame).or_default().push(r);
    }
    out
}

/// Speaker and listener face boxes for the identity maps.
pub fn role_boxes(persons: &[FramePerson]) -> (Vec<BBox>, Vec<BBox>) {
    let pick = |role| persons.iter().filter(|p| p.role == role).map(|p| p.face).collect();
    (pick(Role::Speaker), pick(Role::Listener))
}

/// Enhanced input for a frame. With `no_audio` both identity maps are zero.
pub fn prepare_frame(
    frame: &RgbImage,
    persons: &[FramePerson],
    no_audio: bool,
) -> Result<(Tensor, IdentityMaps), PipelineError> {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let maps = if no_audio {
        IdentityMaps::zeros(h, w)
    } else {
        let (s, l) = role_boxes(persons);
        build_identity_maps(&s, &l, h as i64, w as i64).map_err(stage("enhance"))?
    };
    let x = enhance_frame(frame, &maps).map_err(stage("enhance"))?;
    Ok((x, maps))
}

/// 1 when at least half of the face box pixels are set in the speaker map.
pub fn identity_bit(maps: &IdentityMaps, face: &BBox) -> u8 {
    let probe = build_identity_maps(&[*face], &[], maps.height as i64, maps.width as i64).expect("maps are non-empty");
    let inside = probe.speaker.iter().filter(|&&v| v == 1).count();
    let marked = probe.speaker.iter().zip(&maps.speaker).filter(|(&a, &b)| a == 1 && b == 1).count();
    (inside > 0 && 2 * marked >= inside) as u8
}

pub fn describe_subjects(
    det: &Detector,
    features: &Tensor,
    maps: &IdentityMaps,
    persons: &[FramePerson],
) -> Result<Vec<SubjectDescriptor>, PipelineError> {
    let (w, h) = (maps.width as f64, maps.height as f64);
    persons
        .iter()
        .map(|p| {
            SubjectDescriptor::from_features(
                p.person_id,
                identity_bit(maps, &p.face),
                &p.face,
                features,
                det.spatial_scale(),
                w,
                h,
            )
            .map_err(stage("matcher"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameInference {
    pub candidates: Vec<GazeCandidate>,
    pub matches: Vec<MatchResult>,
}

impl FrameInference {
    /// Target box of a match, if any.
    pub fn target(&self, m: &MatchResult) -> Option<BBox> {
        m.chosen.map(|i| self.candidates[i].bbox)
    }
}

pub fn infer_frame(
    det: &Detector,
    matcher: &Matcher,
    frame: &RgbImage,
    persons: &[FramePerson],
    no_audio: bool,
) -> Result<FrameInference, PipelineError> {
    let (x, maps) = prepare_frame(frame, persons, no_audio)?;
    let d = det.detect(&x).map_err(stage("detector"))?;
    let subjects = describe_subjects(det, &d.features, &maps, persons)?;
    let matches = match_subjects(&subjects, &d.candidates, matcher, maps.width as f64, maps.height as f64)
        .map_err(stage("matcher"))?;
    Ok(FrameInference { candidates: d.candidates, matches })
}

/// Boxes with exact duplicates removed, first occurrence kept.
pub fn distinct_boxes(boxes: impl IntoIterator<Item = BBox>) -> Vec<BBox> {
    let mut out: Vec<BBox> = Vec::new();
    for b in boxes {
        if !out.contains(&b) {
            out.push(b);
        }
    }
    out
}

/// Detector training frame whose targets are the distinct gaze boxes.
pub fn detector_sample(frame: &RgbImage, persons: &[FramePerson], gaze: &[BBox]) -> DetectorSample {
    let (speakers, listeners) = role_boxes(persons);
    DetectorSample { frame: frame.clone(), speakers, listeners, targets: distinct_boxes(gaze.iter().copied()) }
}

/// Matcher training frame: detector candidates and subject descriptors
/// under the same arm as inference.
pub fn matcher_sample(
    det: &Detector,
    frame: &RgbImage,
    persons: &[FramePerson],
    targets: &[Option<BBox>],
    no_audio: bool,
) -> Result<MatcherSample, PipelineError> {
    let (x, maps) = prepare_frame(frame, persons, no_audio)?;
    let d = det.detect(&x).map_err(stage("detector"))?;
    let subjects = describe_subjects(det, &d.features, &maps, persons)?;
    Ok(MatcherSample {
        subjects,
        candidates: d.candidates,
        targets: targets.to_vec(),
        width: maps.width as f64,
        height: maps.height as f64,
    })
}

/// Per-(frame, subject) gaze ground truth.
pub fn gaze_ground_truth(ds: &VgsDataset) -> Vec<GroundTruth> {
    ds.records
        .iter()
        .map(|r| GroundTruth { video: r.video.clone(), frame: r.frame, person_id: Some(r.person_id), bbox: r.gaze })
        .collect()
}

const RED: Rgb<u8> = Rgb([230, 30, 30]);
const GREEN: Rgb<u8> = Rgb([30, 220, 60]);

/// Two-pixel rectangle outline, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = b.x.round() as i64;
    let y0 = b.y.round() as i64;
    let x1 = b.x2().round() as i64 - 1;
    let y1 = b.y2().round() as i64 - 1;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for t in 0..2 {
        for x in x0..=x1 {
            put(x, y0 + t);
            put(x, y1 - t);
        }
        for y in y0..=y1 {
            put(x0 + t, y);
            put(x1 - t, y);
        }
    }
}

/// Frame with red head boxes and green target boxes.
pub fn overlay(frame: &RgbImage, heads: &[BBox], targets: &[BBox]) -> RgbImage {
    let mut img = frame.clone();
    for b in heads {
        draw_box(&mut img, b, RED);
    }
    for b in targets {
        draw_box(&mut img, b, GREEN);
    }
    img
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineOutput {
    pub video: String,
    pub frames: usize,
    pub identity: Vec<IdentityRow>,
    pub matches: Vec<MatchRecord>,
    /// Chosen target per subject, scored by its match probability.
    pub detections: Vec<Detection>,
    /// Every detector candidate, scored by objectness.
    pub candidates: Vec<Detection>,
}

pub const IDENTITY_FILE: &str = "identity.jsonl";
pub const MATCHES_FILE: &str = "matches.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const OVERLAY_DIR: &str = "overlays";

fn require(stage: &'static str, path: &Path) -> Result<(), PipelineError> {
    if path.join(crate::nn::MANIFEST_FILE).is_file() {
        Ok(())
    } else {
        Err(PipelineError::MissingCheckpoint { stage, path: path.display().to_string() })
    }
}

fn write_outputs(out_dir: &Path, out: &PipelineOutput) -> Result<(), PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let identity = crate::data::write_identity(&out.identity);
    let files = [
        (IDENTITY_FILE, identity),
        (MATCHES_FILE, write_matches(&out.matches)),
        (DETECTIONS_FILE, write_detections(&out.detections)),
        (CANDIDATES_FILE, write_detections(&out.candidates)),
    ];
    for (name, text) in files {
        let p = out_dir.join(name);
        write_atomic(&p, text.as_bytes()).map_err(io_err(&p))?;
    }
    Ok(())
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let clip = load_clip(&cfg.input).map_err(stage("input"))?;
    let video = clip.header.video.clone();
    let mut out = PipelineOutput { video: video.clone(), frames: clip.frames.len(), ..Default::default() };
    if clip.frames.is_empty() {
        write_outputs(&cfg.output, &out)?;
        return Ok(out);
    }
    require("detector", &cfg.detector_checkpoint)?;
    require("matcher", &cfg.matcher_checkpoint)?;
    let mut det = Detector::load(&cfg.detector_checkpoint).map_err(stage("detector"))?;
    det.config.pre_nms = cfg.detector.pre_nms;
    det.config.nms_iou = cfg.detector.nms_iou;
    det.config.post_nms = cfg.detector.post_nms;
    let matcher = Matcher::load(&cfg.matcher_checkpoint).map_err(stage("matcher"))?;

    let by_frame = records_by_frame(&clip.annotations, &video);
    let mut roles: BTreeMap<u32, BTreeMap<u32, Role>> = BTreeMap::new();
    if !cfg.no_audio {
        require("speaker", &cfg.sync_checkpoint)?;
        let sync = SyncModel::load(&cfg.sync_checkpoint).map_err(stage("speaker"))?;
        let audio = clip.audio.as_ref().ok_or_else(|| PipelineError::Stage {
            stage: "speaker",
            message: format!("{} has no audio.wav; use the no-audio arm", cfg.input.display()),
        })?;
        let mfcc = mfcc_extract(audio, &MfccConfig::default()).map_err(stage("speaker"))?;
        let tracks = tracks_from_records(&clip.annotations, &video);
        let labels = classify_speakers(&tracks, &clip.frames, &mfcc, &sync, cfg.tau.unwrap_or(sync.tau))
            .map_err(stage("speaker"))?;
        out.identity = identity_rows(&video, &labels);
        for f in &labels {
            roles.insert(f.frame, f.labels.iter().map(|l| (l.person_id, l.label)).collect());
        }
    }

    let overlay_dir = cfg.output.join(OVERLAY_DIR);
    if cfg.overlays {
        fs::create_dir_all(&overlay_dir).map_err(io_err(&overlay_dir))?;
    }
    let empty = BTreeMap::new();
    for (k, frame) in clip.frames.iter().enumerate() {
        let f = k as u32;
        let records = by_frame.get(&f).cloned().unwrap_or_default();
        let persons = if cfg.no_audio {
            frame_persons(&records, Some(&empty))
        } else {
            frame_persons(&records, Some(roles.get(&f).unwrap_or(&empty)))
        };
        let inf = infer_frame(&det, &matcher, frame, &persons, cfg.no_audio).map_err(at_frame("inference", f))?;
        out.candidates.extend(inf.candidates.iter().map(|c| Detection {
            video: video.clone(),
            frame: f,
            person_id: None,
            bbox: c.bbox,
            score: c.score,
        }));
        let mut targets = Vec::new();
        for m in &inf.matches {
            let target = inf.target(m);
            out.matches.push(MatchRecord {
                video: video.clone(),
                frame: f,
                person_id: m.person_id,
                target_box: target,
                probability: m.probability,
            });
            if let Some(b) = target {
                targets.push(b);
                out.detections.push(Detection {
                    video: video.clone(),
                    frame: f,
                    person_id: Some(m.person_id),
                    bbox: b,
                    score: m.probability,
                });
            }
        }
        if cfg.overlays {
            let heads: Vec<BBox> = persons.iter().map(|p| p.face).collect();
            let img = overlay(frame, &heads, &distinct_boxes(targets));
            let p = overlay_dir.join(format!("{k:06}.png"));
            let mut bytes = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
                .map_err(|e| PipelineError::Io { path: p.display().to_string(), message: e.to_string() })?;
            write_atomic(&p, &bytes).map_err(io_err(&p))?;
        }
    }
    write_outputs(&cfg.output, &out)?;
    Ok(out)
}
