//! Clip directories: `frames/NNNNNN.png`, `audio.wav`,
//! `annotations.vgs.jsonl` and `identity.jsonl`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{read_vgs, write_vgs, DataError, Role, SynthClip, VgsDataset, VideoHeader};
use crate::audio::{encode_wav, load_wav, AudioTrack};
use crate::speaker::{FaceTrack, TrackEntry};
use crate::util::write_atomic;

/// One identity line. `score` is `None` when no window covers the frame or
/// the row is ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub video: String,
    pub frame: u32,
    pub person_id: u32,
    pub label: Role,
    pub score: Option<f64>,
}

pub fn write_identity(rows: &[IdentityRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("identity rows serialize"));
        out.push('\n');
    }
    out
}

pub fn read_identity(text: &str) -> Result<Vec<IdentityRow>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DataError::parse(i + 1, e.to_string())))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClipData {
    pub header: VideoHeader,
    pub frames: Vec<RgbImage>,
    pub audio: Option<AudioTrack>,
    pub annotations: VgsDataset,
    pub identity: Vec<IdentityRow>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    write_atomic(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn save_clip(clip: &SynthClip, dir: &Path) -> Result<(), DataError> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(|e| DataError::io(&frames, e))?;
    for (k, img) in clip.frames.iter().enumerate() {
        let path = frames.join(format!("{k:06}.png"));
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| DataError::Image { path: path.display().to_string(), message: e.to_string() })?;
        write(&path, &bytes)?;
    }
    write(&dir.join("audio.wav"), &encode_wav(&clip.audio))?;
    let ds = VgsDataset { videos: vec![clip.header.clone()], records: clip.records.clone() };
    write(&dir.join("annotations.vgs.jsonl"), write_vgs(&ds)?.as_bytes())?;
    let rows: Vec<IdentityRow> = clip
        .records
        .iter()
        .map(|r| IdentityRow {
            video: r.video.clone(),
            frame: r.frame,
            person_id: r.person_id,
            label: r.label.unwrap_or(Role::Listener),
            score: None,
        })
        .collect();
    write(&dir.join("identity.jsonl"), write_identity(&rows).as_bytes())
}

/// Reads a PNG or binary PPM frame as 8-bit RGB.
pub fn read_frame(path: &Path) -> Result<RgbImage, DataError> {
    let img =
        image::open(path).map_err(|e| DataError::Image { path: path.display().to_string(), message: e.to_string() })?;
    Ok(img.to_rgb8())
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext != "png" && ext != "ppm" {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let index: u32 = stem
            .parse()
            .map_err(|_| DataError::Format(format!("{}: frame file name is not an index", path.display())))?;
        if out.insert(index, path.clone()).is_some() {
            return Err(DataError::Format(format!("{}: duplicate frame index {index}", path.display())));
        }
    }
    for (expected, &index) in out.keys().enumerate() {
        if index as usize != expected {
            return Err(DataError::Format(format!("{}: frame {expected} is missing", dir.display())));
        }
    }
    Ok(out.into_values().collect())
}

/// Loads a clip directory. Only `annotations.vgs.jsonl` is required; audio
/// and identity files are optional.
pub fn load_clip(dir: &Path) -> Result<ClipData, DataError> {
    let ann_path = dir.join("annotations.vgs.jsonl");
    let text = fs::read_to_string(&ann_path).map_err(|e| DataError::io(&ann_path, e))?;
    let annotations = read_vgs(&text)?;
    let header = match annotations.videos.as_slice() {
        [h] => h.clone(),
        [] => {
            let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("clip");
            VideoHeader { video: name.to_string(), fps: 25.0, width: 0, height: 0 }
        }
        _ => return Err(DataError::Format(format!("{}: a clip holds exactly one video", ann_path.display()))),
    };
    let frames = frame_paths(&dir.join("frames"))?.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>, _>>()?;
    for (k, f) in frames.iter().enumerate() {
        if header.width > 0 && (f.width() != header.width || f.height() != header.height) {
            return Err(DataError::Format(format!(
                "frame {k}: {}x{} does not match header {}x{}",
                f.width(),
                f.height(),
                header.width,
                header.height
            )));
        }
    }
    let wav = dir.join("audio.wav");
    let audio = if wav.exists() { Some(load_wav(&wav)?) } else { None };
    let id_path = dir.join("identity.jsonl");
    let identity = if id_path.exists() {
        read_identity(&fs::read_to_string(&id_path).map_err(|e| DataError::io(&id_path, e))?)?
    } else {
        Vec::new()
    };
    Ok(ClipData { header, frames, audio, annotations, identity })
}

/// Face tracks from the head boxes of one video, ordered by person id.
pub fn tracks_from_records(ds: &VgsDataset, video: &str) -> Vec<FaceTrack> {
    let mut by_person: BTreeMap<u32, Vec<TrackEntry>> = BTreeMap::new();
    for r in ds.records.iter().filter(|r| r.video == video) {
        by_person.entry(r.person_id).or_default().push(TrackEntry { frame: r.frame, face: r.head });
    }
    by_person
        .into_iter()
        .map(|(person_id, mut entries)| {
            entries.sort_by_key(|e| e.frame);
            entries.dedup_by_key(|e| e.frame);
            FaceTrack { person_id, entries }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SynthConfig};

    #[test]
    fn clip_directory_round_trip() {
        let cfg = SynthConfig { min_frames: 50, max_frames: 50, ..Default::default() };
        let clip = synth_scene(11, &cfg);
        let dir = tempfile::tempdir().unwrap();
        save_clip(&clip, dir.path()).unwrap();
        let back = load_clip(dir.path()).unwrap();
        assert_eq!(back.frames, clip.frames);
        assert_eq!(back.header, clip.header);
        assert_eq!(back.annotations.records, clip.records);
        let audio = back.audio.unwrap();
        for (a, b) in audio.samples.iter().zip(&clip.audio.samples) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
        assert_eq!(back.identity.len(), clip.records.len());
        assert_eq!(tracks_from_records(&back.annotations, &clip.header.video), clip.tracks());
    }

    #[test]
    fn ppm_frames_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(4, 3, image::Rgb([10, 20, 30]));
        let path = dir.path().join("000000.ppm");
        img.save_with_format(&path, image::ImageFormat::Pnm).unwrap();
        assert_eq!(read_frame(&path).unwrap(), img);
    }

    #[test]
    fn missing_frame_index_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("frames");
        fs::create_dir_all(&frames).unwrap();
        let img = RgbImage::new(2, 2);
        img.save(frames.join("000000.png")).unwrap();
        img.save(frames.join("000002.png")).unwrap();
        assert!(frame_paths(&frames).is_err());
    }
}
