use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{FaceTrack, SpeakerError, AUDIO_FRAMES, LIP_FRAMES, MOUTH_H, MOUTH_W};
use crate::audio::{MfccFrame, N_COEFFS};
use crate::geometry::BBox;

/// Mouth region of a face box: central 50% of the width, lower 45% of the height.
pub fn mouth_box(face: &BBox) -> BBox {
    BBox::new(
        face.x + face.w * 25.0 / 100.0,
        face.y + face.h * 55.0 / 100.0,
        face.w * 50.0 / 100.0,
        face.h * 45.0 / 100.0,
    )
}

fn luminance(img: &RgbImage, x: u32, y: u32) -> f32 {
    let p = img.get_pixel(x, y).0;
    ((0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0) as f32
}

/// Grayscale mouth patch (48x96, row-major, values in `[0, 1]`).
///
/// Returns `Ok(None)` when the face box is degenerate (`w` or `h` below 4 px),
/// meaning the person is skipped for this frame.
pub fn crop_mouth(img: &RgbImage, face: &BBox) -> Result<Option<Vec<f32>>, SpeakerError> {
    if !face.is_finite() || !face.within(img.width() as f64, img.height() as f64) {
        return Err(SpeakerError::InvalidArgument(format!(
            "face box {:?} is outside the {}x{} frame",
            face,
            img.width(),
            img.height()
        )));
    }
    if face.w < 4.0 || face.h < 4.0 {
        return Ok(None);
    }
    let m = mouth_box(face);
    let (max_x, max_y) = (img.width() as f64 - 1.0, img.height() as f64 - 1.0);
    let mut out = Vec::with_capacity(MOUTH_H * MOUTH_W);
    for i in 0..MOUTH_H {
        let sy = (m.y + (i as f64 + 0.5) * m.h / MOUTH_H as f64 - 0.5).clamp(0.0, max_y);
        let (y0, fy) = (sy.floor(), sy - sy.floor());
        let y1 = (y0 + 1.0).min(max_y);
        for j in 0..MOUTH_W {
            let sx = (m.x + (j as f64 + 0.5) * m.w / MOUTH_W as f64 - 0.5).clamp(0.0, max_x);
            let (x0, fx) = (sx.floor(), sx - sx.floor());
            let x1 = (x0 + 1.0).min(max_x);
            let l = |x: f64, y: f64| luminance(img, x as u32, y as u32) as f64;
            let top = l(x0, y0) * (1.0 - fx) + l(x1, y0) * fx;
            let bottom = l(x0, y1) * (1.0 - fx) + l(x1, y1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Ok(Some(out))
}

/// Five consecutive mouth patches of one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipWindow {
    pub person_id: u32,
    pub start: u32,
    /// `5 x 48 x 96`, frame-major.
    pub patches: Vec<f32>,
}

/// Twenty MFCC frames covering the same 200 ms as a lip window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioWindow {
    pub start: u32,
    /// `13 x 20`, coefficient-major.
    pub mfcc: Vec<f64>,
    pub center_time: f64,
}

impl LipWindow {
    /// Centre time in seconds at `fps`.
    pub fn center_time(&self, fps: f64) -> f64 {
        (self.start as f64 + LIP_FRAMES as f64 / 2.0) / fps
    }
}

/// Audio window for lip window start `start`, or `None` past the end of the
/// MFCC stream. MFCC frames run at four per video frame.
pub fn audio_window(mfcc: &[MfccFrame], start: u32) -> Option<AudioWindow> {
    let a0 = 4 * start as usize;
    let frames = mfcc.get(a0..a0 + AUDIO_FRAMES)?;
    let mut data = vec![0.0; N_COEFFS * AUDIO_FRAMES];
    for (t, f) in frames.iter().enumerate() {
        for c in 0..N_COEFFS {
            data[c * AUDIO_FRAMES + t] = f.coefficients[c];
        }
    }
    let center_time = (frames[0].timestamp + frames[AUDIO_FRAMES - 1].timestamp) / 2.0;
    Some(AudioWindow { start, mfcc: data, center_time })
}

/// Mouth patches of `track` keyed by frame; degenerate faces and frames
/// without an image are left out.
pub fn track_patches(track: &FaceTrack, frames: &[RgbImage]) -> Result<Vec<(u32, Vec<f32>)>, SpeakerError> {
    let mut out = Vec::new();
    for e in &track.entries {
        let Some(img) = frames.get(e.frame as usize) else { continue };
        if let Some(p) = crop_mouth(img, &e.face)? {
            out.push((e.frame, p));
        }
    }
    Ok(out)
}

/// Start frames of every run of five consecutive frames in `visible`
/// (sorted, strictly increasing), stride one.
pub fn window_starts(visible: &[u32]) -> Vec<u32> {
    let n = LIP_FRAMES as u32;
    let mut starts = Vec::new();
    let mut run_start = 0;
    for i in 0..visible.len() {
        if i > 0 && visible[i] != visible[i - 1] + 1 {
            run_start = i;
        }
        if i + 1 - run_start >= LIP_FRAMES {
            starts.push(visible[i] + 1 - n);
        }
    }
    starts
}

/// Pairs every lip window of `track` with the aligned audio window.
pub fn make_windows(
    track: &FaceTrack,
    frames: &[RgbImage],
    mfcc: &[MfccFrame],
) -> Result<Vec<(LipWindow, AudioWindow)>, SpeakerError> {
    track.validate()?;
    let patches = track_patches(track, frames)?;
    let visible: Vec<u32> = patches.iter().map(|p| p.0).collect();
    let mut out = Vec::new();
    for s in window_starts(&visible) {
        let Some(audio) = audio_window(mfcc, s) else { continue };
        let i = visible.binary_search(&s).expect("start is visible");
        let mut data = Vec::with_capacity(LIP_FRAMES * MOUTH_H * MOUTH_W);
        for (_, p) in &patches[i..i + LIP_FRAMES] {
            data.extend_from_slice(p);
        }
        out.push((LipWindow { person_id: track.person_id, start: s, patches: data }, audio));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mfcc_extract, AudioTrack, MfccConfig};
    use crate::speaker::TrackEntry;
    use image::Rgb;

    fn track(frames: impl IntoIterator<Item = u32>) -> FaceTrack {
        FaceTrack {
            person_id: 1,
            entries: frames
                .into_iter()
                .map(|frame| TrackEntry { frame, face: BBox::new(4.0, 4.0, 40.0, 40.0) })
                .collect(),
        }
    }

    #[test]
    fn mouth_sub_box() {
        assert_eq!(mouth_box(&BBox::new(0.0, 0.0, 100.0, 100.0)), BBox::new(25.0, 55.0, 50.0, 45.0));
    }

    #[test]
    fn constant_frames_give_constant_patches() {
        let gray = RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]));
        let p = crop_mouth(&gray, &BBox::new(0.0, 0.0, 64.0, 64.0)).unwrap().unwrap();
        assert_eq!(p.len(), 48 * 96);
        assert!(p.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
        let red = RgbImage::from_pixel(64, 64, Rgb([255, 0, 0]));
        let p = crop_mouth(&red, &BBox::new(3.0, 5.0, 30.0, 20.0)).unwrap().unwrap();
        assert!(p.iter().all(|&v| (v - 0.299).abs() < 1e-6));
    }

    #[test]
    fn degenerate_face_is_skipped() {
        let img = RgbImage::new(32, 32);
        assert_eq!(crop_mouth(&img, &BBox::new(0.0, 0.0, 3.0, 10.0)).unwrap(), None);
        assert!(crop_mouth(&img, &BBox::new(20.0, 0.0, 20.0, 10.0)).is_err());
    }

    #[test]
    fn run_enumeration() {
        assert_eq!(window_starts(&[0, 1, 2, 3, 4]), vec![0]);
        assert_eq!(window_starts(&(0..10).collect::<Vec<_>>()).len(), 6);
        assert_eq!(window_starts(&[0, 1, 2, 3, 7, 8, 9, 10, 11]), vec![7]);
        assert!(window_starts(&[0, 1, 2, 3]).is_empty());
    }

    #[test]
    fn windows_are_aligned_and_sized() {
        let frames = vec![RgbImage::from_pixel(48, 48, Rgb([90, 90, 90])); 12];
        let audio = AudioTrack { samples: vec![0.01; 12 * 640], sample_rate: 16000 };
        let mfcc = mfcc_extract(&audio, &MfccConfig::default()).unwrap();
        let pairs = make_windows(&track(0..12), &frames, &mfcc).unwrap();
        assert_eq!(pairs.len(), 8);
        for (lip, a) in &pairs {
            assert_eq!(lip.patches.len(), 5 * 48 * 96);
            assert_eq!(a.mfcc.len(), 13 * 20);
            assert_eq!(a.start, lip.start);
            assert!((a.center_time - lip.center_time(25.0)).abs() <= 0.005 + 1e-12);
        }
    }
}
