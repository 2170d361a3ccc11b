//! Synthetic conversation clips with planted ground truth.
//!
//! Each person is a coloured face rectangle whose mouth bar opens and closes
//! with a private band-limited envelope. The designated speaker's envelope
//! also amplitude-modulates a harmonic tone, which becomes the audio track.
//! Listeners look at the speaker's face and the speaker looks at a fixed
//! scene object. With `out_of_frame_voice` the tone follows an envelope no
//! visible person shares, and everyone looks at the object.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Role, VgsRecord, VideoHeader};
use crate::audio::AudioTrack;
use crate::geometry::BBox;
use crate::speaker::{FaceTrack, TrackEntry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub min_persons: usize,
    pub max_persons: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub sample_rate: u32,
    pub out_of_frame_voice: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_persons: 2,
            max_persons: 4,
            min_frames: 50,
            max_frames: 125,
            width: 256,
            height: 256,
            fps: 25.0,
            sample_rate: 16000,
            out_of_frame_voice: false,
        }
    }
}

/// Sum of a few low-frequency sinusoids mapped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    components: Vec<(f64, f64, f64)>,
}

impl Envelope {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let components =
            (0..4).map(|_| (rng.gen_range(0.5..1.0), rng.gen_range(2.0..8.0), rng.gen_range(0.0..2.0 * PI))).collect();
        Self { components }
    }

    pub fn at(&self, t: f64) -> f64 {
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        let s: f64 = self.components.iter().map(|&(a, f, p)| a * (2.0 * PI * f * t + p).sin()).sum();
        (0.5 + 0.5 * s / total).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPerson {
    pub person_id: u32,
    pub face: BBox,
    pub role: Role,
    /// Mouth opening per frame in `[0, 1]`.
    pub mouth_open: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    pub header: VideoHeader,
    pub frames: Vec<RgbImage>,
    pub audio: AudioTrack,
    pub records: Vec<VgsRecord>,
    pub persons: Vec<SynthPerson>,
    pub object: BBox,
    pub speaker: Option<u32>,
}

impl SynthClip {
    pub fn tracks(&self) -> Vec<FaceTrack> {
        self.persons
            .iter()
            .map(|p| FaceTrack {
                person_id: p.person_id,
                entries: (0..self.frames.len() as u32).map(|frame| TrackEntry { frame, face: p.face }).collect(),
            })
            .collect()
    }

    /// Speaker face boxes and listener face boxes for a frame, from ground truth.
    pub fn identity_boxes(&self) -> (Vec<BBox>, Vec<BBox>) {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for p in &self.persons {
            match p.role {
                Role::Speaker => s.push(p.face),
                Role::Listener => l.push(p.face),
            }
        }
        (s, l)
    }

    /// Records of one frame.
    pub fn frame_records(&self, frame: u32) -> Vec<&VgsRecord> {
        self.records.iter().filter(|r| r.frame == frame).collect()
    }
}

fn place<R: Rng>(rng: &mut R, w: f64, h: f64, cfg: &SynthConfig, taken: &[BBox]) -> Option<BBox> {
    let margin = 6.0;
    for _ in 0..500 {
        let x = rng.gen_range(margin..cfg.width as f64 - w - margin).floor();
        let y = rng.gen_range(margin..cfg.height as f64 - h - margin).floor();
        let b = BBox::new(x, y, w, h);
        let padded = BBox::new(x - margin, y - margin, w + 2.0 * margin, h + 2.0 * margin);
        if taken.iter().all(|t| padded.intersection(t) == 0.0) {
            return Some(b);
        }
    }
    None
}

fn fill(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (x0, y0) = (b.x.max(0.0) as u32, b.y.max(0.0) as u32);
    let x1 = (b.x2().ceil() as u32).min(img.width());
    let y1 = (b.y2().ceil() as u32).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

fn blend(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    [0, 1, 2].map(|i| (a[i] as f64 * (1.0 - t) + b[i] as f64 * t).round() as u8)
}

/// Dark mouth bar centred at 78% of the face height; `open` in `[0, 1]`.
/// Partial rows are shaded by coverage so the height varies continuously.
fn draw_mouth(img: &mut RgbImage, face: &BBox, skin: [u8; 3], open: f64) {
    const MOUTH: [u8; 3] = [45, 18, 22];
    let bw = (face.w * 0.4).round();
    let x0 = face.x + ((face.w - bw) / 2.0).round();
    let cy = face.y + face.h * 0.78;
    let half = 1.0 + open * 0.15 * face.h;
    let (top, bottom) = (cy - half, cy + half);
    for y in top.floor() as i64..bottom.ceil() as i64 {
        let cover = ((y as f64 + 1.0).min(bottom) - (y as f64).max(top)).clamp(0.0, 1.0);
        let c = blend(skin, MOUTH, cover);
        for x in x0 as u32..(x0 + bw) as u32 {
            img.put_pixel(x, y as u32, Rgb(c));
        }
    }
}

/// Generates one clip. The same seed and configuration always give identical
/// frames, audio and annotations.
pub fn synth_scene(seed: u64, cfg: &SynthConfig) -> SynthClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let video = format!("synth{seed:08}");
    let n_persons = rng.gen_range(cfg.min_persons..=cfg.max_persons);
    let n_frames = rng.gen_range(cfg.min_frames..=cfg.max_frames);

    let (object, faces) = loop {
        let mut taken = Vec::new();
        let ow = rng.gen_range(36..=52) as f64;
        let oh = rng.gen_range(36..=52) as f64;
        let Some(object) = place(&mut rng, ow, oh, cfg, &taken) else { continue };
        taken.push(object);
        let mut faces = Vec::new();
        for _ in 0..n_persons {
            let w = rng.gen_range(44..=58) as f64;
            let h = (w * rng.gen_range(1.1..1.3)).round();
            match place(&mut rng, w, h, cfg, &taken) {
                Some(b) => {
                    taken.push(b);
                    faces.push(b);
                }
                None => break,
            }
        }
        if faces.len() == n_persons {
            break (object, faces);
        }
    };

    let background: [u8; 3] = [0, 1, 2].map(|_| rng.gen_range(40..110));
    let hue = rng.gen_range(0..3usize);
    let mut object_color = [rng.gen_range(0..60), rng.gen_range(0..60), rng.gen_range(0..60)];
    object_color[hue] = rng.gen_range(200..=255);
    let object_inner = [255 - object_color[0], 255 - object_color[1], 255 - object_color[2]];
    let skins: Vec<[u8; 3]> =
        (0..n_persons).map(|_| [rng.gen_range(170..240), rng.gen_range(120..190), rng.gen_range(90..160)]).collect();
    let envelopes: Vec<Envelope> = (0..n_persons).map(|_| Envelope::random(&mut rng)).collect();
    let speaker = if cfg.out_of_frame_voice { None } else { Some(rng.gen_range(0..n_persons)) };
    let voice = match speaker {
        Some(s) => envelopes[s].clone(),
        None => Envelope::random(&mut rng),
    };

    let persons: Vec<SynthPerson> = (0..n_persons)
        .map(|i| SynthPerson {
            person_id: i as u32,
            face: faces[i],
            role: if Some(i) == speaker { Role::Speaker } else { Role::Listener },
            mouth_open: (0..n_frames).map(|k| envelopes[i].at((k as f64 + 0.5) / cfg.fps)).collect(),
        })
        .collect();

    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let mut img = RgbImage::new(cfg.width, cfg.height);
        for px in img.pixels_mut() {
            let n: i16 = rng.gen_range(-6..=6);
            *px = Rgb(background.map(|c| (c as i16 + n).clamp(0, 255) as u8));
        }
        fill(&mut img, &object, object_color);
        fill(&mut img, &BBox::new(object.x + 8.0, object.y + 8.0, object.w - 16.0, object.h - 16.0), object_inner);
        for (p, skin) in persons.iter().zip(&skins) {
            let f = &p.face;
            fill(&mut img, f, *skin);
            let hair = blend(*skin, [30, 20, 10], 0.7);
            fill(&mut img, &BBox::new(f.x, f.y, f.w, (f.h * 0.15).round()), hair);
            let eye = (f.w * 0.1).round().max(3.0);
            for ex in [0.3, 0.7] {
                let b = BBox::new((f.x + f.w * ex - eye / 2.0).round(), (f.y + f.h * 0.38).round(), eye, eye);
                fill(&mut img, &b, [25, 25, 35]);
            }
            draw_mouth(&mut img, f, *skin, p.mouth_open[k]);
        }
        frames.push(img);
    }

    let f0 = rng.gen_range(110.0..230.0);
    let phases: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let norm: f64 = (1..=6).map(|h| 1.0 / h as f64).sum();
    let n_samples = (n_frames as f64 / cfg.fps * cfg.sample_rate as f64).round() as usize;
    let samples = (0..n_samples)
        .map(|i| {
            let t = i as f64 / cfg.sample_rate as f64;
            let tone: f64 = phases
                .iter()
                .enumerate()
                .map(|(h, ph)| (2.0 * PI * (h + 1) as f64 * f0 * t + ph).sin() / (h + 1) as f64)
                .sum::<f64>()
                / norm;
            let amp = 0.02 + 0.6 * voice.at(t);
            (amp * tone + rng.gen_range(-0.003..0.003)).clamp(-1.0, 1.0)
        })
        .collect();

    let mut records = Vec::with_capacity(n_frames * n_persons);
    for k in 0..n_frames as u32 {
        for p in &persons {
            let gaze = match (p.role, speaker) {
                (Role::Listener, Some(s)) => faces[s],
                _ => object,
            };
            records.push(VgsRecord {
                video: video.clone(),
                frame: k,
                person_id: p.person_id,
                head: p.face,
                gaze,
                label: Some(p.role),
            });
        }
    }

    SynthClip {
        header: VideoHeader { video, fps: cfg.fps, width: cfg.width, height: cfg.height },
        frames,
        audio: AudioTrack { samples, sample_rate: cfg.sample_rate },
        records,
        persons,
        object,
        speaker: speaker.map(|s| s as u32),
    }
}
