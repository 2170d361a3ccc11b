//! Speaker and listener identity maps stacked with RGB into a five-channel frame.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};

use crate::geometry::BBox;
use crate::nn::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum EnhanceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Binary H x W maps, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityMaps {
    pub height: usize,
    pub width: usize,
    pub speaker: Vec<u8>,
    pub listener: Vec<u8>,
}

impl IdentityMaps {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, speaker: vec![0; height * width], listener: vec![0; height * width] }
    }

    /// Writes both maps as 8-bit PNGs (0 or 255).
    pub fn dump_png(&self, speaker_path: &Path, listener_path: &Path) -> Result<(), EnhanceError> {
        for (map, path) in [(&self.speaker, speaker_path), (&self.listener, listener_path)] {
            let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                Luma([map[y as usize * self.width + x as usize] * 255])
            });
            img.save(path)
                .map_err(|e| EnhanceError::Io { path: path.display().to_string(), message: e.to_string() })?;
        }
        Ok(())
    }
}

/// Rows/columns covered by `b`. A box `(x, y, w, h)` spans pixels `x` through
/// `x + w - 1` inclusive (likewise rows); fractional edges round outward at
/// the start and inward at the end.
fn covered(b: &BBox, height: usize, width: usize) -> Option<(usize, usize, usize, usize)> {
    if !b.is_finite() || b.w < 0.0 || b.h < 0.0 {
        return None;
    }
    let c0 = b.x.ceil().max(0.0);
    let r0 = b.y.ceil().max(0.0);
    let c1 = (b.x2().ceil() - 1.0).min(width as f64 - 1.0);
    let r1 = (b.y2().ceil() - 1.0).min(height as f64 - 1.0);
    if c1 < c0 || r1 < r0 {
        return None;
    }
    Some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
}

fn paint(map: &mut [u8], boxes: &[BBox], height: usize, width: usize) {
    for b in boxes {
        if let Some((r0, r1, c0, c1)) = covered(b, height, width) {
            for r in r0..=r1 {
                map[r * width + c0..=r * width + c1].fill(1);
            }
        }
    }
}

pub fn build_identity_maps(
    speakers: &[BBox],
    listeners: &[BBox],
    height: i64,
    width: i64,
) -> Result<IdentityMaps, EnhanceError> {
    if height <= 0 || width <= 0 {
        return Err(EnhanceError::InvalidArgument(format!("map size must be positive, got {height}x{width}")));
    }
    let (h, w) = (height as usize, width as usize);
    let mut maps = IdentityMaps::zeros(h, w);
    paint(&mut maps.speaker, speakers, h, w);
    paint(&mut maps.listener, listeners, h, w);
    Ok(maps)
}

/// `[R, G, B, speaker, listener]` as a `5 x H x W` tensor with RGB scaled to `[0, 1]`.
pub fn enhance_frame(frame: &RgbImage, maps: &IdentityMaps) -> Result<Tensor, EnhanceError> {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    if maps.width != w || maps.height != h {
        return Err(EnhanceError::Shape(format!(
            "frame is {w}x{h} but identity maps are {}x{}",
            maps.width, maps.height
        )));
    }
    let n = w * h;
    let mut data = vec![0.0; 5 * n];
    for (i, p) in frame.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = p.0[c] as f64 / 255.0;
        }
        data[3 * n + i] = maps.speaker[i] as f64;
        data[4 * n + i] = maps.listener[i] as f64;
    }
    Ok(Tensor::new(vec![5, h, w], data).expect("shape matches data"))
}

/// Inverse of [`enhance_frame`].
pub fn split_enhanced(t: &Tensor) -> Result<(RgbImage, IdentityMaps), EnhanceError> {
    let (c, h, w) = t.chw().map_err(|e| EnhanceError::Shape(e.to_string()))?;
    if c != 5 {
        return Err(EnhanceError::Shape(format!("expected 5 channels, got {c}")));
    }
    let n = h * w;
    let d = t.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (d[c * n + i] * 255.0).round() as u8))
    });
    let mut maps = IdentityMaps::zeros(h, w);
    for i in 0..n {
        maps.speaker[i] = d[3 * n + i] as u8;
        maps.listener[i] = d[4 * n + i] as u8;
    }
    Ok((img, maps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_edges_are_inclusive() {
        let m = build_identity_maps(&[BBox::new(1.0, 1.0, 2.0, 2.0)], &[], 4, 4).unwrap();
        #[rustfmt::skip]
        let want = [0, 0, 0, 0,
                    0, 1, 1, 0,
                    0, 1, 1, 0,
                    0, 0, 0, 0];
        assert_eq!(m.speaker, want);
        assert!(m.listener.iter().all(|&v| v == 0));
    }

    #[test]
    fn no_boxes_and_bad_sizes() {
        let m = build_identity_maps(&[], &[], 3, 5).unwrap();
        assert!(m.speaker.iter().chain(&m.listener).all(|&v| v == 0));
        assert!(build_identity_maps(&[], &[], 0, 5).is_err());
        assert!(build_identity_maps(&[], &[], 5, -1).is_err());
    }

    #[test]
    fn enhance_is_lossless_and_symmetric() {
        let img = RgbImage::from_fn(6, 4, |x, y| image::Rgb([x as u8 * 40, y as u8 * 60, 7]));
        let s = [BBox::new(0.0, 0.0, 2.0, 1.0)];
        let l = [BBox::new(3.0, 1.0, 2.0, 2.0)];
        let a = enhance_frame(&img, &build_identity_maps(&s, &l, 4, 6).unwrap()).unwrap();
        assert_eq!(a.shape(), &[5, 4, 6]);
        let b = enhance_frame(&img, &build_identity_maps(&l, &s, 4, 6).unwrap()).unwrap();
        let n = 24;
        assert_eq!(&a.data()[..3 * n], &b.data()[..3 * n]);
        assert_eq!(&a.data()[3 * n..4 * n], &b.data()[4 * n..]);
        assert_eq!(&a.data()[4 * n..], &b.data()[3 * n..4 * n]);
        let (img2, maps) = split_enhanced(&a).unwrap();
        assert_eq!(img2, img);
        assert_eq!(maps, build_identity_maps(&s, &l, 4, 6).unwrap());
        assert!(enhance_frame(&img, &IdentityMaps::zeros(4, 5)).is_err());
    }
}
