use super::DetectorError;
use crate::geometry::BBox;
use crate::nn::Tensor;

pub const ROI_SIZE: usize = 7;
pub const ROI_SAMPLES: usize = 2;

/// Bilinear taps of one aligned ROI: for every output bin the feature-map
/// cells it reads and their weights (already divided by the sample count).
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSampling {
    pub grid_h: usize,
    pub grid_w: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
    /// No sample point landed on the feature map.
    pub outside: bool,
}

fn bilinear(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    let (hf, wf) = (h as f64, w as f64);
    if y < -1.0 || y > hf || x < -1.0 || x > wf {
        return None;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let y1 = if y0 >= h - 1 {
        y0 = h - 1;
        y = y0 as f64;
        h - 1
    } else {
        y0 + 1
    };
    let mut x0 = x.floor() as usize;
    let x1 = if x0 >= w - 1 {
        x0 = w - 1;
        x = x0 as f64;
        w - 1
    } else {
        x0 + 1
    };
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([(y0 * w + x0, hy * hx), (y0 * w + x1, hy * lx), (y1 * w + x0, ly * hx), (y1 * w + x1, ly * lx)])
}

/// Sampling plan for `roi` (image pixels) on an `h x w` feature map at
/// `spatial_scale` feature cells per pixel. Pixel centres sit at half
/// integers, so the ROI is shifted by half a cell after scaling.
pub fn roi_sampling(h: usize, w: usize, roi: &BBox, spatial_scale: f64) -> Result<RoiSampling, DetectorError> {
    if !roi.is_finite() || roi.w <= 0.0 || roi.h <= 0.0 {
        return Err(DetectorError::InvalidArgument(format!("roi {roi:?} has no area")));
    }
    if h == 0 || w == 0 {
        return Err(DetectorError::Shape("empty feature map".into()));
    }
    let x1 = roi.x * spatial_scale - 0.5;
    let y1 = roi.y * spatial_scale - 0.5;
    let (bw, bh) = (roi.w * spatial_scale / ROI_SIZE as f64, roi.h * spatial_scale / ROI_SIZE as f64);
    let count = (ROI_SAMPLES * ROI_SAMPLES) as f64;
    let mut taps = Vec::with_capacity(ROI_SIZE * ROI_SIZE);
    let mut any = false;
    for by in 0..ROI_SIZE {
        for bx in 0..ROI_SIZE {
            let mut cell = Vec::with_capacity(4 * ROI_SAMPLES * ROI_SAMPLES);
            for sy in 0..ROI_SAMPLES {
                let y = y1 + by as f64 * bh + (sy as f64 + 0.5) * bh / ROI_SAMPLES as f64;
                for sx in 0..ROI_SAMPLES {
                    let x = x1 + bx as f64 * bw + (sx as f64 + 0.5) * bw / ROI_SAMPLES as f64;
                    if let Some(t) = bilinear(y, x, h, w) {
                        any = true;
                        cell.extend(t.iter().map(|&(i, wt)| (i, wt / count)));
                    }
                }
            }
            taps.push(cell);
        }
    }
    Ok(RoiSampling { grid_h: h, grid_w: w, taps, outside: !any })
}

impl RoiSampling {
    /// Pools a `C x H x W` feature map into `C x 7 x 7`.
    pub fn apply(&self, features: &Tensor) -> Result<Tensor, DetectorError> {
        let (c, h, w) = features.chw().map_err(|e| DetectorError::Shape(e.to_string()))?;
        if (h, w) != (self.grid_h, self.grid_w) {
            return Err(DetectorError::Shape(format!(
                "sampling built for {}x{}, features are {h}x{w}",
                self.grid_h, self.grid_w
            )));
        }
        let n = h * w;
        let bins = ROI_SIZE * ROI_SIZE;
        let f = features.data();
        let mut out = vec![0.0; c * bins];
        for ch in 0..c {
            let plane = &f[ch * n..(ch + 1) * n];
            for (b, cell) in self.taps.iter().enumerate() {
                out[ch * bins + b] = cell.iter().map(|&(i, wt)| plane[i] * wt).sum();
            }
        }
        Ok(Tensor::new(vec![c, ROI_SIZE, ROI_SIZE], out).expect("shape matches"))
    }

    /// Adds the feature-map gradient of [`apply`](Self::apply) to `grad`.
    pub fn backward(&self, grad_out: &Tensor, grad: &mut [f64]) {
        let n = self.grid_h * self.grid_w;
        let bins = ROI_SIZE * ROI_SIZE;
        let c = grad_out.len() / bins;
        let g = grad_out.data();
        for ch in 0..c {
            for (b, cell) in self.taps.iter().enumerate() {
                let go = g[ch * bins + b];
                if go == 0.0 {
                    continue;
                }
                for &(i, wt) in cell {
                    grad[ch * n + i] += go * wt;
                }
            }
        }
    }
}

/// ROIAlign with 7x7 bins and 2x2 samples per bin. The flag in the result
/// is set when the ROI lies entirely off the feature map (output all zero).
pub fn roi_align(features: &Tensor, roi: &BBox, spatial_scale: f64) -> Result<(Tensor, bool), DetectorError> {
    let (_, h, w) = features.chw().map_err(|e| DetectorError::Shape(e.to_string()))?;
    let s = roi_sampling(h, w, roi, spatial_scale)?;
    Ok((s.apply(features)?, s.outside))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_preserved() {
        let f = Tensor::filled(vec![3, 8, 8], 2.5);
        let (out, outside) = roi_align(&f, &BBox::new(10.0, 20.0, 50.0, 30.0), 1.0 / 16.0 * 2.0).unwrap();
        assert!(!outside);
        assert_eq!(out.shape(), &[3, 7, 7]);
        assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn affine_map_is_reproduced() {
        let (h, w) = (10, 12);
        let data: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
        let f = Tensor::new(vec![1, h, w], data).unwrap();
        let roi = BBox::new(24.0, 16.0, 64.0, 60.0);
        let scale = 0.125;
        let (out, _) = roi_align(&f, &roi, scale).unwrap();
        let bw = roi.w * scale / 7.0;
        for by in 0..7 {
            for bx in 0..7 {
                let centroid = roi.x * scale - 0.5 + (bx as f64 + 0.5) * bw;
                assert!((out.data()[by * 7 + bx] - centroid).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn outside_roi_is_flagged() {
        let f = Tensor::filled(vec![2, 4, 4], 1.0);
        let (out, outside) = roi_align(&f, &BBox::new(500.0, 500.0, 20.0, 20.0), 1.0 / 16.0).unwrap();
        assert!(outside);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(roi_align(&f, &BBox::new(0.0, 0.0, 0.0, 5.0), 1.0).is_err());
    }
}
