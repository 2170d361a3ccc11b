use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, BoxParam};

/// Largest magnitude of a decoded log size ratio.
pub const MAX_LOG_RATIO: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn to_box(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Anchors for every feature-map cell. Index `((i * grid_w + j) * S + s) * R + r`;
/// ratio is `h / w` and every anchor of scale `s` has area `s^2`.
pub fn generate_anchors(grid_h: usize, grid_w: usize, stride: f64, scales: &[f64], ratios: &[f64]) -> Vec<Anchor> {
    let mut out = Vec::with_capacity(grid_h * grid_w * scales.len() * ratios.len());
    for i in 0..grid_h {
        for j in 0..grid_w {
            let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
            for &s in scales {
                for &r in ratios {
                    let q = r.sqrt();
                    out.push(Anchor { cx, cy, w: s / q, h: s * q });
                }
            }
        }
    }
    out
}

/// Deltas taking `anchor` to `b`.
pub fn encode_box(anchor: &Anchor, b: &BBox) -> BoxParam {
    let (cx, cy) = b.center();
    BoxParam::new(
        (cx - anchor.cx) / anchor.w,
        (cy - anchor.cy) / anchor.h,
        (b.w / anchor.w).ln(),
        (b.h / anchor.h).ln(),
    )
}

/// Box for `delta` relative to `anchor`, without clipping. Log size ratios
/// are clamped to `±MAX_LOG_RATIO`.
pub fn decode_box_unclipped(anchor: &Anchor, delta: &BoxParam) -> BBox {
    let tw = delta.tw.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
    let th = delta.th.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
    BBox::from_center(
        anchor.cx + delta.tx * anchor.w,
        anchor.cy + delta.ty * anchor.h,
        anchor.w * tw.exp(),
        anchor.h * th.exp(),
    )
}

/// [`decode_box_unclipped`] clipped to a `width x height` image.
pub fn decode_box(anchor: &Anchor, delta: &BoxParam, width: f64, height: f64) -> BBox {
    decode_box_unclipped(anchor, delta).clip(width, height)
}

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (equal scores by lower index); a box is dropped when its IoU with any
/// kept box exceeds `threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_counts_and_shapes() {
        let a = generate_anchors(2, 2, 16.0, &[32.0, 64.0, 128.0], &[0.5, 1.0, 2.0]);
        assert_eq!(a.len(), 36);
        let sq = generate_anchors(1, 1, 16.0, &[64.0], &[1.0])[0];
        assert_eq!((sq.w, sq.h), (64.0, 64.0));
        let tall = generate_anchors(1, 1, 16.0, &[48.0], &[2.0])[0];
        assert!((tall.h / tall.w - 2.0).abs() < 1e-9);
        assert!((tall.w * tall.h - 48.0 * 48.0).abs() < 1e-6);
        let third = generate_anchors(2, 3, 16.0, &[32.0, 64.0], &[1.0, 2.0]);
        let (row, col, cols) = (1, 2, 3);
        let k = ((row * cols + col) * 2 + 1) * 2;
        assert_eq!((third[k].cx, third[k].cy), (40.0, 24.0));
        assert_eq!(third[k].w * third[k].h, 64.0 * 64.0);
    }

    #[test]
    fn decode_rules() {
        let a = Anchor { cx: 50.0, cy: 60.0, w: 20.0, h: 30.0 };
        assert_eq!(decode_box(&a, &BoxParam::new(0.0, 0.0, 0.0, 0.0), 200.0, 200.0), a.to_box());
        let b = decode_box(&a, &BoxParam::new(0.0, 0.0, 2f64.ln(), 0.0), 200.0, 200.0);
        assert!((b.w - 40.0).abs() < 1e-12 && (b.center().0 - 50.0).abs() < 1e-12);
        let huge = decode_box_unclipped(&a, &BoxParam::new(0.0, 0.0, 1e6, -1e6));
        assert!((huge.w - 20.0 * 4f64.exp()).abs() < 1e-9 && huge.is_finite());
        let gt = BBox::new(30.0, 41.0, 33.0, 17.5);
        let back = decode_box(&a, &encode_box(&a, &gt), 200.0, 200.0);
        for (x, y) in [(back.x, gt.x), (back.y, gt.y), (back.w, gt.w), (back.h, gt.h)] {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn nms_basics() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b, b], &[0.4, 0.9], 0.7), vec![1]);
        assert_eq!(nms(&[b, b], &[0.5, 0.5], 0.7), vec![0]);
        let d = [b, BBox::new(20.0, 0.0, 5.0, 5.0), BBox::new(0.0, 30.0, 5.0, 5.0)];
        assert_eq!(nms(&d, &[0.1, 0.3, 0.2], 0.5), vec![1, 2, 0]);
    }
}
