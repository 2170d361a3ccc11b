//! Brute-force references and random fixtures shared by the integration tests.
#![allow(dead_code)]

use gazekit_core::data::{Role, VgsDataset, VgsRecord, VideoHeader};
use gazekit_core::eval::{Detection, GroundTruth};
use gazekit_core::BBox;
use rand::seq::SliceRandom;
use rand::Rng;

/// Intersection over union from corner coordinates.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x, a.y, a.x + a.w, a.y + a.h);
    let (bx1, by1, bx2, by2) = (b.x, b.y, b.x + b.w, b.y + b.h);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Visiting order: descending score, lower index first on ties.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            let (a, b) = (order[i], order[j]);
            if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                order.swap(i, j);
            }
        }
    }
    order
}

/// The unique subset `S` in which a box belongs to `S` exactly when no
/// higher-ranked member of `S` overlaps it by more than `threshold`, found by
/// trying every subset. Returned in visiting order.
pub fn oracle_nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    let n = boxes.len();
    assert!(n <= 16);
    let order = rank(scores);
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let consistent = order.iter().enumerate().all(|(pos, &i)| {
            let blocked = order[..pos].iter().any(|&j| inside(j) && oracle_iou(&boxes[i], &boxes[j]) > threshold);
            inside(i) == !blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "fixed point is unique");
    order.into_iter().filter(|&i| found[0] & (1 << i) != 0).collect()
}

/// Pixel `(r, c)` is set when the point `(c, r)` lies in `[x, x + w) x [y, y + h)` of any box.
pub fn oracle_map(boxes: &[BBox], height: usize, width: usize) -> Vec<u8> {
    let mut out = vec![0u8; height * width];
    for r in 0..height {
        for c in 0..width {
            let (px, py) = (c as f64, r as f64);
            if boxes.iter().any(|b| b.x <= px && px < b.x + b.w && b.y <= py && py < b.y + b.h) {
                out[r * width + c] = 1;
            }
        }
    }
    out
}

/// Greedy matching by scanning every ground truth, then the mean over recall
/// levels `k / m` of the best precision reached with at least `k` hits.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], gate: f64) -> (Vec<bool>, f64) {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::new();
    for i in rank(&scores) {
        let d = &dets[i];
        let mut best: Option<usize> = None;
        let mut best_iou = 0.0;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.video != d.video || gt.frame != d.frame || gt.person_id != d.person_id {
                continue;
            }
            let v = oracle_iou(&d.bbox, &gt.bbox);
            if v >= gate && (best.is_none() || v > best_iou) {
                best = Some(g);
                best_iou = v;
            }
        }
        if let Some(g) = best {
            used[g] = true;
        }
        flags.push(best.is_some());
    }
    let m = gts.len();
    let mut total = 0.0;
    for k in 1..=m {
        let mut best: f64 = 0.0;
        let mut tp = 0;
        for (i, &f) in flags.iter().enumerate() {
            tp += f as usize;
            if tp >= k {
                best = best.max(tp as f64 / (i + 1) as f64);
            }
        }
        total += best;
    }
    (flags, total / m as f64)
}

fn grid_box<R: Rng>(rng: &mut R, width: u32, height: u32) -> BBox {
    let w = rng.gen_range(0..=width / 4);
    let h = rng.gen_range(0..=height / 4);
    let x = rng.gen_range(0..=width - w);
    let y = rng.gen_range(0..=height - h);
    BBox::new(x as f64, y as f64, w as f64, h as f64)
}

const VIDEO_NAMES: [&str; 5] = ["chat_01", "a&b", "x<y>z", "lounge 2", "kitchen"];

/// `n` records on the pixel grid, grouped by frame across a few videos,
/// headers in order of first use.
pub fn random_dataset<R: Rng>(rng: &mut R, n: usize) -> VgsDataset {
    let mut names = VIDEO_NAMES.to_vec();
    names.shuffle(rng);
    let mut videos: Vec<VideoHeader> =
        names[..rng.gen_range(1..=3)].iter().map(|&v| VideoHeader::standard(v)).collect();
    for v in &mut videos {
        if rng.gen_bool(0.5) {
            v.width = rng.gen_range(64..=640);
            v.height = rng.gen_range(64..=480);
            v.fps = [25.0, 29.97, 30.0, 12.5][rng.gen_range(0..4)];
        }
    }
    let mut records = Vec::with_capacity(n);
    let mut frame = vec![0u32; videos.len()];
    while records.len() < n {
        let vi = rng.gen_range(0..videos.len());
        let h = &videos[vi];
        frame[vi] += rng.gen_range(1..=3);
        let persons = rng.gen_range(1..=4).min(n - records.len());
        let base = rng.gen_range(0..5);
        for p in 0..persons {
            let label = match rng.gen_range(0..3) {
                0 => None,
                1 => Some(Role::Speaker),
                _ => Some(Role::Listener),
            };
            records.push(VgsRecord {
                video: h.video.clone(),
                frame: frame[vi],
                person_id: base + p as u32,
                head: grid_box(rng, h.width, h.height),
                gaze: grid_box(rng, h.width, h.height),
                label,
            });
        }
    }
    let mut used: Vec<VideoHeader> = Vec::new();
    for r in &records {
        if !used.iter().any(|v| v.video == r.video) {
            used.push(videos.iter().find(|v| v.video == r.video).expect("known video").clone());
        }
    }
    VgsDataset { videos: used, records }
}

fn random_box<R: Rng>(rng: &mut R, span: f64) -> BBox {
    BBox::new(
        rng.gen_range(-8.0..span),
        rng.gen_range(-8.0..span),
        rng.gen_range(0.0..span / 2.0),
        rng.gen_range(0.0..span / 2.0),
    )
}

/// Up to `n` boxes clustered so that overlaps are common; scores repeat.
pub fn random_nms_instance<R: Rng>(rng: &mut R, n: usize) -> (Vec<BBox>, Vec<f64>, f64) {
    let k = rng.gen_range(0..=n);
    let boxes: Vec<BBox> = (0..k).map(|_| random_box(rng, 40.0)).collect();
    let scores = (0..k).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
    (boxes, scores, rng.gen_range(0.05..0.95))
}

/// Fractional boxes partly outside a `size x size` frame.
pub fn random_map_boxes<R: Rng>(rng: &mut R, size: usize) -> Vec<BBox> {
    let s = size as f64;
    (0..rng.gen_range(0..=6))
        .map(|_| {
            let q = |r: &mut R, lo: f64, hi: f64| (r.gen_range(lo..hi) * 4.0_f64).round() / 4.0;
            BBox::new(q(rng, -10.0, s), q(rng, -10.0, s), q(rng, 0.0, s / 2.0), q(rng, 0.0, s / 2.0))
        })
        .collect()
}

/// Detections and ground truth over two frames and two subjects, sharing boxes often.
pub fn random_ap_instance<R: Rng>(rng: &mut R, n: usize) -> (Vec<Detection>, Vec<GroundTruth>) {
    let key = |r: &mut R| (r.gen_range(0..2u32), if r.gen_bool(0.3) { None } else { Some(r.gen_range(0..2u32)) });
    let gts: Vec<GroundTruth> = (0..rng.gen_range(1..=n))
        .map(|_| {
            let (frame, person_id) = key(rng);
            GroundTruth { video: "v".into(), frame, person_id, bbox: random_box(rng, 30.0) }
        })
        .collect();
    let dets = (0..rng.gen_range(0..=n))
        .map(|_| {
            let (frame, person_id) = key(rng);
            let bbox = if rng.gen_bool(0.6) {
                let g = &gts[rng.gen_range(0..gts.len())];
                let j = rng.gen_range(-2.0..2.0);
                BBox::new(g.bbox.x + j, g.bbox.y, g.bbox.w, g.bbox.h)
            } else {
                random_box(rng, 30.0)
            };
            Detection { video: "v".into(), frame, person_id, bbox, score: rng.gen_range(0..4) as f64 / 3.0 }
        })
        .collect();
    (dets, gts)
}
