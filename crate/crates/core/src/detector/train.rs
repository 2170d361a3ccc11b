use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode_box, roi_sampling, Anchor, Detector, DetectorConfig, DetectorError, RoiSampling, MASK_SIZE};
use crate::enhance::{build_identity_maps, enhance_frame, IdentityMaps};
use crate::geometry::{iou, BBox, BoxParam};
use crate::nn::gradcheck::GradModel;
use crate::nn::loss::{bbox_loss_grad, bce_clamped, bce_grad};
use crate::nn::{bbox_loss, bce_loss, NnError, Sgd, SgdConfig, Tensor};

/// A training frame: RGB, face boxes for the identity maps, gaze-target boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSample {
    pub frame: RgbImage,
    pub speakers: Vec<BBox>,
    pub listeners: Vec<BBox>,
    pub targets: Vec<BBox>,
}

impl DetectorSample {
    /// Five-channel input; with `zero_identity` both identity channels are zero.
    pub fn enhanced(&self, zero_identity: bool) -> Result<Tensor, DetectorError> {
        let (w, h) = (self.frame.width() as usize, self.frame.height() as usize);
        let maps = if zero_identity {
            IdentityMaps::zeros(h, w)
        } else {
            build_identity_maps(&self.speakers, &self.listeners, h as i64, w as i64)?
        };
        Ok(enhance_frame(&self.frame, &maps)?)
    }
}

/// Anchor labels: `1` positive, `0` negative, `-1` ignored; plus the index of
/// the best-overlapping target of every anchor.
pub fn assign_anchors(anchors: &[Anchor], targets: &[BBox], cfg: &DetectorConfig) -> (Vec<i8>, Vec<usize>) {
    let boxes: Vec<BBox> = anchors.iter().map(Anchor::to_box).collect();
    let mut labels = vec![0i8; anchors.len()];
    let mut best = vec![0usize; anchors.len()];
    if targets.is_empty() {
        return (labels, best);
    }
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut per_target = vec![0.0f64; targets.len()];
    let ious: Vec<Vec<f64>> = boxes.iter().map(|a| targets.iter().map(|t| iou(a, t)).collect()).collect();
    for (k, row) in ious.iter().enumerate() {
        for (g, &v) in row.iter().enumerate() {
            if v > best_iou[k] {
                best_iou[k] = v;
                best[k] = g;
            }
            per_target[g] = per_target[g].max(v);
        }
    }
    for k in 0..anchors.len() {
        labels[k] = if best_iou[k] >= cfg.positive_iou {
            1
        } else if best_iou[k] <= cfg.negative_iou {
            0
        } else {
            -1
        };
    }
    for (k, row) in ious.iter().enumerate() {
        for (g, &v) in row.iter().enumerate() {
            if per_target[g] > 0.0 && v == per_target[g] {
                labels[k] = 1;
                best[k] = g;
            }
        }
    }
    (labels, best)
}

/// Anchors and mask regions entering the loss of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPlan {
    /// Sampled anchors with their objectness label.
    pub sampled: Vec<(usize, f64)>,
    /// Positive anchors with their regression target.
    pub regress: Vec<(usize, BoxParam)>,
    /// Mask regions (positive anchor boxes) and `28 x 28` targets.
    pub masks: Vec<(BBox, Vec<f64>)>,
}

/// Target box rasterized into the `28 x 28` frame of `roi` (cell centres).
pub fn mask_target(roi: &BBox, target: &BBox) -> Vec<f64> {
    let mut out = vec![0.0; MASK_SIZE * MASK_SIZE];
    for u in 0..MASK_SIZE {
        let y = roi.y + (u as f64 + 0.5) * roi.h / MASK_SIZE as f64;
        for v in 0..MASK_SIZE {
            let x = roi.x + (v as f64 + 0.5) * roi.w / MASK_SIZE as f64;
            if x >= target.x && x <= target.x2() && y >= target.y && y <= target.y2() {
                out[u * MASK_SIZE + v] = 1.0;
            }
        }
    }
    out
}

pub fn plan_anchors<R: Rng>(anchors: &[Anchor], targets: &[BBox], cfg: &DetectorConfig, rng: &mut R) -> AnchorPlan {
    let (labels, best) = assign_anchors(anchors, targets, cfg);
    let mut pos: Vec<usize> = (0..anchors.len()).filter(|&k| labels[k] == 1).collect();
    let mut neg: Vec<usize> = (0..anchors.len()).filter(|&k| labels[k] == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = ((cfg.anchors_per_image as f64 * cfg.positive_fraction).floor() as usize).min(pos.len());
    pos.truncate(max_pos);
    neg.truncate(cfg.anchors_per_image - pos.len());
    let mut sampled: Vec<(usize, f64)> = pos.iter().map(|&k| (k, 1.0)).chain(neg.iter().map(|&k| (k, 0.0))).collect();
    sampled.sort_by_key(|s| s.0);
    pos.sort_unstable();
    let regress = pos.iter().map(|&k| (k, encode_box(&anchors[k], &targets[best[k]]))).collect();
    let masks = pos
        .iter()
        .take(cfg.mask_rois)
        .map(|&k| {
            let roi = anchors[k].to_box();
            (roi, mask_target(&roi, &targets[best[k]]))
        })
        .collect();
    AnchorPlan { sampled, regress, masks }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub objectness: f64,
    pub boxes: f64,
    pub mask: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.objectness + self.boxes + self.mask
    }
}

/// Mean BCE over sampled anchors, mean smooth-L1 box loss over positives
/// and mean per-pixel mask BCE over mask regions. With `grads`, parameter
/// gradients are accumulated on `det`.
pub fn detector_loss(
    det: &mut Detector,
    x: &Tensor,
    plan: &AnchorPlan,
    grads: bool,
    pattern: Option<&mut Vec<u8>>,
) -> Result<LossParts, DetectorError> {
    let pass = det.forward_train(x)?;
    let (c, gh, gw) = pass.features.chw().map_err(|e| DetectorError::Shape(e.to_string()))?;
    let n = gh * gw;
    let a = det.config.anchors_per_cell();
    let mut parts = LossParts::default();
    let mut sig = Vec::new();

    let mut g_cls = vec![0.0; pass.cls.len()];
    let ns = plan.sampled.len().max(1) as f64;
    for &(k, y) in &plan.sampled {
        let i = (k % a) * n + k / a;
        let p = pass.cls.data()[i];
        parts.objectness += bce_loss(p, y)? / ns;
        g_cls[i] += bce_grad(p, y) / ns;
        sig.push(bce_clamped(p) as u8);
    }

    let mut g_reg = vec![0.0; pass.reg.len()];
    let np = plan.regress.len().max(1) as f64;
    for &(k, target) in &plan.regress {
        let (cell, ai) = (k / a, k % a);
        let idx: [usize; 4] = [0, 1, 2, 3].map(|j| (4 * ai + j) * n + cell);
        let t = BoxParam::from_slice(&idx.map(|i| pass.reg.data()[i]));
        parts.boxes += bbox_loss(&t, &target)? / np;
        for (j, g) in bbox_loss_grad(&t, &target).iter().enumerate() {
            g_reg[idx[j]] += g / np;
        }
    }

    let nm = plan.masks.len().max(1) as f64;
    let pixels = (MASK_SIZE * MASK_SIZE) as f64;
    let mut mask_passes: Vec<(RoiSampling, crate::nn::Trace, Tensor)> = Vec::new();
    for (roi, target) in &plan.masks {
        let s = roi_sampling(gh, gw, roi, det.spatial_scale())?;
        let pooled = s.apply(&pass.features)?;
        let (m, trace) = det.mask_head.forward(&pooled)?;
        let mut g = vec![0.0; m.len()];
        for (i, (&p, &y)) in m.data().iter().zip(target).enumerate() {
            parts.mask += bce_loss(p, y)? / (pixels * nm);
            g[i] = bce_grad(p, y) / (pixels * nm);
            sig.push(bce_clamped(p) as u8);
        }
        let g = Tensor::new(m.shape().to_vec(), g)?;
        mask_passes.push((s, trace, g));
    }

    if let Some(pat) = pattern {
        pass.backbone_trace.activation_pattern(pat);
        pass.trunk_trace.activation_pattern(pat);
        pass.cls_trace.activation_pattern(pat);
        for (_, t, _) in &mask_passes {
            t.activation_pattern(pat);
        }
        pat.extend_from_slice(&sig);
    }

    if grads {
        let g_cls = Tensor::new(pass.cls.shape().to_vec(), g_cls)?;
        let g_reg = Tensor::new(pass.reg.shape().to_vec(), g_reg)?;
        let mut g_trunk = det.rpn_cls.backward(&pass.cls_trace, &g_cls, true)?.expect("input gradient");
        let g2 = det.rpn_reg.backward(&pass.reg_trace, &g_reg, true)?.expect("input gradient");
        for (a, b) in g_trunk.data_mut().iter_mut().zip(g2.data()) {
            *a += b;
        }
        let mut g_feat = det.rpn_trunk.backward(&pass.trunk_trace, &g_trunk, true)?.expect("input gradient");
        for (s, trace, g) in &mask_passes {
            let g_pooled = det.mask_head.backward(trace, g, true)?.expect("input gradient");
            s.backward(&g_pooled, g_feat.data_mut());
        }
        debug_assert_eq!(g_feat.len(), c * n);
        det.backbone.backward(&pass.backbone_trace, &g_feat, false)?;
    }
    Ok(parts)
}

/// The full detector loss on a fixed image and anchor plan, as a
/// finite-difference target.
pub struct DetectorLossProbe {
    pub detector: Detector,
    pub input: Tensor,
    pub plan: AnchorPlan,
}

impl DetectorLossProbe {
    fn locate(&self, index: usize) -> (usize, usize) {
        let mut i = index;
        for (n, net) in self.detector.networks().iter().enumerate() {
            let k = net.params().len();
            if i < k {
                return (n, i);
            }
            i -= k;
        }
        panic!("block {index} out of range");
    }
}

impl GradModel for DetectorLossProbe {
    fn block_count(&self) -> usize {
        self.detector.networks().iter().map(|n| n.params().len()).sum()
    }

    fn block_name(&self, index: usize) -> String {
        let (n, i) = self.locate(index);
        let names = ["backbone", "rpn_trunk", "rpn_cls", "rpn_reg", "mask_head"];
        format!("{}:{}", names[n], self.detector.networks()[n].params()[i].0)
    }

    fn block(&mut self, index: usize) -> &mut Tensor {
        let (n, i) = self.locate(index);
        self.detector.networks_mut()[n].params_mut().swap_remove(i)
    }

    fn evaluate(&mut self, grads: bool, pattern: &mut Vec<u8>) -> Result<f64, NnError> {
        if grads {
            self.detector.zero_grad();
        }
        let parts = detector_loss(&mut self.detector, &self.input, &self.plan, grads, Some(pattern))
            .map_err(|e| NnError::InvalidArgument(e.to_string()))?;
        Ok(parts.total())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DetectorTrainConfig {
    pub sgd: SgdConfig,
    pub detector: DetectorConfig,
    /// Train on frames whose identity channels are zero.
    pub zero_identity: bool,
}

#[derive(Debug, Clone)]
pub struct DetectorTraining {
    pub detector: Detector,
    pub epoch_losses: Vec<f64>,
}

pub fn train_detector(
    samples: &[DetectorSample],
    cfg: &DetectorTrainConfig,
) -> Result<DetectorTraining, DetectorError> {
    cfg.sgd.validate()?;
    for (i, s) in samples.iter().enumerate() {
        let (w, h) = (s.frame.width() as f64, s.frame.height() as f64);
        for t in &s.targets {
            if !t.is_finite() || t.area() <= 0.0 || !t.within(w, h) {
                return Err(DetectorError::InvalidArgument(format!("sample {i}: invalid target box {t:?}")));
            }
        }
    }
    if samples.iter().all(|s| s.targets.is_empty()) {
        return Err(DetectorError::InvalidCorpus("no sample has a target box, so no anchor can be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.seed);
    let mut det = Detector::new(cfg.detector.clone(), rng.gen())?;
    let mut sgd = Sgd::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.sgd.epochs);
    let mut anchors: Option<((usize, usize), Vec<Anchor>)> = None;
    for _ in 0..cfg.sgd.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.sgd.batch_size) {
            det.zero_grad();
            for &i in batch {
                let x = samples[i].enhanced(cfg.zero_identity)?;
                let (_, h, w) = x.chw().map_err(|e| DetectorError::Shape(e.to_string()))?;
                let s = det.config.stride();
                let grid = (h.div_ceil(s), w.div_ceil(s));
                if anchors.as_ref().map(|a| a.0) != Some(grid) {
                    anchors = Some((grid, det.anchors(grid.0, grid.1)));
                }
                let plan = plan_anchors(&anchors.as_ref().expect("set").1, &samples[i].targets, &det.config, &mut rng);
                total += detector_loss(&mut det, &x, &plan, true, None)?.total();
            }
            let mut params = det.params_mut();
            sgd.step(&mut params, &cfg.sgd, 1.0 / batch.len() as f64)?;
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    det.zero_grad();
    Ok(DetectorTraining { detector: det, epoch_losses })
}
