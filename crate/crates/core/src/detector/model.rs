use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{decode_box, generate_anchors, nms, roi_sampling, Anchor, DetectorError, ROI_SIZE};
use crate::geometry::{BBox, BoxParam};
use crate::nn::{Checkpoint, LayerKind, NnError, Sequential, SgdConfig, Tensor, Trace};

pub const MASK_SIZE: usize = 28;
pub const INPUT_CHANNELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Output channels of the stride-2 backbone convolutions.
    pub backbone_channels: Vec<usize>,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub pre_nms: usize,
    pub nms_iou: f64,
    pub post_nms: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub anchors_per_image: usize,
    pub positive_fraction: f64,
    pub mask_rois: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![8, 16, 32, 32],
            scales: vec![32.0, 64.0, 128.0],
            ratios: vec![0.5, 1.0, 2.0],
            pre_nms: 200,
            nms_iou: 0.7,
            post_nms: 20,
            positive_iou: 0.7,
            negative_iou: 0.3,
            anchors_per_image: 64,
            positive_fraction: 0.5,
            mask_rois: 4,
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&INPUT_CHANNELS)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(DetectorError::InvalidArgument("backbone needs at least one non-empty layer".into()));
        }
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(DetectorError::InvalidArgument("anchor scales and ratios must be non-empty".into()));
        }
        if self.scales.iter().chain(&self.ratios).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(DetectorError::InvalidArgument("anchor scales and ratios must be positive".into()));
        }
        if self.anchors_per_image == 0 || self.pre_nms == 0 || self.post_nms == 0 {
            return Err(DetectorError::InvalidArgument("sampling and proposal caps must be positive".into()));
        }
        Ok(())
    }
}

/// One detected box with its objectness, mask and pooled feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeCandidate {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    /// `28 x 28` probabilities.
    pub mask: Vec<f64>,
    /// `C x 7 x 7` ROIAlign output.
    pub feature: Vec<f64>,
}

/// Candidates of one frame with the feature map they were pooled from.
#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    pub candidates: Vec<GazeCandidate>,
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Sequential,
    pub rpn_trunk: Sequential,
    pub rpn_cls: Sequential,
    pub rpn_reg: Sequential,
    pub mask_head: Sequential,
}

/// Intermediate activations of one forward pass, kept for backward.
pub struct RpnPass {
    pub features: Tensor,
    pub backbone_trace: Trace,
    pub trunk_trace: Trace,
    pub cls: Tensor,
    pub cls_trace: Trace,
    pub reg: Tensor,
    pub reg_trace: Trace,
}

fn backbone_kinds(cfg: &DetectorConfig) -> Vec<LayerKind> {
    let mut kinds = Vec::new();
    let mut c = INPUT_CHANNELS;
    for &out in &cfg.backbone_channels {
        kinds.push(LayerKind::conv(c, out, 3, 2, 1));
        kinds.push(LayerKind::Relu);
        c = out;
    }
    kinds
}

fn mask_kinds(c: usize) -> Vec<LayerKind> {
    vec![
        LayerKind::conv(c, 16, 3, 1, 1),
        LayerKind::Relu,
        LayerKind::Upsample2x,
        LayerKind::conv(16, 16, 3, 1, 1),
        LayerKind::Relu,
        LayerKind::Upsample2x,
        LayerKind::conv(16, 1, 1, 1, 0),
        LayerKind::Sigmoid,
    ]
}

const NETWORKS: [&str; 5] = ["backbone", "rpn_trunk", "rpn_cls", "rpn_reg", "mask_head"];

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.feature_channels();
        let a = config.anchors_per_cell();
        Ok(Self {
            backbone: Sequential::from_kinds(&backbone_kinds(&config), &mut rng),
            rpn_trunk: Sequential::from_kinds(&[LayerKind::conv(c, c, 3, 1, 1), LayerKind::Relu], &mut rng),
            rpn_cls: Sequential::from_kinds(&[LayerKind::conv(c, a, 1, 1, 0), LayerKind::Sigmoid], &mut rng),
            rpn_reg: Sequential::from_kinds(&[LayerKind::conv(c, 4 * a, 1, 1, 0)], &mut rng),
            mask_head: Sequential::from_kinds(&mask_kinds(c), &mut rng),
            config,
        })
    }

    pub fn networks(&self) -> [&Sequential; 5] {
        [&self.backbone, &self.rpn_trunk, &self.rpn_cls, &self.rpn_reg, &self.mask_head]
    }

    pub fn networks_mut(&mut self) -> [&mut Sequential; 5] {
        [&mut self.backbone, &mut self.rpn_trunk, &mut self.rpn_cls, &mut self.rpn_reg, &mut self.mask_head]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.networks_mut().into_iter().flat_map(|n| n.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for n in self.networks_mut() {
            n.zero_grad();
        }
    }

    pub fn spatial_scale(&self) -> f64 {
        1.0 / self.config.stride() as f64
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize), DetectorError> {
        let (c, h, w) = x.chw().map_err(|e| DetectorError::Shape(e.to_string()))?;
        if c != INPUT_CHANNELS {
            return Err(DetectorError::Shape(format!("detector input needs {INPUT_CHANNELS} channels, got {c}")));
        }
        let s = self.config.stride();
        if h < s || w < s {
            return Err(DetectorError::InvalidArgument(format!("image {h}x{w} is smaller than the stride {s}")));
        }
        Ok((h, w))
    }

    pub fn backbone_forward(&self, x: &Tensor) -> Result<Tensor, DetectorError> {
        self.check_input(x)?;
        Ok(self.backbone.infer(x)?)
    }

    /// Objectness (`A x h x w`, sigmoid) and deltas (`4A x h x w`) for a feature map.
    pub fn rpn_forward(&self, features: &Tensor) -> Result<(Tensor, Tensor), DetectorError> {
        let t = self.rpn_trunk.infer(features)?;
        Ok((self.rpn_cls.infer(&t)?, self.rpn_reg.infer(&t)?))
    }

    pub(crate) fn forward_train(&self, x: &Tensor) -> Result<RpnPass, DetectorError> {
        self.check_input(x)?;
        let (features, backbone_trace) = self.backbone.forward(x)?;
        let (trunk, trunk_trace) = self.rpn_trunk.forward(&features)?;
        let (cls, cls_trace) = self.rpn_cls.forward(&trunk)?;
        let (reg, reg_trace) = self.rpn_reg.forward(&trunk)?;
        Ok(RpnPass { features, backbone_trace, trunk_trace, cls, cls_trace, reg, reg_trace })
    }

    pub fn anchors(&self, grid_h: usize, grid_w: usize) -> Vec<Anchor> {
        generate_anchors(grid_h, grid_w, self.config.stride() as f64, &self.config.scales, &self.config.ratios)
    }

    pub fn fcn_mask(&self, pooled: &Tensor) -> Result<Vec<f64>, DetectorError> {
        let c = self.config.feature_channels();
        if pooled.shape() != [c, ROI_SIZE, ROI_SIZE] {
            return Err(DetectorError::Shape(format!("mask head needs {c}x7x7 input, got {:?}", pooled.shape())));
        }
        Ok(self.mask_head.infer(pooled)?.into_data())
    }

    /// Backbone, RPN, decoding, NMS, ROIAlign and mask head. Candidates are
    /// sorted by descending score.
    pub fn detect(&self, x: &Tensor) -> Result<Detections, DetectorError> {
        let (h, w) = self.check_input(x)?;
        let features = self.backbone.infer(x)?;
        let (cls, reg) = self.rpn_forward(&features)?;
        let (_, gh, gw) = features.chw().map_err(|e| DetectorError::Shape(e.to_string()))?;
        let anchors = self.anchors(gh, gw);
        let a = self.config.anchors_per_cell();
        let n = gh * gw;
        let mut scored: Vec<(usize, f64)> = (0..anchors.len())
            .map(|k| {
                let (cell, ai) = (k / a, k % a);
                (k, cls.data()[ai * n + cell])
            })
            .collect();
        scored.sort_by(|p, q| q.1.total_cmp(&p.1));
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for &(k, s) in &scored {
            if boxes.len() == self.config.pre_nms {
                break;
            }
            let (cell, ai) = (k / a, k % a);
            let d: Vec<f64> = (0..4).map(|j| reg.data()[(4 * ai + j) * n + cell]).collect();
            let b = decode_box(&anchors[k], &BoxParam::from_slice(&d), w as f64, h as f64);
            if b.w >= 1.0 && b.h >= 1.0 {
                boxes.push(b);
                scores.push(s);
            }
        }
        let keep = nms(&boxes, &scores, self.config.nms_iou);
        let mut candidates = Vec::new();
        for &i in keep.iter().take(self.config.post_nms) {
            let s = roi_sampling(gh, gw, &boxes[i], self.spatial_scale())?;
            let pooled = s.apply(&features)?;
            let mask = self.fcn_mask(&pooled)?;
            candidates.push(GazeCandidate { bbox: boxes[i], score: scores[i], mask, feature: pooled.into_data() });
        }
        Ok(Detections { candidates, features })
    }

    pub fn to_checkpoint(&self, seed: u64, training: Option<SgdConfig>) -> Checkpoint {
        let mut ck = Checkpoint::new("detector", seed);
        for (name, net) in NETWORKS.iter().zip(self.networks()) {
            ck = ck.with_network(*name, net);
        }
        ck.training = training;
        ck.extra.insert("config".into(), serde_json::to_value(&self.config).expect("config serializes"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DetectorError> {
        let config: DetectorConfig = ck
            .extra
            .get("config")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| NnError::Checkpoint(format!("bad detector config: {e}")))?
            .ok_or_else(|| NnError::Checkpoint("detector checkpoint lacks config".into()))?;
        let mut d = Self::new(config, 0)?;
        for (name, net) in NETWORKS.iter().zip(d.networks_mut()) {
            let stored = ck.network(name)?;
            if stored.kinds() != net.kinds() {
                return Err(NnError::Checkpoint(format!("network {name} does not match the detector config")).into());
            }
            *net = stored.clone();
        }
        Ok(d)
    }

    pub fn save(&self, dir: &Path, seed: u64, training: Option<SgdConfig>) -> Result<(), DetectorError> {
        Ok(self.to_checkpoint(seed, training).save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<Self, DetectorError> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }

    pub fn quantize(&mut self) {
        for n in self.networks_mut() {
            Checkpoint::quantize(n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(h: usize, w: usize) -> Tensor {
        let data = (0..5 * h * w).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect();
        Tensor::new(vec![5, h, w], data).unwrap()
    }

    fn zero_heads(d: &mut Detector) {
        for net in [&mut d.rpn_cls, &mut d.rpn_reg, &mut d.mask_head] {
            for p in net.params_mut() {
                p.data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn stride_and_channel_checks() {
        let d = Detector::new(DetectorConfig::default(), 1).unwrap();
        let f = d.backbone_forward(&input(256, 256)).unwrap();
        assert_eq!(f.shape(), &[32, 16, 16]);
        let three = Tensor::zeros(vec![3, 64, 64]);
        assert!(matches!(d.backbone_forward(&three), Err(DetectorError::Shape(_))));
        assert!(matches!(d.backbone_forward(&Tensor::zeros(vec![5, 8, 8])), Err(DetectorError::InvalidArgument(_))));
        assert_eq!(f, d.backbone_forward(&input(256, 256)).unwrap());
    }

    #[test]
    fn zero_heads_give_half_scores_and_zero_deltas() {
        let mut d = Detector::new(DetectorConfig::default(), 2).unwrap();
        zero_heads(&mut d);
        let f = d.backbone_forward(&input(64, 64)).unwrap();
        let (cls, reg) = d.rpn_forward(&f).unwrap();
        assert_eq!(cls.len(), d.anchors(4, 4).len());
        assert!(cls.data().iter().all(|&p| p == 0.5));
        assert!(reg.data().iter().all(|&t| t == 0.0));
        let mask = d.fcn_mask(&Tensor::filled(vec![32, 7, 7], 0.3)).unwrap();
        assert_eq!(mask.len(), 28 * 28);
        assert!(mask.iter().all(|&p| p == 0.5));
        assert!(d.fcn_mask(&Tensor::zeros(vec![16, 7, 7])).is_err());
    }

    #[test]
    fn untrained_detect_is_capped_and_deterministic() {
        let mut d = Detector::new(DetectorConfig::default(), 3).unwrap();
        zero_heads(&mut d);
        let x = input(128, 128);
        let out = d.detect(&x).unwrap();
        assert!(!out.candidates.is_empty() && out.candidates.len() <= 20);
        assert!(out.candidates.iter().all(|c| (c.score - 0.5).abs() < 1e-12 && c.bbox.within(128.0, 128.0)));
        assert_eq!(out, d.detect(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut d = Detector::new(DetectorConfig::default(), 4).unwrap();
        d.quantize();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path(), 4, None).unwrap();
        assert_eq!(Detector::load(dir.path()).unwrap(), d);
    }
}
