//! Subject-to-candidate matching with a small MLP over pair features.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{roi_sampling, DetectorError, GazeCandidate, ROI_SIZE};
use crate::geometry::{iou, BBox};
use crate::nn::gradcheck::GradModel;
use crate::nn::loss::{bce_clamped, bce_grad};
use crate::nn::{bce_loss, Checkpoint, LayerKind, NnError, Sequential, Sgd, SgdConfig, Tensor};

/// Geometry block plus identity bit.
pub const PAIR_EXTRA: usize = 5;
pub const HIDDEN: [usize; 2] = [64, 32];
/// Pairs at or above this IoU with the subject's target are positives.
pub const POSITIVE_IOU: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum MatcherError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectDescriptor {
    pub person_id: u32,
    /// 1 for a speaker, 0 for a listener.
    pub identity: u8,
    /// `C x 7 x 7` aligned pooling of the face box.
    pub feature: Vec<f64>,
    /// Face box divided by image width and height.
    pub head: BBox,
}

impl SubjectDescriptor {
    /// Pools `face` (pixels) from a `C x H x W` feature map at `spatial_scale`.
    pub fn from_features(
        person_id: u32,
        identity: u8,
        face: &BBox,
        features: &Tensor,
        spatial_scale: f64,
        width: f64,
        height: f64,
    ) -> Result<Self, MatcherError> {
        let (_, gh, gw) = features.chw().map_err(|e| MatcherError::Shape(e.to_string()))?;
        let pooled = roi_sampling(gh, gw, face, spatial_scale)?.apply(features)?;
        Ok(Self { person_id, identity, feature: pooled.into_data(), head: face.scale(1.0 / width, 1.0 / height) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub person_id: u32,
    /// `None` when there were no candidates.
    pub chosen: Option<usize>,
    pub probability: f64,
    pub probabilities: Vec<f64>,
}

fn channel_means(pooled: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let bins = ROI_SIZE * ROI_SIZE;
    pooled.chunks(bins).map(move |c| c.iter().sum::<f64>() / bins as f64)
}

/// `[subject channel means, candidate channel means, dx/W, dy/H, ln(wc/ws), ln(hc/hs), identity]`.
pub fn pair_features(
    subject: &SubjectDescriptor,
    candidate: &GazeCandidate,
    width: f64,
    height: f64,
) -> Result<Vec<f64>, MatcherError> {
    let s = subject.head.scale(width, height);
    if !s.is_finite() || s.w <= 0.0 || s.h <= 0.0 {
        return Err(MatcherError::InvalidArgument(format!("subject {} has a degenerate head box", subject.person_id)));
    }
    let c = candidate.bbox;
    if !c.is_finite() || c.w <= 0.0 || c.h <= 0.0 {
        return Err(MatcherError::InvalidArgument(format!("degenerate candidate box {c:?}")));
    }
    if subject.feature.len() != candidate.feature.len() {
        return Err(MatcherError::Shape(format!(
            "subject feature has {} values, candidate {}",
            subject.feature.len(),
            candidate.feature.len()
        )));
    }
    let (scx, scy) = s.center();
    let (ccx, ccy) = c.center();
    let mut out: Vec<f64> = channel_means(&subject.feature).chain(channel_means(&candidate.feature)).collect();
    out.extend([
        (ccx - scx) / width,
        (ccy - scy) / height,
        (c.w / s.w).ln(),
        (c.h / s.h).ln(),
        subject.identity as f64,
    ]);
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PairNorm {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|j| {
                let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v.sqrt() > 1e-8 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

fn mlp_kinds(input: usize) -> Vec<LayerKind> {
    vec![
        LayerKind::linear(input, HIDDEN[0]),
        LayerKind::Relu,
        LayerKind::linear(HIDDEN[0], HIDDEN[1]),
        LayerKind::Relu,
        LayerKind::linear(HIDDEN[1], 1),
        LayerKind::Sigmoid,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matcher {
    pub mlp: Sequential,
    pub norm: PairNorm,
}

impl Matcher {
    /// `feature_channels` is the detector's feature width `C`; input size is `2C + 5`.
    pub fn new(feature_channels: usize, seed: u64) -> Self {
        let dim = 2 * feature_channels + PAIR_EXTRA;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { mlp: Sequential::from_kinds(&mlp_kinds(dim), &mut rng), norm: PairNorm::identity(dim) }
    }

    pub fn input_dim(&self) -> usize {
        self.norm.mean.len()
    }

    fn input(&self, features: &[f64]) -> Result<Tensor, MatcherError> {
        if features.len() != self.input_dim() {
            return Err(MatcherError::Shape(format!(
                "pair has {} features, matcher expects {}",
                features.len(),
                self.input_dim()
            )));
        }
        Ok(Tensor::new(vec![features.len()], self.norm.apply(features))?)
    }

    /// Match probability of one pair feature vector.
    pub fn score(&self, features: &[f64]) -> Result<f64, MatcherError> {
        Ok(self.mlp.infer(&self.input(features)?)?.data()[0])
    }

    pub fn to_checkpoint(&self, seed: u64, training: Option<SgdConfig>) -> Checkpoint {
        let mut ck = Checkpoint::new("matcher", seed).with_network("mlp", &self.mlp);
        ck.training = training;
        ck.extra.insert("norm".into(), serde_json::to_value(&self.norm).expect("norm serializes"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, MatcherError> {
        let bad = |m: String| MatcherError::Nn(NnError::Checkpoint(m));
        let norm: PairNorm = ck
            .extra
            .get("norm")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| bad(format!("bad norm entry: {e}")))?
            .ok_or_else(|| bad("matcher checkpoint lacks norm".into()))?;
        let mlp = ck.network("mlp")?.clone();
        if norm.std.len() != norm.mean.len() || mlp.kinds() != mlp_kinds(norm.mean.len()) {
            return Err(bad("matcher checkpoint has an unexpected architecture".into()));
        }
        Ok(Self { mlp, norm })
    }

    pub fn save(&self, dir: &Path, seed: u64, training: Option<SgdConfig>) -> Result<(), MatcherError> {
        Ok(self.to_checkpoint(seed, training).save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<Self, MatcherError> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }

    pub fn quantize(&mut self) {
        Checkpoint::quantize(&mut self.mlp);
    }
}

/// One result per subject; with no candidates `chosen` is `None`.
pub fn match_subjects(
    subjects: &[SubjectDescriptor],
    candidates: &[GazeCandidate],
    matcher: &Matcher,
    width: f64,
    height: f64,
) -> Result<Vec<MatchResult>, MatcherError> {
    subjects
        .iter()
        .map(|s| {
            let probabilities = candidates
                .iter()
                .map(|c| matcher.score(&pair_features(s, c, width, height)?))
                .collect::<Result<Vec<_>, _>>()?;
            let chosen = argmax(&probabilities);
            let probability = chosen.map_or(0.0, |i| probabilities[i]);
            Ok(MatchResult { person_id: s.person_id, chosen, probability, probabilities })
        })
        .collect()
}

/// One frame of matcher training data. `targets[i]` is the gaze box of
/// `subjects[i]`; `None` leaves every pair of that subject negative.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherSample {
    pub subjects: Vec<SubjectDescriptor>,
    pub candidates: Vec<GazeCandidate>,
    pub targets: Vec<Option<BBox>>,
    pub width: f64,
    pub height: f64,
}

/// Labelled pair features of a sample.
pub fn labelled_pairs(sample: &MatcherSample) -> Result<Vec<(Vec<f64>, f64)>, MatcherError> {
    if sample.targets.len() != sample.subjects.len() {
        return Err(MatcherError::InvalidArgument(format!(
            "{} subjects but {} targets",
            sample.subjects.len(),
            sample.targets.len()
        )));
    }
    let mut out = Vec::with_capacity(sample.subjects.len() * sample.candidates.len());
    for (s, t) in sample.subjects.iter().zip(&sample.targets) {
        for c in &sample.candidates {
            let y = match t {
                Some(t) if iou(&c.bbox, t) >= POSITIVE_IOU => 1.0,
                _ => 0.0,
            };
            out.push((pair_features(s, c, sample.width, sample.height)?, y));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherTrainConfig {
    pub sgd: SgdConfig,
}

impl Default for MatcherTrainConfig {
    fn default() -> Self {
        Self { sgd: SgdConfig { learning_rate: 0.01, batch_size: 16, ..SgdConfig::default() } }
    }
}

#[derive(Debug, Clone)]
pub struct MatcherTraining {
    pub matcher: Matcher,
    pub epoch_losses: Vec<f64>,
}

fn pair_step(
    mlp: &mut Sequential,
    x: &Tensor,
    y: f64,
    grads: bool,
    pattern: Option<&mut Vec<u8>>,
) -> Result<f64, NnError> {
    let (out, trace) = mlp.forward(x)?;
    let p = out.data()[0];
    if let Some(pat) = pattern {
        trace.activation_pattern(pat);
        pat.push(bce_clamped(p) as u8);
    }
    if grads {
        let g = Tensor::new(out.shape().to_vec(), vec![bce_grad(p, y)])?;
        mlp.backward(&trace, &g, false)?;
    }
    bce_loss(p, y)
}

/// Fits the pair normalisation and trains the MLP on mean pair BCE.
pub fn train_matcher(
    samples: &[MatcherSample],
    feature_channels: usize,
    cfg: &MatcherTrainConfig,
) -> Result<MatcherTraining, MatcherError> {
    cfg.sgd.validate()?;
    let mut pairs = Vec::new();
    for s in samples {
        pairs.extend(labelled_pairs(s)?);
    }
    if !pairs.iter().any(|p| p.1 == 1.0) {
        return Err(MatcherError::InvalidCorpus("no candidate overlaps its subject's gaze target".into()));
    }
    let mut matcher = Matcher::new(feature_channels, cfg.sgd.seed);
    if let Some(p) = pairs.iter().find(|p| p.0.len() != matcher.input_dim()) {
        return Err(MatcherError::Shape(format!(
            "pair has {} features, matcher expects {}",
            p.0.len(),
            matcher.input_dim()
        )));
    }
    let rows: Vec<Vec<f64>> = pairs.iter().map(|p| p.0.clone()).collect();
    matcher.norm = PairNorm::fit(&rows);
    let inputs: Vec<Tensor> = rows.iter().map(|r| matcher.input(r)).collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.seed ^ 0x6d61_7463);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut sgd = Sgd::new();
    let mut epoch_losses = Vec::with_capacity(cfg.sgd.epochs);
    for _ in 0..cfg.sgd.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.sgd.batch_size) {
            matcher.mlp.zero_grad();
            for &i in batch {
                total += pair_step(&mut matcher.mlp, &inputs[i], pairs[i].1, true, None)?;
            }
            sgd.step(&mut matcher.mlp.params_mut(), &cfg.sgd, 1.0 / batch.len() as f64)?;
        }
        epoch_losses.push(total / pairs.len() as f64);
    }
    matcher.mlp.zero_grad();
    Ok(MatcherTraining { matcher, epoch_losses })
}

/// Mean pair BCE over a fixed set of normalised pairs, as a finite-difference target.
pub struct PairLossProbe {
    pub mlp: Sequential,
    pub pairs: Vec<(Tensor, f64)>,
}

impl GradModel for PairLossProbe {
    fn block_count(&self) -> usize {
        self.mlp.params().len()
    }

    fn block_name(&self, index: usize) -> String {
        format!("mlp:{}", self.mlp.params()[index].0)
    }

    fn block(&mut self, index: usize) -> &mut Tensor {
        self.mlp.params_mut().swap_remove(index)
    }

    fn evaluate(&mut self, grads: bool, pattern: &mut Vec<u8>) -> Result<f64, NnError> {
        if grads {
            self.mlp.zero_grad();
        }
        let n = self.pairs.len() as f64;
        let mut total = 0.0;
        for (x, y) in &self.pairs {
            total += pair_step(&mut self.mlp, x, *y, grads, Some(pattern))?;
        }
        if grads {
            for p in self.mlp.params_mut() {
                p.grad_mut().iter_mut().for_each(|g| *g /= n);
            }
        }
        Ok(total / n)
    }
}

/// One line of the match dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub video: String,
    pub frame: u32,
    pub person_id: u32,
    pub target_box: Option<BBox>,
    pub probability: f64,
}

pub fn write_matches(records: &[MatchRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("match records serialize") + "\n").collect()
}

pub fn read_matches(text: &str) -> Result<Vec<MatchRecord>, MatcherError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MatcherError::InvalidArgument(format!("line {}: {e}", i + 1)))
        })
        .collect()
}
