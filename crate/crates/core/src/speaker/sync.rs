use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    make_windows, AudioWindow, FaceTrack, LipWindow, SpeakerError, AUDIO_FRAMES, LIP_FRAMES, MOUTH_H, MOUTH_W,
};
use crate::audio::{mfcc_extract, AudioTrack, MfccConfig, MfccFrame, N_COEFFS};
use crate::data::{tracks_from_records, ClipData, IdentityRow, Role, SynthClip};
use crate::nn::loss::{contrastive_grad, contrastive_loss};
use crate::nn::{
    euclidean, l2_normalize, l2_normalize_backward, Checkpoint, LayerKind, Sequential, Sgd, SgdConfig, Tensor,
};

pub const EMBED_DIM: usize = 64;

/// Affine input normalisation fitted on the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub lip_mean: f64,
    pub lip_std: f64,
    pub mfcc_mean: Vec<f64>,
    pub mfcc_std: Vec<f64>,
}

impl Default for FeatureNorm {
    fn default() -> Self {
        Self { lip_mean: 0.0, lip_std: 1.0, mfcc_mean: vec![0.0; N_COEFFS], mfcc_std: vec![1.0; N_COEFFS] }
    }
}

impl FeatureNorm {
    pub fn fit(lips: &[LipWindow], audios: &[AudioWindow]) -> Self {
        let mut norm = Self::default();
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
        for w in lips {
            for &v in &w.patches {
                s += v as f64;
                s2 += (v as f64) * (v as f64);
                n += 1.0;
            }
        }
        if n > 0.0 {
            norm.lip_mean = s / n;
            norm.lip_std = (s2 / n - norm.lip_mean * norm.lip_mean).max(1e-12).sqrt();
        }
        if !audios.is_empty() {
            for c in 0..N_COEFFS {
                let vals = audios.iter().flat_map(|a| &a.mfcc[c * AUDIO_FRAMES..(c + 1) * AUDIO_FRAMES]);
                let n = (audios.len() * AUDIO_FRAMES) as f64;
                let mean = vals.clone().sum::<f64>() / n;
                let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                norm.mfcc_mean[c] = mean;
                norm.mfcc_std[c] = var.max(1e-12).sqrt();
            }
        }
        norm
    }
}

/// Visual and audio embedders plus the speaker threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncModel {
    pub visual: Sequential,
    pub audio: Sequential,
    pub norm: FeatureNorm,
    pub tau: f64,
}

fn visual_kinds() -> Vec<LayerKind> {
    vec![
        LayerKind::conv(LIP_FRAMES, 8, 3, 2, 1),
        LayerKind::Relu,
        LayerKind::conv(8, 16, 3, 2, 1),
        LayerKind::Relu,
        LayerKind::conv(16, 32, 3, 2, 1),
        LayerKind::Relu,
        LayerKind::linear(32 * 6 * 12, EMBED_DIM),
    ]
}

fn audio_kinds() -> Vec<LayerKind> {
    vec![
        LayerKind::conv(1, 8, 3, 1, 1),
        LayerKind::Relu,
        LayerKind::conv(8, 16, 3, 2, 1),
        LayerKind::Relu,
        LayerKind::linear(16 * 7 * 10, EMBED_DIM),
    ]
}

/// Unit vector along `raw`; an all-zero output maps to the first axis.
fn unit(raw: &[f64]) -> (Vec<f64>, f64) {
    let (y, n) = l2_normalize(raw);
    if n == 0.0 {
        let mut e = vec![0.0; raw.len()];
        e[0] = 1.0;
        return (e, 0.0);
    }
    (y, n)
}

impl SyncModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            visual: Sequential::from_kinds(&visual_kinds(), &mut rng),
            audio: Sequential::from_kinds(&audio_kinds(), &mut rng),
            norm: FeatureNorm::default(),
            tau: 1.0,
        }
    }

    pub fn lip_tensor(&self, w: &LipWindow) -> Result<Tensor, SpeakerError> {
        let want = LIP_FRAMES * MOUTH_H * MOUTH_W;
        if w.patches.len() != want {
            return Err(SpeakerError::Shape(format!("lip window has {} values, expected {want}", w.patches.len())));
        }
        let (m, s) = (self.norm.lip_mean, self.norm.lip_std);
        let data = w.patches.iter().map(|&v| (v as f64 - m) / s).collect();
        Ok(Tensor::new(vec![LIP_FRAMES, MOUTH_H, MOUTH_W], data)?)
    }

    pub fn audio_tensor(&self, w: &AudioWindow) -> Result<Tensor, SpeakerError> {
        let want = N_COEFFS * AUDIO_FRAMES;
        if w.mfcc.len() != want {
            return Err(SpeakerError::Shape(format!("audio window has {} values, expected {want}", w.mfcc.len())));
        }
        let data = w
            .mfcc
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / AUDIO_FRAMES;
                (v - self.norm.mfcc_mean[c]) / self.norm.mfcc_std[c]
            })
            .collect();
        Ok(Tensor::new(vec![1, N_COEFFS, AUDIO_FRAMES], data)?)
    }

    pub fn embed_visual(&self, w: &LipWindow) -> Result<Vec<f64>, SpeakerError> {
        let out = self.visual.infer(&self.lip_tensor(w)?)?;
        Ok(unit(out.data()).0)
    }

    pub fn embed_audio(&self, w: &AudioWindow) -> Result<Vec<f64>, SpeakerError> {
        let out = self.audio.infer(&self.audio_tensor(w)?)?;
        Ok(unit(out.data()).0)
    }

    pub fn to_checkpoint(&self, seed: u64, training: Option<SgdConfig>) -> Checkpoint {
        let mut ck =
            Checkpoint::new("sync", seed).with_network("visual", &self.visual).with_network("audio", &self.audio);
        ck.training = training;
        ck.extra.insert("norm".into(), serde_json::to_value(&self.norm).expect("norm serializes"));
        ck.extra.insert("tau".into(), serde_json::json!(self.tau));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SpeakerError> {
        let bad = |m: &str| SpeakerError::Nn(crate::nn::NnError::Checkpoint(m.to_string()));
        let norm: FeatureNorm = ck
            .extra
            .get("norm")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| bad(&format!("bad norm entry: {e}")))?
            .ok_or_else(|| bad("sync checkpoint lacks norm"))?;
        let tau = ck.extra.get("tau").and_then(|v| v.as_f64()).ok_or_else(|| bad("sync checkpoint lacks tau"))?;
        let model = Self { visual: ck.network("visual")?.clone(), audio: ck.network("audio")?.clone(), norm, tau };
        if model.visual.kinds() != visual_kinds() || model.audio.kinds() != audio_kinds() {
            return Err(bad("sync checkpoint has an unexpected architecture"));
        }
        Ok(model)
    }

    pub fn save(&self, dir: &Path, seed: u64, training: Option<SgdConfig>) -> Result<(), SpeakerError> {
        Ok(self.to_checkpoint(seed, training).save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<Self, SpeakerError> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }

    /// Rounds parameters to their stored precision.
    pub fn quantize(&mut self) {
        Checkpoint::quantize(&mut self.visual);
        Checkpoint::quantize(&mut self.audio);
    }
}

/// Euclidean distance between two embeddings.
pub fn sync_distance(v: &[f64], a: &[f64]) -> Result<f64, SpeakerError> {
    Ok(euclidean(v, a)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncPair {
    pub lip: usize,
    pub audio: usize,
    pub matched: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyncCorpus {
    pub lips: Vec<LipWindow>,
    pub audios: Vec<AudioWindow>,
    pub pairs: Vec<SyncPair>,
}

impl SyncCorpus {
    pub fn counts(&self) -> (usize, usize) {
        let m = self.pairs.iter().filter(|p| p.matched).count();
        (m, self.pairs.len() - m)
    }
}

/// A clip with one known speaker (or none) for building sync pairs.
#[derive(Debug, Clone)]
pub struct SyncClip<'a> {
    pub frames: &'a [RgbImage],
    pub audio: &'a AudioTrack,
    pub tracks: Vec<FaceTrack>,
    pub speaker: Option<u32>,
}

impl<'a> From<&'a SynthClip> for SyncClip<'a> {
    fn from(c: &'a SynthClip) -> Self {
        Self { frames: &c.frames, audio: &c.audio, tracks: c.tracks(), speaker: c.speaker }
    }
}

impl<'a> SyncClip<'a> {
    /// Tracks from the head boxes and the speaker from the record labels.
    /// A clip whose records name more than one speaker is rejected.
    pub fn from_clip_data(c: &'a ClipData) -> Result<Self, SpeakerError> {
        let audio = c
            .audio
            .as_ref()
            .ok_or_else(|| SpeakerError::InvalidCorpus(format!("clip {} has no audio", c.header.video)))?;
        let mut speakers: Vec<u32> =
            c.annotations.records.iter().filter(|r| r.label == Some(Role::Speaker)).map(|r| r.person_id).collect();
        speakers.sort_unstable();
        speakers.dedup();
        if speakers.len() > 1 {
            return Err(SpeakerError::InvalidCorpus(format!(
                "clip {} labels several speakers {speakers:?}",
                c.header.video
            )));
        }
        Ok(Self {
            frames: &c.frames,
            audio,
            tracks: tracks_from_records(&c.annotations, &c.header.video),
            speaker: speakers.first().copied(),
        })
    }
}

/// Matched and mismatched pairs from labelled clips.
///
/// Every `stride`-th speaker window gives one matched pair and one pair with
/// audio shifted by at least ten frames; at the same start a random listener
/// gives a pair with the aligned audio. Clips with an off-screen voice give
/// mismatched pairs only.
pub fn build_sync_corpus(
    clips: &[SyncClip],
    mfcc: &MfccConfig,
    stride: usize,
    seed: u64,
) -> Result<SyncCorpus, SpeakerError> {
    let stride = stride.max(1) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = SyncCorpus::default();
    for clip in clips {
        let stream = mfcc_extract(clip.audio, mfcc)?;
        let mut by_person: BTreeMap<u32, BTreeMap<u32, (LipWindow, AudioWindow)>> = BTreeMap::new();
        for track in &clip.tracks {
            let pairs = make_windows(track, clip.frames, &stream)?;
            by_person.insert(track.person_id, pairs.into_iter().map(|p| (p.0.start, p)).collect());
        }
        let any = by_person.values().next().map(|w| w.keys().copied().collect::<Vec<_>>()).unwrap_or_default();
        let mut listeners: Vec<u32> =
            clip.tracks.iter().map(|t| t.person_id).filter(|&p| Some(p) != clip.speaker).collect();
        listeners.sort_unstable();
        for &s in any.iter().filter(|&&s| s % stride == 0) {
            if let Some(sp) = clip.speaker {
                let Some((lip, audio)) = by_person[&sp].get(&s) else { continue };
                let li = corpus.lips.len();
                corpus.lips.push(lip.clone());
                let ai = corpus.audios.len();
                corpus.audios.push(audio.clone());
                corpus.pairs.push(SyncPair { lip: li, audio: ai, matched: true });
                let far: Vec<u32> = any.iter().copied().filter(|&t| t.abs_diff(s) >= 10).collect();
                if let Some(&t) = far.choose(&mut rng) {
                    corpus.audios.push(by_person[&sp][&t].1.clone());
                    corpus.pairs.push(SyncPair { lip: li, audio: corpus.audios.len() - 1, matched: false });
                }
                if let Some(&l) = listeners.choose(&mut rng) {
                    if let Some((lip, _)) = by_person[&l].get(&s) {
                        corpus.lips.push(lip.clone());
                        corpus.pairs.push(SyncPair { lip: corpus.lips.len() - 1, audio: ai, matched: false });
                    }
                }
            } else if let Some(&l) = listeners.choose(&mut rng) {
                let Some((lip, audio)) = by_person[&l].get(&s) else { continue };
                corpus.lips.push(lip.clone());
                corpus.audios.push(audio.clone());
                corpus.pairs.push(SyncPair {
                    lip: corpus.lips.len() - 1,
                    audio: corpus.audios.len() - 1,
                    matched: false,
                });
            }
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncTrainConfig {
    pub sgd: SgdConfig,
    pub margin: f64,
    /// Share of pairs held out to place the threshold.
    pub validation_fraction: f64,
}

impl Default for SyncTrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig { learning_rate: 0.01, momentum: 0.9, epochs: 12, batch_size: 8, seed: 0 },
            margin: 1.5,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyncTraining {
    pub model: SyncModel,
    pub epoch_losses: Vec<f64>,
    pub mean_matched: f64,
    pub mean_mismatched: f64,
    /// Pair accuracy of the threshold on the held-out pairs.
    pub validation_accuracy: f64,
}

fn pair_distance(model: &SyncModel, corpus: &SyncCorpus, p: &SyncPair) -> Result<f64, SpeakerError> {
    let v = model.embed_visual(&corpus.lips[p.lip])?;
    let a = model.embed_audio(&corpus.audios[p.audio])?;
    sync_distance(&v, &a)
}

/// One forward/backward pass over a pair; returns the loss and leaves
/// parameter gradients accumulated on both networks.
fn accumulate(model: &mut SyncModel, corpus: &SyncCorpus, p: &SyncPair, margin: f64) -> Result<f64, SpeakerError> {
    let y = if p.matched { 1.0 } else { 0.0 };
    let (vo, vt) = model.visual.forward(&model.lip_tensor(&corpus.lips[p.lip])?)?;
    let (ao, at) = model.audio.forward(&model.audio_tensor(&corpus.audios[p.audio])?)?;
    let (v, vn) = unit(vo.data());
    let (a, an) = unit(ao.data());
    let d = sync_distance(&v, &a)?;
    let loss = contrastive_loss(d, y, margin)?;
    let g = contrastive_grad(d, y, margin);
    if d > 1e-12 && g != 0.0 {
        let gv: Vec<f64> = v.iter().zip(&a).map(|(x, z)| g * (x - z) / d).collect();
        let ga: Vec<f64> = gv.iter().map(|x| -x).collect();
        let gvo = Tensor::new(vo.shape().to_vec(), l2_normalize_backward(&v, vn, &gv))?;
        let gao = Tensor::new(ao.shape().to_vec(), l2_normalize_backward(&a, an, &ga))?;
        model.visual.backward(&vt, &gvo, false)?;
        model.audio.backward(&at, &gao, false)?;
    }
    Ok(loss)
}

/// Trains both embedders with the contrastive loss and places the threshold
/// midway between the mean matched and mismatched distances of a held-out
/// share of the pairs.
pub fn train_sync(corpus: &SyncCorpus, cfg: &SyncTrainConfig) -> Result<SyncTraining, SpeakerError> {
    let (n_match, n_mismatch) = corpus.counts();
    if n_match == 0 || n_mismatch == 0 {
        return Err(SpeakerError::InvalidCorpus(format!(
            "need matched and mismatched pairs, got {n_match} matched and {n_mismatch} mismatched"
        )));
    }
    cfg.sgd.validate()?;
    if !(cfg.margin > 0.0) {
        return Err(SpeakerError::InvalidArgument(format!("margin must be positive, got {}", cfg.margin)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.seed);
    let mut model = SyncModel::new(rng.gen());
    model.norm = FeatureNorm::fit(&corpus.lips, &corpus.audios);

    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((corpus.pairs.len() as f64 * cfg.validation_fraction).round() as usize).min(corpus.pairs.len() - 1);
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    let has_both =
        |ix: &[usize]| ix.iter().any(|&i| corpus.pairs[i].matched) && ix.iter().any(|&i| !corpus.pairs[i].matched);
    if !has_both(&val) {
        val = train.clone();
    }

    let mut sgd = Sgd::new();
    let mut epoch_losses = Vec::with_capacity(cfg.sgd.epochs);
    for _ in 0..cfg.sgd.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train.chunks(cfg.sgd.batch_size) {
            model.visual.zero_grad();
            model.audio.zero_grad();
            for &i in batch {
                total += accumulate(&mut model, corpus, &corpus.pairs[i], cfg.margin)?;
            }
            let mut params = model.visual.params_mut();
            params.extend(model.audio.params_mut());
            sgd.step(&mut params, &cfg.sgd, 1.0 / batch.len() as f64)?;
        }
        epoch_losses.push(total / train.len() as f64);
    }
    model.visual.zero_grad();
    model.audio.zero_grad();

    let mut sums = [(0.0, 0usize); 2];
    let mut dists = Vec::with_capacity(val.len());
    for &i in &val {
        let p = &corpus.pairs[i];
        let d = pair_distance(&model, corpus, p)?;
        let s = &mut sums[p.matched as usize];
        s.0 += d;
        s.1 += 1;
        dists.push((d, p.matched));
    }
    let mean_mismatched = sums[0].0 / sums[0].1 as f64;
    let mean_matched = sums[1].0 / sums[1].1 as f64;
    model.tau = 0.5 * (mean_matched + mean_mismatched);
    let correct = dists.iter().filter(|(d, m)| (*d < model.tau) == *m).count();
    Ok(SyncTraining {
        validation_accuracy: correct as f64 / dists.len() as f64,
        model,
        epoch_losses,
        mean_matched,
        mean_mismatched,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityLabel {
    pub person_id: u32,
    pub label: Role,
    /// Median distance over covering windows, `+inf` when none covers the frame.
    pub score: f64,
    pub window_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub frame: u32,
    pub labels: Vec<IdentityLabel>,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Labels every visible person in every frame. The person with the lowest
/// median distance is the speaker when that distance is below `tau`; scores
/// within 1e-9 of each other go to the lower person id.
pub fn classify_speakers(
    tracks: &[FaceTrack],
    frames: &[RgbImage],
    mfcc: &[MfccFrame],
    model: &SyncModel,
    tau: f64,
) -> Result<Vec<FrameLabels>, SpeakerError> {
    let mut tracks: Vec<&FaceTrack> = tracks.iter().collect();
    tracks.sort_by_key(|t| t.person_id);
    for w in tracks.windows(2) {
        if w[0].person_id == w[1].person_id {
            return Err(SpeakerError::InvalidArgument(format!("person {} has two tracks", w[0].person_id)));
        }
    }
    let mut window_scores: Vec<BTreeMap<u32, f64>> = Vec::with_capacity(tracks.len());
    for t in &tracks {
        let mut scores = BTreeMap::new();
        for (lip, audio) in make_windows(t, frames, mfcc)? {
            let d = sync_distance(&model.embed_visual(&lip)?, &model.embed_audio(&audio)?)?;
            scores.insert(lip.start, d);
        }
        window_scores.push(scores);
    }
    let mut by_frame: BTreeMap<u32, Vec<IdentityLabel>> = BTreeMap::new();
    for (t, scores) in tracks.iter().zip(&window_scores) {
        for e in &t.entries {
            let lo = e.frame.saturating_sub(LIP_FRAMES as u32 - 1);
            let covering: Vec<f64> = scores.range(lo..=e.frame).map(|(_, &d)| d).collect();
            let mut sorted = covering.clone();
            by_frame.entry(e.frame).or_default().push(IdentityLabel {
                person_id: t.person_id,
                label: Role::Listener,
                score: median(&mut sorted),
                window_scores: covering,
            });
        }
    }
    Ok(by_frame
        .into_iter()
        .map(|(frame, mut labels)| {
            let best = labels.iter().map(|l| l.score).fold(f64::INFINITY, f64::min);
            if best < tau {
                if let Some(l) = labels.iter_mut().find(|l| l.score - best <= 1e-9) {
                    l.label = Role::Speaker;
                }
            }
            FrameLabels { frame, labels }
        })
        .collect())
}

/// Identity output rows; infinite scores are written as `null`.
pub fn identity_rows(video: &str, frames: &[FrameLabels]) -> Vec<IdentityRow> {
    frames
        .iter()
        .flat_map(|f| {
            f.labels.iter().map(move |l| IdentityRow {
                video: video.to_string(),
                frame: f.frame,
                person_id: l.person_id,
                label: l.label,
                score: l.score.is_finite().then_some(l.score),
            })
        })
        .collect()
}
