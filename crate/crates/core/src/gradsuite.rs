//! Seeded finite-difference checks over every layer kind and every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detector::{plan_anchors, Detector, DetectorConfig, DetectorLossProbe};
use crate::geometry::{BBox, BoxParam};
use crate::matcher::{Matcher, PairLossProbe};
use crate::nn::gradcheck::{check, GradCheckConfig, GradCheckReport, GradModel, NetworkProbe};
use crate::nn::loss::{bbox_loss_grad, bce_clamped, bce_grad, contrastive_grad, smooth_l1_grad};
use crate::nn::{bbox_loss, bce_loss, contrastive_loss, smooth_l1, LayerKind, NnError, Sequential, Tensor};

pub const SUITE_KINDS: [&str; 13] = [
    "conv",
    "linear",
    "relu",
    "maxpool",
    "sigmoid",
    "upsample",
    "smooth_l1",
    "bbox",
    "bce",
    "contrastive",
    "mask_bce",
    "detector",
    "matcher",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteCase {
    pub kind: &'static str,
    pub seed: u64,
    pub passed: bool,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl SuiteCase {
    fn new(kind: &'static str, seed: u64, r: &GradCheckReport) -> Self {
        Self {
            kind,
            seed,
            passed: r.passed() && r.checked() > 0,
            checked: r.checked(),
            max_rel_error: r.max_rel_error(),
        }
    }
}

type VectorLoss = Box<dyn Fn(&[f64]) -> Result<(f64, Vec<f64>, Vec<u8>), NnError>>;

/// A loss of a single input vector with its analytic gradient and branch signature.
struct VectorProbe {
    input: Tensor,
    f: VectorLoss,
}

impl VectorProbe {
    /// Sum of `f(i, x_i)` over the elements.
    fn elementwise(input: Tensor, f: impl Fn(usize, f64) -> Result<(f64, f64, u8), NnError> + 'static) -> Self {
        let f: VectorLoss = Box::new(move |x| {
            let (mut total, mut g, mut b) = (0.0, Vec::with_capacity(x.len()), Vec::with_capacity(x.len()));
            for (i, &v) in x.iter().enumerate() {
                let (l, d, branch) = f(i, v)?;
                total += l;
                g.push(d);
                b.push(branch);
            }
            Ok((total, g, b))
        });
        Self { input, f }
    }
}

impl GradModel for VectorProbe {
    fn block_count(&self) -> usize {
        1
    }

    fn block_name(&self, _: usize) -> String {
        "input".into()
    }

    fn block(&mut self, _: usize) -> &mut Tensor {
        &mut self.input
    }

    fn evaluate(&mut self, grads: bool, pattern: &mut Vec<u8>) -> Result<f64, NnError> {
        let (loss, g, branches) = (self.f)(self.input.data())?;
        pattern.extend(branches);
        if grads {
            self.input.clear_grad();
            self.input.grad_mut().copy_from_slice(&g);
        }
        Ok(loss)
    }
}

/// Mean per-pixel BCE of the mask head against a fixed binary target.
struct MaskBceProbe {
    head: Sequential,
    input: Tensor,
    target: Vec<f64>,
}

impl GradModel for MaskBceProbe {
    fn block_count(&self) -> usize {
        self.head.params().len() + 1
    }

    fn block_name(&self, index: usize) -> String {
        self.head.params().get(index).map_or("input".into(), |p| format!("mask_head:{}", p.0))
    }

    fn block(&mut self, index: usize) -> &mut Tensor {
        if index < self.head.params().len() {
            self.head.params_mut().swap_remove(index)
        } else {
            &mut self.input
        }
    }

    fn evaluate(&mut self, grads: bool, pattern: &mut Vec<u8>) -> Result<f64, NnError> {
        let (out, trace) = self.head.forward(&self.input)?;
        trace.activation_pattern(pattern);
        let n = out.len() as f64;
        let mut loss = 0.0;
        let mut g = vec![0.0; out.len()];
        for (i, (&p, &y)) in out.data().iter().zip(&self.target).enumerate() {
            loss += bce_loss(p, y)? / n;
            g[i] = bce_grad(p, y) / n;
            pattern.push(bce_clamped(p) as u8);
        }
        if grads {
            self.head.zero_grad();
            let gin =
                self.head.backward(&trace, &Tensor::new(out.shape().to_vec(), g)?, true)?.expect("input gradient");
            self.input.clear_grad();
            self.input.grad_mut().copy_from_slice(gin.data());
        }
        Ok(loss)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

fn network_case(
    kinds: &[LayerKind],
    input: Vec<usize>,
    rng: &mut ChaCha8Rng,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NnError> {
    let net = Sequential::from_kinds(kinds, rng);
    let x = uniform(rng, input, -1.0, 1.0);
    let mut probe = NetworkProbe::new(net, x, rng.gen())?;
    check(&mut probe, cfg)
}

fn small_detector_config() -> DetectorConfig {
    DetectorConfig { backbone_channels: vec![4, 8, 8, 8], ..DetectorConfig::default() }
}

/// Runs one case of `kind`, seeded by `seed`.
pub fn run_case(kind: &'static str, seed: u64, tolerance: f64) -> Result<SuiteCase, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheckConfig { tolerance, seed, ..GradCheckConfig::default() };
    let report = match kind {
        "conv" => {
            let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
            let k = if rng.gen_bool(0.5) { 3 } else { 1 };
            let (stride, pad) = (rng.gen_range(1..=2), rng.gen_range(0..=1));
            let (h, w) = (rng.gen_range(4..=7), rng.gen_range(4..=7));
            network_case(&[LayerKind::conv(cin, cout, k, stride, pad)], vec![cin, h, w], &mut rng, &cfg)?
        }
        "linear" => {
            let (i, o) = (rng.gen_range(2..=8), rng.gen_range(1..=5));
            network_case(&[LayerKind::linear(i, o)], vec![i], &mut rng, &cfg)?
        }
        "relu" => {
            let (i, o) = (rng.gen_range(2..=8), rng.gen_range(2..=6));
            network_case(&[LayerKind::linear(i, o), LayerKind::Relu, LayerKind::linear(o, 2)], vec![i], &mut rng, &cfg)?
        }
        "maxpool" => {
            let c = rng.gen_range(1..=2);
            let s = rng.gen_range(4..=7);
            let kinds = [LayerKind::conv(c, 2, 3, 1, 1), LayerKind::MaxPool { kernel: 2, stride: 2 }];
            network_case(&kinds, vec![c, s, s], &mut rng, &cfg)?
        }
        "sigmoid" => {
            let (i, o) = (rng.gen_range(2..=8), rng.gen_range(1..=4));
            network_case(&[LayerKind::linear(i, o), LayerKind::Sigmoid], vec![i], &mut rng, &cfg)?
        }
        "upsample" => {
            let c = rng.gen_range(1..=2);
            let kinds = [LayerKind::conv(c, 2, 3, 1, 1), LayerKind::Upsample2x, LayerKind::conv(2, 1, 3, 1, 1)];
            network_case(&kinds, vec![c, 3, 4], &mut rng, &cfg)?
        }
        "smooth_l1" => {
            let input = uniform(&mut rng, vec![8], -3.0, 3.0);
            let mut probe =
                VectorProbe::elementwise(input, |_, x| Ok((smooth_l1(x)?, smooth_l1_grad(x), (x.abs() < 1.0) as u8)));
            check(&mut probe, &cfg)?
        }
        "bbox" => {
            let input = uniform(&mut rng, vec![4], -2.0, 2.0);
            let target = BoxParam::from_slice(uniform(&mut rng, vec![4], -2.0, 2.0).data());
            let f: VectorLoss = Box::new(move |x| {
                let t = BoxParam::from_slice(x);
                let branches = x.iter().zip(target.as_array()).map(|(a, b)| ((a - b).abs() < 1.0) as u8).collect();
                Ok((bbox_loss(&t, &target)?, bbox_loss_grad(&t, &target).to_vec(), branches))
            });
            check(&mut VectorProbe { input, f }, &cfg)?
        }
        "bce" => {
            let input = uniform(&mut rng, vec![6], 0.02, 0.98);
            let labels: Vec<f64> = (0..6).map(|_| rng.gen_range(0..2) as f64).collect();
            let mut probe = VectorProbe::elementwise(input, move |i, p| {
                Ok((bce_loss(p, labels[i])?, bce_grad(p, labels[i]), bce_clamped(p) as u8))
            });
            check(&mut probe, &cfg)?
        }
        "contrastive" => {
            let margin = rng.gen_range(0.5..2.0);
            let input = uniform(&mut rng, vec![6], 0.05, 2.5);
            let labels: Vec<f64> = (0..6).map(|_| rng.gen_range(0..2) as f64).collect();
            let mut probe = VectorProbe::elementwise(input, move |i, d| {
                let y = labels[i];
                Ok((contrastive_loss(d, y, margin)?, contrastive_grad(d, y, margin), (d < margin) as u8))
            });
            check(&mut probe, &cfg)?
        }
        "mask_bce" => {
            let det = Detector::new(small_detector_config(), rng.gen())
                .map_err(|e| NnError::InvalidArgument(e.to_string()))?;
            let input = uniform(&mut rng, vec![det.config.feature_channels(), 7, 7], 0.0, 1.0);
            let target = (0..28 * 28).map(|_| rng.gen_range(0..2) as f64).collect();
            check(&mut MaskBceProbe { head: det.mask_head, input, target }, &GradCheckConfig { max_coords: 24, ..cfg })?
        }
        "detector" => {
            let det = Detector::new(small_detector_config(), rng.gen())
                .map_err(|e| NnError::InvalidArgument(e.to_string()))?;
            let input = uniform(&mut rng, vec![5, 32, 32], 0.0, 1.0);
            let (w, h) = (rng.gen_range(8.0..24.0), rng.gen_range(8.0..24.0));
            let target = BBox::new(rng.gen_range(0.0..32.0 - w), rng.gen_range(0.0..32.0 - h), w, h);
            let plan = plan_anchors(&det.anchors(2, 2), &[target], &det.config, &mut rng);
            check(&mut DetectorLossProbe { detector: det, input, plan }, &GradCheckConfig { max_coords: 12, ..cfg })?
        }
        "matcher" => {
            let m = Matcher::new(rng.gen_range(2..=6), rng.gen());
            let dim = m.input_dim();
            let pairs = (0..4).map(|i| (uniform(&mut rng, vec![dim], -1.5, 1.5), (i % 2) as f64)).collect();
            check(&mut PairLossProbe { mlp: m.mlp, pairs }, &GradCheckConfig { max_coords: 24, ..cfg })?
        }
        other => return Err(NnError::InvalidArgument(format!("unknown gradient case {other:?}"))),
    };
    Ok(SuiteCase::new(kind, seed, &report))
}

/// `cases` checks cycling through [`SUITE_KINDS`]; case `i` uses seed `seed + i`.
pub fn gradient_suite(cases: usize, seed: u64, tolerance: f64) -> Result<Vec<SuiteCase>, NnError> {
    (0..cases).map(|i| run_case(SUITE_KINDS[i % SUITE_KINDS.len()], seed + i as u64, tolerance)).collect()
}
