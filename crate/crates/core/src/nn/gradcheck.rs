//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NnError, Sequential, Tensor};

/// A scalar-valued function of a set of parameter blocks.
pub trait GradModel {
    fn block_count(&self) -> usize;
    fn block_name(&self, index: usize) -> String;
    fn block(&mut self, index: usize) -> &mut Tensor;
    /// Evaluates the loss. With `grads` set, every block's gradient slot is
    /// overwritten with the analytic gradient. `pattern` receives a signature
    /// of every non-smooth branch taken; perturbations that change it straddle
    /// a kink and are excluded.
    fn evaluate(&mut self, grads: bool, pattern: &mut Vec<u8>) -> Result<f64, NnError>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub step: f64,
    /// Coordinates sampled per block; blocks at most this large are checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { tolerance: 1e-4, step: 1e-4, max_coords: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates excluded: zero on both sides, or the perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.blocks.iter().map(|b| b.skipped).sum()
    }
}

const ZERO: f64 = 1e-12;

/// Relative error of an analytic derivative against its numeric estimate.
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    if analytic.abs() < ZERO && numeric.abs() < ZERO {
        return None;
    }
    Some((analytic - numeric).abs() / numeric.abs().max(ZERO))
}

pub fn check<M: GradModel>(model: &mut M, cfg: &GradCheckConfig) -> Result<GradCheckReport, NnError> {
    let mut base_pattern = Vec::new();
    model.evaluate(true, &mut base_pattern)?;
    let analytic: Vec<Vec<f64>> = (0..model.block_count())
        .map(|b| {
            let t = model.block(b);
            t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut blocks = Vec::with_capacity(analytic.len());
    let mut pattern = Vec::new();
    for (b, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut report = BlockReport { name: model.block_name(b), checked: 0, skipped: 0, max_rel_error: 0.0 };
        for i in coords {
            let original = model.block(b).data()[i];
            model.block(b).data_mut()[i] = original + cfg.step;
            pattern.clear();
            let plus = model.evaluate(false, &mut pattern)?;
            let plus_smooth = pattern == base_pattern;
            model.block(b).data_mut()[i] = original - cfg.step;
            pattern.clear();
            let minus = model.evaluate(false, &mut pattern)?;
            let minus_smooth = pattern == base_pattern;
            model.block(b).data_mut()[i] = original;
            if !(plus_smooth && minus_smooth) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            match relative_error(grad[i], numeric) {
                Some(err) => {
                    report.checked += 1;
                    report.max_rel_error = report.max_rel_error.max(err);
                }
                None => report.skipped += 1,
            }
        }
        blocks.push(report);
    }
    Ok(GradCheckReport { tolerance: cfg.tolerance, blocks })
}

/// A network under test: loss is a fixed random projection of the output, and
/// the input is checked alongside every parameter block.
pub struct NetworkProbe {
    pub net: Sequential,
    pub input: Tensor,
    projection: Vec<f64>,
}

impl NetworkProbe {
    pub fn new(net: Sequential, input: Tensor, seed: u64) -> Result<Self, NnError> {
        let out = net.infer(&input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let projection = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(Self { net, input, projection })
    }
}

impl GradModel for NetworkProbe {
    fn block_count(&self) -> usize {
        self.net.params().len() + 1
    }

    fn block_name(&self, index: usize) -> String {
        let params = self.net.params();
        if index < params.len() {
            let (name, _) = &params[index];
            let layer: usize = name.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            format!("{}:{}", self.net.layers[layer].kind.name(), name)
        } else {
            "input".into()
        }
    }

    fn block(&mut self, index: usize) -> &mut Tensor {
        let n = self.net.params().len();
        if index < n {
            self.net.params_mut().swap_remove(index)
        } else {
            &mut self.input
        }
    }

    fn evaluate(&mut self, grads: bool, pattern: &mut Vec<u8>) -> Result<f64, NnError> {
        let (out, trace) = self.net.forward(&self.input)?;
        trace.activation_pattern(pattern);
        let loss: f64 = out.data().iter().zip(&self.projection).map(|(o, r)| o * r).sum();
        if grads {
            self.net.zero_grad();
            let seed = Tensor::new(out.shape().to_vec(), self.projection.clone())?;
            let gin = self.net.backward(&trace, &seed, true)?.expect("input gradient");
            self.input.clear_grad();
            self.input.grad_mut().copy_from_slice(gin.data());
        }
        Ok(loss)
    }
}

/// Checks every parameter block of `net` (and its input) at `tolerance`.
pub fn grad_check(net: &Sequential, input: &Tensor, tolerance: f64) -> Result<GradCheckReport, NnError> {
    let mut probe = NetworkProbe::new(net.clone(), input.clone(), 0)?;
    check(&mut probe, &GradCheckConfig { tolerance, ..Default::default() })
}
