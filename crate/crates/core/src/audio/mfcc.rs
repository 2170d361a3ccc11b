//! Classical MFCC front end at a 100 Hz frame rate.
//!
//! Frame `j` is centred on sample `j * hop + hop / 2`, so every 10 ms hop owns
//! one frame and a 200 ms clip yields 20 frames. Samples outside the signal
//! are mirrored (reflect padding, edge sample not repeated).

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::fft::RealFft;
use super::{AudioTrack, DspError, REQUIRED_SAMPLE_RATE};

pub const N_COEFFS: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub pre_emphasis: f64,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    /// Keep cepstral coefficient 0; otherwise coefficients 1..=13 are kept.
    pub include_c0: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: REQUIRED_SAMPLE_RATE,
            pre_emphasis: 0.97,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 40,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
            include_c0: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccFrame {
    pub coefficients: [f64; N_COEFFS],
    /// Frame centre in seconds.
    pub timestamp: f64,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Reflect-mode index into a signal of length `n` (edge not repeated).
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Precomputed analysis state for one configuration.
#[derive(Debug, Clone)]
pub struct MfccExtractor {
    cfg: MfccConfig,
    window: Vec<f64>,
    hop: usize,
    fft: RealFft,
    filters: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
    dct: Vec<Vec<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig) -> Result<Self, DspError> {
        let sr = cfg.sample_rate as f64;
        let win = (cfg.window_ms * sr / 1000.0).round() as usize;
        let hop = (cfg.hop_ms * sr / 1000.0).round() as usize;
        if win == 0 || hop == 0 || win > cfg.n_fft {
            return Err(DspError::Config(format!("window {win} / hop {hop} / fft {} inconsistent", cfg.n_fft)));
        }
        if !cfg.n_fft.is_power_of_two() {
            return Err(DspError::Config(format!("FFT size {} is not a power of two", cfg.n_fft)));
        }
        if cfg.n_mels < N_COEFFS + usize::from(!cfg.include_c0) {
            return Err(DspError::Config(format!("{} mel filters cannot give 13 coefficients", cfg.n_mels)));
        }
        if !(cfg.f_max > cfg.f_min && cfg.f_max <= sr / 2.0) {
            return Err(DspError::Config(format!("filterbank range {}..{} Hz invalid", cfg.f_min, cfg.f_max)));
        }
        let window = (0..win).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (win - 1) as f64).cos()).collect();
        let (filters, centers_hz) = mel_filterbank(&cfg);
        let dct = dct_matrix(cfg.n_mels);
        Ok(Self { cfg, window, hop, fft: RealFft::new(cfg.n_fft), filters, centers_hz, dct })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Triangular filter weights, one row of `n_fft / 2 + 1` bins per filter.
    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    pub fn filter_centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Number of frames for a signal of `n` samples: `round(n / hop)`, or zero
    /// below one hop.
    pub fn frame_count(&self, n: usize) -> usize {
        if n < self.hop {
            0
        } else {
            (n as f64 / self.hop as f64).round() as usize
        }
    }

    fn check_track(&self, track: &AudioTrack) -> Result<(), DspError> {
        if track.sample_rate != self.cfg.sample_rate {
            return Err(DspError::Format {
                field: "sample_rate",
                message: format!("sample rate {} ≠ {}", track.sample_rate, self.cfg.sample_rate),
            });
        }
        if track.samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::InvalidSignal("non-finite sample".into()));
        }
        Ok(())
    }

    /// Mel filterbank energies per frame (before the log).
    pub fn filterbank_energies(&self, track: &AudioTrack) -> Result<Vec<Vec<f64>>, DspError> {
        self.check_track(track)?;
        let x = &track.samples;
        let n = x.len();
        let frames = self.frame_count(n);
        if frames == 0 {
            return Ok(Vec::new());
        }
        let mut emphasized = Vec::with_capacity(n);
        emphasized.push(x[0]);
        for i in 1..n {
            emphasized.push(x[i] - self.cfg.pre_emphasis * x[i - 1]);
        }
        let win = self.window.len();
        let mut buf = vec![0.0; self.cfg.n_fft];
        let mut out = Vec::with_capacity(frames);
        for j in 0..frames {
            let center = (j * self.hop + self.hop / 2) as isize;
            let start = center - (win / 2) as isize;
            buf.iter_mut().for_each(|v| *v = 0.0);
            for (k, w) in self.window.iter().enumerate() {
                buf[k] = emphasized[reflect(start + k as isize, n)] * w;
            }
            let spectrum = self.fft.forward(&buf);
            let power: Vec<f64> = spectrum.iter().map(|c| c.norm_sqr() / self.cfg.n_fft as f64).collect();
            let energies = self
                .filters
                .iter()
                .map(|row| {
                    let mut acc = 0.0;
                    for (w, p) in row.iter().zip(&power) {
                        acc += w * p;
                    }
                    acc
                })
                .collect();
            out.push(energies);
        }
        Ok(out)
    }

    pub fn extract(&self, track: &AudioTrack) -> Result<Vec<MfccFrame>, DspError> {
        let energies = self.filterbank_energies(track)?;
        let first = usize::from(!self.cfg.include_c0);
        let hop_s = self.hop as f64 / self.cfg.sample_rate as f64;
        Ok(energies
            .iter()
            .enumerate()
            .map(|(j, e)| {
                let logs: Vec<f64> = e.iter().map(|v| v.max(self.cfg.log_floor).ln()).collect();
                let mut coefficients = [0.0; N_COEFFS];
                for (k, c) in coefficients.iter_mut().enumerate() {
                    let row = &self.dct[first + k];
                    let mut acc = 0.0;
                    for (d, l) in row.iter().zip(&logs) {
                        acc += d * l;
                    }
                    *c = acc;
                }
                MfccFrame { coefficients, timestamp: (j as f64 + 0.5) * hop_s }
            })
            .collect())
    }
}

/// Extracts MFCC frames with the given configuration.
pub fn mfcc_extract(track: &AudioTrack, cfg: &MfccConfig) -> Result<Vec<MfccFrame>, DspError> {
    MfccExtractor::new(*cfg)?.extract(track)
}

fn mel_filterbank(cfg: &MfccConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins).map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64).collect();
    let filters = (0..cfg.n_mels)
        .map(|m| {
            let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
            bin_hz
                .iter()
                .map(|&f| {
                    let rising = (f - lo) / (c - lo);
                    let falling = (hi - f) / (hi - c);
                    rising.min(falling).max(0.0)
                })
                .collect()
        })
        .collect();
    (filters, points[1..=cfg.n_mels].to_vec())
}

/// Orthonormal DCT-II matrix, `n x n`, rows indexed by coefficient.
pub fn dct_matrix(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n).map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()).collect()
        })
        .collect()
}

/// CSV dump: `timestamp,c0,...,c12`, nine significant digits.
pub fn frames_to_csv(frames: &[MfccFrame]) -> String {
    let mut out = String::from("timestamp");
    for i in 0..N_COEFFS {
        let _ = write!(out, ",c{i}");
    }
    out.push('\n');
    for f in frames {
        let _ = write!(out, "{:.8e}", f.timestamp);
        for c in &f.coefficients {
            let _ = write!(out, ",{c:.8e}");
        }
        out.push('\n');
    }
    out
}
