//! WAV ingestion and the 13-coefficient MFCC stream at 100 frames per second.

mod fft;
mod mfcc;
mod wav;

pub use fft::{Complex, Fft, RealFft};
pub use mfcc::{
    dct_matrix, frames_to_csv, hz_to_mel, mel_to_hz, mfcc_extract, MfccConfig, MfccExtractor, MfccFrame, N_COEFFS,
};
pub use wav::{encode_wav, load_wav, load_wav_resampled, parse_wav, resample_linear};

use thiserror::Error;

pub const REQUIRED_SAMPLE_RATE: u32 = 16000;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("WAV format error in {field}: {message}")]
    Format { field: &'static str, message: String },
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("invalid MFCC configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
