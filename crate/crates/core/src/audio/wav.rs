//! RIFF/WAVE PCM16 mono reading and writing.

use std::fs;
use std::path::Path;

use super::{AudioTrack, DspError, REQUIRED_SAMPLE_RATE};

fn fmt_err(field: &'static str, message: impl Into<String>) -> DspError {
    DspError::Format { field, message: message.into() }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a PCM16 mono WAV file at whatever sample rate it declares.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioTrack, DspError> {
    if bytes.len() < 12 {
        return Err(fmt_err("riff", "file shorter than the RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(fmt_err("riff", format!("magic {:?} is not RIFF", String::from_utf8_lossy(&bytes[0..4]))));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(fmt_err("wave", format!("form type {:?} is not WAVE", String::from_utf8_lossy(&bytes[8..12]))));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let end = end.ok_or_else(|| fmt_err("fmt", "chunk runs past end of file"))?;
                if end - body < 16 {
                    return Err(fmt_err("fmt", "chunk shorter than 16 bytes"));
                }
                let audio_format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let sample_rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                format = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => {
                let (audio_format, channels, sample_rate, bits) =
                    format.ok_or_else(|| fmt_err("fmt", "data chunk before fmt chunk"))?;
                if audio_format != 1 {
                    return Err(fmt_err("audio_format", format!("format tag {audio_format} is not PCM (1)")));
                }
                if channels != 1 {
                    return Err(fmt_err("channels", format!("{channels} channels, expected mono")));
                }
                if bits != 16 {
                    return Err(fmt_err("bits_per_sample", format!("{bits} bits per sample, expected 16")));
                }
                if sample_rate == 0 {
                    return Err(fmt_err("sample_rate", "sample rate is zero"));
                }
                // Tolerate a truncated final chunk, as many writers do.
                let end = end.unwrap_or(bytes.len());
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(AudioTrack { samples, sample_rate });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(fmt_err("data", "no data chunk"))
}

/// Loads a WAV file that must already be at 16 kHz.
pub fn load_wav(path: &Path) -> Result<AudioTrack, DspError> {
    let track = parse_wav(&fs::read(path)?)?;
    if track.sample_rate != REQUIRED_SAMPLE_RATE {
        return Err(fmt_err("sample_rate", format!("sample rate {} ≠ {REQUIRED_SAMPLE_RATE}", track.sample_rate)));
    }
    Ok(track)
}

/// Loads a WAV file and linearly resamples it to 16 kHz when needed.
pub fn load_wav_resampled(path: &Path) -> Result<AudioTrack, DspError> {
    let track = parse_wav(&fs::read(path)?)?;
    Ok(resample_linear(&track, REQUIRED_SAMPLE_RATE))
}

/// Encodes as PCM16 mono; samples are clamped to `[-1, 1)` and rounded.
pub fn encode_wav(track: &AudioTrack) -> Vec<u8> {
    let data_len = track.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&track.sample_rate.to_le_bytes());
    out.extend_from_slice(&(track.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &track.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Linear interpolation onto the target grid; output length is
/// `round(n * target / source)`.
pub fn resample_linear(track: &AudioTrack, target_rate: u32) -> AudioTrack {
    if track.sample_rate == target_rate || track.samples.is_empty() {
        return AudioTrack { samples: track.samples.clone(), sample_rate: target_rate };
    }
    let n = track.samples.len();
    let ratio = track.sample_rate as f64 / target_rate as f64;
    let out_len = (n as f64 * target_rate as f64 / track.sample_rate as f64).round() as usize;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let left = pos.floor() as usize;
            if left + 1 >= n {
                return track.samples[n - 1];
            }
            let frac = pos - left as f64;
            track.samples[left] * (1.0 - frac) + track.samples[left + 1] * frac
        })
        .collect();
    AudioTrack { samples, sample_rate: target_rate }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_with(rate: u32, channels: u16, format: u16, bits: u16, samples: &[i16]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + 2 * samples.len() as u32).to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&format.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        b.extend_from_slice(&(2 * channels).to_le_bytes());
        b.extend_from_slice(&bits.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&(2 * samples.len() as u32).to_le_bytes());
        for s in samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    #[test]
    fn silence_second() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        fs::write(&p, wav_with(16000, 1, 1, 16, &vec![0; 16000])).unwrap();
        let t = load_wav(&p).unwrap();
        assert_eq!(t.samples.len(), 16000);
        assert!(t.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_sample() {
        let t = parse_wav(&wav_with(16000, 1, 1, 16, &[32767, -32768])).unwrap();
        assert_eq!(t.samples[0], 32767.0 / 32768.0);
        assert_eq!(t.samples[1], -1.0);
    }

    #[test]
    fn wrong_rate_needs_resampling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cd.wav");
        fs::write(&p, wav_with(44100, 1, 1, 16, &[0; 441])).unwrap();
        let err = load_wav(&p).unwrap_err().to_string();
        assert!(err.contains("sample rate 44100 ≠ 16000"), "{err}");
        let t = load_wav_resampled(&p).unwrap();
        assert_eq!(t.sample_rate, 16000);
        assert_eq!(t.samples.len(), 160);
    }

    #[test]
    fn header_errors_name_the_field() {
        let stereo = parse_wav(&wav_with(16000, 2, 1, 16, &[0; 4])).unwrap_err();
        assert!(matches!(stereo, DspError::Format { field: "channels", .. }));
        let float = parse_wav(&wav_with(16000, 1, 3, 16, &[0; 4])).unwrap_err();
        assert!(matches!(float, DspError::Format { field: "audio_format", .. }));
        let mut bad = wav_with(16000, 1, 1, 16, &[0; 4]);
        bad[0] = b'X';
        assert!(matches!(parse_wav(&bad).unwrap_err(), DspError::Format { field: "riff", .. }));
    }

    #[test]
    fn encode_then_parse() {
        let t = AudioTrack { samples: vec![0.0, 0.5, -0.25, 32767.0 / 32768.0], sample_rate: 16000 };
        assert_eq!(parse_wav(&encode_wav(&t)).unwrap(), t);
    }

    #[test]
    fn resampling_rules() {
        let t = AudioTrack { samples: vec![0.3; 100], sample_rate: 8000 };
        assert_eq!(resample_linear(&t, 8000), t);
        let up = resample_linear(&t, 16000);
        assert_eq!(up.samples.len(), 200);
        assert!(up.samples.iter().all(|&s| (s - 0.3).abs() < 1e-15));

        let ramp = AudioTrack { samples: (0..=80).map(|i| i as f64 / 80.0).collect(), sample_rate: 8000 };
        let up = resample_linear(&ramp, 16000);
        assert_eq!(up.samples.len(), 162);
        for i in 0..80 {
            let mid = up.samples[2 * i + 1];
            let avg = 0.5 * (ramp.samples[i] + ramp.samples[i + 1]);
            assert!((mid - avg).abs() < 1e-12);
            assert_eq!(up.samples[2 * i], ramp.samples[i]);
        }
    }
}
