//! Log-mel spectrogram extraction and WAV input.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub bands: usize,
    /// Frame length in samples (64 ms).
    pub frame: usize,
    /// Hop in samples (8 ms).
    pub hop: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub floor: f64,
    pub reduction: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, bands: 80, frame: 1024, hop: 128, fmin: 0.0, fmax: 8000.0, floor: 1e-10, reduction: 4 }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with peak 1, edges equally spaced on the mel scale;
/// `bands × (frame/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let bins = cfg.frame / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> =
        (0..cfg.bands + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.bands + 1) as f64)).collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.frame as f64;
    (0..cfg.bands)
        .map(|b| {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Frame-by-frame log-mel analyser. Frames start at sample 0 with no centre
/// padding; a signal of `L ≥ frame` samples yields `⌊(L−frame)/hop⌋+1` frames.
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
    buffer: Vec<f64>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        if cfg.frame <= cfg.hop || cfg.hop == 0 || cfg.bands == 0 {
            return Err(Error::InvalidArgument("mel config needs frame > hop > 0 and at least one band".into()));
        }
        let n = cfg.frame;
        let window = (0..n).map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()).collect();
        let filters = mel_filterbank(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self { cfg, window, filters, fft, buffer: Vec::new() })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    fn frame_of(&self, samples: &[f64]) -> Vec<f64> {
        let mut spec: Vec<Complex<f64>> =
            samples.iter().zip(&self.window).map(|(s, w)| Complex::new(s * w, 0.0)).collect();
        self.fft.process(&mut spec);
        let mag: Vec<f64> = spec[..self.cfg.frame / 2 + 1].iter().map(|c| c.norm()).collect();
        self.filters
            .iter()
            .map(|f| f.iter().zip(&mag).map(|(w, m)| w * m).sum::<f64>().max(self.cfg.floor).ln())
            .collect()
    }

    /// Whole-signal extraction; `bands × T`.
    pub fn extract(&self, samples: &[f64]) -> Result<Tensor<f64>> {
        if samples.is_empty() {
            return Err(Error::Empty("audio"));
        }
        if samples.len() < self.cfg.frame {
            return Err(Error::InvalidArgument(format!(
                "{} samples are shorter than one {}-sample frame",
                samples.len(),
                self.cfg.frame
            )));
        }
        let t = (samples.len() - self.cfg.frame) / self.cfg.hop + 1;
        let frames: Vec<Vec<f64>> =
            (0..t).map(|i| self.frame_of(&samples[i * self.cfg.hop..i * self.cfg.hop + self.cfg.frame])).collect();
        Ok(Tensor::from_fn(self.cfg.bands, t, |b, c| frames[c][b]))
    }

    /// Appends samples and returns every frame that became complete.
    pub fn push(&mut self, samples: &[f64]) -> Vec<Vec<f64>> {
        self.buffer.extend_from_slice(samples);
        let mut out = Vec::new();
        while self.buffer.len() >= self.cfg.frame {
            out.push(self.frame_of(&self.buffer[..self.cfg.frame]));
            self.buffer.drain(..self.cfg.hop);
        }
        out
    }
}

/// `bands×T` log-mel of 16 kHz mono audio.
pub fn mel_extract(samples: &[f64], sample_rate: u32, cfg: &MelConfig) -> Result<Tensor<f64>> {
    if sample_rate != cfg.sample_rate {
        return Err(Error::InvalidArgument(format!("sample rate {sample_rate} Hz, expected {}", cfg.sample_rate)));
    }
    MelExtractor::new(cfg.clone())?.extract(samples)
}

/// Reads a 16-bit PCM mono WAV file as samples in [−1, 1) and its sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(wav_err))
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, amp: f64) -> Vec<f64> {
        let n = (16000.0 * secs) as usize;
        (0..n).map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / 16000.0).sin()).collect()
    }

    #[test]
    fn one_second_gives_118_frames() {
        let m = mel_extract(&tone(440.0, 1.0, 0.3), 16000, &MelConfig::default()).unwrap();
        assert_eq!(m.shape(), &[80, 118]);
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let m = mel_extract(&vec![0.0; 4000], 16000, &MelConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(m.data().iter().all(|v| *v == floor));
    }

    #[test]
    fn tone_peaks_in_its_band() {
        let cfg = MelConfig::default();
        let m = mel_extract(&tone(1000.0, 0.5, 0.5), 16000, &cfg).unwrap();
        let col = m.col(10);
        let arg = (0..80).max_by(|a, b| col[*a].partial_cmp(&col[*b]).unwrap()).unwrap();
        let fb = mel_filterbank(&cfg);
        let bin = (1000.0 / (16000.0 / 1024.0)) as usize;
        let best = (0..80).max_by(|a, b| fb[*a][bin].partial_cmp(&fb[*b][bin]).unwrap()).unwrap();
        assert!(arg.abs_diff(best) <= 1, "argmax {arg}, filter {best}");
    }

    #[test]
    fn doubling_amplitude_adds_ln2() {
        let cfg = MelConfig::default();
        let a = mel_extract(&tone(700.0, 0.3, 0.2), 16000, &cfg).unwrap();
        let b = mel_extract(&tone(700.0, 0.3, 0.4), 16000, &cfg).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x > cfg.floor.ln() + 1.0 {
                assert!((y - x - 2f64.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn streaming_matches_whole_signal() {
        let cfg = MelConfig::default();
        let sig = tone(300.0, 0.2, 0.3);
        let full = MelExtractor::new(cfg.clone()).unwrap().extract(&sig).unwrap();
        let mut ex = MelExtractor::new(cfg).unwrap();
        let mut frames = Vec::new();
        for chunk in sig.chunks(333) {
            frames.extend(ex.push(chunk));
        }
        assert_eq!(frames.len(), full.cols());
        for (c, f) in frames.iter().enumerate() {
            assert_eq!(&full.col(c), f);
        }
    }

    #[test]
    fn rejects_wrong_rate_and_empty() {
        assert!(mel_extract(&tone(440.0, 0.2, 0.1), 22050, &MelConfig::default()).is_err());
        assert!(mel_extract(&[], 16000, &MelConfig::default()).is_err());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let sig = tone(440.0, 0.1, 0.5);
        write_wav(&p, &sig, 16000).unwrap();
        let (back, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, 16000);
        assert_eq!(back.len(), sig.len());
        assert!(back.iter().zip(&sig).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}
