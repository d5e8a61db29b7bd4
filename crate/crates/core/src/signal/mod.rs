//! Waveforms, STFT analysis/synthesis and magnitude compression.
//!
//! Spectrograms are stored as real tensors of shape `[2F x T]`: the first
//! `F` rows hold real parts and the last `F` rows the imaginary parts. The
//! network code works on the transposed, frame-major layout `[T x 2F]`;
//! [`ComplexSpectrogram::to_frames`] and [`ComplexSpectrogram::from_frames`]
//! convert between the two.

mod drc;
mod stft;
mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use drc::{drc_compress, drc_expand, expand_bin};
pub use stft::{istft, stft, StftPlan};
pub use wav::{read_wav, write_wav};

/// Mono time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    /// First `len` samples (or the whole signal when shorter).
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann window, `0.5 - 0.5 cos(2 pi n / N)`.
    #[default]
    Hann,
}

/// STFT geometry plus the compression exponent applied to magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectroConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    #[serde(default)]
    pub window: WindowKind,
    pub beta: f64,
}

impl Default for SpectroConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            win_ms: 32.0,
            hop_ms: 8.0,
            window: WindowKind::Hann,
            beta: 0.5,
        }
    }
}

fn ms_to_samples(ms: f64, sample_rate: u32) -> Option<usize> {
    let n = ms * sample_rate as f64 / 1000.0;
    let r = n.round();
    if r >= 1.0 && (n - r).abs() < 1e-9 {
        Some(r as usize)
    } else {
        None
    }
}

impl SpectroConfig {
    pub fn with_sample_rate(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if ms_to_samples(self.win_ms, self.sample_rate).is_none() {
            return Err(Error::Config(format!(
                "window of {} ms is not a positive integer sample count at {} Hz",
                self.win_ms, self.sample_rate
            )));
        }
        if ms_to_samples(self.hop_ms, self.sample_rate).is_none() {
            return Err(Error::Config(format!(
                "hop of {} ms is not a positive integer sample count at {} Hz",
                self.hop_ms, self.sample_rate
            )));
        }
        if self.hop_ms > self.win_ms {
            return Err(Error::Config("hop must not exceed the window".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!(
                "compression exponent {} outside (0, 1]",
                self.beta
            )));
        }
        Ok(())
    }

    /// Window length in samples; also the FFT size.
    pub fn win_len(&self) -> usize {
        ms_to_samples(self.win_ms, self.sample_rate).expect("validated spectro config")
    }

    pub fn hop_len(&self) -> usize {
        ms_to_samples(self.hop_ms, self.sample_rate).expect("validated spectro config")
    }

    pub fn n_fft(&self) -> usize {
        self.win_len()
    }

    /// `F = n_fft / 2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.n_fft() / 2 + 1
    }

    /// Frame count for a signal of `len` samples (no padding, trailing
    /// partial frame dropped). Zero when shorter than one window.
    pub fn n_frames(&self, len: usize) -> usize {
        let win = self.win_len();
        if len < win {
            0
        } else {
            (len - win) / self.hop_len() + 1
        }
    }
}

/// Real/imaginary-stacked time-frequency representation, `[2F x T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    data: Vec<f64>,
    bins: usize,
    frames: usize,
    config: SpectroConfig,
}

impl ComplexSpectrogram {
    pub fn new(data: Vec<f64>, bins: usize, frames: usize, config: SpectroConfig) -> Result<Self> {
        if data.len() != 2 * bins * frames {
            return Err(Error::Shape(format!(
                "spectrogram data has {} entries, expected 2*{bins}*{frames}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite spectrogram entry".into()));
        }
        Ok(Self {
            data,
            bins,
            frames,
            config,
        })
    }

    pub fn zeros(bins: usize, frames: usize, config: SpectroConfig) -> Self {
        Self {
            data: vec![0.0; 2 * bins * frames],
            bins,
            frames,
            config,
        }
    }

    /// Build from frame-major `[T x 2F]` data.
    pub fn from_frames(frames_data: &[f64], bins: usize, frames: usize, config: SpectroConfig) -> Result<Self> {
        if frames_data.len() != 2 * bins * frames {
            return Err(Error::Shape(format!(
                "frame data has {} entries, expected {frames}*2*{bins}",
                frames_data.len()
            )));
        }
        let rows = 2 * bins;
        let mut data = vec![0.0; rows * frames];
        for t in 0..frames {
            for r in 0..rows {
                data[r * frames + t] = frames_data[t * rows + r];
            }
        }
        Self::new(data, bins, frames, config)
    }

    /// Frame-major `[T x 2F]` copy of the data.
    pub fn to_frames(&self) -> Vec<f64> {
        let rows = 2 * self.bins;
        let mut out = vec![0.0; rows * self.frames];
        for r in 0..rows {
            for t in 0..self.frames {
                out[t * rows + r] = self.data[r * self.frames + t];
            }
        }
        out
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `F`, the number of frequency bins.
    pub fn bins(&self) -> usize {
        self.bins
    }

    /// `T`, the number of frames.
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn config(&self) -> &SpectroConfig {
        &self.config
    }

    pub fn re(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.frames + frame]
    }

    pub fn im(&self, bin: usize, frame: usize) -> f64 {
        self.data[(self.bins + bin) * self.frames + frame]
    }

    pub fn set(&mut self, bin: usize, frame: usize, re: f64, im: f64) {
        self.data[bin * self.frames + frame] = re;
        self.data[(self.bins + bin) * self.frames + frame] = im;
    }

    pub fn magnitude(&self, bin: usize, frame: usize) -> f64 {
        self.re(bin, frame).hypot(self.im(bin, frame))
    }

    /// Frobenius norm over both halves.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
