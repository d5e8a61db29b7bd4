use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{ComplexSpectrogram, SpectroConfig, Waveform};
use crate::error::{Error, Result};

/// Lower bound on the overlap-add normaliser, as a fraction of the peak
/// squared window. Near the ends only a window tail covers a sample, and
/// dividing by that tail would amplify any spectral change without bound.
/// With a quarter of the peak the per-frame gain w/max(w², floor) stays
/// below 2, and for a Hann window at 75% overlap only samples within one
/// hop of either end are tapered; everything else reconstructs exactly.
const WSUM_FLOOR_RATIO: f64 = 0.25;

/// Precomputed FFTs and window for one [`SpectroConfig`].
///
/// Frames start at sample 0 with no padding; the trailing partial frame
/// is dropped. The FFT size equals the window length.
pub struct StftPlan {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .finish()
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

impl StftPlan {
    pub fn new(cfg: &SpectroConfig) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.n_fft();
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_fft,
            hop: cfg.hop_len(),
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }

    /// Frame-major analysis: returns `[T x 2F]` data.
    pub fn analyze(&self, samples: &[f64]) -> Vec<f64> {
        let frames = self.n_frames(samples.len());
        let bins = self.n_bins();
        let mut out = vec![0.0; frames * 2 * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let start = t * self.hop;
            for (n, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(samples[start + n] * self.window[n], 0.0);
            }
            self.forward.process(&mut buf);
            let row = &mut out[t * 2 * bins..(t + 1) * 2 * bins];
            for k in 0..bins {
                row[k] = buf[k].re;
                row[bins + k] = buf[k].im;
            }
        }
        out
    }

    fn floor(&self) -> f64 {
        WSUM_FLOOR_RATIO * self.window.iter().fold(0.0, |m, w| f64::max(m, w * w))
    }

    /// Squared-window overlap sum for `frames` frames, length `out_len`.
    fn window_sum(&self, frames: usize, out_len: usize) -> Vec<f64> {
        let mut wsum = vec![0.0; out_len];
        for t in 0..frames {
            let start = t * self.hop;
            for n in 0..self.n_fft {
                if start + n >= out_len {
                    break;
                }
                wsum[start + n] += self.window[n] * self.window[n];
            }
        }
        wsum
    }

    /// Overlap-add synthesis from frame-major `[T x 2F]` data with
    /// squared-window normalization, truncated or zero-padded to `out_len`.
    pub fn synthesize(&self, frames_data: &[f64], frames: usize, out_len: usize) -> Vec<f64> {
        let bins = self.n_bins();
        assert_eq!(frames_data.len(), frames * 2 * bins);
        let mut out = vec![0.0; out_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for t in 0..frames {
            let row = &frames_data[t * 2 * bins..(t + 1) * 2 * bins];
            for k in 0..bins {
                buf[k] = Complex64::new(row[k], row[bins + k]);
            }
            // Hermitian extension; imaginary parts of DC and Nyquist drop out
            // when the real part of the inverse is taken.
            for k in bins..self.n_fft {
                buf[k] = buf[self.n_fft - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for n in 0..self.n_fft {
                if start + n >= out_len {
                    break;
                }
                out[start + n] += buf[n].re * scale * self.window[n];
            }
        }
        let wsum = self.window_sum(frames, out_len);
        let floor = self.floor();
        for (v, w) in out.iter_mut().zip(&wsum) {
            *v /= w.max(floor);
        }
        out
    }

    /// Adjoint of [`StftPlan::synthesize`]: maps a gradient over output
    /// samples to a gradient over frame-major `[T x 2F]` spectrogram data.
    pub fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> Vec<f64> {
        let bins = self.n_bins();
        let out_len = grad.len();
        let wsum = self.window_sum(frames, out_len);
        let floor = self.floor();
        let normed: Vec<f64> = grad
            .iter()
            .zip(&wsum)
            .map(|(g, w)| g / w.max(floor))
            .collect();
        let mut out = vec![0.0; frames * 2 * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let inv_n = 1.0 / self.n_fft as f64;
        for t in 0..frames {
            let start = t * self.hop;
            for (n, slot) in buf.iter_mut().enumerate() {
                let v = if start + n < out_len {
                    normed[start + n] * self.window[n]
                } else {
                    0.0
                };
                *slot = Complex64::new(v, 0.0);
            }
            self.forward.process(&mut buf);
            let row = &mut out[t * 2 * bins..(t + 1) * 2 * bins];
            for k in 0..bins {
                let edge = k == 0 || 2 * k == self.n_fft;
                let c = if edge { inv_n } else { 2.0 * inv_n };
                row[k] = c * buf[k].re;
                row[bins + k] = if edge { 0.0 } else { c * buf[k].im };
            }
        }
        out
    }
}

/// Short-time Fourier transform of `w` under `cfg`.
pub fn stft(w: &Waveform, cfg: &SpectroConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if w.sample_rate() != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform at {} Hz, config expects {} Hz",
            w.sample_rate(),
            cfg.sample_rate
        )));
    }
    if w.len() < cfg.win_len() {
        return Err(Error::Length(format!(
            "signal of {} samples is shorter than one {}-sample window",
            w.len(),
            cfg.win_len()
        )));
    }
    let plan = StftPlan::new(cfg)?;
    let frames = plan.n_frames(w.len());
    let data = plan.analyze(w.samples());
    ComplexSpectrogram::from_frames(&data, plan.n_bins(), frames, cfg.clone())
}

/// Inverse STFT by windowed overlap-add, truncated or padded to `out_len`.
pub fn istft(spec: &ComplexSpectrogram, cfg: &SpectroConfig, out_len: usize) -> Result<Waveform> {
    cfg.validate()?;
    let sc = spec.config();
    if spec.bins() != cfg.n_bins()
        || sc.sample_rate != cfg.sample_rate
        || sc.win_len() != cfg.win_len()
        || sc.hop_len() != cfg.hop_len()
    {
        return Err(Error::Config(format!(
            "spectrogram geometry ({} bins, {} Hz) does not match config ({} bins, {} Hz)",
            spec.bins(),
            sc.sample_rate,
            cfg.n_bins(),
            cfg.sample_rate
        )));
    }
    let plan = StftPlan::new(cfg)?;
    let samples = plan.synthesize(&spec.to_frames(), spec.frames(), out_len);
    Waveform::new(samples, cfg.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct DFT of one windowed frame.
    fn direct_dft(frame: &[f64], window: &[f64], k: usize) -> (f64, f64) {
        let n = frame.len();
        let mut re = 0.0;
        let mut im = 0.0;
        for (i, (x, w)) in frame.iter().zip(window).enumerate() {
            let ang = -2.0 * PI * (k * i) as f64 / n as f64;
            re += x * w * ang.cos();
            im += x * w * ang.sin();
        }
        (re, im)
    }

    #[test]
    fn one_second_frame_count() {
        let cfg = SpectroConfig::default();
        let w = Waveform::zeros(8000, 8000);
        let spec = stft(&w, &cfg).unwrap();
        assert_eq!(spec.bins(), 129);
        assert_eq!(spec.frames(), 122);
        assert!(spec.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn short_signal_is_length_error() {
        let cfg = SpectroConfig::default();
        let w = Waveform::zeros(255, 8000);
        assert!(matches!(stft(&w, &cfg), Err(Error::Length(_))));
    }

    #[test]
    fn rate_mismatch_is_config_error() {
        let cfg = SpectroConfig::default();
        let w = Waveform::zeros(16000, 16000);
        assert!(matches!(stft(&w, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn bin_centered_cosine_matches_direct_dft() {
        let cfg = SpectroConfig::default();
        let k0 = 20;
        let freq = k0 as f64 * 8000.0 / 256.0;
        let x: Vec<f64> = (0..2000)
            .map(|n| (2.0 * PI * freq * n as f64 / 8000.0).cos())
            .collect();
        let spec = stft(&Waveform::new(x.clone(), 8000).unwrap(), &cfg).unwrap();
        let plan = StftPlan::new(&cfg).unwrap();
        for t in [0, 5, spec.frames() - 1] {
            let frame = &x[t * 64..t * 64 + 256];
            let mut best = (0, 0.0);
            for k in 0..spec.bins() {
                let (re, im) = direct_dft(frame, plan.window(), k);
                assert!((spec.re(k, t) - re).abs() < 1e-9);
                assert!((spec.im(k, t) - im).abs() < 1e-9);
                if spec.magnitude(k, t) > best.1 {
                    best = (k, spec.magnitude(k, t));
                }
            }
            assert_eq!(best.0, k0);
        }
    }

    #[test]
    fn noise_round_trip() {
        let cfg = SpectroConfig::default();
        let x = noise(4000, 3);
        let w = Waveform::new(x.clone(), 8000).unwrap();
        let spec = stft(&w, &cfg).unwrap();
        let y = istft(&spec, &cfg, x.len()).unwrap();
        let covered = (spec.frames() - 1) * 64 + 256;
        let max_err = x[64..covered - 64]
            .iter()
            .zip(&y.samples()[64..covered - 64])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-6, "max error {max_err}");
    }

    #[test]
    fn zero_spectrogram_gives_zero_waveform() {
        let cfg = SpectroConfig::default();
        let spec = ComplexSpectrogram::zeros(129, 10, cfg.clone());
        let y = istft(&spec, &cfg, 1000).unwrap();
        assert_eq!(y.len(), 1000);
        assert!(y.samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn istft_geometry_mismatch() {
        let cfg = SpectroConfig::default();
        let spec = ComplexSpectrogram::zeros(65, 10, cfg.clone());
        assert!(matches!(istft(&spec, &cfg, 1000), Err(Error::Config(_))));
    }

    #[test]
    fn synthesis_adjoint_identity() {
        // <synth(X), g> == <X, synth_adjoint(g)> for random X, g.
        let cfg = SpectroConfig::with_sample_rate(1000);
        let plan = StftPlan::new(&cfg).unwrap();
        let frames = 7;
        let out_len = 150;
        let x = noise(frames * 2 * plan.n_bins(), 11);
        let g = noise(out_len, 12);
        let y = plan.synthesize(&x, frames, out_len);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = plan.synthesize_adjoint(&g, frames);
        let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
