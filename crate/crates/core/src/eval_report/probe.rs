use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Condition, ConditionTriplet};
use crate::error::{Error, Result};
use crate::metrics::si_sdr;
use crate::model::LgtseModel;
use crate::signal::{drc_compress, drc_expand, stft, ComplexSpectrogram};

use super::Extractor;

/// Lower end of the image dynamic range, dB below the figure peak.
pub const DB_FLOOR: f64 = -60.0;

/// Mean over triplets of `mean_t |s_single[t] - s_both[t]|`.
pub fn consistency_gap(extractor: Extractor<'_>, pool: &[ConditionTriplet]) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::Validation("consistency gap of an empty pool".into()));
    }
    let mut total = 0.0;
    for t in pool {
        let out = extractor.extract(t, &[Condition::Single, Condition::Both])?;
        let (a, b) = (out[0].samples(), out[1].samples());
        total += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    Ok(total / pool.len() as f64)
}

/// Front-end behaviour on one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub condition: Condition,
    /// mean of `||Y_d - Y|| / ||Y||` in the compressed domain
    pub rel_change: f64,
    /// SI-SDR of the input against the noise-free mixture, dB
    pub si_sdr_in: f64,
    /// SI-SDR of the denoised waveform against the same reference, dB
    pub si_sdr_out: f64,
    pub n_items: usize,
}

impl ProbeRow {
    pub fn si_sdr_delta(&self) -> f64 {
        self.si_sdr_out - self.si_sdr_in
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserProbe {
    pub rows: Vec<ProbeRow>,
    pub images: Vec<PathBuf>,
}

impl DenoiserProbe {
    pub fn row(&self, c: Condition) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.condition == c)
    }
}

fn rel_diff(a: &ComplexSpectrogram, b: &ComplexSpectrogram) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.data().iter().map(|y| y * y).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

/// Measure how much the front-end denoiser alters each condition and, when
/// `image_dir` is given, draw the first triplet's inputs (top row) and
/// denoised outputs (bottom row) into `denoiser_probe.png`.
pub fn denoiser_probe(model: &LgtseModel, pool: &[ConditionTriplet], image_dir: Option<&Path>) -> Result<DenoiserProbe> {
    if pool.is_empty() {
        return Err(Error::Validation("denoiser probe of an empty pool".into()));
    }
    let cfg = model.spectro().clone();
    let mut rows = Vec::new();
    let mut panels: Vec<ComplexSpectrogram> = Vec::new();
    let mut denoised_panels = Vec::new();
    for c in Condition::ALL {
        let (mut rel, mut sin, mut sout) = (0.0, 0.0, 0.0);
        for (k, t) in pool.iter().enumerate() {
            let y = t.mixture(c);
            let raw = stft(y, &cfg)?;
            let yc = drc_compress(&raw, cfg.beta)?;
            let yd = model.denoise(&yc)?;
            rel += rel_diff(&yd, &yc);
            let reference = t.denoise_target(c);
            sin += si_sdr(y, reference)?;
            sout += si_sdr(&model.denoise_waveform(y)?, reference)?;
            if k == 0 {
                panels.push(raw);
                denoised_panels.push(drc_expand(&yd, cfg.beta)?);
            }
        }
        let n = pool.len() as f64;
        rows.push(ProbeRow {
            condition: c,
            rel_change: rel / n,
            si_sdr_in: sin / n,
            si_sdr_out: sout / n,
            n_items: pool.len(),
        });
    }
    let mut images = Vec::new();
    if let Some(dir) = image_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        panels.extend(denoised_panels);
        let path = dir.join("denoiser_probe.png");
        write_spectrogram_png(&path, &panels, 3)?;
        images.push(path);
    }
    Ok(DenoiserProbe { rows, images })
}

/// Grid of log-magnitude spectrograms, `cols` per row, low frequencies at
/// the bottom. Levels are dB relative to the loudest bin of the whole grid,
/// clipped to `[DB_FLOOR, 0]`.
pub fn write_spectrogram_png(path: &Path, panels: &[ComplexSpectrogram], cols: usize) -> Result<()> {
    if panels.is_empty() || cols == 0 {
        return Err(Error::Shape("no panels to draw".into()));
    }
    const GAP: usize = 2;
    let pw = panels.iter().map(ComplexSpectrogram::frames).max().unwrap_or(0);
    let ph = panels.iter().map(ComplexSpectrogram::bins).max().unwrap_or(0);
    let nrows = panels.len().div_ceil(cols);
    let width = cols * pw + (cols - 1) * GAP;
    let height = nrows * ph + (nrows - 1) * GAP;
    let peak = panels
        .iter()
        .flat_map(|p| (0..p.bins()).flat_map(move |f| (0..p.frames()).map(move |t| p.magnitude(f, t))))
        .fold(0.0f64, f64::max);
    let mut img = vec![255u8; width * height];
    for (i, p) in panels.iter().enumerate() {
        let (x0, y0) = ((i % cols) * (pw + GAP), (i / cols) * (ph + GAP));
        for f in 0..p.bins() {
            let row = y0 + ph - 1 - f;
            for t in 0..p.frames() {
                let db = if peak > 0.0 {
                    20.0 * (p.magnitude(f, t) / peak).max(1e-12).log10()
                } else {
                    DB_FLOOR
                };
                let level = (db.clamp(DB_FLOOR, 0.0) - DB_FLOOR) / -DB_FLOOR;
                img[row * width + x0 + t] = (255.0 * (1.0 - level)).round() as u8;
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&img).map_err(png_err)?;
    w.finish().map_err(png_err)
}
