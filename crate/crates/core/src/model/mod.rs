//! The extraction network: front-end denoiser, enrollment context
//! interaction and masking backbone, composed into `s_hat = f(y, e)`.
//!
//! Internally every spectrogram is a frame-major `[B, T, 2F]` tensor in the
//! compressed magnitude domain.

mod checkpoint;
mod network;
mod params;

use std::sync::Arc;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::{ComplexSpectrogram, SpectroConfig, StftPlan, Waveform};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, MANIFEST_FILE};
pub use network::{BackboneConfig, BackboneInput, DenoiserConfig, Fusion, ModelConfig};
pub use params::{Group, ParamSet};

use network::Layout;

/// Graph outputs of one batched forward pass.
pub struct ForwardOut<'g> {
    /// `[B, L]` extracted waveforms
    pub estimate: Var<'g>,
    /// `[B, T, 2F]` denoised mixture representation
    pub denoised: Var<'g>,
}

#[derive(Clone)]
pub struct LgtseModel {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
    plan: Arc<StftPlan>,
}

impl std::fmt::Debug for LgtseModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LgtseModel")
            .field("config", &self.config)
            .field("parameters", &self.params.count(None))
            .finish()
    }
}

/// Raise every bin magnitude to `power`, keeping phase; zero bins stay zero.
fn pow_frames(data: &mut [f64], bins: usize, power: f64) {
    for frame in data.chunks_mut(2 * bins) {
        let (re, im) = frame.split_at_mut(bins);
        for (r, i) in re.iter_mut().zip(im.iter_mut()) {
            let m = r.hypot(*i);
            if m > 0.0 {
                let g = m.powf(power - 1.0);
                *r *= g;
                *i *= g;
            }
        }
    }
}

impl LgtseModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = network::build(&config);
        let plan = Arc::new(StftPlan::new(&config.spectro)?);
        Ok(Self {
            config,
            params,
            layout,
            plan,
        })
    }

    /// Model with the given parameters; names and shapes must match the
    /// layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.names() != model.params.names() {
            return Err(Error::Checkpoint("parameter names do not match the architecture".into()));
        }
        for ((name, a), b) in params.names().iter().zip(params.tensors()).zip(model.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, architecture expects {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn spectro(&self) -> &SpectroConfig {
        &self.config.spectro
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self, group: Option<Group>) -> usize {
        self.params.count(group)
    }

    pub fn plan(&self) -> &Arc<StftPlan> {
        &self.plan
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate() != self.config.spectro.sample_rate {
            return Err(Error::Config(format!(
                "input at {} Hz, model runs at {} Hz",
                w.sample_rate(),
                self.config.spectro.sample_rate
            )));
        }
        if w.len() < self.plan.n_fft() {
            return Err(Error::Length(format!(
                "input of {} samples is shorter than one {}-sample window",
                w.len(),
                self.plan.n_fft()
            )));
        }
        Ok(())
    }

    /// Compressed frame-major spectra of equal-length waveforms, `[B, T, 2F]`.
    pub fn compressed_batch(&self, ws: &[&Waveform]) -> Result<Tensor> {
        let first = ws.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let len = first.len();
        let mut data = Vec::new();
        for w in ws {
            self.check_rate(w)?;
            if w.len() != len {
                return Err(Error::Shape(format!(
                    "batched inputs differ in length ({} vs {len})",
                    w.len()
                )));
            }
            let mut frames = self.plan.analyze(w.samples());
            pow_frames(&mut frames, self.plan.n_bins(), self.config.spectro.beta);
            data.extend(frames);
        }
        let t = self.plan.n_frames(len);
        Ok(Tensor::new(vec![ws.len(), t, self.config.feat()], data))
    }

    /// Batched forward on a graph. `vars` come from [`ParamSet::bind`];
    /// item `i` is `mixtures[i]` guided by `enrollments[i]`.
    pub fn forward_graph<'g>(
        &self,
        g: &'g Graph,
        vars: &[Var<'g>],
        mixtures: &[&Waveform],
        enrollments: &[&Waveform],
    ) -> Result<ForwardOut<'g>> {
        if mixtures.len() != enrollments.len() {
            return Err(Error::Shape(format!(
                "{} mixtures but {} enrollments",
                mixtures.len(),
                enrollments.len()
            )));
        }
        let y = g.constant(self.compressed_batch(mixtures)?);
        let e = g.constant(self.compressed_batch(enrollments)?);
        let yd = network::denoiser(&self.config, &self.layout, vars, y);
        let guide = network::context(e, yd, self.config.attn_scale);
        let base = match self.config.backbone_input {
            network::BackboneInput::Denoised => yd,
            network::BackboneInput::Noisy => y,
        };
        let masked = network::backbone(&self.config, &self.layout, vars, base, guide);
        let estimate = self.synthesize(masked, mixtures[0].len());
        Ok(ForwardOut {
            estimate,
            denoised: yd,
        })
    }

    /// Denoiser only: `([B, T, 2F] representation, [B, L] waveform)`.
    pub fn denoise_graph<'g>(&self, g: &'g Graph, vars: &[Var<'g>], mixtures: &[&Waveform]) -> Result<(Var<'g>, Var<'g>)> {
        let y = g.constant(self.compressed_batch(mixtures)?);
        let yd = network::denoiser(&self.config, &self.layout, vars, y);
        let len = mixtures[0].len();
        Ok((yd, self.synthesize(yd, len)))
    }

    /// Expand the compression and resynthesize `[B, T, 2F] -> [B, L]`.
    pub fn synthesize<'g>(&self, spec: Var<'g>, len: usize) -> Var<'g> {
        spec.mag_pow(1.0 / self.config.spectro.beta)
            .istft(self.plan.clone(), len)
    }

    fn rows_to_waveforms(&self, t: &Tensor) -> Result<Vec<Waveform>> {
        let len = t.last_dim();
        t.data()
            .chunks(len)
            .map(|r| Waveform::new(r.to_vec(), self.config.spectro.sample_rate))
            .collect()
    }

    /// `s_hat = f(y, e)`; output length equals `y`'s.
    pub fn forward(&self, y: &Waveform, e: &Waveform) -> Result<Waveform> {
        Ok(self.parallel_forward(std::slice::from_ref(y), e)?.remove(0))
    }

    /// Several equal-length mixtures sharing one enrollment, in one batch.
    pub fn parallel_forward(&self, ys: &[Waveform], e: &Waveform) -> Result<Vec<Waveform>> {
        let g = Graph::new();
        let vars = self.params.bind(&g, &|_| false);
        let mix: Vec<&Waveform> = ys.iter().collect();
        let enr = vec![e; ys.len()];
        let out = self.forward_graph(&g, &vars, &mix, &enr)?;
        self.rows_to_waveforms(&out.estimate.value())
    }

    /// Denoised time-domain signal `istft(expand(Y_d))`.
    pub fn denoise_waveform(&self, y: &Waveform) -> Result<Waveform> {
        let g = Graph::new();
        let vars = self.params.bind(&g, &|_| false);
        let (_, w) = self.denoise_graph(&g, &vars, &[y])?;
        Ok(self.rows_to_waveforms(&w.value())?.remove(0))
    }

    /// Denoise a compressed spectrogram `Y -> Y_d`, same shape.
    pub fn denoise(&self, spec: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
        if spec.bins() != self.plan.n_bins() {
            return Err(Error::Shape(format!(
                "spectrogram has {} bins, model expects {}",
                spec.bins(),
                self.plan.n_bins()
            )));
        }
        let g = Graph::new();
        let vars = self.params.bind(&g, &|_| false);
        let y = g.constant(Tensor::new(
            vec![1, spec.frames(), 2 * spec.bins()],
            spec.to_frames(),
        ));
        let yd = network::denoiser(&self.config, &self.layout, &vars, y);
        ComplexSpectrogram::from_frames(yd.value().data(), spec.bins(), spec.frames(), spec.config().clone())
    }
}

fn frames_tensor(s: &ComplexSpectrogram) -> Tensor {
    Tensor::new(vec![1, s.frames(), 2 * s.bins()], s.to_frames())
}

/// Attention weights `softmax(E^T Y_d)` over enrollment frames, returned
/// row-major as `[T_e x T_y]`.
pub fn attention_weights(e: &ComplexSpectrogram, yd: &ComplexSpectrogram, attn_scale: f64) -> Result<Vec<f64>> {
    if e.bins() != yd.bins() {
        return Err(Error::Shape(format!(
            "enrollment has 2F = {}, mixture 2F = {}",
            2 * e.bins(),
            2 * yd.bins()
        )));
    }
    let g = Graph::new();
    let ev = g.constant(frames_tensor(e));
    let yv = g.constant(frames_tensor(yd));
    let w = ev.bmm(yv, false, true).scale(attn_scale).softmax_axis1();
    Ok(w.value().data().to_vec())
}

/// Guidance `E softmax(E^T Y_d)`, shaped like `Y_d`.
pub fn context_interaction(e: &ComplexSpectrogram, yd: &ComplexSpectrogram, attn_scale: f64) -> Result<ComplexSpectrogram> {
    if e.bins() != yd.bins() {
        return Err(Error::Shape(format!(
            "enrollment has 2F = {}, mixture 2F = {}",
            2 * e.bins(),
            2 * yd.bins()
        )));
    }
    let g = Graph::new();
    let out = network::context(g.constant(frames_tensor(e)), g.constant(frames_tensor(yd)), attn_scale);
    ComplexSpectrogram::from_frames(out.value().data(), yd.bins(), yd.frames(), yd.config().clone())
}

#[cfg(test)]
mod tests;
