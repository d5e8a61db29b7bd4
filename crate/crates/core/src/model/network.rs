use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::signal::SpectroConfig;

use super::params::{Group, Init, ParamSet};

/// Conv-recurrent front-end producing a residual complex mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// temporal kernel of the input convolution (odd)
    pub kernel: usize,
    pub channels: usize,
    pub hidden: usize,
}

/// How the guidance enters the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// mixture and guidance stacked along the feature axis
    Concat,
    /// guidance added to the mixture representation
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kernel: usize,
    pub channels: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub fusion: Fusion,
}

/// Mixture representation the backbone conditions on and masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneInput {
    Noisy,
    Denoised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spectro: SpectroConfig,
    pub denoiser: DenoiserConfig,
    pub backbone: BackboneConfig,
    /// multiplier on the attention logits
    pub attn_scale: f64,
    pub backbone_input: BackboneInput,
    /// scale of the random mask-head init; 0 gives an exact identity mask
    pub head_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ModelConfig {
    /// Desk-scale reference: about 48K denoiser and 175K backbone parameters.
    pub fn reference() -> Self {
        Self {
            spectro: SpectroConfig::default(),
            denoiser: DenoiserConfig {
                kernel: 3,
                channels: 32,
                hidden: 32,
            },
            backbone: BackboneConfig {
                kernel: 3,
                channels: 64,
                hidden: 64,
                blocks: 2,
                fusion: Fusion::Concat,
            },
            attn_scale: 1.0,
            backbone_input: BackboneInput::Denoised,
            head_init: 1e-3,
            seed: 0,
        }
    }

    /// CI preset with a backbone under 10K parameters.
    pub fn tiny() -> Self {
        Self {
            denoiser: DenoiserConfig {
                kernel: 1,
                channels: 8,
                hidden: 8,
            },
            backbone: BackboneConfig {
                kernel: 1,
                channels: 8,
                hidden: 8,
                blocks: 1,
                fusion: Fusion::Concat,
            },
            ..Self::reference()
        }
    }

    /// Under 10K parameters in total at a 1 kHz analysis rate (F = 17),
    /// small enough for exhaustive finite-difference checks.
    pub fn gradcheck() -> Self {
        Self {
            spectro: SpectroConfig::with_sample_rate(1000),
            denoiser: DenoiserConfig {
                kernel: 3,
                channels: 8,
                hidden: 6,
            },
            backbone: BackboneConfig {
                kernel: 3,
                channels: 10,
                hidden: 8,
                blocks: 2,
                fusion: Fusion::Concat,
            },
            head_init: 0.1,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spectro.validate()?;
        for (what, k) in [("denoiser", self.denoiser.kernel), ("backbone", self.backbone.kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("{what} kernel must be odd, got {k}")));
            }
        }
        let widths = [
            self.denoiser.channels,
            self.denoiser.hidden,
            self.backbone.channels,
            self.backbone.hidden,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !self.attn_scale.is_finite() || !self.head_init.is_finite() || self.head_init < 0.0 {
            return Err(Error::Config("attn_scale and head_init must be finite, head_init >= 0".into()));
        }
        Ok(())
    }

    /// Feature width `2F` of the frame-major representation.
    pub fn feat(&self) -> usize {
        2 * self.spectro.n_bins()
    }
}

#[derive(Clone, Debug)]
struct GruIdx {
    wi: usize,
    bi: usize,
    wh: usize,
    bh: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct DenoiserIdx {
    conv_w: usize,
    conv_b: usize,
    gru: GruIdx,
    dec_w: usize,
    dec_b: usize,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    gru: GruIdx,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BackboneIdx {
    conv_w: usize,
    conv_b: usize,
    blocks: Vec<BlockIdx>,
    dec_w: usize,
    dec_b: usize,
}

/// Parameter positions of every layer.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub den: DenoiserIdx,
    pub bb: BackboneIdx,
}

fn gru_params(p: &mut ParamSet, init: &mut Init, prefix: &str, group: Group, input: usize, hidden: usize) -> GruIdx {
    let bound = 1.0 / (hidden as f64).sqrt();
    GruIdx {
        wi: p.push(format!("{prefix}.w_ih"), group, init.uniform(&[input, 3 * hidden], bound)),
        bi: p.push(format!("{prefix}.b_ih"), group, init.uniform(&[3 * hidden], 0.0)),
        wh: p.push(format!("{prefix}.w_hh"), group, init.uniform(&[hidden, 3 * hidden], bound)),
        bh: p.push(format!("{prefix}.b_hh"), group, init.uniform(&[3 * hidden], 0.0)),
    }
}

/// Fresh parameters and their layout for `cfg`.
pub(crate) fn build(cfg: &ModelConfig) -> (ParamSet, Layout) {
    let feat = cfg.feat();
    let mut p = ParamSet::default();
    let mut init = Init::new(cfg.seed);
    let head = cfg.head_init * 3f64.sqrt();

    let d = &cfg.denoiser;
    let den = {
        let g = Group::Denoiser;
        let conv_w = p.push("denoiser.conv.w".into(), g, init.glorot(d.kernel * feat, d.channels));
        let conv_b = p.push("denoiser.conv.b".into(), g, init.uniform(&[d.channels], 0.0));
        let gru = gru_params(&mut p, &mut init, "denoiser.gru", g, d.channels, d.hidden);
        let dec_w = p.push("denoiser.mask.w".into(), g, init.uniform(&[d.hidden + d.channels, feat], head));
        let dec_b = p.push("denoiser.mask.b".into(), g, init.uniform(&[feat], 0.0));
        DenoiserIdx {
            conv_w,
            conv_b,
            gru,
            dec_w,
            dec_b,
        }
    };

    let b = &cfg.backbone;
    let bb = {
        let g = Group::Backbone;
        let fin = match b.fusion {
            Fusion::Concat => 2 * feat,
            Fusion::Add => feat,
        };
        let conv_w = p.push("backbone.conv.w".into(), g, init.glorot(b.kernel * fin, b.channels));
        let conv_b = p.push("backbone.conv.b".into(), g, init.uniform(&[b.channels], 0.0));
        let blocks = (0..b.blocks)
            .map(|k| {
                let gru = gru_params(&mut p, &mut init, &format!("backbone.block{k}.gru"), g, b.channels, b.hidden);
                let out_w = p.push(format!("backbone.block{k}.out.w"), g, init.glorot(b.hidden, b.channels));
                let out_b = p.push(format!("backbone.block{k}.out.b"), g, init.uniform(&[b.channels], 0.0));
                BlockIdx { gru, out_w, out_b }
            })
            .collect();
        let dec_w = p.push("backbone.mask.w".into(), g, init.uniform(&[b.channels, feat], head));
        let dec_b = p.push("backbone.mask.b".into(), g, init.uniform(&[feat], 0.0));
        BackboneIdx {
            conv_w,
            conv_b,
            blocks,
            dec_w,
            dec_b,
        }
    };
    (p, Layout { den, bb })
}

fn gru<'g>(v: &[Var<'g>], idx: &GruIdx, x: Var<'g>) -> Var<'g> {
    x.matmul(v[idx.wi])
        .add_bias(v[idx.bi])
        .gru(v[idx.wh], v[idx.bh])
}

/// `y (1 + m)` with complex mask `m`.
fn residual_mask<'g>(y: Var<'g>, m: Var<'g>) -> Var<'g> {
    y.add(y.complex_mul(m))
}

/// Denoised representation `[B, T, 2F]`.
pub(crate) fn denoiser<'g>(cfg: &ModelConfig, lay: &Layout, v: &[Var<'g>], y: Var<'g>) -> Var<'g> {
    let d = &lay.den;
    let u = y
        .unfold_time(cfg.denoiser.kernel)
        .matmul(v[d.conv_w])
        .add_bias(v[d.conv_b])
        .tanh();
    let h = gru(v, &d.gru, u);
    let m = h.concat(u).matmul(v[d.dec_w]).add_bias(v[d.dec_b]);
    residual_mask(y, m)
}

/// Guidance `[B, T_y, 2F]`: each mixture frame receives a convex
/// combination of enrollment frames.
pub(crate) fn context<'g>(e: Var<'g>, yd: Var<'g>, scale: f64) -> Var<'g> {
    let logits = e.bmm(yd, false, true);
    let logits = if scale == 1.0 { logits } else { logits.scale(scale) };
    logits.softmax_axis1().bmm(e, true, false)
}

/// Masked mixture representation `[B, T, 2F]`.
pub(crate) fn backbone<'g>(cfg: &ModelConfig, lay: &Layout, v: &[Var<'g>], y: Var<'g>, guide: Var<'g>) -> Var<'g> {
    let b = &lay.bb;
    let x = match cfg.backbone.fusion {
        Fusion::Concat => y.concat(guide),
        Fusion::Add => y.add(guide),
    };
    let mut u = x
        .unfold_time(cfg.backbone.kernel)
        .matmul(v[b.conv_w])
        .add_bias(v[b.conv_b])
        .tanh();
    for blk in &b.blocks {
        let h = gru(v, &blk.gru, u);
        u = u.add(h.matmul(v[blk.out_w]).add_bias(v[blk.out_b]));
    }
    let m = u.matmul(v[b.dec_w]).add_bias(v[b.dec_b]);
    residual_mask(y, m)
}
