use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::data::{Batch, Condition, ConditionTriplet};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, GroupRows, LossBundle, SI_SDR_EPS_REL};
use crate::model::LgtseModel;
use crate::signal::Waveform;

use super::optim::{clip_gradients, global_norm, Adam};
use super::{Stage, StageConfig};

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_CONSECUTIVE_SKIPS: usize = 3;

/// Adam moments plus the running count of skipped steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub adam: Adam,
    pub consecutive_skips: usize,
}

impl OptimizerState {
    pub fn new(model: &LgtseModel) -> Self {
        Self {
            adam: Adam::new(model.params().tensors()),
            consecutive_skips: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// mean over targets of the total loss
    pub loss: f64,
    pub l_sisdr: f64,
    pub l_triplec: f64,
    /// global gradient norm before clipping
    pub grad_norm: f64,
    /// global gradient norm of the applied update
    pub clipped_norm: f64,
    pub lr: f64,
    pub n_items: usize,
    pub conditions: Vec<Condition>,
    pub bundles: Vec<LossBundle>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied(StepReport),
    /// Non-finite loss or gradient; parameters untouched.
    Skipped { reason: String },
}

struct Inputs {
    mixtures: Vec<Waveform>,
    enrollments: Vec<Waveform>,
    targets: Tensor,
    groups: Vec<GroupRows>,
    conditions: Vec<Condition>,
}

/// Gather one batch, cutting every item to the shortest mixture and every
/// enrollment to the shortest enrollment so the batch stacks.
fn gather(pool: &[ConditionTriplet], batch: &Batch, stage: Stage) -> Result<Inputs> {
    if batch.groups.is_empty() {
        return Err(Error::Mode("empty batch".into()));
    }
    for g in &batch.groups {
        if g.triplet >= pool.len() {
            return Err(Error::Shape(format!("triplet {} outside pool of {}", g.triplet, pool.len())));
        }
    }
    let len = batch.items().map(|(t, _)| pool[t].len()).min().unwrap_or(0);
    let elen = batch.items().map(|(t, _)| pool[t].enrollment.len()).min().unwrap_or(0);
    let mut out = Inputs {
        mixtures: Vec::new(),
        enrollments: Vec::new(),
        targets: Tensor::zeros(vec![0]),
        groups: Vec::new(),
        conditions: Vec::new(),
    };
    let mut targets = Vec::new();
    for g in &batch.groups {
        let tr = &pool[g.triplet];
        let mut rows = Vec::new();
        for &c in &g.conditions {
            rows.push(out.mixtures.len());
            out.mixtures.push(tr.mixture(c).truncated(len));
            out.enrollments.push(tr.enrollment.truncated(elen));
            out.conditions.push(c);
            let target = match stage {
                Stage::PretrainDenoiser => tr.denoise_target(c),
                _ => &tr.target,
            };
            targets.extend_from_slice(&target.samples()[..len]);
        }
        out.groups.push(GroupRows {
            rows,
            conditions: g.conditions.clone(),
        });
    }
    out.targets = Tensor::new(vec![out.mixtures.len(), len], targets);
    Ok(out)
}

/// One optimizer step on `batch` drawn from `pool`.
///
/// The denoiser stage regresses the denoised waveform onto the noise-free
/// mixture; the other stages use the extraction objective of the stage's
/// mode. Only parameters of non-frozen components change.
pub fn train_step(
    model: &mut LgtseModel,
    pool: &[ConditionTriplet],
    batch: &Batch,
    stage: &StageConfig,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<StepOutcome> {
    let inputs = gather(pool, batch, stage.stage)?;
    let g = Graph::new();
    let vars = model.params().bind(&g, &|grp| stage.is_trainable(grp));
    let mix: Vec<&Waveform> = inputs.mixtures.iter().collect();
    let targets = Rc::new(inputs.targets);

    let (loss, bundles) = if stage.stage == Stage::PretrainDenoiser {
        let (_, wave) = model.denoise_graph(&g, &vars, &mix)?;
        let sdr = wave.si_sdr(targets, SI_SDR_EPS_REL);
        let vals = sdr.value();
        let bundles = inputs
            .groups
            .iter()
            .map(|gr| {
                let l = -gr.rows.iter().map(|&r| vals.data()[r]).sum::<f64>();
                LossBundle {
                    l_sisdr: l,
                    l_triplec: 0.0,
                    l_total: l,
                    w: 0.0,
                    pair: None,
                }
            })
            .collect();
        (sdr.sum().scale(-1.0 / inputs.groups.len() as f64), bundles)
    } else {
        let enr: Vec<&Waveform> = inputs.enrollments.iter().collect();
        let out = model.forward_graph(&g, &vars, &mix, &enr)?;
        batch_loss(out.estimate, targets, &inputs.groups, stage.mode, stage.w)?
    };

    let value = loss.value().item();
    let mut skip = |reason: String| -> Result<StepOutcome> {
        state.consecutive_skips += 1;
        log::warn!("skipping step: {reason}");
        if state.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
            return Err(Error::Training(format!(
                "{} consecutive non-finite steps, last: {reason}",
                state.consecutive_skips
            )));
        }
        Ok(StepOutcome::Skipped { reason })
    };
    if !value.is_finite() {
        return skip(format!("loss is {value}"));
    }
    let mut grads = g.backward(loss);
    let mut grads: Vec<Option<Tensor>> = vars.iter().map(|v| grads.take(*v)).collect();
    let grad_norm = match clip_gradients(&mut grads, stage.schedule.clip_norm) {
        Ok(n) => n,
        Err(e) => return skip(e.to_string()),
    };
    let clipped_norm = global_norm(&grads);
    state.consecutive_skips = 0;
    state.adam.step(model.params_mut().tensors_mut(), &grads, lr);

    let n = bundles.len() as f64;
    Ok(StepOutcome::Applied(StepReport {
        loss: value,
        l_sisdr: bundles.iter().map(|b| b.l_sisdr).sum::<f64>() / n,
        l_triplec: bundles.iter().map(|b| b.l_triplec).sum::<f64>() / n,
        grad_norm,
        clipped_norm,
        lr,
        n_items: inputs.mixtures.len(),
        conditions: inputs.conditions,
        bundles,
    }))
}
