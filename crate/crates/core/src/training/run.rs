use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::{epoch_batches, Condition, ConditionTriplet};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, LgtseModel};

use super::step::{train_step, OptimizerState, StepOutcome};
use super::{lr_at, TrainConfig};

/// Latest checkpoint, relative to the run directory.
pub const CHECKPOINT_DIR: &str = "checkpoint";
/// JSON-lines training log, relative to the run directory.
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        stage: String,
        epoch: usize,
        /// global step index, counting skipped steps
        step: u64,
        loss: Option<f64>,
        l_sisdr: Option<f64>,
        l_triplec: Option<f64>,
        lr: f64,
        /// before clipping
        grad_norm: Option<f64>,
        /// after clipping
        clipped_norm: Option<f64>,
        conditions: Vec<Condition>,
        skipped: bool,
    },
    Epoch {
        stage: String,
        epoch: usize,
        /// global step count at the end of the epoch
        step: u64,
        lr: f64,
        mean_loss: Option<f64>,
        steps: usize,
        skipped: usize,
    },
}

impl LogRecord {
    pub fn step(&self) -> u64 {
        match self {
            LogRecord::Step { step, .. } | LogRecord::Epoch { step, .. } => *step,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: LgtseModel,
    /// full log, including records from runs this one resumed
    pub log: Vec<LogRecord>,
    pub checkpoint: PathBuf,
    pub global_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunState {
    config: TrainConfig,
    stage_index: usize,
    /// completed epochs of the current stage
    epochs_done: usize,
    /// optimizer steps taken in the current stage
    stage_steps: usize,
    global_step: u64,
    consecutive_skips: usize,
    adam_t: u64,
    done: bool,
}

fn epoch_seed(seed: u64, stage: usize, epoch: usize) -> u64 {
    (seed ^ ((stage as u64) << 32 | epoch as u64)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct LogWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl LogWriter {
    fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    fn push(&mut self, r: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn frozen_fingerprint(model: &LgtseModel, cfg: &super::StageConfig) -> Vec<u64> {
    let p = model.params();
    p.tensors()
        .iter()
        .zip(p.groups())
        .filter(|(_, g)| !cfg.is_trainable(**g))
        .flat_map(|(t, _)| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn save(dir: &Path, model: &LgtseModel, st: &RunState, opt: &OptimizerState) -> Result<()> {
    let stage = st
        .config
        .stages
        .get(st.stage_index.min(st.config.stages.len() - 1))
        .map(|s| s.stage.name());
    let state = serde_json::to_value(st)?;
    let m: &[Tensor] = &opt.adam.m;
    let v: &[Tensor] = &opt.adam.v;
    save_checkpoint(dir, model, stage, state, &[("adam_m", m), ("adam_v", v)])
}

/// Run every configured stage in order, checkpointing after each epoch.
///
/// Output goes to `run_dir/checkpoint` and `run_dir/train_log.jsonl`. With
/// `resume`, training continues from the checkpoint found there and the
/// result is identical to an uninterrupted run.
pub fn run_training(config: &TrainConfig, pool: &[ConditionTriplet], run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    run_until(config, pool, run_dir, resume, None)
}

/// As [`run_training`], but stops after `epoch_budget` epochs in this call.
pub(crate) fn run_until(
    config: &TrainConfig,
    pool: &[ConditionTriplet],
    run_dir: &Path,
    resume: bool,
    epoch_budget: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut budget = epoch_budget.unwrap_or(usize::MAX);
    if pool.is_empty() {
        return Err(Error::Capacity {
            needed: config.batch_size,
            available: 0,
        });
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    let log_path = run_dir.join(LOG_FILE);

    let (mut model, mut opt, mut st) = if resume && ckpt_dir.join(crate::model::MANIFEST_FILE).exists() {
        let ck = load_checkpoint(&ckpt_dir)?;
        let st: RunState = serde_json::from_value(ck.manifest.state.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint has no resumable state: {e}")))?;
        if st.config != *config {
            return Err(Error::Config("checkpoint was written by a different training configuration".into()));
        }
        let mut opt = OptimizerState::new(&ck.model);
        let moments = |k: &str| {
            ck.extra
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {k}")))
        };
        opt.adam.m = moments("adam_m")?;
        opt.adam.v = moments("adam_v")?;
        opt.adam.t = st.adam_t;
        opt.consecutive_skips = st.consecutive_skips;
        let kept: Vec<LogRecord> = read_log(&log_path)?
            .into_iter()
            .filter(|r| r.step() <= st.global_step)
            .collect();
        write_log(&log_path, &kept)?;
        log::info!("resuming at stage {} epoch {} step {}", st.stage_index, st.epochs_done, st.global_step);
        (ck.model, opt, st)
    } else {
        let model = LgtseModel::new(config.model.clone())?;
        let opt = OptimizerState::new(&model);
        write_log(&log_path, &[])?;
        let st = RunState {
            config: config.clone(),
            stage_index: 0,
            epochs_done: 0,
            stage_steps: 0,
            global_step: 0,
            consecutive_skips: 0,
            adam_t: 0,
            done: false,
        };
        (model, opt, st)
    };
    let mut log = LogWriter::open(&log_path)?;

    while !st.done && budget > 0 {
        let scfg = &config.stages[st.stage_index];
        let name = scfg.stage.name();
        let frozen = frozen_fingerprint(&model, scfg);
        let cap = config.max_steps_per_stage.unwrap_or(usize::MAX);
        while st.epochs_done < scfg.epochs && st.stage_steps < cap {
            let epoch = st.epochs_done;
            let lr = lr_at(epoch, &scfg.schedule)?;
            let seed = epoch_seed(config.seed, st.stage_index, epoch);
            let batches = epoch_batches(pool.len(), config.batch_size, scfg.mode, seed)?;
            let (mut sum, mut applied, mut skipped) = (0.0, 0usize, 0usize);
            for batch in batches.iter().take(cap - st.stage_steps) {
                st.global_step += 1;
                st.stage_steps += 1;
                let rec = match train_step(&mut model, pool, batch, scfg, &mut opt, lr)? {
                    StepOutcome::Applied(r) => {
                        sum += r.loss;
                        applied += 1;
                        LogRecord::Step {
                            stage: name.into(),
                            epoch,
                            step: st.global_step,
                            loss: Some(r.loss),
                            l_sisdr: Some(r.l_sisdr),
                            l_triplec: Some(r.l_triplec),
                            lr,
                            grad_norm: Some(r.grad_norm),
                            clipped_norm: Some(r.clipped_norm),
                            conditions: r.conditions,
                            skipped: false,
                        }
                    }
                    StepOutcome::Skipped { .. } => {
                        skipped += 1;
                        LogRecord::Step {
                            stage: name.into(),
                            epoch,
                            step: st.global_step,
                            loss: None,
                            l_sisdr: None,
                            l_triplec: None,
                            lr,
                            grad_norm: None,
                            clipped_norm: None,
                            conditions: batch.items().map(|(_, c)| c).collect(),
                            skipped: true,
                        }
                    }
                };
                log.push(&rec)?;
            }
            let mean_loss = (applied > 0).then(|| sum / applied as f64);
            log::info!(
                "{name} epoch {epoch}: lr {lr:.3e}, mean loss {}",
                mean_loss.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            log.push(&LogRecord::Epoch {
                stage: name.into(),
                epoch,
                step: st.global_step,
                lr,
                mean_loss,
                steps: applied + skipped,
                skipped,
            })?;
            st.epochs_done += 1;
            if st.epochs_done == scfg.epochs || st.stage_steps >= cap {
                if frozen_fingerprint(&model, scfg) != frozen {
                    return Err(Error::Training(format!("frozen parameters changed during {name}")));
                }
                st.stage_index += 1;
                st.epochs_done = 0;
                st.stage_steps = 0;
                st.done = st.stage_index == config.stages.len();
            }
            st.adam_t = opt.adam.t;
            st.consecutive_skips = opt.consecutive_skips;
            save(&ckpt_dir, &model, &st, &opt)?;
            budget -= 1;
            if st.epochs_done == 0 || budget == 0 {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model,
        log: read_log(&log_path)?,
        checkpoint: ckpt_dir,
        global_step: st.global_step,
    })
}
