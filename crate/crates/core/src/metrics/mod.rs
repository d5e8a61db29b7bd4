//! SI-SDR, STOI and the optional external PESQ hook.

mod pesq;
mod sisdr;
mod stoi;

use serde::{Deserialize, Serialize};

use crate::data::Condition;
use crate::error::{Error, Result};

pub use pesq::{pesq_external, PesqHook, PESQ_ENV};
pub use sisdr::{si_sdr, si_sdr_unclamped, SI_SDR_CLAMP_DB};
pub use stoi::{resample, stoi, stoi_raw, SEGMENT_FRAMES, STOI_RATE};

/// Per-condition metric averages, one row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub condition: Condition,
    /// dB
    pub si_sdr: f64,
    /// percent, `[0, 100]`
    pub stoi: f64,
    pub pesq: Option<f64>,
    pub n_items: usize,
}

impl MetricRow {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::Validation("metric row without items".into()));
        }
        if !self.si_sdr.is_finite() {
            return Err(Error::Validation("non-finite SI-SDR in metric row".into()));
        }
        if !(0.0..=100.0).contains(&self.stoi) {
            return Err(Error::Validation(format!("STOI {} outside [0, 100]", self.stoi)));
        }
        Ok(())
    }
}

/// Accumulates per-item scores in insertion order.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    si_sdr: Vec<f64>,
    stoi: Vec<f64>,
    pesq: Vec<Option<f64>>,
}

impl MetricAccumulator {
    pub fn push(&mut self, si_sdr: f64, stoi: f64, pesq: Option<f64>) {
        self.si_sdr.push(si_sdr);
        self.stoi.push(stoi);
        self.pesq.push(pesq);
    }

    pub fn len(&self) -> usize {
        self.si_sdr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.si_sdr.is_empty()
    }

    /// Mean row; PESQ is reported only when every item has a score.
    /// `stoi` values are fractions and are converted to percent here.
    pub fn finish(&self, condition: Condition) -> Option<MetricRow> {
        if self.is_empty() {
            return None;
        }
        let n = self.len() as f64;
        let pesq = self
            .pesq
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        Some(MetricRow {
            condition,
            si_sdr: self.si_sdr.iter().sum::<f64>() / n,
            stoi: 100.0 * self.stoi.iter().sum::<f64>() / n,
            pesq,
            n_items: self.len(),
        })
    }
}
