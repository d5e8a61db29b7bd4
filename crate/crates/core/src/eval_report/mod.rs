//! Condition-wise evaluation, report rendering and run comparison.

mod probe;
mod render;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Condition, ConditionTriplet};
use crate::error::{Error, Result};
use crate::metrics::{pesq_external, si_sdr, stoi, MetricAccumulator, MetricRow, PesqHook};
use crate::model::LgtseModel;
use crate::signal::{write_wav, Waveform};

pub use probe::{consistency_gap, denoiser_probe, write_spectrogram_png, DenoiserProbe, ProbeRow, DB_FLOOR};
pub use render::{compare, parse_report_csv, render_comparison, render_report, Comparison, CsvRow, DeltaRow, ReportFormat};

/// What produces `s_hat` for an item.
#[derive(Clone, Copy, Debug)]
pub enum Extractor<'a> {
    Model(&'a LgtseModel),
    /// returns the mixture unchanged
    Identity,
    /// returns the target
    Perfect,
}

impl<'a> Extractor<'a> {
    /// `identity` or `perfect`.
    pub fn stub(name: &str) -> Result<Extractor<'static>> {
        match name {
            "identity" => Ok(Extractor::Identity),
            "perfect" | "oracle" => Ok(Extractor::Perfect),
            other => Err(Error::Usage(format!("unknown stub {other:?}; expected identity or perfect"))),
        }
    }

    pub fn id(&self) -> String {
        match self {
            Extractor::Model(m) => model_id(m),
            Extractor::Identity => "stub:identity".into(),
            Extractor::Perfect => "stub:perfect".into(),
        }
    }

    /// Estimates for `conditions` of one triplet, in order.
    pub fn extract(&self, t: &ConditionTriplet, conditions: &[Condition]) -> Result<Vec<Waveform>> {
        match self {
            Extractor::Model(m) => {
                let ys: Vec<Waveform> = conditions.iter().map(|&c| t.mixture(c).clone()).collect();
                m.parallel_forward(&ys, &t.enrollment)
            }
            Extractor::Identity => Ok(conditions.iter().map(|&c| t.mixture(c).clone()).collect()),
            Extractor::Perfect => Ok(vec![t.target.clone(); conditions.len()]),
        }
    }
}

fn short_hash(h: Sha256) -> String {
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Short content hash of a model's configuration and weights.
pub fn model_id(m: &LgtseModel) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(m.config()).unwrap_or_default());
    for t in m.params().tensors() {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    format!("lgtse-{}", short_hash(h))
}

/// Short content hash of an evaluation pool.
pub fn corpus_id(pool: &[ConditionTriplet]) -> String {
    let mut h = Sha256::new();
    for t in pool {
        for w in [&t.target, &t.enrollment, &t.y_single, &t.y_clean2, &t.y_both] {
            h.update((w.len() as u64).to_le_bytes());
            for v in w.samples() {
                h.update(v.to_le_bytes());
            }
        }
    }
    format!("pool{}-{}", pool.len(), short_hash(h))
}

/// Unweighted mean over condition rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub si_sdr: f64,
    pub stoi: f64,
    pub pesq: Option<f64>,
}

impl Aggregate {
    pub fn of(rows: &[MetricRow]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(Self {
            si_sdr: rows.iter().map(|r| r.si_sdr).sum::<f64>() / n,
            stoi: rows.iter().map(|r| r.stoi).sum::<f64>() / n,
            pesq: rows
                .iter()
                .map(|r| r.pesq)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / n),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    /// metrics of the mixtures themselves
    #[serde(default)]
    pub unprocessed: Vec<MetricRow>,
    pub model_id: String,
    pub corpus_id: String,
    pub aggregate: Aggregate,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub consistency_gap: Option<f64>,
    #[serde(default)]
    pub probe: Option<Vec<ProbeRow>>,
}

impl EvalReport {
    pub fn new(rows: Vec<MetricRow>, unprocessed: Vec<MetricRow>, model_id: String, corpus_id: String) -> Result<Self> {
        let aggregate = Aggregate::of(&rows).ok_or_else(|| Error::Validation("report without rows".into()))?;
        let r = Self {
            rows,
            unprocessed,
            model_id,
            corpus_id,
            aggregate,
            metadata: BTreeMap::new(),
            consistency_gap: None,
            probe: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn row(&self, c: Condition) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.condition == c)
    }

    pub fn unprocessed_row(&self, c: Condition) -> Option<&MetricRow> {
        self.unprocessed.iter().find(|r| r.condition == c)
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.rows.iter().map(|r| r.condition).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for r in self.rows.iter().chain(&self.unprocessed) {
            r.validate()?;
        }
        for r in &self.rows {
            if seen.contains(&r.condition) {
                return Err(Error::Validation(format!("duplicate row for {}", r.condition)));
            }
            seen.push(r.condition);
        }
        let agg = Aggregate::of(&self.rows).ok_or_else(|| Error::Validation("report without rows".into()))?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs());
        let pesq_ok = match (agg.pesq, self.aggregate.pesq) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        if !(close(agg.si_sdr, self.aggregate.si_sdr) && close(agg.stoi, self.aggregate.stoi) && pesq_ok) {
            return Err(Error::Validation("aggregate does not match the rows".into()));
        }
        Ok(())
    }
}

/// Optional evaluation extras.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub pesq: Option<PesqHook>,
    /// where estimate/reference WAVs for the PESQ hook are written
    pub scratch_dir: Option<PathBuf>,
}

/// Scale down so 16-bit PCM does not clip.
fn fit_pcm(w: &Waveform) -> Waveform {
    let peak = w.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        w.scaled(0.99 / peak)
    } else {
        w.clone()
    }
}

struct PesqScratch<'a> {
    hook: &'a PesqHook,
    dir: PathBuf,
    n: usize,
}

impl PesqScratch<'_> {
    fn score(&mut self, est: &Waveform, reference: &Waveform) -> Result<Option<f64>> {
        self.n += 1;
        let e = self.dir.join(format!("est_{}.wav", self.n));
        let r = self.dir.join(format!("ref_{}.wav", self.n));
        write_wav(&e, &fit_pcm(est))?;
        write_wav(&r, &fit_pcm(reference))?;
        let s = pesq_external(Some(self.hook), &e, &r);
        let _ = std::fs::remove_file(&e);
        let _ = std::fs::remove_file(&r);
        Ok(s)
    }
}

fn dedup(conditions: &[Condition]) -> Vec<Condition> {
    let mut out = Vec::new();
    for c in conditions {
        if !out.contains(c) {
            out.push(*c);
        }
    }
    out
}

/// Score `extractor` on every triplet under each of `conditions`, plus the
/// unprocessed mixtures for reference.
pub fn evaluate(extractor: Extractor<'_>, pool: &[ConditionTriplet], conditions: &[Condition], opts: &EvalOptions) -> Result<EvalReport> {
    let conditions = dedup(conditions);
    if conditions.is_empty() {
        return Err(Error::Usage("no conditions to evaluate".into()));
    }
    if pool.is_empty() {
        for c in &conditions {
            log::warn!("no items for {c}; condition skipped");
        }
        return Err(Error::Validation("evaluation pool is empty".into()));
    }
    let mut scratch = match &opts.pesq {
        Some(hook) => {
            let dir = opts
                .scratch_dir
                .clone()
                .unwrap_or_else(|| std::env::temp_dir().join(format!("lgtse-pesq-{}", std::process::id())));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            Some(PesqScratch { hook, dir, n: 0 })
        }
        None => None,
    };
    let mut model_acc = vec![MetricAccumulator::default(); conditions.len()];
    let mut mix_acc = vec![MetricAccumulator::default(); conditions.len()];
    for t in pool {
        let estimates = extractor.extract(t, &conditions)?;
        for (k, (&c, est)) in conditions.iter().zip(&estimates).enumerate() {
            let y = t.mixture(c);
            for (acc, w) in [(&mut model_acc[k], est), (&mut mix_acc[k], y)] {
                let pesq = match scratch.as_mut() {
                    Some(s) => s.score(w, &t.target)?,
                    None => None,
                };
                acc.push(si_sdr(w, &t.target)?, stoi(w, &t.target)?, pesq);
            }
        }
    }
    let rows: Vec<MetricRow> = conditions
        .iter()
        .zip(&model_acc)
        .filter_map(|(c, a)| a.finish(*c))
        .collect();
    let unprocessed: Vec<MetricRow> = conditions
        .iter()
        .zip(&mix_acc)
        .filter_map(|(c, a)| a.finish(*c))
        .collect();
    let mut report = EvalReport::new(rows, unprocessed, extractor.id(), corpus_id(pool))?;
    report.metadata.insert("n_triplets".into(), pool.len().to_string());
    Ok(report)
}
