//! Source clips, three-condition mixtures, batch sampling and corpora.

mod manifest;
mod mix;
mod sampler;
mod store;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

pub use manifest::{load_libri2mix_manifest, ManifestLoad, RejectedRow};
pub use mix::{db_to_gain, make_triplet, mix_min, scale_to_ratio};
pub use sampler::{epoch_batches, sample_batch, Batch, BatchGroup};
pub use store::{load_corpus, save_corpus, ClipEntry, CorpusIndex, StoredCorpus, INDEX_FILE};
pub use synth::{
    build_triplets, plan_triplets, realize_triplet, synth_corpus, synth_corpus_with, Corpus, MixRanges, SpeakerProfile,
    Split, SynthParams, TripletSet, TripletSpec,
};

/// Interference condition of a mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// target speaker plus background noise
    #[serde(rename = "1spk+noise")]
    Single,
    /// target plus one interfering speaker, no noise
    #[serde(rename = "2spk")]
    Clean2,
    /// target plus interferer plus noise
    #[serde(rename = "2spk+noise")]
    Both,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Single, Condition::Clean2, Condition::Both];

    pub fn label(self) -> &'static str {
        match self {
            Condition::Single => "1spk+noise",
            Condition::Clean2 => "2spk",
            Condition::Both => "2spk+noise",
        }
    }

    pub fn is_noisy(self) -> bool {
        !matches!(self, Condition::Clean2)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1spk+noise" | "single" | "mix_single" | "1spk" => Ok(Condition::Single),
            "2spk" | "clean" | "mix_clean" | "clean2" => Ok(Condition::Clean2),
            "2spk+noise" | "both" | "mix_both" => Ok(Condition::Both),
            other => Err(Error::Validation(format!(
                "unknown condition {other:?} (expected 1spk+noise, 2spk or 2spk+noise)"
            ))),
        }
    }
}

/// How training batches are assembled and which losses apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "condition")]
pub enum TrainingMode {
    /// one fixed condition, no consistency term
    ConditionWise(Condition),
    /// paired 1spk+noise / 2spk+noise per target with consistency
    Triplec,
    /// all three conditions per target, consistency between the noisy two
    TriplecParallel,
    /// conditions drawn independently per item, no consistency term
    Shuffled,
}

impl TrainingMode {
    /// Conditions each batch group carries for this mode. Shuffled groups
    /// are drawn at sampling time and return an empty slice here.
    pub fn group_conditions(self) -> &'static [Condition] {
        match self {
            TrainingMode::ConditionWise(Condition::Single) => &[Condition::Single],
            TrainingMode::ConditionWise(Condition::Clean2) => &[Condition::Clean2],
            TrainingMode::ConditionWise(Condition::Both) => &[Condition::Both],
            TrainingMode::Triplec => &[Condition::Single, Condition::Both],
            TrainingMode::TriplecParallel => &Condition::ALL,
            TrainingMode::Shuffled => &[],
        }
    }

    pub fn uses_consistency(self) -> bool {
        matches!(self, TrainingMode::Triplec | TrainingMode::TriplecParallel)
    }

    pub fn name(self) -> String {
        match self {
            TrainingMode::ConditionWise(c) => format!("condition-wise({c})"),
            TrainingMode::Triplec => "triplec".into(),
            TrainingMode::TriplecParallel => "triplec-parallel".into(),
            TrainingMode::Shuffled => "shuffled".into(),
        }
    }

    /// Parse a mode name as used on the command line; condition-wise
    /// needs the separate `condition` argument.
    pub fn parse(mode: &str, condition: Option<Condition>) -> Result<Self> {
        match mode {
            "triplec" => Ok(TrainingMode::Triplec),
            "triplec-parallel" | "triplec_parallel" => Ok(TrainingMode::TriplecParallel),
            "shuffled" => Ok(TrainingMode::Shuffled),
            "condition-wise" | "condition_wise" => condition
                .map(TrainingMode::ConditionWise)
                .ok_or_else(|| Error::Mode("condition-wise mode requires a condition".into())),
            other => Err(Error::Mode(format!(
                "unknown mode {other:?}; valid modes: condition-wise, triplec, triplec-parallel, shuffled"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipKind {
    Speech,
    Noise,
}

/// Raw source material for mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceClip {
    pub id: String,
    /// `Some` for speech, `None` for noise.
    pub speaker_id: Option<String>,
    pub kind: ClipKind,
    pub waveform: Waveform,
}

impl SourceClip {
    pub fn speech(id: impl Into<String>, speaker_id: impl Into<String>, waveform: Waveform) -> Self {
        Self {
            id: id.into(),
            speaker_id: Some(speaker_id.into()),
            kind: ClipKind::Speech,
            waveform,
        }
    }

    pub fn noise(id: impl Into<String>, waveform: Waveform) -> Self {
        Self {
            id: id.into(),
            speaker_id: None,
            kind: ClipKind::Noise,
            waveform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.speaker_id) {
            (ClipKind::Speech, None) => Err(Error::Validation(format!(
                "speech clip {} has no speaker id",
                self.id
            ))),
            (ClipKind::Noise, Some(_)) => Err(Error::Validation(format!(
                "noise clip {} carries a speaker id",
                self.id
            ))),
            _ => Ok(()),
        }
    }
}

/// One target utterance, its enrollment and the three condition mixtures.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTriplet {
    pub target: Waveform,
    pub enrollment: Waveform,
    pub y_single: Waveform,
    pub y_clean2: Waveform,
    pub y_both: Waveform,
    /// Scaled noise segment shared by the two noisy mixtures, when known.
    pub noise: Option<Waveform>,
    pub speaker_id: String,
    pub interferer_id: String,
    pub target_utt: String,
    pub enrollment_utt: String,
    pub snr_db: f64,
    pub sir_db: f64,
}

/// Tolerance of the `y_both - y_clean2 == noise` construction identity.
pub const CONSTRUCTION_TOL: f64 = 1e-9;

impl ConditionTriplet {
    pub fn mixture(&self, c: Condition) -> &Waveform {
        match c {
            Condition::Single => &self.y_single,
            Condition::Clean2 => &self.y_clean2,
            Condition::Both => &self.y_both,
        }
    }

    /// Target of the denoising front-end for a mixture: the mixture minus
    /// its noise (`s` for 1spk+noise, `s + interferer` otherwise).
    pub fn denoise_target(&self, c: Condition) -> &Waveform {
        match c {
            Condition::Single => &self.target,
            Condition::Clean2 | Condition::Both => &self.y_clean2,
        }
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.target.sample_rate()
    }

    /// Check the structural invariants; with `check_construction` also the
    /// shared-noise identity (only meaningful for in-memory mixing).
    pub fn validate(&self, check_construction: bool) -> Result<()> {
        let sr = self.target.sample_rate();
        let all = [
            &self.target,
            &self.enrollment,
            &self.y_single,
            &self.y_clean2,
            &self.y_both,
        ];
        if all.iter().any(|w| w.sample_rate() != sr) {
            return Err(Error::Validation("triplet waveforms differ in sample rate".into()));
        }
        let n = self.target.len();
        if n == 0 {
            return Err(Error::Validation("empty triplet".into()));
        }
        if [&self.y_single, &self.y_clean2, &self.y_both]
            .iter()
            .any(|w| w.len() != n)
        {
            return Err(Error::Validation("triplet mixtures and target differ in length".into()));
        }
        if self.speaker_id == self.interferer_id {
            return Err(Error::Validation(format!(
                "target and interferer share speaker {}",
                self.speaker_id
            )));
        }
        if self.target_utt == self.enrollment_utt {
            return Err(Error::Validation(format!(
                "enrollment reuses the target utterance {}",
                self.target_utt
            )));
        }
        if check_construction {
            if let Some(noise) = &self.noise {
                if noise.len() != n {
                    return Err(Error::Validation("noise segment length differs".into()));
                }
                let worst = self
                    .y_both
                    .samples()
                    .iter()
                    .zip(self.y_clean2.samples())
                    .zip(noise.samples())
                    .map(|((b, c), v)| (b - c - v).abs())
                    .fold(0.0, f64::max);
                if worst > CONSTRUCTION_TOL {
                    return Err(Error::Validation(format!(
                        "y_both - y_clean2 deviates from the noise segment by {worst:e}"
                    )));
                }
            }
        }
        Ok(())
    }
}
