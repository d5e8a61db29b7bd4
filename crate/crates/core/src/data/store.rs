//! Synthetic corpus persisted as a WAV tree plus a JSON index.
//!
//! ```text
//! <dir>/index.json
//! <dir>/speech/<speaker>/<utterance>.wav
//! <dir>/noise/<clip>.wav
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{read_wav, write_wav};

use super::synth::{realize_triplet, Corpus, MixRanges, SpeakerProfile, Split, SynthParams, TripletSet};
use super::{ClipKind, ConditionTriplet, SourceClip};

pub const INDEX_FILE: &str = "index.json";
const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub speaker_id: Option<String>,
    pub kind: ClipKind,
    pub split: Split,
    /// relative to the corpus directory
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub version: u32,
    pub params: SynthParams,
    pub ranges: MixRanges,
    pub speakers: Vec<SpeakerProfile>,
    pub clips: Vec<ClipEntry>,
    pub triplets: TripletSet,
}

/// A corpus read back from disk with its triplets mixed from the stored
/// (16-bit) audio.
#[derive(Clone, Debug)]
pub struct StoredCorpus {
    pub dir: PathBuf,
    pub index: CorpusIndex,
    pub corpus: Corpus,
    pub train: Vec<ConditionTriplet>,
    pub test: Vec<ConditionTriplet>,
}

fn clip_path(clip: &SourceClip) -> String {
    match (&clip.kind, &clip.speaker_id) {
        (ClipKind::Speech, Some(spk)) => format!("speech/{spk}/{}.wav", clip.id),
        _ => format!("noise/{}.wav", clip.id),
    }
}

/// Write corpus audio and index under `dir` (created if needed).
pub fn save_corpus(dir: &Path, corpus: &Corpus, ranges: &MixRanges, triplets: &TripletSet) -> Result<CorpusIndex> {
    let mut clips = Vec::new();
    let speech = corpus.speech.iter().zip(&corpus.speech_split);
    let noise = corpus.noise.iter().zip(&corpus.noise_split);
    for (clip, split) in speech.chain(noise) {
        let rel = clip_path(clip);
        let full = dir.join(&rel);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_wav(&full, &clip.waveform)?;
        clips.push(ClipEntry {
            id: clip.id.clone(),
            speaker_id: clip.speaker_id.clone(),
            kind: clip.kind,
            split: *split,
            path: rel,
        });
    }
    let index = CorpusIndex {
        version: INDEX_VERSION,
        params: corpus.params.clone(),
        ranges: *ranges,
        speakers: corpus.speakers.clone(),
        clips,
        triplets: triplets.clone(),
    };
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Read a corpus directory and mix its planned triplets.
pub fn load_corpus(dir: &Path) -> Result<StoredCorpus> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CorpusIndex = serde_json::from_str(&text)?;
    if index.version != INDEX_VERSION {
        return Err(Error::Validation(format!(
            "corpus index version {} not supported (expected {INDEX_VERSION})",
            index.version
        )));
    }
    let rate = index.params.sample_rate;
    let mut corpus = Corpus {
        params: index.params.clone(),
        speakers: index.speakers.clone(),
        speech: Vec::new(),
        speech_split: Vec::new(),
        noise: Vec::new(),
        noise_split: Vec::new(),
    };
    for entry in &index.clips {
        let waveform = read_wav(&dir.join(&entry.path), Some(rate))?;
        let clip = SourceClip {
            id: entry.id.clone(),
            speaker_id: entry.speaker_id.clone(),
            kind: entry.kind,
            waveform,
        };
        clip.validate()?;
        match entry.kind {
            ClipKind::Speech => {
                corpus.speech.push(clip);
                corpus.speech_split.push(entry.split);
            }
            ClipKind::Noise => {
                corpus.noise.push(clip);
                corpus.noise_split.push(entry.split);
            }
        }
    }
    let len = (index.ranges.enrollment_s * f64::from(rate)).round() as usize;
    let mix = |specs: &[super::TripletSpec]| -> Result<Vec<ConditionTriplet>> {
        specs
            .iter()
            .map(|s| realize_triplet(&corpus.speech, &corpus.noise, s, len))
            .collect()
    };
    let train = mix(&index.triplets.train)?;
    let test = mix(&index.triplets.test)?;
    Ok(StoredCorpus {
        dir: dir.to_path_buf(),
        index,
        corpus,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{plan_triplets, synth_corpus};

    #[test]
    fn round_trip() {
        let corpus = synth_corpus(3, 4, 0.5, 2).unwrap();
        let ranges = MixRanges {
            enrollment_s: 1.0,
            ..MixRanges::default()
        };
        let plan = plan_triplets(&corpus, 0, 0, &ranges, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let index = save_corpus(dir.path(), &corpus, &ranges, &plan).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.index, index);
        assert_eq!(back.train.len(), plan.train.len());
        assert_eq!(back.corpus.speech.len(), 12);
        for (a, b) in corpus.speech.iter().zip(&back.corpus.speech) {
            let err = a
                .waveform
                .samples()
                .iter()
                .zip(b.waveform.samples())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1.0 / 32768.0);
        }
        for t in back.train.iter().chain(&back.test) {
            t.validate(true).unwrap();
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let corpus = synth_corpus(2, 3, 0.25, 4).unwrap();
        let ranges = MixRanges::default();
        let plan = plan_triplets(&corpus, 0, 0, &ranges, 1).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_corpus(a.path(), &corpus, &ranges, &plan).unwrap();
        save_corpus(b.path(), &corpus, &ranges, &plan).unwrap();
        for entry in std::fs::read_dir(a.path().join("noise")).unwrap() {
            let p = entry.unwrap().path();
            let q = b.path().join("noise").join(p.file_name().unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        }
        assert_eq!(
            std::fs::read(a.path().join(INDEX_FILE)).unwrap(),
            std::fs::read(b.path().join(INDEX_FILE)).unwrap()
        );
    }
}
