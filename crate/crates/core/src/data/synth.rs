//! Deterministic pseudo-speech and noise for desk-scale experiments.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

use super::{make_triplet, ConditionTriplet, SourceClip};

const CLIP_RMS: f64 = 0.05;

/// Generation parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// 0 picks `max(4, speakers * utts / 2)`.
    pub n_noise: usize,
    /// Fraction of each speaker's utterances (and of the noise clips)
    /// reserved for held-out triplets.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            utts_per_speaker: 8,
            duration_s: 1.0,
            sample_rate: 8000,
            n_noise: 0,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 speakers to form an interferer, got {}",
                self.n_speakers
            )));
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 utterances per speaker for enrollment, got {}",
                self.utts_per_speaker
            )));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!("bad clip duration {}", self.duration_s)));
        }
        if self.sample_rate < 1000 {
            return Err(Error::Config(format!("sample rate {} too low", self.sample_rate)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn noise_count(&self) -> usize {
        if self.n_noise > 0 {
            self.n_noise
        } else {
            (self.n_speakers * self.utts_per_speaker / 2).max(4)
        }
    }

    fn held_out(&self, n: usize) -> usize {
        let k = (n as f64 * self.test_fraction).floor() as usize;
        // keep two training utterances for target + enrollment
        k.min(n.saturating_sub(2))
    }
}

/// Voice parameters shared by all utterances of one speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: String,
    pub f0: f64,
    pub formants: [f64; 3],
    /// spectral tilt, dB per octave
    pub tilt_db: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Generated source clips with their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub params: SynthParams,
    pub speakers: Vec<SpeakerProfile>,
    pub speech: Vec<SourceClip>,
    pub speech_split: Vec<Split>,
    pub noise: Vec<SourceClip>,
    pub noise_split: Vec<Split>,
}

impl Corpus {
    pub fn sample_rate(&self) -> u32 {
        self.params.sample_rate
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerProfile> {
        self.speakers.iter().find(|s| s.id == id)
    }

    pub fn clip(&self, id: &str) -> Option<&SourceClip> {
        self.speech.iter().chain(&self.noise).find(|c| c.id == id)
    }

    fn speech_in(&self, split: Split) -> impl Iterator<Item = &SourceClip> {
        self.speech
            .iter()
            .zip(&self.speech_split)
            .filter(move |(_, s)| **s == split)
            .map(|(c, _)| c)
    }

    fn noise_in(&self, split: Split) -> Vec<&SourceClip> {
        self.noise
            .iter()
            .zip(&self.noise_split)
            .filter(|(_, s)| **s == split)
            .map(|(c, _)| c)
            .collect()
    }
}

fn sub_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 20);
    ChaCha8Rng::seed_from_u64(rng.gen())
}

fn speaker_profile(k: usize, seed: u64) -> SpeakerProfile {
    let mut rng = sub_rng(seed, 1, k as u64);
    let golden = 0.618_033_988_749_895;
    let frac = (k as f64 * golden).fract();
    SpeakerProfile {
        id: format!("spk{k:02}"),
        f0: 95.0 + 190.0 * frac,
        formants: [
            rng.gen_range(300.0..800.0),
            rng.gen_range(900.0..2200.0),
            rng.gen_range(2300.0..3200.0),
        ],
        tilt_db: rng.gen_range(-9.0..-4.0),
    }
}

fn normalize_rms(x: &mut [f64], rms: f64) {
    let cur = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if cur > 0.0 {
        let g = rms / cur;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// One pseudo-speech utterance: a fixed-f0 harmonic series shaped by the
/// speaker's formants, gated into syllables with per-syllable vowel shifts.
fn utterance(p: &SpeakerProfile, n: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n_harm = ((0.45 * fs) / p.f0).floor() as usize;
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mut out = vec![0.0; n];
    let mut start = (rng.gen_range(0.0..0.08) * fs) as usize;
    while start < n {
        let len = (rng.gen_range(0.12..0.30) * fs) as usize;
        let gap = (rng.gen_range(0.02..0.12) * fs) as usize;
        let shift = rng.gen_range(0.85..1.15);
        let level = rng.gen_range(0.6..1.0);
        let amps: Vec<f64> = (1..=n_harm)
            .map(|h| {
                let f = h as f64 * p.f0;
                let tilt = 10f64.powf(p.tilt_db * (f / p.f0).log2() / 20.0);
                let env: f64 = p
                    .formants
                    .iter()
                    .map(|&fm| {
                        let d = (f - fm * shift) / 150.0;
                        (-0.5 * d * d).exp()
                    })
                    .sum();
                level * tilt * (0.05 + env)
            })
            .collect();
        let end = (start + len).min(n);
        for (t, o) in out.iter_mut().enumerate().take(end).skip(start) {
            let env = (PI * (t - start) as f64 / len as f64).sin().powi(2);
            let time = t as f64 / fs;
            let mut v = 0.0;
            for (h, (a, ph)) in amps.iter().zip(&phases).enumerate() {
                v += a * (2.0 * PI * (h + 1) as f64 * p.f0 * time + ph).sin();
            }
            *o = env * v;
        }
        start = end + gap;
    }
    normalize_rms(&mut out, CLIP_RMS);
    out
}

/// Gaussian noise through a random resonant biquad, with a white floor and
/// slow level fluctuation.
fn noise_clip(n: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fc: f64 = rng.gen_range(200.0..0.375 * fs);
    let q: f64 = rng.gen_range(0.5..2.0);
    let w0 = 2.0 * PI * fc / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let floor = rng.gen_range(0.1..0.4);
    let mod_hz = rng.gen_range(0.5..2.0);
    let mod_ph = rng.gen_range(0.0..2.0 * PI);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        let m = 1.0 + 0.3 * (2.0 * PI * mod_hz * t as f64 / fs + mod_ph).sin();
        out.push(m * (y + floor * x * alpha));
    }
    normalize_rms(&mut out, CLIP_RMS);
    out
}

/// Synthetic corpus at 8 kHz with default split and noise settings.
pub fn synth_corpus(n_speakers: usize, utts_per_speaker: usize, duration_s: f64, seed: u64) -> Result<Corpus> {
    synth_corpus_with(&SynthParams {
        n_speakers,
        utts_per_speaker,
        duration_s,
        seed,
        ..SynthParams::default()
    })
}

pub fn synth_corpus_with(params: &SynthParams) -> Result<Corpus> {
    params.validate()?;
    let fs = f64::from(params.sample_rate);
    let n = (params.duration_s * fs).round() as usize;
    let speakers: Vec<SpeakerProfile> = (0..params.n_speakers)
        .map(|k| speaker_profile(k, params.seed))
        .collect();
    let held = params.held_out(params.utts_per_speaker);
    let mut speech = Vec::new();
    let mut speech_split = Vec::new();
    for (k, p) in speakers.iter().enumerate() {
        for u in 0..params.utts_per_speaker {
            let mut rng = sub_rng(params.seed, 2, (k * 10_000 + u) as u64);
            let w = Waveform::new(utterance(p, n, fs, &mut rng), params.sample_rate)?;
            speech.push(SourceClip::speech(format!("{}-u{u:03}", p.id), p.id.clone(), w));
            speech_split.push(if u + held >= params.utts_per_speaker {
                Split::Test
            } else {
                Split::Train
            });
        }
    }
    let n_noise = params.noise_count();
    let held_noise = ((n_noise as f64 * params.test_fraction).floor() as usize).min(n_noise - 1);
    let mut noise = Vec::new();
    let mut noise_split = Vec::new();
    for j in 0..n_noise {
        let mut rng = sub_rng(params.seed, 3, j as u64);
        let w = Waveform::new(noise_clip(n, fs, &mut rng), params.sample_rate)?;
        noise.push(SourceClip::noise(format!("noise-{j:03}"), w));
        noise_split.push(if j + held_noise >= n_noise {
            Split::Test
        } else {
            Split::Train
        });
    }
    Ok(Corpus {
        params: params.clone(),
        speakers,
        speech,
        speech_split,
        noise,
        noise_split,
    })
}

/// Uniform ranges for the random mixing levels, in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRanges {
    pub sir_db: (f64, f64),
    pub snr_db: (f64, f64),
    pub enrollment_s: f64,
}

impl Default for MixRanges {
    fn default() -> Self {
        Self {
            sir_db: (-5.0, 5.0),
            snr_db: (0.0, 15.0),
            enrollment_s: 2.0,
        }
    }
}

/// Recipe for one triplet in terms of corpus clip ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletSpec {
    pub target: String,
    /// Utterances concatenated (then cut) to form the enrollment.
    pub enrollment: Vec<String>,
    pub interferer: String,
    pub noise: String,
    pub sir_db: f64,
    pub snr_db: f64,
}

/// Triplet recipes for both splits.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TripletSet {
    pub train: Vec<TripletSpec>,
    pub test: Vec<TripletSpec>,
}

fn gen_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo.min(hi)..lo.max(hi))
    }
}

/// Plan `n` triplets per split (0 = one per target utterance in the split).
///
/// Enrollments always come from training utterances of the target speaker
/// other than the target itself.
pub fn plan_triplets(corpus: &Corpus, n_train: usize, n_test: usize, ranges: &MixRanges, seed: u64) -> Result<TripletSet> {
    let mut set = TripletSet::default();
    for (split, want, stream) in [(Split::Train, n_train, 4u64), (Split::Test, n_test, 5)] {
        let targets: Vec<&SourceClip> = corpus.speech_in(split).collect();
        let noises = corpus.noise_in(split);
        if targets.is_empty() || noises.is_empty() {
            continue;
        }
        let want = if want == 0 { targets.len() } else { want };
        let mut rng = sub_rng(seed, stream, 0);
        let mut order: Vec<usize> = Vec::new();
        while order.len() < want {
            let mut round: Vec<usize> = (0..targets.len()).collect();
            round.shuffle(&mut rng);
            order.extend(round);
        }
        order.truncate(want);
        for ti in order {
            let t = targets[ti];
            let spk = t.speaker_id.as_deref().unwrap_or_default();
            let mut pool: Vec<&SourceClip> = corpus
                .speech_in(Split::Train)
                .filter(|c| c.speaker_id.as_deref() == Some(spk) && c.id != t.id)
                .collect();
            pool.shuffle(&mut rng);
            let need = (ranges.enrollment_s * f64::from(corpus.sample_rate())).round() as usize;
            let mut enrollment = Vec::new();
            let mut have = 0;
            for c in pool {
                if have >= need {
                    break;
                }
                have += c.waveform.len();
                enrollment.push(c.id.clone());
            }
            if enrollment.is_empty() {
                return Err(Error::Validation(format!("no enrollment utterance for {spk}")));
            }
            let others: Vec<&SourceClip> = corpus
                .speech_in(split)
                .filter(|c| c.speaker_id.as_deref() != Some(spk))
                .collect();
            let interferer = others
                .choose(&mut rng)
                .ok_or_else(|| Error::Validation("no interfering speaker available".into()))?;
            let noise = noises.choose(&mut rng).expect("non-empty");
            set_for(&mut set, split).push(TripletSpec {
                target: t.id.clone(),
                enrollment,
                interferer: interferer.id.clone(),
                noise: noise.id.clone(),
                sir_db: gen_in(&mut rng, ranges.sir_db),
                snr_db: gen_in(&mut rng, ranges.snr_db),
            });
        }
    }
    Ok(set)
}

fn set_for(set: &mut TripletSet, split: Split) -> &mut Vec<TripletSpec> {
    match split {
        Split::Train => &mut set.train,
        Split::Test => &mut set.test,
    }
}

fn lookup<'a>(clips: &'a [SourceClip], id: &str) -> Result<&'a SourceClip> {
    clips
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Error::Validation(format!("unknown clip {id}")))
}

/// Mix one planned triplet from its source clips.
pub fn realize_triplet(speech: &[SourceClip], noise: &[SourceClip], spec: &TripletSpec, enrollment_len: usize) -> Result<ConditionTriplet> {
    let target = lookup(speech, &spec.target)?;
    let mut samples = Vec::new();
    for id in &spec.enrollment {
        samples.extend_from_slice(lookup(speech, id)?.waveform.samples());
    }
    samples.truncate(enrollment_len.max(1));
    let enrollment = SourceClip::speech(
        spec.enrollment.join("+"),
        target.speaker_id.clone().unwrap_or_default(),
        Waveform::new(samples, target.waveform.sample_rate())?,
    );
    make_triplet(
        target,
        &enrollment,
        lookup(speech, &spec.interferer)?,
        lookup(noise, &spec.noise)?,
        spec.sir_db,
        spec.snr_db,
    )
}

/// Plan and mix triplets; returns `(train, test)` pools.
pub fn build_triplets(
    corpus: &Corpus,
    n_train: usize,
    n_test: usize,
    ranges: &MixRanges,
    seed: u64,
) -> Result<(Vec<ConditionTriplet>, Vec<ConditionTriplet>)> {
    let set = plan_triplets(corpus, n_train, n_test, ranges, seed)?;
    let len = (ranges.enrollment_s * f64::from(corpus.sample_rate())).round() as usize;
    let mix = |specs: &[TripletSpec]| -> Result<Vec<ConditionTriplet>> {
        specs
            .iter()
            .map(|s| realize_triplet(&corpus.speech, &corpus.noise, s, len))
            .collect()
    };
    Ok((mix(&set.train)?, mix(&set.test)?))
}
