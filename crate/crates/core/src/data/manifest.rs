//! Pre-mixed Libri2Mix-style triplets listed in a CSV manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::signal::{read_wav, Waveform};

use super::{Condition, ConditionTriplet};

/// A manifest row (or group of rows) that could not be used.
#[derive(Clone, Debug, PartialEq)]
pub struct RejectedRow {
    /// 1-based line numbers in the CSV, header being line 1.
    pub lines: Vec<usize>,
    pub reason: String,
}

impl fmt::Display for RejectedRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.lines.iter().map(|l| l.to_string()).collect();
        write!(f, "line {}: {}", lines.join(","), self.reason)
    }
}

/// Triplets that loaded cleanly plus an itemized rejection report.
#[derive(Clone, Debug, Default)]
pub struct ManifestLoad {
    pub triplets: Vec<ConditionTriplet>,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug, Deserialize)]
struct Row {
    condition: String,
    mixture_path: String,
    source1_path: String,
    enrollment_path: String,
    #[serde(default)]
    noise_path: String,
    sample_rate: u32,
}

struct Loaded {
    line: usize,
    condition: Condition,
    mixture: Waveform,
    mixture_path: PathBuf,
    noise: Option<Waveform>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p.trim());
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Speaker ids from a `s1-chapter-utt_s2-chapter-utt` mixture name.
fn speaker_ids(mixture: &Path) -> (String, String) {
    let name = stem(mixture);
    let mut parts = name.splitn(2, '_');
    let first = parts.next().unwrap_or_default();
    let second = parts.next().unwrap_or_default();
    let spk = |s: &str| s.split('-').next().unwrap_or_default().to_string();
    match (spk(first), spk(second)) {
        (a, b) if !a.is_empty() && !b.is_empty() => (a, b),
        _ => (format!("{name}#target"), format!("{name}#interferer")),
    }
}

fn ratio_db(s: &[f64], y: &[f64]) -> f64 {
    let es: f64 = s.iter().map(|v| v * v).sum();
    let er: f64 = s.iter().zip(y).map(|(a, b)| (b - a).powi(2)).sum();
    10.0 * (es / er).log10()
}

/// Load a manifest with columns `condition, mixture_path, source1_path,
/// enrollment_path, noise_path, sample_rate`.
///
/// Rows sharing `source1_path` and `enrollment_path` form one triplet;
/// the first source is the target. Relative paths resolve against the
/// manifest's directory. Rows with unreadable audio are rejected and
/// reported; so are groups that end up without all three conditions.
pub fn load_libri2mix_manifest(path: &Path) -> Result<ManifestLoad> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = ManifestLoad::default();
    if text.trim().is_empty() {
        return Ok(out);
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut groups: BTreeMap<(String, String), (u32, Vec<Loaded>)> = BTreeMap::new();
    for (i, rec) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = match rec {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(RejectedRow {
                    lines: vec![line],
                    reason: format!("malformed row: {e}"),
                });
                continue;
            }
        };
        let loaded = (|| -> Result<Loaded> {
            let condition: Condition = row.condition.parse()?;
            let mixture_path = resolve(base, &row.mixture_path);
            let mixture = read_wav(&mixture_path, Some(row.sample_rate))?;
            let noise = if condition.is_noisy() && !row.noise_path.is_empty() {
                Some(read_wav(&resolve(base, &row.noise_path), Some(row.sample_rate))?)
            } else {
                None
            };
            Ok(Loaded {
                line,
                condition,
                mixture,
                mixture_path,
                noise,
            })
        })();
        match loaded {
            Ok(l) => groups
                .entry((row.source1_path.clone(), row.enrollment_path.clone()))
                .or_insert_with(|| (row.sample_rate, Vec::new()))
                .1
                .push(l),
            Err(e) => out.rejected.push(RejectedRow {
                lines: vec![line],
                reason: e.to_string(),
            }),
        }
    }
    for ((source, enrollment), (rate, rows)) in groups {
        let lines: Vec<usize> = rows.iter().map(|r| r.line).collect();
        match assemble(base, &source, &enrollment, rate, rows) {
            Ok(t) => out.triplets.push(t),
            Err(e) => out.rejected.push(RejectedRow {
                lines,
                reason: e.to_string(),
            }),
        }
    }
    for r in &out.rejected {
        warn!("manifest {}: {r}", path.display());
    }
    Ok(out)
}

fn assemble(base: &Path, source: &str, enrollment: &str, rate: u32, rows: Vec<Loaded>) -> Result<ConditionTriplet> {
    let mut by_cond: BTreeMap<Condition, Loaded> = BTreeMap::new();
    for r in rows {
        if by_cond.contains_key(&r.condition) {
            return Err(Error::Validation(format!("duplicate {} row", r.condition)));
        }
        by_cond.insert(r.condition, r);
    }
    let missing: Vec<&str> = Condition::ALL
        .iter()
        .filter(|c| !by_cond.contains_key(c))
        .map(|c| c.label())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "incomplete triplet, missing {}",
            missing.join(", ")
        )));
    }
    let source_path = resolve(base, source);
    let enrollment_path = resolve(base, enrollment);
    let target = read_wav(&source_path, Some(rate))?;
    let enroll = read_wav(&enrollment_path, Some(rate))?;
    let single = &by_cond[&Condition::Single];
    let clean2 = &by_cond[&Condition::Clean2];
    let both = &by_cond[&Condition::Both];
    let mut n = [&target, &single.mixture, &clean2.mixture, &both.mixture]
        .iter()
        .map(|w| w.len())
        .min()
        .unwrap_or(0);
    let noise = both.noise.as_ref().or(single.noise.as_ref());
    if let Some(v) = noise {
        n = n.min(v.len());
    }
    if n == 0 {
        return Err(Error::Length("empty audio in triplet".into()));
    }
    let (speaker_id, interferer_id) = speaker_ids(&clean2.mixture_path);
    let s = target.truncated(n);
    let y_single = single.mixture.truncated(n);
    let y_clean2 = clean2.mixture.truncated(n);
    let snr_db = ratio_db(s.samples(), y_single.samples());
    let sir_db = ratio_db(s.samples(), y_clean2.samples());
    let triplet = ConditionTriplet {
        target: s,
        enrollment: enroll,
        y_single,
        y_clean2,
        y_both: both.mixture.truncated(n),
        noise: noise.map(|v| v.truncated(n)),
        speaker_id,
        interferer_id,
        target_utt: stem(&source_path),
        enrollment_utt: stem(&enrollment_path),
        snr_db,
        sir_db,
    };
    triplet.validate(false)?;
    Ok(triplet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::write_wav;

    fn tone(n: usize, f: f64, a: f64) -> Waveform {
        let x = (0..n)
            .map(|t| a * (2.0 * std::f64::consts::PI * f * t as f64 / 8000.0).sin())
            .collect();
        Waveform::new(x, 8000).unwrap()
    }

    fn add(a: &Waveform, b: &Waveform) -> Waveform {
        let n = a.len().min(b.len());
        Waveform::new((0..n).map(|i| a.samples()[i] + b.samples()[i]).collect(), 8000).unwrap()
    }

    fn write_set(dir: &Path) {
        let s = tone(800, 200.0, 0.3);
        let i = tone(900, 330.0, 0.2);
        let v = tone(850, 1234.0, 0.1);
        let e = tone(1200, 200.0, 0.25);
        let files = [
            ("s1/100-1-0001_200-2-0002.wav", s.clone()),
            ("enr/100-9-0009.wav", e),
            ("noise/100-1-0001_200-2-0002.wav", v.clone()),
            ("mix_single/100-1-0001_200-2-0002.wav", add(&s, &v)),
            ("mix_clean/100-1-0001_200-2-0002.wav", add(&s, &i)),
            ("mix_both/100-1-0001_200-2-0002.wav", add(&add(&s, &i), &v)),
        ];
        for (p, w) in files {
            let full = dir.join(p);
            std::fs::create_dir_all(full.parent().unwrap()).unwrap();
            write_wav(&full, &w).unwrap();
        }
    }

    const HEADER: &str = "condition,mixture_path,source1_path,enrollment_path,noise_path,sample_rate\n";

    fn rows(conds: &[(&str, &str)]) -> String {
        let mut s = HEADER.to_string();
        for (c, dir) in conds {
            s += &format!(
                "{c},{dir}/100-1-0001_200-2-0002.wav,s1/100-1-0001_200-2-0002.wav,enr/100-9-0009.wav,noise/100-1-0001_200-2-0002.wav,8000\n"
            );
        }
        s
    }

    #[test]
    fn empty_manifest_is_empty_pool() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "").unwrap();
        let m = load_libri2mix_manifest(&p).unwrap();
        assert!(m.triplets.is_empty() && m.rejected.is_empty());
        std::fs::write(&p, HEADER).unwrap();
        let m = load_libri2mix_manifest(&p).unwrap();
        assert!(m.triplets.is_empty() && m.rejected.is_empty());
    }

    #[test]
    fn loads_complete_triplet() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path());
        let p = dir.path().join("m.csv");
        std::fs::write(
            &p,
            rows(&[("mix_single", "mix_single"), ("mix_clean", "mix_clean"), ("mix_both", "mix_both")]),
        )
        .unwrap();
        let m = load_libri2mix_manifest(&p).unwrap();
        assert!(m.rejected.is_empty(), "{:?}", m.rejected);
        let t = &m.triplets[0];
        t.validate(false).unwrap();
        assert_eq!(t.len(), 800);
        assert_eq!(t.speaker_id, "100");
        assert_eq!(t.interferer_id, "200");
        assert!(t.snr_db > 5.0);
    }

    #[test]
    fn absent_wav_rejects_row_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path());
        std::fs::remove_file(dir.path().join("mix_clean/100-1-0001_200-2-0002.wav")).unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(
            &p,
            rows(&[("mix_single", "mix_single"), ("mix_clean", "mix_clean"), ("mix_both", "mix_both")]),
        )
        .unwrap();
        let m = load_libri2mix_manifest(&p).unwrap();
        assert!(m.triplets.is_empty());
        assert_eq!(m.rejected.len(), 2);
        assert_eq!(m.rejected[0].lines, vec![3]);
        assert!(m.rejected[1].reason.contains("2spk"));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        assert!(matches!(
            load_libri2mix_manifest(Path::new("/nonexistent/m.csv")),
            Err(Error::Io { .. })
        ));
    }
}
