use crate::error::{Error, Result};
use crate::signal::Waveform;

use super::{ClipKind, ConditionTriplet, SourceClip};

/// Amplitude factor for a power ratio in dB.
pub fn db_to_gain(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Scale `b` so that `10 log10(E(a) / E(b'))` equals `ratio_db`.
///
/// `ratio_db = +inf` yields silence. A silent `b` stays silent.
pub fn scale_to_ratio(a: &[f64], b: &[f64], ratio_db: f64) -> Result<Vec<f64>> {
    if ratio_db.is_nan() {
        return Err(Error::Domain("mixing ratio is NaN".into()));
    }
    let eb = energy(b);
    if ratio_db == f64::INFINITY || eb == 0.0 {
        return Ok(vec![0.0; b.len()]);
    }
    if ratio_db == f64::NEG_INFINITY {
        return Err(Error::Domain("mixing ratio of -inf dB is unbounded".into()));
    }
    let ea = energy(a);
    let g = (ea / eb).sqrt() / db_to_gain(ratio_db);
    Ok(b.iter().map(|v| v * g).collect())
}

fn check_rates(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::Config(format!(
            "cannot mix {} Hz with {} Hz",
            a.sample_rate(),
            b.sample_rate()
        )));
    }
    Ok(())
}

/// Min-mode mix: both inputs are truncated to the shorter length and `b`
/// is added at `gain_db` relative to `a` (energy of the truncated
/// segments). `gain_db = -inf` disables `b` and returns the truncated `a`.
pub fn mix_min(a: &Waveform, b: &Waveform, gain_db: f64) -> Result<Waveform> {
    check_rates(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Length("cannot mix an empty waveform".into()));
    }
    let sr = a.sample_rate();
    let n = a.len().min(b.len());
    let a = &a.samples()[..n];
    let b = &b.samples()[..n];
    let scaled = scale_to_ratio(a, b, -gain_db)?;
    let out = a.iter().zip(&scaled).map(|(x, y)| x + y).collect();
    Waveform::new(out, sr)
}

/// Build the three condition mixtures for one target utterance.
///
/// All sources are cut to their common length first; `sir_db` and
/// `snr_db` are then met exactly on those segments. `+inf` disables the
/// noise or the interferer. The same scaled noise segment enters both noisy
/// mixtures.
pub fn make_triplet(
    target: &SourceClip,
    enrollment: &SourceClip,
    interferer: &SourceClip,
    noise: &SourceClip,
    sir_db: f64,
    snr_db: f64,
) -> Result<ConditionTriplet> {
    for (clip, kind, what) in [
        (target, ClipKind::Speech, "target"),
        (enrollment, ClipKind::Speech, "enrollment"),
        (interferer, ClipKind::Speech, "interferer"),
        (noise, ClipKind::Noise, "noise"),
    ] {
        clip.validate()?;
        if clip.kind != kind {
            return Err(Error::Validation(format!(
                "{what} clip {} has the wrong kind",
                clip.id
            )));
        }
    }
    if enrollment.speaker_id != target.speaker_id {
        return Err(Error::Validation(format!(
            "enrollment {} is not from the target speaker",
            enrollment.id
        )));
    }
    if enrollment.id == target.id {
        return Err(Error::Validation(format!(
            "enrollment reuses the target utterance {}",
            target.id
        )));
    }
    if interferer.speaker_id == target.speaker_id {
        return Err(Error::Validation(format!(
            "interferer {} shares the target speaker",
            interferer.id
        )));
    }
    let sr = target.waveform.sample_rate();
    for clip in [enrollment, interferer, noise] {
        check_rates(&target.waveform, &clip.waveform)?;
    }
    let n = target
        .waveform
        .len()
        .min(interferer.waveform.len())
        .min(noise.waveform.len());
    if n == 0 {
        return Err(Error::Length("empty source clip".into()));
    }
    let s = &target.waveform.samples()[..n];
    let i = scale_to_ratio(s, &interferer.waveform.samples()[..n], sir_db)?;
    let v = scale_to_ratio(s, &noise.waveform.samples()[..n], snr_db)?;
    let sum = |parts: &[&[f64]]| -> Vec<f64> {
        (0..n).map(|k| parts.iter().map(|p| p[k]).sum()).collect()
    };
    let y_clean2 = sum(&[s, &i]);
    let y_single = sum(&[s, &v]);
    let y_both: Vec<f64> = y_clean2.iter().zip(&v).map(|(c, x)| c + x).collect();
    let wf = |x: Vec<f64>| Waveform::new(x, sr);
    let triplet = ConditionTriplet {
        target: wf(s.to_vec())?,
        enrollment: enrollment.waveform.clone(),
        y_single: wf(y_single)?,
        y_clean2: wf(y_clean2)?,
        y_both: wf(y_both)?,
        noise: Some(wf(v)?),
        speaker_id: target.speaker_id.clone().unwrap_or_default(),
        interferer_id: interferer.speaker_id.clone().unwrap_or_default(),
        target_utt: target.id.clone(),
        enrollment_utt: enrollment.id.clone(),
        snr_db,
        sir_db,
    };
    triplet.validate(true)?;
    Ok(triplet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn wf(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    fn ratio_db(a: &[f64], b: &[f64]) -> f64 {
        10.0 * (energy(a) / energy(b)).log10()
    }

    #[test]
    fn min_mode_truncates() {
        let a = wf(noise_vec(1, 100));
        let b = wf(noise_vec(2, 70));
        let m = mix_min(&a, &b, -10.0).unwrap();
        assert_eq!(m.len(), 70);
        let m = mix_min(&b, &a, -10.0).unwrap();
        assert_eq!(m.len(), 70);
    }

    #[test]
    fn disabled_gain_copies_a() {
        let a = wf(noise_vec(3, 50));
        let b = wf(noise_vec(4, 40));
        let m = mix_min(&a, &b, f64::NEG_INFINITY).unwrap();
        assert_eq!(m.samples(), &a.samples()[..40]);
    }

    #[test]
    fn rate_mismatch_rejected() {
        let a = wf(vec![1.0; 10]);
        let b = Waveform::new(vec![1.0; 10], 16000).unwrap();
        assert!(matches!(mix_min(&a, &b, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_db_orthogonal_unit_noise() {
        let s = vec![1.0, 0.0, 0.0, 0.0];
        let v = vec![0.0, 2.0, 0.0, 0.0];
        let m = mix_min(&wf(s.clone()), &wf(v), 0.0).unwrap();
        assert_eq!(m.samples(), &[1.0, 1.0, 0.0, 0.0]);
    }

    fn clips(lens: [usize; 4]) -> [SourceClip; 4] {
        [
            SourceClip::speech("a-1", "a", wf(noise_vec(10, lens[0]))),
            SourceClip::speech("a-2", "a", wf(noise_vec(11, lens[1]))),
            SourceClip::speech("b-1", "b", wf(noise_vec(12, lens[2]))),
            SourceClip::noise("n-1", wf(noise_vec(13, lens[3]))),
        ]
    }

    #[test]
    fn triplet_contract_violations() {
        let [t, e, i, n] = clips([100, 100, 100, 100]);
        assert!(make_triplet(&t, &t, &i, &n, 0.0, 5.0).is_err());
        assert!(make_triplet(&t, &e, &e, &n, 0.0, 5.0).is_err());
        assert!(make_triplet(&t, &i, &i, &n, 0.0, 5.0).is_err());
        assert!(make_triplet(&t, &e, &i, &i, 0.0, 5.0).is_err());
        assert!(make_triplet(&t, &e, &i, &n, f64::NAN, 5.0).is_err());
    }

    #[test]
    fn noise_disabled_gives_clean_single() {
        let [t, e, i, n] = clips([90, 100, 120, 100]);
        let tr = make_triplet(&t, &e, &i, &n, 0.0, f64::INFINITY).unwrap();
        assert_eq!(tr.y_single.samples(), tr.target.samples());
        assert_eq!(tr.y_both, tr.y_clean2);
    }

    #[test]
    fn all_disabled_gives_target_everywhere() {
        let [t, e, i, n] = clips([90, 100, 120, 100]);
        let tr = make_triplet(&t, &e, &i, &n, f64::INFINITY, f64::INFINITY).unwrap();
        for y in [&tr.y_single, &tr.y_clean2, &tr.y_both] {
            assert_eq!(y, &tr.target);
        }
    }

    #[test]
    fn empty_input_is_length_error() {
        let a = wf(vec![]);
        assert!(matches!(mix_min(&a, &wf(vec![1.0]), 0.0), Err(Error::Length(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn triplet_meets_ratios(
            lt in 40usize..400, li in 40usize..400, ln in 40usize..400,
            sir in -5.0f64..5.0, snr in 0.0f64..15.0,
        ) {
            let [t, e, i, n] = clips([lt, 64, li, ln]);
            let tr = make_triplet(&t, &e, &i, &n, sir, snr).unwrap();
            let len = lt.min(li).min(ln);
            prop_assert_eq!(tr.len(), len);
            prop_assert_eq!(tr.y_single.len(), len);
            prop_assert_eq!(tr.y_clean2.len(), len);
            prop_assert_eq!(tr.y_both.len(), len);
            let s = tr.target.samples();
            let interf: Vec<f64> = tr.y_clean2.samples().iter().zip(s).map(|(y, x)| y - x).collect();
            let noise: Vec<f64> = tr.y_single.samples().iter().zip(s).map(|(y, x)| y - x).collect();
            prop_assert!((ratio_db(s, &interf) - sir).abs() < 0.01);
            prop_assert!((ratio_db(s, &noise) - snr).abs() < 0.01);
            let scaled = tr.noise.as_ref().unwrap().samples();
            for k in 0..len {
                let d = tr.y_both.samples()[k] - tr.y_clean2.samples()[k];
                prop_assert!((d - scaled[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn mix_gain_is_relative_level(gain in -20.0f64..20.0, la in 10usize..200, lb in 10usize..200) {
            let a = wf(noise_vec(20, la));
            let b = wf(noise_vec(21, lb));
            let m = mix_min(&a, &b, gain).unwrap();
            let n = la.min(lb);
            let added: Vec<f64> = m.samples().iter().zip(&a.samples()[..n]).map(|(y, x)| y - x).collect();
            prop_assert!((ratio_db(&added, &a.samples()[..n]) - gain).abs() < 1e-6);
        }
    }
}
