use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Reported SI-SDR values are clamped to `[-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB]`.
pub const SI_SDR_CLAMP_DB: f64 = 60.0;

/// Scale-invariant SDR in dB without mean removal or clamping.
///
/// `alpha = <est, ref> / ||ref||^2`, target `alpha * ref`, error
/// `est - alpha * ref`. Returns `+inf` for a zero error and `-inf` when the
/// estimate is orthogonal to the reference.
pub fn si_sdr_unclamped(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::Domain("reference signal is identically zero".into()));
    }
    let dot: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let error_energy: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    Ok(10.0 * (target_energy / error_energy).log10())
}

/// SI-SDR in dB, clamped to +-[`SI_SDR_CLAMP_DB`].
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    let v = si_sdr_unclamped(estimate.samples(), reference.samples())?;
    Ok(if v.is_nan() {
        -SI_SDR_CLAMP_DB
    } else {
        v.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wf(v: &[f64]) -> Waveform {
        Waveform::new(v.to_vec(), 8000).unwrap()
    }

    /// Projection formula written out step by step.
    fn brute_force(est: &[f64], s: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut ss = 0.0;
        for i in 0..s.len() {
            dot += est[i] * s[i];
            ss += s[i] * s[i];
        }
        let alpha = dot / ss;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            let t = alpha * s[i];
            num += t * t;
            den += (t - est[i]) * (t - est[i]);
        }
        10.0 * (num / den).log10()
    }

    #[test]
    fn identical_and_scaled_hit_clamp() {
        let s = wf(&[0.3, -0.2, 0.9, 0.1]);
        assert_eq!(si_sdr(&s, &s).unwrap(), 60.0);
        assert_eq!(si_sdr(&s.scaled(3.0), &s).unwrap(), 60.0);
    }

    #[test]
    fn orthogonal_unit_error_is_zero_db() {
        let v = si_sdr(&wf(&[1.0, 1.0]), &wf(&[1.0, 0.0])).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            si_sdr(&wf(&[1.0, 1.0]), &wf(&[0.0, 0.0])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            si_sdr(&wf(&[1.0, 1.0]), &wf(&[1.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(2..300);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = si_sdr_unclamped(&e, &s).unwrap();
            assert!((a - brute_force(&e, &s)).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = s.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
        let base = si_sdr_unclamped(&e, &s).unwrap();
        for c in [-7.0, -1.0, 1e-3, 0.5, 42.0] {
            let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
            assert!((si_sdr_unclamped(&scaled, &s).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn decreases_along_noise_ladder() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut prev = f64::INFINITY;
        for step in 1..=10 {
            let g = 0.1 * step as f64;
            let e: Vec<f64> = s.iter().zip(&noise).map(|(a, n)| a + g * n).collect();
            let v = si_sdr_unclamped(&e, &s).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }
}
