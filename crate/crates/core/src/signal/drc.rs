use super::ComplexSpectrogram;
use crate::error::{Error, Result};

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("compression exponent {beta} outside (0, 1]")))
    }
}

/// Raise the magnitude of one bin to `power`, keeping its phase.
/// Zero bins stay exactly zero.
fn pow_bin(re: f64, im: f64, power: f64) -> (f64, f64) {
    let mag = re.hypot(im);
    if mag == 0.0 {
        return (0.0, 0.0);
    }
    let gain = mag.powf(power - 1.0);
    (re * gain, im * gain)
}

/// Inverse compression of a single bin: magnitude to the power `1/beta`.
pub fn expand_bin(re: f64, im: f64, beta: f64) -> (f64, f64) {
    pow_bin(re, im, 1.0 / beta)
}

fn map_bins(spec: &ComplexSpectrogram, power: f64) -> ComplexSpectrogram {
    let mut out = spec.clone();
    for f in 0..spec.bins() {
        for t in 0..spec.frames() {
            let (re, im) = pow_bin(spec.re(f, t), spec.im(f, t), power);
            out.set(f, t, re, im);
        }
    }
    out
}

/// Magnitude compression `|X|^beta e^{j angle X}`.
pub fn drc_compress(spec: &ComplexSpectrogram, beta: f64) -> Result<ComplexSpectrogram> {
    check_beta(beta)?;
    Ok(map_bins(spec, beta))
}

/// Inverse of [`drc_compress`]: `|X|^{1/beta} e^{j angle X}`.
pub fn drc_expand(spec: &ComplexSpectrogram, beta: f64) -> Result<ComplexSpectrogram> {
    check_beta(beta)?;
    Ok(map_bins(spec, 1.0 / beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SpectroConfig;

    fn single(re: f64, im: f64) -> ComplexSpectrogram {
        let mut s = ComplexSpectrogram::zeros(1, 1, SpectroConfig::default());
        s.set(0, 0, re, im);
        s
    }

    #[test]
    fn compress_examples() {
        let c = drc_compress(&single(4.0, 0.0), 0.5).unwrap();
        assert_eq!((c.re(0, 0), c.im(0, 0)), (2.0, 0.0));
        let z = drc_compress(&single(0.0, 0.0), 0.5).unwrap();
        assert_eq!((z.re(0, 0), z.im(0, 0)), (0.0, 0.0));
        let id = drc_compress(&single(-1.5, 0.25), 1.0).unwrap();
        assert_eq!((id.re(0, 0), id.im(0, 0)), (-1.5, 0.25));
    }

    #[test]
    fn expand_examples() {
        let e = drc_expand(&single(2.0, 0.0), 0.5).unwrap();
        assert!((e.re(0, 0) - 4.0).abs() < 1e-15);
        let z = drc_expand(&single(0.0, 0.0), 0.5).unwrap();
        assert_eq!((z.re(0, 0), z.im(0, 0)), (0.0, 0.0));
    }

    #[test]
    fn rejects_bad_beta() {
        assert!(drc_compress(&single(1.0, 0.0), 0.0).is_err());
        assert!(drc_expand(&single(1.0, 0.0), 1.2).is_err());
    }

    #[test]
    fn phase_preserved() {
        let x = single(-0.3, 0.7);
        let c = drc_compress(&x, 0.5).unwrap();
        let a_in = x.im(0, 0).atan2(x.re(0, 0));
        let a_out = c.im(0, 0).atan2(c.re(0, 0));
        assert!((a_in - a_out).abs() < 1e-12);
        assert!((c.magnitude(0, 0) - x.magnitude(0, 0).sqrt()).abs() < 1e-12);
    }
}
