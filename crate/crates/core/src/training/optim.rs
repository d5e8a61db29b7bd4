use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Global L2 norm over all present gradients.
pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm
/// before clipping. Non-finite gradients are an error and leave `grads`
/// untouched.
pub fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) -> Result<f64> {
    if let Some(bad) = grads.iter().position(|g| g.as_ref().is_some_and(|t| !t.all_finite())) {
        return Err(Error::Training(format!("non-finite gradient in parameter {bad}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// Adam with bias correction. Parameters without a gradient keep both
/// their value and their moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<Tensor>,
    #[serde(skip)]
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || -> Vec<Tensor> { params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect() };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for ((p, gi), (mi, vi)) in params[k]
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec())
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Some(t(&[3.0, 4.0]))];
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);

        let mut g = vec![Some(t(&[0.3, 0.4])), None];
        clip_gradients(&mut g, 1.0).unwrap();
        assert_eq!(g[0].as_ref().unwrap().data(), &[0.3, 0.4]);

        let mut g = vec![Some(t(&[0.0, 0.0]))];
        clip_gradients(&mut g, 1.0).unwrap();
        assert_eq!(g[0].as_ref().unwrap().data(), &[0.0, 0.0]);

        let mut g = vec![Some(t(&[f64::NAN]))];
        assert!(matches!(clip_gradients(&mut g, 1.0), Err(Error::Training(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![t(&[1.0, -2.0]), t(&[5.0])];
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &[Some(t(&[0.5, -3.0])), None], 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[1].data(), &[5.0]);
        assert_eq!(opt.m[1].data(), &[0.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![t(&[3.0, -1.5])];
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let g = t(&p[0].data().iter().map(|x| 2.0 * x).collect::<Vec<_>>());
            opt.step(&mut p, &[Some(g)], 0.01);
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-3));
    }
}
