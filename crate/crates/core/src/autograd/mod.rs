//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! The op set is exactly what the extraction network, the synthesis path
//! and the training losses need: dense and batched matrix products, a fused
//! GRU, complex masking, magnitude power laws, inverse STFT, SI-SDR and L1
//! reductions.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use std::rc::Rc;
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::signal::{SpectroConfig, StftPlan};

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
    }

    /// Compare autodiff gradients of `f` against central differences for
    /// every entry of every input.
    fn check<F>(inputs: Vec<Tensor>, f: F, tol: f64)
    where
        F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
    {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        let eval = |ins: &[Tensor]| {
            let g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            f(&g, &vars).value().item()
        };
        let h = 1e-6;
        for (vi, t) in inputs.iter().enumerate() {
            let auto = grads.get(vars[vi]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = auto.data()[i];
                let err = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-3);
                assert!(err < tol, "input {vi} entry {i}: autodiff {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn elementwise_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![
            rand_tensor(&[2, 3, 4], &mut rng, 1.0),
            rand_tensor(&[2, 3, 4], &mut rng, 1.0),
            rand_tensor(&[4], &mut rng, 1.0),
        ];
        check(
            ins,
            |_, v| {
                let a = v[0].mul(v[1]).add_bias(v[2]).tanh();
                let b = v[0].sub(v[1]).sigmoid().scale(1.7).add_scalar(0.3);
                a.add(b).mul(a).sum()
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_and_bmm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![
            rand_tensor(&[2, 3, 4], &mut rng, 1.0),
            rand_tensor(&[4, 5], &mut rng, 1.0),
            rand_tensor(&[2, 5, 3], &mut rng, 1.0),
            rand_tensor(&[2, 4, 3], &mut rng, 1.0),
        ];
        check(
            ins,
            |_, v| {
                let y = v[0].matmul(v[1]); // [2,3,5]
                let p = y.bmm(v[2], false, false); // [2,3,3]
                let q = y.bmm(v[2], true, true); // [2,5,5]
                let r = v[3].bmm(v[0], true, true); // [2,3,3]
                let s = v[0].bmm(v[3], false, false); // [2,3,3]
                let t = v[0].bmm(v[3], true, true); // [2,4,4]
                let u = v[3].bmm(v[0], false, false); // [2,4,4]
                let w = v[3].bmm(v[3], true, false); // [2,3,3]
                let x = v[3].bmm(v[3], false, true); // [2,4,4]
                [p.mul(r).add(s).add(w), q, t.add(u).mul(x)]
                    .iter()
                    .map(|z| z.tanh().sum())
                    .reduce(|a, b| a.add(b))
                    .unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_concat_unfold_select() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![
            rand_tensor(&[2, 4, 3], &mut rng, 2.0),
            rand_tensor(&[2, 4, 2], &mut rng, 1.0),
            rand_tensor(&[15, 2], &mut rng, 1.0),
        ];
        check(
            ins,
            |_, v| {
                let s = v[0].softmax_axis1();
                let c = s.concat(v[1]); // [2,4,5]
                let u = c.unfold_time(3); // [2,4,15]
                let y = u.matmul(v[2]).tanh(); // [2,4,2]
                y.select_rows(&[1, 0, 1]).mul(y.select_rows(&[0, 0, 1])).sum()
            },
            1e-6,
        );
    }

    #[test]
    fn gru_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 3;
        let ins = vec![
            rand_tensor(&[2, 5, 3 * h], &mut rng, 1.0),
            rand_tensor(&[h, 3 * h], &mut rng, 0.8),
            rand_tensor(&[3 * h], &mut rng, 0.5),
        ];
        check(ins, |_, v| v[0].gru(v[1], v[2]).tanh().sum(), 1e-6);
    }

    #[test]
    fn complex_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ins = vec![
            rand_tensor(&[2, 3, 6], &mut rng, 1.0),
            rand_tensor(&[2, 3, 6], &mut rng, 1.0),
        ];
        check(
            ins,
            |_, v| {
                let m = v[0].complex_mul(v[1]);
                m.mag_pow(2.0).add(m.mag_pow(1.0 / 0.7)).tanh().sum()
            },
            1e-6,
        );
    }

    #[test]
    fn mag_pow_zero_bin_is_zero() {
        let g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let y = x.mag_pow(2.0);
        assert_eq!(y.value().data(), &[0.0, 0.0]);
        let grads = g.backward(y.sum());
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn istft_si_sdr_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = SpectroConfig::with_sample_rate(250);
        let plan = Arc::new(StftPlan::new(&cfg).unwrap());
        let bins = plan.n_bins();
        let frames = 4;
        let out_len = (frames - 1) * plan.hop() + plan.n_fft() + 3;
        let target = Rc::new(rand_tensor(&[2, out_len], &mut rng, 1.0));
        let ins = vec![
            rand_tensor(&[2, frames, 2 * bins], &mut rng, 1.0),
            rand_tensor(&[2, out_len], &mut rng, 1.0),
        ];
        check(
            ins,
            move |_, v| {
                let w = v[0].istft(Arc::clone(&plan), out_len);
                let s = w.si_sdr(Rc::clone(&target), 1e-8).sum();
                let l = w.l1_mean(v[1]).sum().scale(3.0);
                s.add(l)
            },
            1e-5,
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
        let p = g.param(Tensor::new(vec![2], vec![3.0, 4.0]));
        let grads = g.backward(c.mul(p).sum());
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Graph::new();
        let x = g.constant(rand_tensor(&[3, 5, 4], &mut rng, 30.0));
        let s = x.softmax_axis1().value();
        for b in 0..3 {
            for j in 0..4 {
                let total: f64 = (0..5).map(|i| s.data()[b * 20 + i * 4 + j]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
