use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Condition, TrainingMode};
use crate::losses::{batch_loss, GroupRows};

fn noise(seed: u64, n: usize, rate: u32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| rng.gen_range(-0.3..0.3)).collect(), rate).unwrap()
}

fn spec(seed: u64, bins: usize, frames: usize) -> ComplexSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2 * bins * frames).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ComplexSpectrogram::new(data, bins, frames, SpectroConfig::default()).unwrap()
}

#[test]
fn parameter_budgets() {
    let r = LgtseModel::new(ModelConfig::reference()).unwrap();
    let d = r.parameter_count(Some(Group::Denoiser));
    assert!((40_000..=60_000).contains(&d), "{d}");
    let b = r.parameter_count(Some(Group::Backbone));
    assert!((100_000..=500_000).contains(&b), "{b}");
    let t = LgtseModel::new(ModelConfig::tiny()).unwrap();
    assert!(t.parameter_count(Some(Group::Backbone)) <= 10_000);
    let g = LgtseModel::new(ModelConfig::gradcheck()).unwrap();
    assert!(g.parameter_count(None) <= 10_000);
}

#[test]
fn bad_config_rejected() {
    let mut c = ModelConfig::tiny();
    c.backbone.kernel = 2;
    assert!(matches!(LgtseModel::new(c), Err(Error::Config(_))));
}

#[test]
fn zero_input_denoises_to_zero() {
    let m = LgtseModel::new(ModelConfig::tiny()).unwrap();
    let z = ComplexSpectrogram::zeros(129, 20, SpectroConfig::default());
    let out = m.denoise(&z).unwrap();
    assert_eq!(out.bins(), 129);
    assert_eq!(out.frames(), 20);
    assert!(out.norm() < 1e-12);
}

#[test]
fn context_shapes_and_columns() {
    let e = spec(1, 5, 5);
    let y = spec(2, 5, 7);
    let w = attention_weights(&e, &y, 1.0).unwrap();
    assert_eq!(w.len(), 5 * 7);
    for col in 0..7 {
        let s: f64 = (0..5).map(|r| w[r * 7 + col]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let g = context_interaction(&e, &y, 1.0).unwrap();
    assert_eq!((g.bins(), g.frames()), (5, 7));
    assert!(matches!(
        context_interaction(&spec(3, 4, 5), &y, 1.0),
        Err(Error::Shape(_))
    ));
}

#[test]
fn single_enrollment_frame_broadcasts() {
    let e = spec(4, 6, 1);
    let y = spec(5, 6, 9);
    let g = context_interaction(&e, &y, 1.0).unwrap();
    for t in 0..9 {
        for b in 0..6 {
            assert_eq!(g.re(b, t), e.re(b, 0));
            assert_eq!(g.im(b, t), e.im(b, 0));
        }
    }
}

#[test]
fn output_length_matches_input() {
    let m = LgtseModel::new(ModelConfig::tiny()).unwrap();
    let e = noise(9, 16000, 8000);
    for secs in [1.0, 1.37, 2.0] {
        let n = (secs * 8000.0) as usize;
        let y = noise(10, n, 8000);
        assert_eq!(m.forward(&y, &e).unwrap().len(), n);
    }
}

#[test]
fn sample_rate_mismatch_is_config_error() {
    let m = LgtseModel::new(ModelConfig::tiny()).unwrap();
    let y = noise(1, 4000, 16000);
    let e = noise(2, 4000, 8000);
    assert!(matches!(m.forward(&y, &e), Err(Error::Config(_))));
}

#[test]
fn identity_heads_pass_the_mixture_through() {
    let cfg = ModelConfig {
        head_init: 0.0,
        ..ModelConfig::tiny()
    };
    let m = LgtseModel::new(cfg).unwrap();
    let y = noise(3, 8000, 8000);
    let e = noise(4, 8000, 8000);
    let out = m.forward(&y, &e).unwrap();
    let d = m.denoise_waveform(&y).unwrap();
    // interior samples are fully covered by the overlap-add
    for i in 256..7700 {
        assert!((out.samples()[i] - y.samples()[i]).abs() < 1e-9);
        assert!((d.samples()[i] - y.samples()[i]).abs() < 1e-9);
    }
}

#[test]
fn batching_is_per_item() {
    let m = LgtseModel::new(ModelConfig::tiny()).unwrap();
    let e = noise(20, 6000, 8000);
    let y1 = noise(21, 4000, 8000);
    let y2 = noise(22, 4000, 8000);
    let single = m.forward(&y1, &e).unwrap();
    assert_eq!(m.parallel_forward(std::slice::from_ref(&y1), &e).unwrap()[0], single);
    let both = m.parallel_forward(&[y1.clone(), y2.clone()], &e).unwrap();
    let s2 = m.forward(&y2, &e).unwrap();
    for (a, b) in [(&both[0], &single), (&both[1], &s2)] {
        let err = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = b.samples().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err <= 1e-5 * scale);
    }
    let swapped = m.parallel_forward(&[y2.clone(), y1.clone()], &e).unwrap();
    assert_eq!(swapped[0], both[1]);
    assert_eq!(swapped[1], both[0]);
    let y3 = noise(23, 4000, 8000);
    let perturbed = m.parallel_forward(&[y1, y3], &e).unwrap();
    assert_eq!(perturbed[0], both[0]);
    assert!(matches!(
        m.parallel_forward(&[noise(1, 4000, 8000), noise(2, 4100, 8000)], &e),
        Err(Error::Shape(_))
    ));
}

#[test]
fn inference_is_bit_deterministic() {
    let m = LgtseModel::new(ModelConfig::tiny()).unwrap();
    let y = noise(30, 5000, 8000);
    let e = noise(31, 7000, 8000);
    assert_eq!(m.forward(&y, &e).unwrap(), m.forward(&y, &e).unwrap());
}

#[test]
fn every_parameter_receives_gradient() {
    let m = LgtseModel::new(ModelConfig::tiny()).unwrap();
    let y = noise(40, 4000, 8000);
    let e = noise(41, 6000, 8000);
    let g = Graph::new();
    let vars = m.params().bind(&g, &|_| true);
    let out = m.forward_graph(&g, &vars, &[&y], &[&e]).unwrap();
    let energy = out.estimate.mul(out.estimate).sum();
    let grads = g.backward(energy);
    for (name, v) in m.params().names().iter().zip(&vars) {
        let norm = grads.get(*v).unwrap().sq_norm();
        assert!(norm > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn frozen_groups_get_no_gradient() {
    let m = LgtseModel::new(ModelConfig::tiny()).unwrap();
    let y = noise(42, 4000, 8000);
    let g = Graph::new();
    let vars = m.params().bind(&g, &|grp| grp == Group::Backbone);
    let out = m.forward_graph(&g, &vars, &[&y], &[&y]).unwrap();
    let grads = g.backward(out.estimate.mul(out.estimate).sum());
    for (grp, v) in m.params().groups().iter().zip(&vars) {
        assert_eq!(grads.get(*v).is_some(), *grp == Group::Backbone);
    }
}

/// Loss on a tiny parallel batch at the 1 kHz gradient-check rate.
pub(crate) fn gradcheck_loss(m: &LgtseModel, params: &[Tensor], trainable: bool) -> (f64, Vec<Option<Tensor>>) {
    let rate = m.spectro().sample_rate;
    let s = noise(50, 250, rate);
    let e = noise(51, 300, rate);
    let ys: Vec<Waveform> = (0..3).map(|k| noise(52 + k, 250, rate)).collect();
    let ys: Vec<Waveform> = ys
        .iter()
        .map(|v| Waveform::new(v.samples().iter().zip(s.samples()).map(|(a, b)| 0.5 * a + b).collect(), rate).unwrap())
        .collect();
    let g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = m
        .forward_graph(&g, &vars, &ys.iter().collect::<Vec<_>>(), &[&e, &e, &e])
        .unwrap();
    let tgt = Rc::new(Tensor::new(vec![3, 250], s.samples().repeat(3)));
    let groups = [GroupRows {
        rows: vec![0, 1, 2],
        conditions: Condition::ALL.to_vec(),
    }];
    let (loss, _) = batch_loss(out.estimate, tgt, &groups, TrainingMode::TriplecParallel, 50.0).unwrap();
    let v = loss.value().item();
    if !trainable {
        return (v, Vec::new());
    }
    let grads = g.backward(loss);
    (v, vars.iter().map(|x| grads.get(*x).cloned()).collect())
}

#[test]
fn sampled_parameter_finite_differences() {
    let m = LgtseModel::new(ModelConfig::gradcheck()).unwrap();
    let base: Vec<Tensor> = m.params().tensors().to_vec();
    let (_, grads) = gradcheck_loss(&m, &base, true);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let h = 1e-6;
    for _ in 0..150 {
        let p = rng.gen_range(0..base.len());
        let i = rng.gen_range(0..base[p].len());
        let mut plus = base.clone();
        plus[p].data_mut()[i] += h;
        let mut minus = base.clone();
        minus[p].data_mut()[i] -= h;
        let fd = (gradcheck_loss(&m, &plus, false).0 - gradcheck_loss(&m, &minus, false).0) / (2.0 * h);
        let a = grads[p].as_ref().unwrap().data()[i];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4);
        assert!(rel < 1e-4, "{}[{i}]: fd {fd} vs autodiff {a}", m.params().names()[p]);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    let m = LgtseModel::new(ModelConfig::tiny()).unwrap();
    let moments: Vec<Tensor> = m.params().tensors().iter().map(|t| Tensor::full(t.shape().to_vec(), 0.5)).collect();
    save_checkpoint(&path, &m, Some("finetune_joint"), serde_json::json!({"epoch": 3}), &[("adam_m", &moments)]).unwrap();
    // overwrite in place
    save_checkpoint(&path, &m, Some("finetune_joint"), serde_json::json!({"epoch": 4}), &[("adam_m", &moments)]).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model.params(), m.params());
    assert_eq!(ck.manifest.state["epoch"], 4);
    assert_eq!(ck.manifest.stage.as_deref(), Some("finetune_joint"));
    assert_eq!(ck.extra["adam_m"], moments);
    let y = noise(70, 3000, 8000);
    assert_eq!(ck.model.forward(&y, &y).unwrap(), m.forward(&y, &y).unwrap());
}

#[test]
fn checkpoint_corruption_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    let m = LgtseModel::new(ModelConfig::tiny()).unwrap();
    save_checkpoint(&path, &m, None, serde_json::Value::Null, &[]).unwrap();
    let man = path.join("manifest.json");
    let text = std::fs::read_to_string(&man).unwrap();
    std::fs::write(&man, text.replace("\"1.0\"", "\"2.0\"")).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&man, text.replace("\"1.0\"", "\"1.7\"")).unwrap();
    load_checkpoint(&path).unwrap();
    let bin = path.join("params.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(Error::Checkpoint(_))
    ));
}
