//! SI-SDR supervision, cross-condition consistency and their sum.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::data::{Condition, TrainingMode};
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Default consistency weight.
pub const TRIPLEC_WEIGHT: f64 = 50.0;

/// Error-energy guard relative to the target energy.
pub const SI_SDR_EPS_REL: f64 = 1e-8;

/// The two conditions coupled by the consistency term.
pub const CONSISTENCY_PAIR: (Condition, Condition) = (Condition::Single, Condition::Both);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    /// negated sum of SI-SDR (dB) over estimates
    pub l_sisdr: f64,
    pub l_triplec: f64,
    pub l_total: f64,
    pub w: f64,
    /// Conditions coupled by `l_triplec`, if any.
    pub pair: Option<(Condition, Condition)>,
}

fn same_len(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty signal".into()));
    }
    Ok(())
}

fn l1_mean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// `w * mean |a - b|`.
pub fn triplec_loss(s1_hat: &Waveform, s2_hat: &Waveform, w: f64) -> Result<f64> {
    same_len(s1_hat, s2_hat)?;
    Ok(w * l1_mean(s1_hat.samples(), s2_hat.samples()))
}

/// Guarded, unclamped SI-SDR in dB; the form differentiated in training.
pub fn si_sdr_guarded(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, target {}",
            estimate.len(),
            reference.len()
        )));
    }
    let s2: f64 = reference.iter().map(|v| v * v).sum();
    if s2 == 0.0 {
        return Err(Error::Domain("target signal is identically zero".into()));
    }
    let alpha = estimate.iter().zip(reference).map(|(x, s)| x * s).sum::<f64>() / s2;
    let e2: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(x, s)| (x - alpha * s).powi(2))
        .sum();
    Ok(10.0 * (alpha * alpha * s2 / (e2 + SI_SDR_EPS_REL * s2)).log10())
}

/// `-sum_i SI-SDR(estimate_i, s)`.
pub fn si_sdr_loss(estimates: &[Waveform], s: &Waveform) -> Result<f64> {
    let mut total = 0.0;
    for e in estimates {
        total -= si_sdr_guarded(e.samples(), s.samples())?;
    }
    Ok(total)
}

fn find<'a>(outputs: &'a [(Condition, Waveform)], c: Condition, mode: TrainingMode) -> Result<&'a Waveform> {
    outputs
        .iter()
        .find(|(k, _)| *k == c)
        .map(|(_, w)| w)
        .ok_or_else(|| Error::Mode(format!("{} requires a {c} output", mode.name())))
}

/// Combined objective for the estimates of one target.
pub fn total_loss(outputs: &[(Condition, Waveform)], s: &Waveform, mode: TrainingMode, w: f64) -> Result<LossBundle> {
    if outputs.is_empty() {
        return Err(Error::Mode("no estimates given".into()));
    }
    let required = mode.group_conditions();
    for c in required {
        find(outputs, *c, mode)?;
    }
    let used: Vec<Waveform> = match mode {
        TrainingMode::Shuffled => {
            if outputs.len() != 1 {
                return Err(Error::Mode("shuffled mode takes a single estimate per target".into()));
            }
            vec![outputs[0].1.clone()]
        }
        _ => required
            .iter()
            .map(|c| find(outputs, *c, mode).cloned())
            .collect::<Result<_>>()?,
    };
    let l_sisdr = si_sdr_loss(&used, s)?;
    let (l_triplec, pair) = if mode.uses_consistency() {
        let (a, b) = CONSISTENCY_PAIR;
        (
            triplec_loss(find(outputs, a, mode)?, find(outputs, b, mode)?, w)?,
            Some(CONSISTENCY_PAIR),
        )
    } else {
        (0.0, None)
    };
    Ok(LossBundle {
        l_sisdr,
        l_triplec,
        l_total: l_sisdr + l_triplec,
        w,
        pair,
    })
}

/// Rows of one target inside a batched estimate tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRows {
    pub rows: Vec<usize>,
    pub conditions: Vec<Condition>,
}

/// Graph form of the batch objective.
///
/// `estimates` and `targets` are `[M, L]`. Returns the mean over groups of
/// each group's total loss, plus the per-group bundles.
pub fn batch_loss<'g>(
    estimates: Var<'g>,
    targets: Rc<Tensor>,
    groups: &[GroupRows],
    mode: TrainingMode,
    w: f64,
) -> Result<(Var<'g>, Vec<LossBundle>)> {
    if groups.is_empty() {
        return Err(Error::Mode("empty batch".into()));
    }
    let shape = estimates.shape();
    if shape.len() != 2 || targets.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "estimates {:?} vs targets {:?}",
            shape,
            targets.shape()
        )));
    }
    let len = shape[1];
    for r in targets.data().chunks(len) {
        if r.iter().all(|v| *v == 0.0) {
            return Err(Error::Domain("target signal is identically zero".into()));
        }
    }
    let sdr = estimates.si_sdr(targets, SI_SDR_EPS_REL);
    let sdr_vals = sdr.value();
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut bundles = Vec::with_capacity(groups.len());
    for g in groups {
        let rows_of = |c: Condition| -> Result<usize> {
            g.conditions
                .iter()
                .position(|k| *k == c)
                .map(|i| g.rows[i])
                .ok_or_else(|| Error::Mode(format!("{} requires a {c} output", mode.name())))
        };
        for c in mode.group_conditions() {
            rows_of(*c)?;
        }
        if mode == TrainingMode::Shuffled && g.rows.len() != 1 {
            return Err(Error::Mode("shuffled mode takes a single estimate per target".into()));
        }
        let l_sisdr = -g.rows.iter().map(|&r| sdr_vals.data()[r]).sum::<f64>();
        let pair = if mode.uses_consistency() {
            let (a, b) = (rows_of(CONSISTENCY_PAIR.0)?, rows_of(CONSISTENCY_PAIR.1)?);
            left.push(a);
            right.push(b);
            Some(CONSISTENCY_PAIR)
        } else {
            None
        };
        bundles.push(LossBundle {
            l_sisdr,
            l_triplec: 0.0,
            l_total: l_sisdr,
            w,
            pair,
        });
    }
    let mut total = sdr.sum().scale(-1.0);
    if !left.is_empty() {
        let l1 = estimates.select_rows(&left).l1_mean(estimates.select_rows(&right));
        for (b, v) in bundles.iter_mut().zip(l1.value().data()) {
            b.l_triplec = w * v;
            b.l_total = b.l_sisdr + b.l_triplec;
        }
        total = total.add(l1.sum().scale(w));
    }
    Ok((total.scale(1.0 / groups.len() as f64), bundles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::metrics::si_sdr_unclamped;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wf(v: &[f64]) -> Waveform {
        Waveform::new(v.to_vec(), 8000).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn triplec_examples() {
        let a = wf(&[1.0, -1.0, 0.0, 2.0]);
        let b = wf(&[0.0, -1.0, 1.0, 2.0]);
        assert_eq!(triplec_loss(&a, &b, 50.0).unwrap(), 25.0);
        assert_eq!(triplec_loss(&a, &a, 50.0).unwrap(), 0.0);
        assert_eq!(triplec_loss(&a, &b, 100.0).unwrap(), 50.0);
        assert!(matches!(
            triplec_loss(&a, &wf(&[1.0]), 50.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sisdr_loss_examples() {
        let s = wf(&[1.0, 0.0]);
        let e = wf(&[1.0, 1.0]);
        let one = si_sdr_loss(std::slice::from_ref(&e), &s).unwrap();
        assert!(one.abs() < 1e-7);
        let two = si_sdr_loss(&[e.clone(), e.clone()], &s).unwrap();
        assert_eq!(two, 2.0 * one);
        assert!(matches!(
            si_sdr_loss(&[e], &wf(&[0.0, 0.0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sisdr_loss_monotone_in_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = rand_vec(&mut rng, 400);
        let n = rand_vec(&mut rng, 400);
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=10 {
            let g = 0.05 * k as f64;
            let e: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + g * b).collect();
            let l = si_sdr_loss(&[wf(&e)], &wf(&s)).unwrap();
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn agrees_with_metric_outside_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let s = rand_vec(&mut rng, 128);
            // error energy >= 100x target energy keeps the guard below 1e-10 relative
            let e: Vec<f64> = s.iter().map(|v| 0.05 * v + rng.gen_range(-20.0..20.0)).collect();
            let l = si_sdr_loss(&[wf(&e)], &wf(&s)).unwrap();
            let m = si_sdr_unclamped(&e, &s).unwrap();
            assert!((l + m).abs() < 1e-9, "{l} vs {m}");
        }
    }

    fn outputs(vals: [&[f64]; 3]) -> Vec<(Condition, Waveform)> {
        Condition::ALL.iter().zip(vals).map(|(c, v)| (*c, wf(v))).collect()
    }

    #[test]
    fn total_loss_modes() {
        let s = [0.5, -0.2, 0.1, 0.7];
        let perfect = outputs([&s, &s, &s]);
        let b = total_loss(&perfect, &wf(&s), TrainingMode::TriplecParallel, 50.0).unwrap();
        assert_eq!(b.l_triplec, 0.0);
        assert!((b.l_sisdr + 3.0 * 80.0).abs() < 1e-6);
        assert_eq!(b.pair, Some(CONSISTENCY_PAIR));

        let a = [0.4, -0.1, 0.3, 0.6];
        let c = [0.1, -0.3, 0.0, 0.9];
        let outs = outputs([&a, &s, &c]);
        let b = total_loss(&outs, &wf(&s), TrainingMode::Triplec, 50.0).unwrap();
        let expect_sdr = si_sdr_loss(&[wf(&a), wf(&c)], &wf(&s)).unwrap();
        let expect_l1 = triplec_loss(&wf(&a), &wf(&c), 50.0).unwrap();
        assert_eq!(b.l_sisdr, expect_sdr);
        assert_eq!(b.l_triplec, expect_l1);
        assert_eq!(b.l_total, b.l_sisdr + b.l_triplec);

        let b = total_loss(&outs, &wf(&s), TrainingMode::ConditionWise(Condition::Both), 50.0).unwrap();
        assert_eq!(b.l_triplec, 0.0);
        assert_eq!(b.l_sisdr, si_sdr_loss(&[wf(&c)], &wf(&s)).unwrap());

        let missing = vec![(Condition::Single, wf(&a))];
        assert!(matches!(
            total_loss(&missing, &wf(&s), TrainingMode::Triplec, 50.0),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn clean_output_does_not_touch_consistency() {
        let s = [0.5, -0.2, 0.1, 0.7];
        let a = [0.4, -0.1, 0.3, 0.6];
        let c = [0.1, -0.3, 0.0, 0.9];
        let base = total_loss(&outputs([&a, &s, &c]), &wf(&s), TrainingMode::TriplecParallel, 50.0).unwrap();
        let moved = [0.9, 0.3, -0.4, 0.2];
        let pert = total_loss(&outputs([&a, &moved, &c]), &wf(&s), TrainingMode::TriplecParallel, 50.0).unwrap();
        assert_eq!(base.l_triplec, pert.l_triplec);
        assert_ne!(base.l_sisdr, pert.l_sisdr);
    }

    fn graph_total(est: &Tensor, tgt: &Rc<Tensor>, groups: &[GroupRows], mode: TrainingMode) -> (f64, Tensor) {
        let g = Graph::new();
        let x = g.param(est.clone());
        let (loss, _) = batch_loss(x, tgt.clone(), groups, mode, 50.0).unwrap();
        let v = loss.value().item();
        let grads = g.backward(loss);
        (v, grads.get(x).unwrap().clone())
    }

    fn parallel_batch(rng: &mut ChaCha8Rng, n_groups: usize, len: usize) -> (Tensor, Rc<Tensor>, Vec<GroupRows>) {
        let mut est = Vec::new();
        let mut tgt = Vec::new();
        let mut groups = Vec::new();
        for gi in 0..n_groups {
            let s = rand_vec(rng, len);
            for _ in 0..3 {
                est.extend(s.iter().map(|v| 0.7 * v + rng.gen_range(-0.5..0.5)));
                tgt.extend_from_slice(&s);
            }
            groups.push(GroupRows {
                rows: vec![3 * gi, 3 * gi + 1, 3 * gi + 2],
                conditions: Condition::ALL.to_vec(),
            });
        }
        let m = 3 * n_groups;
        (
            Tensor::new(vec![m, len], est),
            Rc::new(Tensor::new(vec![m, len], tgt)),
            groups,
        )
    }

    #[test]
    fn batch_loss_matches_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (est, tgt, groups) = parallel_batch(&mut rng, 3, 50);
        let g = Graph::new();
        let x = g.param(est.clone());
        let (loss, bundles) = batch_loss(x, tgt.clone(), &groups, TrainingMode::TriplecParallel, 50.0).unwrap();
        let mut mean = 0.0;
        for (gi, b) in bundles.iter().enumerate() {
            let outs: Vec<(Condition, Waveform)> = Condition::ALL
                .iter()
                .enumerate()
                .map(|(k, c)| (*c, wf(&est.data()[(3 * gi + k) * 50..(3 * gi + k + 1) * 50])))
                .collect();
            let s = wf(&tgt.data()[3 * gi * 50..(3 * gi + 1) * 50]);
            let v = total_loss(&outs, &s, TrainingMode::TriplecParallel, 50.0).unwrap();
            assert!((v.l_total - b.l_total).abs() < 1e-9);
            mean += v.l_total / 3.0;
        }
        assert!((loss.value().item() - mean).abs() < 1e-9);
    }

    #[test]
    fn finite_differences_on_sampled_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (est, tgt, groups) = parallel_batch(&mut rng, 2, 40);
        let (_, grad) = graph_total(&est, &tgt, &groups, TrainingMode::TriplecParallel);
        let h = 1e-6;
        for _ in 0..64 {
            let i = rng.gen_range(0..est.len());
            let mut p = est.clone();
            p.data_mut()[i] += h;
            let mut m = est.clone();
            m.data_mut()[i] -= h;
            let fd = (graph_total(&p, &tgt, &groups, TrainingMode::TriplecParallel).0
                - graph_total(&m, &tgt, &groups, TrainingMode::TriplecParallel).0)
                / (2.0 * h);
            let a = grad.data()[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
            assert!(rel < 1e-5, "entry {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn clean_row_has_no_consistency_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (est, tgt, groups) = parallel_batch(&mut rng, 2, 30);
        let (_, with) = graph_total(&est, &tgt, &groups, TrainingMode::TriplecParallel);
        let g = Graph::new();
        let x = g.param(est.clone());
        let (loss, _) = batch_loss(x, tgt.clone(), &groups, TrainingMode::TriplecParallel, 0.0).unwrap();
        let without = g.backward(loss).get(x).unwrap().clone();
        for gi in 0..2 {
            let r = 3 * gi + 1;
            assert_eq!(&with.data()[r * 30..(r + 1) * 30], &without.data()[r * 30..(r + 1) * 30]);
        }
    }

    proptest! {
        #[test]
        fn triplec_symmetric_and_triangle(
            a in prop::collection::vec(-1.0f64..1.0, 16),
            b in prop::collection::vec(-1.0f64..1.0, 16),
            c in prop::collection::vec(-1.0f64..1.0, 16),
            w in 0.0f64..100.0,
        ) {
            let (a, b, c) = (wf(&a), wf(&b), wf(&c));
            prop_assert_eq!(triplec_loss(&a, &b, w).unwrap(), triplec_loss(&b, &a, w).unwrap());
            let ac = triplec_loss(&a, &c, w).unwrap();
            let ab = triplec_loss(&a, &b, w).unwrap();
            let bc = triplec_loss(&b, &c, w).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!(ab >= 0.0);
        }
    }
}
