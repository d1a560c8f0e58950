use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lm::{Backbone, LabeledSequence, ModelConfig, RESERVED};
use crate::numerics::{finite_difference_oracle, relative_error, Tape};

fn tiny_backbone(seed: u64) -> Backbone {
    let cfg = ModelConfig { vocab_size: 12, d_model: 8, n_layers: 1, n_heads: 2, prefix_len: 2, max_len: 10 };
    Backbone::init_with_std(cfg, seed, 0.3).unwrap()
}

fn data(seed: u64, n: usize) -> Vec<LabeledSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let len = rng.random_range(2..8);
            // label 0 favors low ids, label 1 high ids
            let tokens = (0..len)
                .map(|_| if label == 0 { rng.random_range(RESERVED..8) } else { rng.random_range(8..12) })
                .collect();
            LabeledSequence::single(i as u64, tokens, label)
        })
        .collect()
}

fn small_config() -> ClassifierConfig {
    ClassifierConfig {
        steps: 30,
        period: 5,
        stage2_batch: 4,
        stage1_steps: 20,
        stage1_lrs: vec![1e-2, 3e-2],
        stage1_batches: vec![2, 4],
        stage2_lr: 0.05,
        trace: true,
        ..ClassifierConfig::default()
    }
}

#[test]
fn smoothed_target_examples() {
    assert_eq!(smoothed_targets(1, 3, 0.0).unwrap(), vec![0.0, 1.0, 0.0]);
    let q = smoothed_targets(1, 3, 0.15).unwrap();
    for (a, b) in q.iter().zip([0.05, 0.90, 0.05]) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!(smoothed_targets(3, 3, 0.1).is_err());
    assert!(smoothed_targets(0, 3, 1.0).is_err());
}

#[test]
fn class_loss_examples() {
    let p: [f64; 3] = [0.2, 0.5, 0.3];
    let q = smoothed_targets(1, 3, 0.15).unwrap();
    let ce: f64 = -q.iter().zip(&p).map(|(a, b)| a * b.ln()).sum::<f64>();
    assert!((class_loss(&p, &q, &p, 20.0).unwrap().value - ce).abs() <= 1e-12);
    let u = [1.0 / 3.0; 3];
    assert!((class_loss(&u, &u, &u, 5.0).unwrap().value - 3f64.ln()).abs() <= 1e-12);
    let f = class_loss(&[0.0, 1.0], &[0.5, 0.5], &[0.5, 0.5], 1.0).unwrap();
    assert!(f.floored && f.value.is_finite());
}

#[test]
fn ensemble_first_update() {
    let mut s = EnsembleState::new(2);
    assert!(s.is_fresh());
    s.update(&[0.7, 0.3], 0.9);
    assert!((s.z_hat[0] - 0.07).abs() <= 1e-15 && (s.z_hat[1] - 0.03).abs() <= 1e-15);
    assert!((s.z_bar[0] - 0.7).abs() <= 1e-12 && (s.z_bar[1] - 0.3).abs() <= 1e-12);
    assert_eq!(s.t, 1);
}

#[test]
fn constant_prediction_is_its_own_ensemble() {
    let p = [0.15, 0.6, 0.25];
    let mut s = EnsembleState::new(3);
    for _ in 0..100 {
        s.update(&p, 0.9);
        for (a, b) in s.z_bar.iter().zip(&p) {
            assert!((a - b).abs() <= 1e-12, "t = {}", s.t);
        }
    }
}

#[test]
fn alternating_predictions_match_unrolled_average() {
    let gamma: f64 = 0.9;
    let preds: Vec<[f64; 2]> = (0..10).map(|i| if i % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let mut s = EnsembleState::new(2);
    for (t, p) in preds.iter().enumerate() {
        s.update(p, gamma);
        let t = t + 1;
        for l in 0..2 {
            let direct: f64 = (1..=t).map(|k| gamma.powi((t - k) as i32) * (1.0 - gamma) * preds[k - 1][l]).sum();
            let expected = direct / (1.0 - gamma.powi(t as i32));
            assert!((s.z_bar[l] - expected).abs() <= 1e-12);
        }
        assert!((s.z_bar.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn filter_boundaries() {
    let mut above = EnsembleState::new(2);
    above.z_bar = vec![0.15, 0.85];
    above.t = 1;
    let mut at = EnsembleState::new(2);
    at.z_bar = vec![0.2, 0.8];
    at.t = 1;
    let fresh = EnsembleState::new(2);
    assert_eq!(filter_retained(&[1, 1, 1], &[above, at, fresh], 0.8), vec![0, 2]);
}

#[test]
fn metrics_examples() {
    let m = classification_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
    assert_eq!((m.accuracy, m.macro_f1, m.mcc, m.mcc_undefined), (1.0, 1.0, 1.0, false));
    let m = classification_metrics(&[1, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert_eq!(m.mcc, 0.0);
    assert!(m.mcc_undefined);
    // binary MCC against (tp·tn − fp·fn)/sqrt(...)
    let pred = [1, 1, 0, 0, 1, 0, 1];
    let act = [1, 0, 0, 1, 1, 0, 1];
    let (tp, tn, fp, fneg) = (3.0, 2.0, 1.0, 1.0);
    let expected = (tp * tn - fp * fneg) / f64::sqrt((tp + fp) * (tp + fneg) * (tn + fp) * (tn + fneg));
    let m = classification_metrics(&pred, &act, 2).unwrap();
    assert!((m.mcc - expected).abs() <= 1e-12);
    let f1_pos = 2.0 * tp / (2.0 * tp + fp + fneg);
    let f1_neg = 2.0 * tn / (2.0 * tn + fp + fneg);
    assert!((m.macro_f1 - (f1_pos + f1_neg) / 2.0).abs() <= 1e-12);
    assert!(classification_metrics(&[], &[], 2).is_err());
}

#[test]
fn random_predictions_have_chance_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let actual: Vec<usize> = (0..10_000).map(|i| i % 2).collect();
    let pred: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..2)).collect();
    let m = classification_metrics(&pred, &actual, 2).unwrap();
    assert!((m.accuracy - 0.5).abs() <= 0.05);
    assert!(m.mcc.abs() <= 0.05);
}

#[test]
fn tape_loss_matches_direct_formula_and_finite_differences() {
    let b = tiny_backbone(1);
    let clf = Classifier::from_backbone(&b, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let batch = data(3, 3);
    let items: Vec<&LabeledSequence> = batch.iter().collect();
    let z = [vec![0.3, 0.7], vec![0.6, 0.4]];
    let ens = [Some(z[0].as_slice()), None, Some(z[1].as_slice())];
    let (loss, grad, _) = class_loss_gradient(&clf, &items, &ens, 0.15, 2.0).unwrap();
    let mut direct = 0.0;
    for (seq, e) in batch.iter().zip(&ens) {
        let p = clf.predict_proba(seq).unwrap();
        let q = smoothed_targets(seq.label, 2, 0.15).unwrap();
        let (zz, lambda) = match e {
            Some(z) => (z.to_vec(), 2.0),
            None => (p.clone(), 0.0),
        };
        direct += class_loss(&p, &q, &zz, lambda).unwrap().value / 3.0;
    }
    assert!((loss - direct).abs() <= 1e-12);

    let fd = finite_difference_oracle(
        |p| {
            let probe = Classifier::from_params(*clf.config(), 2, p.clone())?;
            Ok(class_loss_gradient(&probe, &items, &ens, 0.15, 2.0)?.0)
        },
        clf.params(),
        1e-5,
    )
    .unwrap();
    assert!(relative_error(&grad.flatten(), &fd.flatten()) <= 1e-6);
}

#[test]
fn zero_steps_keep_stage_one_model() {
    let b = tiny_backbone(4);
    let cfg = ClassifierConfig { steps: 0, ..small_config() };
    let s1 = train_stage1(&b, &data(5, 8), &data(6, 8), 2, &cfg, 0).unwrap();
    let s2 = train_stage2(&s1.classifier, &[], &cfg, 0).unwrap();
    assert_eq!(s2.classifier, s1.classifier);
    assert!(train_stage2(&s1.classifier, &[], &small_config(), 0).is_err());
    assert_eq!(s1.grid.len(), 4);
    assert!(s1.grid.iter().all(|g| g.2 <= s1.dev_accuracy));
}

#[test]
fn retained_samples_pass_the_threshold_after_every_refresh() {
    let b = tiny_backbone(7);
    let cfg = small_config();
    let out = train_classifier(&b, &data(8, 8), &data(9, 8), &data(10, 40), 2, &cfg, 3).unwrap();
    assert_eq!(out.stage2.history.len(), 30);
    assert_eq!(out.stage2.refreshes.len(), 6);
    let gen = data(10, 40);
    for t in &out.stage2.trace {
        let label = gen[t.sample_id as usize].label;
        assert_eq!(t.retained, t.z_bar[label] > 0.8);
        assert!((t.z_bar.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn degenerate_settings_reduce_to_plain_cross_entropy() {
    let b = tiny_backbone(11);
    let cfg = ClassifierConfig { lambda: 0.0, delta: 0.0, epsilon: 0.0, ..small_config() };
    let s1 = train_stage1(&b, &data(12, 8), &data(13, 8), 2, &cfg, 0).unwrap();
    let gen = data(14, 24);
    let out = train_stage2(&s1.classifier, &gen, &cfg, 21).unwrap();

    let mut clf = s1.classifier.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for step in 0..cfg.steps {
        let idx = sample(&mut rng, gen.len(), cfg.stage2_batch);
        let mut tape = Tape::new();
        let w = clf.params().bind(&mut tape);
        let mut nll = Vec::new();
        for i in idx.iter() {
            let lp = clf.record(&mut tape, &w, &gen[i]).unwrap();
            let picked = tape.element(lp, gen[i].label);
            nll.push(picked);
        }
        let mut total = nll[0];
        for v in &nll[1..] {
            total = tape.add(total, *v);
        }
        let loss = tape.scale(total, -1.0 / nll.len() as f64);
        let expected = tape.scalar(loss);
        assert!((out.history[step].loss - expected).abs() <= 1e-12, "step {step}");
        let g = tape.backward(loss).unwrap().wrt(clf.params());
        drop(tape);
        clf.params_mut().sgd_step(&g, cfg.stage2_lr);
    }
}

#[test]
fn training_separates_an_easy_task() {
    let b = tiny_backbone(15);
    let cfg = ClassifierConfig { stage1_steps: 60, ..small_config() };
    let s1 = train_stage1(&b, &data(16, 16), &data(17, 16), 2, &cfg, 0).unwrap();
    let m = evaluate_classifier(&s1.classifier, &data(18, 100)).unwrap();
    assert!(m.accuracy >= 0.9, "{m:?}");
}

#[test]
fn config_validation() {
    let ok = ClassifierConfig::default();
    assert!(ok.validate().is_ok());
    assert!(ClassifierConfig { gamma: 1.0, ..ok.clone() }.validate().is_err());
    assert!(ClassifierConfig { epsilon: 1.0, ..ok.clone() }.validate().is_err());
    assert!(ClassifierConfig { lambda: -1.0, ..ok.clone() }.validate().is_err());
    assert!(ClassifierConfig { period: 0, ..ok.clone() }.validate().is_err());
    assert!(ClassifierConfig { stage1_lrs: vec![], ..ok }.validate().is_err());
}

fn distribution(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn regularizer_is_scaled_kl(
        raw in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 2..6),
        label in 0usize..2,
        lambda in 0.0f64..30.0,
    ) {
        let p = distribution(&raw.iter().map(|r| r.0).collect::<Vec<_>>());
        let z = distribution(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
        let q = smoothed_targets(label, p.len(), 0.15).unwrap();
        let with = class_loss(&p, &q, &z, lambda).unwrap().value;
        let without = class_loss(&p, &q, &z, 0.0).unwrap().value;
        let kl = kl_divergence(&z, &p);
        prop_assert!(kl >= 0.0);
        prop_assert!(((with - without) - lambda * kl).abs() <= 1e-12 * (1.0 + lambda * kl));
    }

    #[test]
    fn smoothed_targets_sum_to_one(label in 0usize..5, extra in 0usize..5, eps in 0.0f64..0.99) {
        let l = label + 1 + extra;
        let q = smoothed_targets(label, l, eps).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        if eps < (l as f64 - 1.0) / l as f64 {
            let argmax = (0..l).fold(0, |b, i| if q[i] > q[b] { i } else { b });
            prop_assert_eq!(argmax, label);
        }
    }
}
