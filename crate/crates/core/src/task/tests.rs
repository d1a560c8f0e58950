use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lm::{ModelConfig, LabeledSequence as Seq, SEP};
use crate::tuning::gen_loss;

fn tiny_spec(insertion: Vec<f64>) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        vocab_size: 8,
        num_labels: 2,
        template_size: 2,
        successors: 2,
        disc_size: 1,
        insertion,
        min_len: 1,
        max_len: 3,
        mode: TaskMode::Single,
        seed: 3,
    }
}

/// Exact `P(tokens | label)` by direct forward evaluation of the generative process.
fn likelihood(g: &Grammar, tokens: &[usize], label: usize) -> f64 {
    let n = tokens.len();
    if n < g.min_len || n > g.max_len {
        return 0.0;
    }
    let rho = g.insertion[label];
    let mut p = 1.0 / (g.max_len - g.min_len + 1) as f64;
    let mut state: Option<usize> = None;
    for &t in tokens {
        if let Some(k) = g.disc_tokens[label].iter().position(|&d| d == t) {
            let _ = k;
            p *= rho / g.disc_tokens[label].len() as f64;
        } else if let Some(s) = g.template_tokens.iter().position(|&d| d == t) {
            let row = match state {
                None => &g.start,
                Some(prev) => &g.transition[prev],
            };
            p *= (1.0 - rho) * row[s];
            state = Some(s);
        } else {
            return 0.0;
        }
    }
    p
}

fn all_sequences(alphabet: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &a in alphabet {
                let mut t = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn default_spec_is_valid_and_sets_are_disjoint() {
    let g = Grammar::from_spec(&SyntheticTaskSpec::default()).unwrap();
    let mut seen = Vec::new();
    for set in g.disc_tokens.iter().chain(core::iter::once(&g.template_tokens)) {
        for &t in set {
            assert!(t >= RESERVED && t < 64);
            assert!(!seen.contains(&t));
            seen.push(t);
        }
    }
    assert!((g.start.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for row in &g.transition {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row.iter().filter(|p| **p > 0.0).count(), 3);
    }
}

#[test]
fn spec_validation() {
    assert!(SyntheticTaskSpec { vocab_size: 20, ..SyntheticTaskSpec::default() }.validate().is_err());
    assert!(SyntheticTaskSpec { insertion: vec![0.1], ..SyntheticTaskSpec::default() }.validate().is_err());
    assert!(SyntheticTaskSpec { insertion: vec![0.1, 1.5], ..SyntheticTaskSpec::default() }.validate().is_err());
    assert!(SyntheticTaskSpec { min_len: 5, max_len: 4, ..SyntheticTaskSpec::default() }.validate().is_err());
    assert!(SyntheticTaskSpec { num_labels: 1, insertion: vec![0.2], ..SyntheticTaskSpec::default() }.validate().is_err());
}

#[test]
fn closed_form_bayes_accuracy_matches_enumeration() {
    for insertion in [vec![0.3, 0.3], vec![0.2, 0.5], vec![0.0, 0.4], vec![1.0, 0.1]] {
        let g = Grammar::from_spec(&tiny_spec(insertion)).unwrap();
        let oracle = BayesOracle::new(g.clone());
        let alphabet: Vec<usize> = (RESERVED..RESERVED + 4).collect();
        let mut exact = 0.0;
        let mut mass = [0.0, 0.0];
        for x in all_sequences(&alphabet, 3) {
            let pred = oracle.predict_tokens(&x);
            for l in 0..2 {
                let p = likelihood(&g, &x, l);
                mass[l] += p;
                if pred == l {
                    exact += 0.5 * p;
                }
            }
        }
        assert!((mass[0] - 1.0).abs() < 1e-12 && (mass[1] - 1.0).abs() < 1e-12);
        assert!((exact - bayes_accuracy(&g)).abs() <= 1e-12, "{exact} vs {}", bayes_accuracy(&g));
    }
}

#[test]
fn oracle_is_the_posterior_argmax() {
    let g = Grammar::from_spec(&tiny_spec(vec![0.2, 0.5])).unwrap();
    let oracle = BayesOracle::new(g.clone());
    let alphabet: Vec<usize> = (RESERVED..RESERVED + 4).collect();
    for x in all_sequences(&alphabet, 3).into_iter().skip(1) {
        let (p0, p1) = (likelihood(&g, &x, 0), likelihood(&g, &x, 1));
        if p0 == 0.0 && p1 == 0.0 {
            continue;
        }
        let expected = if p1 > p0 { 1 } else { 0 };
        assert_eq!(oracle.predict_tokens(&x), expected, "{x:?}");
    }
}

#[test]
fn oracle_accuracy_on_test_split_matches_bayes_rate() {
    let spec = SyntheticTaskSpec::default();
    let task = make_synthetic_task(&spec, 16, 16, 4000, 0, 1).unwrap();
    let acc = oracle_label_accuracy(&task.test, &task.oracle).unwrap();
    let bayes = bayes_accuracy(task.oracle.grammar());
    let sigma = libm::sqrt(bayes * (1.0 - bayes) / task.test.len() as f64);
    assert!(acc >= bayes - 3.0 * sigma, "{acc} vs {bayes}");
    assert!(acc <= bayes + 3.0 * sigma, "{acc} vs {bayes}");
}

#[test]
fn indistinguishable_labels_give_chance_accuracy() {
    let spec = SyntheticTaskSpec { insertion: vec![0.0, 0.0], ..SyntheticTaskSpec::default() };
    let task = make_synthetic_task(&spec, 4, 4, 200, 0, 2).unwrap();
    assert_eq!(oracle_label_accuracy(&task.test, &task.oracle).unwrap(), 0.5);
    assert!((bayes_accuracy(task.oracle.grammar()) - 0.5).abs() <= 1e-12);
}

#[test]
fn permuted_labels_on_separable_grammar() {
    let spec = SyntheticTaskSpec { insertion: vec![1.0, 1.0], ..SyntheticTaskSpec::default() };
    let task = make_synthetic_task(&spec, 4, 4, 50, 0, 3).unwrap();
    assert_eq!(oracle_label_accuracy(&task.test, &task.oracle).unwrap(), 1.0);
    let flipped: Vec<Seq> = task.test.iter().cloned().map(|mut s| {
        s.label = 1 - s.label;
        s
    }).collect();
    assert_eq!(oracle_label_accuracy(&flipped, &task.oracle).unwrap(), 0.0);
    assert_eq!(oracle_label_accuracy(&task.test[..1], &task.oracle).unwrap(), 1.0);
    assert!(oracle_label_accuracy(&[], &task.oracle).is_err());
}

#[test]
fn mixed_or_foreign_tokens_fall_back_deterministically() {
    let g = Grammar::from_spec(&SyntheticTaskSpec::default()).unwrap();
    let oracle = BayesOracle::new(g.clone());
    let a = g.disc_tokens[0][0];
    let b = g.disc_tokens[1][0];
    assert_eq!(oracle.predict_tokens(&[a, a, b]), 0);
    assert_eq!(oracle.predict_tokens(&[b, b, a]), 1);
    assert_eq!(oracle.predict_tokens(&[63, 63]), 0);
}

#[test]
fn split_sizes_and_distinct_ids() {
    let task = make_synthetic_task(&SyntheticTaskSpec::default(), 16, 16, 20, 100, 4).unwrap();
    assert_eq!(task.train.len(), 32);
    assert_eq!(task.dev.len(), 32);
    assert_eq!(task.test.len(), 40);
    assert_eq!(task.corpus.len(), 100);
    let mut ids: Vec<u64> = task.train.iter().chain(&task.dev).chain(&task.test).map(|s| s.id).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 32 + 32 + 40);
    assert!(make_synthetic_task(&SyntheticTaskSpec::default(), 0, 1, 1, 1, 0).is_err());
    let again = make_synthetic_task(&SyntheticTaskSpec::default(), 16, 16, 20, 100, 4).unwrap();
    assert_eq!(task.train, again.train);
    assert_eq!(task.corpus, again.corpus);
}

#[test]
fn pair_mode_first_sequence_is_label_free() {
    let spec = SyntheticTaskSpec { mode: TaskMode::Pair, ..SyntheticTaskSpec::default() };
    let task = make_synthetic_task(&spec, 8, 8, 10, 10, 5).unwrap();
    let g = task.oracle.grammar();
    for s in &task.train {
        assert!(s.is_pair());
        assert!(s.first().iter().all(|t| g.template_tokens.contains(t)));
        assert_eq!(task.oracle.predict(s), task.oracle.predict_tokens(s.second()));
    }
    assert!(task.corpus.iter().all(|c| c.iter().filter(|&&t| t == SEP).count() == 1));
}

fn zero_model(v: usize) -> (Backbone, PrefixBank) {
    let cfg = ModelConfig { vocab_size: v, d_model: 8, n_layers: 1, n_heads: 2, prefix_len: 2, max_len: 16 };
    let mut b = Backbone::init(cfg, 0).unwrap();
    for i in 0..b.params().len() {
        for x in b.params_mut().tensor_mut(i).data_mut() {
            *x = 0.0;
        }
    }
    let mut bank = PrefixBank::random(&b, 2, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for i in 0..bank.params().len() {
        for x in bank.params_mut().tensor_mut(i).data_mut() {
            *x = 0.0;
        }
    }
    (b, bank)
}

#[test]
fn uniform_model_has_vocabulary_size_perplexity() {
    let (b, bank) = zero_model(64);
    let data = vec![Seq::single(0, vec![5, 9, 30], 0), Seq::single(1, vec![7, 7], 1)];
    assert!((perplexity(&b, &bank, 1, &data).unwrap() - 64.0).abs() <= 1e-9);
    assert!((dataset_perplexity(&b, &bank, &data).unwrap() - 64.0).abs() <= 1e-9);
    assert!(perplexity(&b, &bank, 0, &[]).is_err());
}

#[test]
fn perplexity_is_exp_of_pooled_generative_loss() {
    let cfg = ModelConfig { vocab_size: 12, d_model: 8, n_layers: 2, n_heads: 2, prefix_len: 3, max_len: 16 };
    let b = Backbone::init_with_std(cfg, 5, 0.4).unwrap();
    let bank = PrefixBank::random(&b, 2, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let one = Seq::single(0, vec![4, 5, 6, 7], 0);
    let lp = sequence_token_logprobs(&b, &bank, 0, &one).unwrap();
    let ppl = perplexity(&b, &bank, 0, core::slice::from_ref(&one)).unwrap();
    assert!((ppl - libm::exp(gen_loss(&lp).unwrap())).abs() <= 1e-12 * ppl);
    let pair = Seq::pair(1, &[8, 9], &[10, 11, 4], 0);
    let mut all = crate::tuning::included(&lp, &one);
    all.extend(crate::tuning::included(&sequence_token_logprobs(&b, &bank, 0, &pair).unwrap(), &pair));
    let ppl = perplexity(&b, &bank, 0, &[one, pair]).unwrap();
    assert!((ppl - libm::exp(gen_loss(&all).unwrap())).abs() <= 1e-12 * ppl);
}
