//! Finite-difference suites for every differentiable piece of the crate.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::classifier::{class_loss_gradient, Classifier};
use crate::error::Result;
use crate::lm::{Backbone, LabeledSequence, LmSession, ModelConfig, PrefixBank, RESERVED};
use crate::numerics::{finite_difference_oracle, relative_error, ParameterSet, Tape, Tensor, Var};
use crate::tuning::{lookahead_disc_loss, meta_gradient_scaled, record_sequence, record_weighted_gen, WeightNet, WEIGHT_NET_HIDDEN};

/// Default pass threshold for primitive and loss gradients.
pub const GRADIENT_TOL: f64 = 1e-5;
/// Default pass threshold for the meta-gradient.
pub const META_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    /// Largest relative error seen.
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    /// Values in `[0.5, 1.5]`.
    Positive,
    /// Normal values pushed at least 0.2 away from zero.
    AwayFromZero,
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        match init {
            Init::Normal => z,
            Init::Positive => rng.random_range(0.5..1.5),
            Init::AwayFromZero => z + 0.2 * z.signum(),
        }
    })
}

fn params(rng: &mut ChaCha8Rng, specs: &[(&[usize], Init)]) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (i, (shape, init)) in specs.iter().enumerate() {
        p.insert(&alloc::format!("p{i}"), tensor(rng, shape, *init), true).expect("unique names");
    }
    p
}

/// Relative error between the tape gradient and central differences of
/// `⟨build(params), r⟩` for a fixed random projection `r`.
fn check_primitive<F>(p: &ParameterSet, rng: &mut ChaCha8Rng, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let len = {
        let mut tape = Tape::new();
        let w = p.bind(&mut tape);
        let out = build(&mut tape, &w);
        tape.value(out).len()
    };
    let r = tensor(rng, &[len], Init::Normal);
    let eval = |params: &ParameterSet, grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let w = params.bind(&mut tape);
        let out = build(&mut tape, &w);
        let flat = tape.reshape(out, &[len]);
        let rv = tape.input(r.clone());
        let loss = tape.dot(flat, rv);
        let g = if grad { tape.backward(loss)?.wrt(params).flatten() } else { Vec::new() };
        Ok((tape.scalar(loss), g))
    };
    let analytic = eval(p, true)?.1;
    let fd = finite_difference_oracle(|q| Ok(eval(q, false)?.0), p, STEP)?;
    Ok(relative_error(&analytic, &fd.flatten()))
}

/// Every tape primitive on `instances` random inputs.
pub fn numerics_suite(instances: u64) -> Result<SuiteReport> {
    use Init::*;
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let mut run = |specs: &[(&[usize], Init)], build: &dyn Fn(&mut Tape<'_>, &[Var]) -> Var| -> Result<()> {
            let p = params(rng, specs);
            worst = worst.max(check_primitive(&p, rng, build)?);
            Ok(())
        };
        run(&[(&[3, 4], Normal), (&[4, 2], Normal)], &|t, w| t.matmul(w[0], w[1]))?;
        run(&[(&[3, 4], Normal), (&[2, 4], Normal)], &|t, w| t.matmul_t(w[0], w[1]))?;
        run(&[(&[2, 3], Normal), (&[2, 3], Normal)], &|t, w| t.add(w[0], w[1]))?;
        run(&[(&[2, 3], Normal), (&[2, 3], Normal)], &|t, w| t.sub(w[0], w[1]))?;
        run(&[(&[2, 3], Normal), (&[2, 3], Normal)], &|t, w| t.mul(w[0], w[1]))?;
        run(&[(&[2, 3], Normal), (&[2, 3], Positive)], &|t, w| t.div(w[0], w[1]))?;
        run(&[(&[3, 4], Normal), (&[4], Normal)], &|t, w| t.add_row(w[0], w[1]))?;
        run(&[(&[2, 3], Normal)], &|t, w| t.scale(w[0], 1.7))?;
        run(&[(&[2, 3], Normal)], &|t, w| t.add_scalar(w[0], 0.3))?;
        run(&[(&[2, 3], Normal)], &|t, w| t.tanh(w[0]))?;
        run(&[(&[2, 3], Normal)], &|t, w| t.gelu(w[0]))?;
        run(&[(&[2, 3], Normal)], &|t, w| t.exp(w[0]))?;
        run(&[(&[2, 3], Positive)], &|t, w| t.log(w[0]))?;
        run(&[(&[2, 3], AwayFromZero)], &|t, w| t.clamp_min(w[0], 0.0))?;
        run(&[(&[2, 5], Normal)], &|t, w| t.softmax(w[0]))?;
        run(&[(&[3, 5], Normal)], &|t, w| t.causal_softmax(w[0], 2))?;
        run(&[(&[2, 5], Normal)], &|t, w| t.log_softmax(w[0]))?;
        run(&[(&[3, 5], Normal), (&[5], Normal), (&[5], Normal)], &|t, w| t.layer_norm(w[0], w[1], w[2]))?;
        run(&[(&[6, 3], Normal)], &|t, w| t.embed(w[0], &[0, 2, 2, 5]))?;
        run(&[(&[3, 4], Normal)], &|t, w| t.gather(w[0], &[0, 5, 5, 11]))?;
        run(&[(&[3, 4], Normal)], &|t, w| t.element(w[0], 7))?;
        run(&[(&[2, 3], Normal), (&[1, 3], Normal)], &|t, w| t.concat_rows(w[0], w[1]))?;
        run(&[(&[2, 2], Normal), (&[2, 3], Normal)], &|t, w| t.concat_cols(&[w[0], w[1]]))?;
        run(&[(&[2, 5], Normal)], &|t, w| t.slice_cols(w[0], 1, 3))?;
        run(&[(&[3, 4], Normal), (&[4], Normal)], &|t, w| t.replace_row(w[0], 1, w[1]))?;
        run(&[(&[2, 6], Normal)], &|t, w| t.reshape(w[0], &[3, 4]))?;
        run(&[(&[3, 4], Normal)], &|t, w| t.sum(w[0]))?;
        run(&[(&[3, 4], Normal)], &|t, w| t.mean(w[0]))?;
        run(&[(&[3, 4], Normal)], &|t, w| t.mean_rows(w[0]))?;
        run(&[(&[5], Normal), (&[5], Normal)], &|t, w| t.dot(w[0], w[1]))?;
    }
    Ok(SuiteReport { name: "primitives", instances: instances as usize, worst, tolerance: GRADIENT_TOL })
}

/// A sharp tiny language model with two labels and random sequences of length ≤ `max_n`.
pub fn tiny_instance(seed: u64, vocab_size: usize, d_model: usize, max_n: usize) -> Result<(Backbone, PrefixBank, Vec<LabeledSequence>)> {
    let cfg = ModelConfig { vocab_size, d_model, n_layers: 1, n_heads: 2, prefix_len: 2, max_len: 8 };
    let backbone = Backbone::init_with_std(cfg, seed, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut bank = PrefixBank::random(&backbone, 2, false, &mut rng)?;
    for i in 0..bank.params().len() {
        for v in bank.params_mut().tensor_mut(i).data_mut() {
            *v *= 25.0;
        }
    }
    let seqs = (0..2)
        .map(|i| {
            let n = rng.random_range(2..=max_n);
            let tokens = (0..n).map(|_| rng.random_range(RESERVED..vocab_size)).collect();
            LabeledSequence::single(i, tokens, i as usize % 2)
        })
        .collect();
    Ok((backbone, bank, seqs))
}

#[derive(Clone, Copy)]
enum SeqLoss {
    Gen,
    Disc,
    WeightedGen,
    Combined,
}

fn seq_loss(backbone: &Backbone, bank: &PrefixBank, seqs: &[LabeledSequence], which: SeqLoss, weights: &[Vec<f64>], grad: bool) -> Result<(f64, Vec<f64>)> {
    let mut s = LmSession::new(backbone, Some(bank));
    let mut total: Option<Var> = None;
    for (seq, w) in seqs.iter().zip(weights) {
        let vars = record_sequence(&mut s, seq, bank.num_labels(), true)?;
        let gen = {
            let m = s.tape.mean(vars.logprobs);
            s.tape.scale(m, -1.0)
        };
        let disc = vars.disc_scalar.expect("requested");
        let term = match which {
            SeqLoss::Gen => gen,
            SeqLoss::Disc => disc,
            SeqLoss::WeightedGen => record_weighted_gen(&mut s, vars.logprobs, w)?,
            SeqLoss::Combined => {
                let d = s.tape.scale(disc, 0.7);
                s.tape.add(gen, d)
            }
        };
        total = Some(match total {
            None => term,
            Some(acc) => s.tape.add(acc, term),
        });
    }
    let loss = total.expect("non-empty");
    let g = if grad { s.tape.backward(loss)?.wrt(bank.params()).flatten() } else { Vec::new() };
    Ok((s.tape.scalar(loss), g))
}

/// Generative, discriminative, weighted and combined sequence losses, plus the classifier loss.
pub fn loss_suites(instances: u64) -> Result<Vec<SuiteReport>> {
    let mut worst = [0.0f64; 5];
    for seed in 0..instances {
        let (backbone, bank, seqs) = tiny_instance(seed, 8, 8, 6)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        let weights: Vec<Vec<f64>> = seqs
            .iter()
            .map(|s| {
                let raw: Vec<f64> = (0..s.len()).map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = raw.iter().sum();
                raw.iter().map(|v| v / total).collect()
            })
            .collect();
        for (k, which) in [SeqLoss::Gen, SeqLoss::Disc, SeqLoss::WeightedGen, SeqLoss::Combined].into_iter().enumerate() {
            let analytic = seq_loss(&backbone, &bank, &seqs, which, &weights, true)?.1;
            let fd = finite_difference_oracle(
                |p| {
                    let mut probe = bank.clone();
                    *probe.params_mut() = p.clone();
                    Ok(seq_loss(&backbone, &probe, &seqs, which, &weights, false)?.0)
                },
                bank.params(),
                STEP,
            )?;
            worst[k] = worst[k].max(relative_error(&analytic, &fd.flatten()));
        }

        let clf = Classifier::from_backbone(&backbone, 2, &mut rng)?;
        let items: Vec<&LabeledSequence> = seqs.iter().collect();
        let z: Vec<Vec<f64>> = (0..seqs.len())
            .map(|_| {
                let a = rng.random_range(0.05..0.95);
                alloc::vec![a, 1.0 - a]
            })
            .collect();
        let ens: Vec<Option<&[f64]>> = z.iter().map(|v| Some(v.as_slice())).collect();
        let (_, g, _) = class_loss_gradient(&clf, &items, &ens, 0.15, 20.0)?;
        let fd = finite_difference_oracle(
            |p| {
                let probe = Classifier::from_params(*clf.config(), 2, p.clone())?;
                Ok(class_loss_gradient(&probe, &items, &ens, 0.15, 20.0)?.0)
            },
            clf.params(),
            STEP,
        )?;
        worst[4] = worst[4].max(relative_error(&g.flatten(), &fd.flatten()));
    }
    let names = ["gen loss", "disc loss", "weighted gen loss", "combined loss", "class loss"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(name, w)| SuiteReport { name, instances: instances as usize, worst: w, tolerance: GRADIENT_TOL })
        .collect())
}

/// Meta-gradient of the weighting network against finite differences of the
/// lookahead discriminative loss. `disc_scale = −1` injects a sign flip.
pub fn meta_suite(instances: u64, alpha: f64, disc_scale: f64) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let (backbone, bank, seqs) = tiny_instance(seed + 1000, 8, 8, 6)?;
        let net = WeightNet::init(WEIGHT_NET_HIDDEN, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let step = meta_gradient_scaled(&backbone, &bank, &net, &seqs, alpha, disc_scale)?;
        let fd = finite_difference_oracle(
            |p| lookahead_disc_loss(&backbone, &bank, &WeightNet::from_params(p.clone())?, &seqs, alpha),
            net.params(),
            STEP,
        )?;
        worst = worst.max(relative_error(&step.grad.flatten(), &fd.flatten()));
    }
    Ok(SuiteReport { name: "meta-gradient", instances: instances as usize, worst, tolerance: META_TOL })
}

/// Every suite with the default instance counts; `tolerance` overrides the thresholds.
pub fn run_all(tolerance: Option<f64>) -> Result<Vec<SuiteReport>> {
    let mut out = alloc::vec![numerics_suite(20)?];
    out.extend(loss_suites(20)?);
    out.push(meta_suite(10, 2e-2, 1.0)?);
    if let Some(t) = tolerance {
        for r in &mut out {
            r.tolerance = t;
        }
    }
    Ok(out)
}
