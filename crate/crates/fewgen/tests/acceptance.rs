//! One line per acceptance criterion. Property criteria fail the target; the
//! desk-scale directional comparisons (7, 8, 9) are reported without failing it.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fewgen::io::load_dataset;
use fewgen::pipeline::run_pipeline;
use fewgen::ExperimentConfig;
use fewgen_core::classifier::{class_loss, class_loss_gradient, filter_retained, smoothed_targets, Classifier, EnsembleState};
use fewgen_core::gradcheck::tiny_instance;
use fewgen_core::lm::{Backbone, LabeledSequence, LmSession, ModelConfig, PrefixBank, Vocabulary, RESERVED};
use fewgen_core::numerics::ParameterSet;
use fewgen_core::sampler::{penalized_distribution, sample_sequence, synthesize_dataset, GenerationConfig};
use fewgen_core::tuning::{
    gen_loss, lookahead_disc_loss, meta_gradient, record_sequence, record_weighted_gen, weighted_gen_loss, WeightNet,
    WEIGHT_NET_HIDDEN,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-5;
const META_TOL: f64 = 1e-4;
const EXACT_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
const DELTA: f64 = 0.8;
const BUDGET_SECS: f64 = 15.0 * 60.0;

struct Line {
    id: usize,
    pass: bool,
    gating: bool,
    text: String,
}

fn line(id: usize, pass: bool, gating: bool, text: String) -> Line {
    Line { id, pass, gating, text }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-12)
}

/// Central differences of `f` over the trainable values of `p`.
fn central_diff(p: &ParameterSet, mut f: impl FnMut(&ParameterSet) -> f64) -> Vec<f64> {
    let x = p.to_flat();
    let mut probe = p.clone();
    (0..x.len())
        .map(|i| {
            let mut y = x.clone();
            y[i] = x[i] + FD_STEP;
            probe.set_flat(&y).unwrap();
            let up = f(&probe);
            y[i] = x[i] - FD_STEP;
            probe.set_flat(&y).unwrap();
            let down = f(&probe);
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Loss {
    Gen,
    Disc,
    WGen,
    Combined,
}

const MU: f64 = 0.7;

fn sequence_loss(bb: &Backbone, bank: &PrefixBank, seqs: &[LabeledSequence], w: &[Vec<f64>], which: Loss, grad: bool) -> (f64, Vec<f64>) {
    let mut s = LmSession::new(bb, Some(bank));
    let mut total = None;
    for (seq, wv) in seqs.iter().zip(w) {
        let v = record_sequence(&mut s, seq, bank.num_labels(), true).unwrap();
        let mean = s.tape.mean(v.logprobs);
        let gen = s.tape.scale(mean, -1.0);
        let disc = v.disc_scalar.unwrap();
        let term = match which {
            Loss::Gen => gen,
            Loss::Disc => disc,
            Loss::WGen => record_weighted_gen(&mut s, v.logprobs, wv).unwrap(),
            Loss::Combined => {
                let d = s.tape.scale(disc, MU);
                s.tape.add(gen, d)
            }
        };
        total = Some(match total {
            None => term,
            Some(acc) => s.tape.add(acc, term),
        });
    }
    let loss = total.unwrap();
    let g = if grad { s.tape.backward(loss).unwrap().wrt(bank.params()).flatten() } else { Vec::new() };
    (s.tape.scalar(loss), g)
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let instances = 20;
    let mut worst = [0.0f64; 5];
    for seed in 0..instances {
        let (bb, bank, seqs) = tiny_instance(100 + seed, 8, 8, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<Vec<f64>> = seqs
            .iter()
            .map(|s| {
                let raw: Vec<f64> = (0..s.len()).map(|_| rng.random_range(0.1..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|v| v / z).collect()
            })
            .collect();
        for (k, which) in [Loss::Gen, Loss::Disc, Loss::WGen, Loss::Combined].into_iter().enumerate() {
            let analytic = sequence_loss(&bb, &bank, &seqs, &w, which, true).1;
            let fd = central_diff(bank.params(), |p| {
                let mut b = bank.clone();
                *b.params_mut() = p.clone();
                sequence_loss(&bb, &b, &seqs, &w, which, false).0
            });
            worst[k] = worst[k].max(rel_err(&analytic, &fd));
        }
        let clf = Classifier::from_backbone(&bb, 2, &mut rng).unwrap();
        let items: Vec<&LabeledSequence> = seqs.iter().collect();
        let z: Vec<Vec<f64>> = items
            .iter()
            .map(|_| {
                let a = rng.random_range(0.05..0.95);
                vec![a, 1.0 - a]
            })
            .collect();
        let ens: Vec<Option<&[f64]>> = z.iter().map(|v| Some(v.as_slice())).collect();
        let analytic = class_loss_gradient(&clf, &items, &ens, 0.15, 20.0).unwrap().1.flatten();
        let fd = central_diff(clf.params(), |p| {
            let c = Classifier::from_params(*clf.config(), 2, p.clone()).unwrap();
            class_loss_gradient(&c, &items, &ens, 0.15, 20.0).unwrap().0
        });
        worst[4] = worst[4].max(rel_err(&analytic, &fd));
    }
    let names = ["L_gen", "L_disc", "L_w-gen", "combined", "L_class"];
    let pass = worst.iter().all(|w| *w <= GRAD_TOL);
    let detail: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.2e}")).collect();
    line(
        1,
        pass,
        true,
        format!(
            "loss gradients vs central differences, {instances} instances each, worst rel err [{}] <= {GRAD_TOL:e} ({:.1}s)",
            detail.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_2() -> Line {
    let start = Instant::now();
    let instances = 10;
    let alpha = 2e-2;
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let (bb, bank, seqs) = tiny_instance(500 + seed, 8, 8, 6).unwrap();
        assert!(seqs.iter().all(|s| s.len() <= 6));
        let net = WeightNet::init(WEIGHT_NET_HIDDEN, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let analytic = meta_gradient(&bb, &bank, &net, &seqs, alpha).unwrap().grad.flatten();
        let fd = central_diff(net.params(), |p| {
            lookahead_disc_loss(&bb, &bank, &WeightNet::from_params(p.clone()).unwrap(), &seqs, alpha).unwrap()
        });
        worst = worst.max(rel_err(&analytic, &fd));
    }
    line(
        2,
        worst <= META_TOL,
        true,
        format!(
            "meta-gradient vs differences of the lookahead L_disc, {instances} instances (V=8, d=8, n<=6), worst rel err {worst:.2e} <= {META_TOL:e} ({:.1}s)",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn random_lm(seed: u64) -> (Backbone, PrefixBank) {
    let cfg = ModelConfig { vocab_size: 16, d_model: 8, n_layers: 1, n_heads: 2, prefix_len: 2, max_len: 16 };
    let bb = Backbone::init(cfg, seed).unwrap();
    let bank = PrefixBank::random(&bb, 2, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (bb, bank)
}

fn criterion_3() -> Line {
    let (bb, bank) = random_lm(3);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    let count = 100;
    for i in 0..count {
        let n = rng.random_range(1..=12);
        let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(RESERVED..16)).collect();
        let seq = LabeledSequence::single(i, tokens, rng.random_range(0..2));
        let net = WeightNet::constant(WEIGHT_NET_HIDDEN, rng.random_range(-3.0..3.0)).unwrap();
        let mut s = LmSession::new(&bb, Some(&bank));
        let v = record_sequence(&mut s, &seq, 2, true).unwrap();
        let values = s.tape.value(v.disc_ratio.unwrap()).data().to_vec();
        let lp = s.tape.value(v.logprobs).data().to_vec();
        let w = net.weights(&values).unwrap();
        let wgen_tape = record_weighted_gen(&mut s, v.logprobs, &w).unwrap();
        let wgen_tape = s.tape.scalar(wgen_tape);
        let plain = -lp.iter().sum::<f64>() / lp.len() as f64;
        worst = worst.max((wgen_tape - plain).abs());
        worst = worst.max((weighted_gen_loss(&lp, &w).unwrap() - gen_loss(&lp).unwrap()).abs());
    }
    line(3, worst <= EXACT_TOL, true, format!("constant weighting net on {count} sequences, max |L_w-gen - L_gen| {worst:.1e} <= {EXACT_TOL:e}"))
}

fn random_distribution(rng: &mut ChaCha8Rng, l: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.01..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

fn criterion_4() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_ens: f64 = 0.0;
    for _ in 0..50 {
        let l = rng.random_range(2..6);
        let p = random_distribution(&mut rng, l);
        let gamma = rng.random_range(0.5..0.99);
        let mut st = EnsembleState::new(l);
        for _ in 0..100 {
            st.update(&p, gamma);
            worst_ens = worst_ens.max(st.z_bar.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    let mut worst_reg: f64 = 0.0;
    for _ in 0..200 {
        let l = rng.random_range(2..6);
        let p = random_distribution(&mut rng, l);
        let z = random_distribution(&mut rng, l);
        let q = smoothed_targets(rng.random_range(0..l), l, 0.15).unwrap();
        let lambda = rng.random_range(0.1..30.0);
        let kl: f64 = z.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum();
        let reg = class_loss(&p, &q, &z, lambda).unwrap().value - class_loss(&p, &q, &z, 0.0).unwrap().value;
        worst_reg = worst_reg.max((reg - lambda * kl).abs());
    }
    line(
        4,
        worst_ens <= EXACT_TOL && worst_reg <= EXACT_TOL,
        true,
        format!("constant prediction, t<=100: max |z_bar - p| {worst_ens:.1e}; regularizer vs lambda*KL(z_bar||p): {worst_reg:.1e}; tol {EXACT_TOL:e}"),
    )
}

/// Every retained row of every written trace has `z̄_label > δ`, every dropped row does not,
/// plus the filter on random ensemble states.
fn criterion_5(out: &Path, seeds: &[u64], vocab: &Vocabulary) -> Line {
    let mut rows = 0usize;
    let mut retained = 0usize;
    let mut violations = 0usize;
    for seed in seeds {
        let dir = out.join(format!("seed{seed}")).join("w-gen");
        let labels: HashMap<u64, usize> =
            load_dataset(&dir.join("generated.jsonl"), vocab, 2).unwrap().iter().map(|s| (s.id, s.label)).collect();
        let text = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
        for row in text.lines().skip(1) {
            let f: Vec<&str> = row.split(',').collect();
            let id: u64 = f[0].parse().unwrap();
            let z: f64 = f[2 + labels[&id]].parse().unwrap();
            let kept = f[f.len() - 1] == "true";
            rows += 1;
            retained += kept as usize;
            if kept != (z > DELTA) {
                violations += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let states: Vec<EnsembleState> = (0..n)
            .map(|_| {
                let mut s = EnsembleState::new(3);
                for _ in 0..rng.random_range(1..5) {
                    let p = random_distribution(&mut rng, 3);
                    s.update(&p, 0.9);
                }
                s
            })
            .collect();
        let kept = filter_retained(&labels, &states, DELTA);
        for (i, s) in states.iter().enumerate() {
            if kept.contains(&i) != (s.z_bar[labels[i]] > DELTA) {
                violations += 1;
            }
        }
    }
    line(
        5,
        violations == 0 && rows > 0,
        true,
        format!("{retained} retained of {rows} post-refresh trace rows, plus 200 random filters: {violations} rows break z_bar_label > {DELTA} <=> retained"),
    )
}

fn criterion_6() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_soft, mut worst_norm, mut worst_formula): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..200 {
        let v = rng.random_range(2..30);
        let z: Vec<f64> = (0..v).map(|_| rng.random_range(-8.0..8.0)).collect();
        let generated: Vec<usize> = (0..rng.random_range(0..6)).map(|_| rng.random_range(0..v)).collect();
        let tau = rng.random_range(0.05..3.0);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| ((x - m) / tau).exp()).collect();
        let total: f64 = e.iter().sum();
        let p = penalized_distribution(&z, &generated, tau, 1.0).unwrap();
        worst_soft = worst_soft.max(p.iter().zip(&e).map(|(a, b)| (a - b / total).abs()).fold(0.0, f64::max));

        let alpha = rng.random_range(1.0..3.0);
        let omega: Vec<f64> = (0..v).map(|i| if generated.contains(&i) { tau * alpha } else { tau }).collect();
        let s: Vec<f64> = z.iter().zip(&omega).map(|(x, w)| x / w).collect();
        let ms = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - ms).exp()).collect();
        let total: f64 = e.iter().sum();
        let p = penalized_distribution(&z, &generated, tau, alpha).unwrap();
        worst_norm = worst_norm.max((p.iter().sum::<f64>() - 1.0).abs());
        worst_formula = worst_formula.max(p.iter().zip(&e).map(|(a, b)| (a - b / total).abs()).fold(0.0, f64::max));
    }
    let (bb, bank) = random_lm(6);
    let greedy = GenerationConfig { temperature: 0.0, max_new_tokens: 10, samples_per_label: 4, ..GenerationConfig::default() };
    let reference: Vec<Vec<usize>> =
        (0..2).map(|l| sample_sequence(&bb, &bank, l, &greedy, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap()).collect();
    let mut invariant = (1..20u64).all(|seed| {
        (0..2).all(|l| sample_sequence(&bb, &bank, l, &greedy, &mut ChaCha8Rng::seed_from_u64(seed), None).unwrap() == reference[l])
    });
    let a = synthesize_dataset(&bb, &bank, &[greedy.clone(), greedy.clone()], &[], 1).unwrap();
    let b = synthesize_dataset(&bb, &bank, &[greedy.clone(), greedy.clone()], &[], 99).unwrap();
    invariant &= a == b;
    let pass = worst_soft <= EXACT_TOL && worst_norm <= EXACT_TOL && worst_formula <= EXACT_TOL && invariant;
    line(
        6,
        pass,
        true,
        format!(
            "alpha_rep=1 vs temperature softmax {worst_soft:.1e}; sum-to-one {worst_norm:.1e}; penalized formula {worst_formula:.1e} (tol {EXACT_TOL:e}); greedy output identical over 20 seeds: {invariant}"
        ),
    )
}

fn mean_of(rep: &fewgen::Report, objective: &str, f: impl Fn(&fewgen::report::Aggregate) -> f64) -> f64 {
    f(rep.aggregates.iter().find(|a| a.objective == objective).unwrap())
}

fn criterion_7(rep: &fewgen::Report, secs: f64) -> Line {
    let acc = |o| mean_of(rep, o, |a| a.generated_accuracy.as_ref().unwrap().mean);
    let ppl = |o| mean_of(rep, o, |a| a.perplexity.as_ref().unwrap().mean);
    let (aw, ag, agd) = (acc("w-gen"), acc("gen"), acc("gen+disc"));
    let (pw, pg, pgd) = (ppl("w-gen"), ppl("gen"), ppl("gen+disc"));
    let checks = [aw >= ag, aw >= agd, pw <= pgd, secs < BUDGET_SECS];
    line(
        7,
        checks.iter().all(|c| *c),
        false,
        format!(
            "{} seeds, mean generated accuracy w-gen {aw:.4} gen {ag:.4} gen+disc {agd:.4} (w>=gen {}, w>=gen+disc {}); mean test ppl w-gen {pw:.4} gen {pg:.4} gen+disc {pgd:.4} (w<=gen+disc {}); pipeline {secs:.0}s < {BUDGET_SECS:.0}s {}",
            rep.seeds.len(),
            checks[0],
            checks[1],
            checks[2],
            checks[3]
        ),
    )
}

fn criterion_8(rep: &fewgen::Report) -> Line {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for s in &rep.seeds {
        let s1 = s.stage1.as_ref().unwrap().test.accuracy;
        let o = s.objectives.iter().find(|o| o.objective == "w-gen").unwrap();
        let s2 = o.classifier.as_ref().unwrap().test.accuracy;
        wins += (s2 > s1) as usize;
        pairs.push(format!("{:.4}->{:.4}", s1, s2));
    }
    line(8, wins >= 4, false, format!("stage 2 beats stage 1 on test accuracy in {wins}/{} seeds (need 4): {}", rep.seeds.len(), pairs.join(" ")))
}

fn criterion_9(out: &Path, cfg: &ExperimentConfig) -> Line {
    let per_epoch = (cfg.experiment.shots * cfg.num_labels()).div_ceil(cfg.tuning.batch_size);
    let mut ok = 0;
    let mut pairs = Vec::new();
    for seed in &cfg.experiment.seeds {
        let text = std::fs::read_to_string(out.join(format!("seed{seed}/w-gen/losses.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,L_w-gen,L_gen,L_disc"));
        let wgen: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(wgen.len(), per_epoch * cfg.tuning.epochs);
        let first = wgen[..per_epoch].iter().sum::<f64>() / per_epoch as f64;
        let last = wgen[wgen.len() - per_epoch..].iter().sum::<f64>() / per_epoch as f64;
        ok += (last <= first) as usize;
        pairs.push(format!("{first:.4}->{last:.4}"));
    }
    line(
        9,
        ok >= 4,
        false,
        format!("final-epoch mean L_w-gen <= first-epoch mean in {ok}/{} seeds (need 4), read back from losses.csv: {}", cfg.experiment.seeds.len(), pairs.join(" ")),
    )
}

const SMALL: &str = r#"
[experiment]
seeds = [0, 1]
shots = 4
dev_per_label = 4
test_per_label = 20

[model]
d_model = 16
n_layers = 1
n_heads = 2
prefix_len = 4
max_len = 32

[pretrain]
corpus_size = 300
steps = 60

[tuning]
epochs = 3

[generation]
samples_per_label = 20
max_new_tokens = 12

[classifier]
steps = 40
period = 10
stage2_batch = 4
stage1_steps = 10
stage1_lrs = [1e-3]
stage1_batches = [4]
"#;

fn without_timestamp(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().filter(|l| !l.trim_start().starts_with("\"timestamp\":")).collect::<Vec<_>>().join("\n")
}

fn files(dir: &Path, base: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files(&p, base, out);
        } else {
            out.push(p.strip_prefix(base).unwrap().to_path_buf());
        }
    }
}

fn criterion_10(tmp: &Path) -> Line {
    let cfg = tmp.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.join(run);
        let o = Command::new(env!("CARGO_BIN_EXE_fewgen"))
            .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        dirs.push(out);
    }
    let same_report = without_timestamp(&dirs[0].join("report.json")) == without_timestamp(&dirs[1].join("report.json"));
    let mut listed = Vec::new();
    files(&dirs[0], &dirs[0], &mut listed);
    listed.sort();
    let differing: Vec<String> = listed
        .iter()
        .filter(|f| f.as_os_str() != "report.json")
        .filter(|f| std::fs::read(dirs[0].join(f)).unwrap() != std::fs::read(dirs[1].join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect();
    line(
        10,
        same_report && differing.is_empty(),
        true,
        format!(
            "two runs of the same config: report.json identical without timestamp {same_report}; {} other artifacts, differing {:?}",
            listed.len() - 1,
            differing
        ),
    )
}

fn main() {
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_6()];

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("default");
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.classify = vec!["w-gen".into()];
    cfg.experiment.trace = true;
    let start = Instant::now();
    let rep = run_pipeline(&cfg, Some(&out)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(rep.failed_seeds().is_empty(), "{:?}", rep.failed_seeds());
    std::fs::write(out.join("report.json"), rep.to_json()).unwrap();

    lines.push(criterion_5(&out, &cfg.experiment.seeds, &cfg.vocabulary()));
    lines.push(criterion_7(&rep, secs));
    lines.push(criterion_8(&rep));
    lines.push(criterion_9(&out, &cfg));
    lines.push(criterion_10(tmp.path()));

    lines.sort_by_key(|l| l.id);
    for l in &lines {
        let tag = if l.pass { "PASS" } else { "FAIL" };
        let kind = if l.gating { "" } else { " (reported)" };
        println!("criterion {:>2} {tag}{kind}: {}", l.id, l.text);
    }
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("acceptance: {passed}/{} criteria pass", lines.len());
    let gating: Vec<usize> = lines.iter().filter(|l| l.gating && !l.pass).map(|l| l.id).collect();
    if !gating.is_empty() {
        eprintln!("failing property criteria: {gating:?}");
        std::process::exit(1);
    }
}
