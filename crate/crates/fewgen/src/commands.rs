//! Subcommand implementations. Single-stage commands chain through the output
//! directory: each reads what the previous stage wrote there.

use std::path::{Path, PathBuf};

use fewgen_core::gradcheck;
use fewgen_core::task::{bayes_accuracy, dataset_perplexity, oracle_label_accuracy};
use fewgen_core::tuning::{token_weights, Objective};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, StageExt};
use crate::io;
use crate::pipeline::{self, Splits, TaskContext};
use crate::report::{MetricsReport, PretrainReport, Stage1Report, Stage2Report};

pub struct Options {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub objective: Option<Objective>,
    pub out: PathBuf,
    pub tol: Option<f64>,
}

impl Options {
    pub fn load_config(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.experiment.seeds = vec![s];
        }
        if let Some(o) = self.objective {
            cfg.experiment.objectives = vec![o.name().to_string()];
            cfg.experiment.classify.retain(|c| c == o.name());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        cfg.experiment.seeds[0]
    }

    fn objective(&self, cfg: &ExperimentConfig) -> Result<Objective, CliError> {
        Ok(cfg.objectives()?[0])
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn need(path: &Path, producer: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} not found; run `{producer}` with the same --out first", path.display())))
    }
}

fn load_splits(opts: &Options, ctx: &TaskContext, cfg: &ExperimentConfig) -> Result<Splits, CliError> {
    let l = cfg.num_labels();
    let read = |name: &str| -> Result<_, CliError> {
        let p = opts.path(name);
        need(&p, "synth-task")?;
        io::load_dataset(&p, &ctx.vocab, l)
    };
    Ok(Splits { train: read("train.jsonl")?, dev: read("dev.jsonl")?, test: read("test.jsonl")? })
}

fn load_backbone(opts: &Options, ctx: &TaskContext) -> Result<fewgen_core::lm::Backbone, CliError> {
    let p = opts.path("backbone.ckpt");
    need(&p, "pretrain")?;
    let (bb, vocab) = io::load_backbone(&p)?;
    if vocab != ctx.vocab {
        return Err(CliError::Config(format!("{} was trained with a different vocabulary", p.display())));
    }
    Ok(bb)
}

#[derive(Serialize)]
struct TaskSummary {
    seed: u64,
    bayes_accuracy: f64,
    oracle_test_accuracy: f64,
    train: usize,
    dev: usize,
    test: usize,
    disc_tokens: Vec<Vec<String>>,
}

pub fn synth_task(opts: &Options) -> Result<(), CliError> {
    let cfg = opts.load_config()?;
    let ctx = TaskContext::new(&cfg)?;
    let seed = opts.seed(&cfg);
    let s = pipeline::splits(&cfg, &ctx, seed)?;
    io::write_dataset(&opts.path("train.jsonl"), &s.train, &ctx.vocab, "train")?;
    io::write_dataset(&opts.path("dev.jsonl"), &s.dev, &ctx.vocab, "dev")?;
    io::write_dataset(&opts.path("test.jsonl"), &s.test, &ctx.vocab, "test")?;
    let summary = TaskSummary {
        seed,
        bayes_accuracy: bayes_accuracy(&ctx.grammar),
        oracle_test_accuracy: oracle_label_accuracy(&s.test, &ctx.oracle).stage("synth-task")?,
        train: s.train.len(),
        dev: s.dev.len(),
        test: s.test.len(),
        disc_tokens: ctx
            .grammar
            .disc_tokens
            .iter()
            .map(|d| d.iter().map(|&t| ctx.vocab.token(t).unwrap_or("?").to_string()).collect())
            .collect(),
    };
    io::write_json(&opts.path("task.json"), &summary)?;
    println!(
        "task: {} train, {} dev, {} test; Bayes accuracy {:.4}, oracle test accuracy {:.4}",
        summary.train, summary.dev, summary.test, summary.bayes_accuracy, summary.oracle_test_accuracy
    );
    Ok(())
}

pub fn pretrain(opts: &Options) -> Result<(), CliError> {
    let cfg = opts.load_config()?;
    let ctx = TaskContext::new(&cfg)?;
    let corpus = pipeline::pretraining_corpus(&cfg, &ctx);
    let (bb, report): (_, PretrainReport) = pipeline::pretrain(&cfg, &ctx, &corpus)?;
    io::save_backbone(&opts.path("backbone.ckpt"), &bb, &ctx.vocab)?;
    io::write_json(&opts.path("pretrain.json"), &report)?;
    println!(
        "pretrain: held-out perplexity {:.4} (unigram {:.4})",
        report.heldout_perplexity, report.unigram_perplexity
    );
    Ok(())
}

#[derive(Serialize)]
struct TuneSummary {
    seed: u64,
    objective: String,
    steps: usize,
    first_epoch_wgen: f64,
    last_epoch_wgen: f64,
    clamped: bool,
}

pub fn tune_gen(opts: &Options) -> Result<(), CliError> {
    let cfg = opts.load_config()?;
    let ctx = TaskContext::new(&cfg)?;
    let bb = load_backbone(opts, &ctx)?;
    let s = load_splits(opts, &ctx, &cfg)?;
    let seed = opts.seed(&cfg);
    let objective = opts.objective(&cfg)?;
    let tuned = pipeline::tune(&cfg, &ctx, &bb, &s.train, objective, seed)?;
    let (first, last) = pipeline::epoch_means(&tuned.history, s.train.len().div_ceil(cfg.tuning.batch_size));
    let weights = token_weights(&bb, &tuned.prefixes, &tuned.weight_net, &pipeline::terminated(&s.train)).stage("tune-gen")?;
    let m = cfg.model_config();
    io::save_prefixes(&opts.path("prefixes.ckpt"), &tuned.prefixes, &m, &ctx.vocab)?;
    io::save_weight_net(&opts.path("weightnet.ckpt"), &tuned.weight_net, &m, &ctx.vocab)?;
    io::write_losses_csv(&opts.path("losses.csv"), &tuned.history)?;
    io::write_json(&opts.path("weights.json"), &io::weight_dumps(&weights, &ctx.vocab))?;
    let summary = TuneSummary {
        seed,
        objective: objective.name().into(),
        steps: tuned.history.len(),
        first_epoch_wgen: first,
        last_epoch_wgen: last,
        clamped: tuned.clamped,
    };
    io::write_json(&opts.path("tuning.json"), &summary)?;
    println!("tune-gen ({objective}): {} steps, L_w-gen {first:.4} -> {last:.4}", summary.steps);
    Ok(())
}

#[derive(Serialize)]
struct GenerateSummary {
    seed: u64,
    samples: usize,
    generated_accuracy: f64,
    test_perplexity: Option<f64>,
}

pub fn generate(opts: &Options) -> Result<(), CliError> {
    let cfg = opts.load_config()?;
    let ctx = TaskContext::new(&cfg)?;
    let bb = load_backbone(opts, &ctx)?;
    let pp = opts.path("prefixes.ckpt");
    need(&pp, "tune-gen")?;
    let bank = io::load_prefixes(&pp)?;
    let seed = opts.seed(&cfg);
    let corpus = pipeline::pretraining_corpus(&cfg, &ctx);
    let generated = pipeline::generate(&cfg, &bb, &bank, &corpus, seed)?;
    io::write_dataset(&opts.path("generated.jsonl"), &generated, &ctx.vocab, "generated")?;
    let test_path = opts.path("test.jsonl");
    let test_perplexity = if test_path.exists() {
        let test = io::load_dataset(&test_path, &ctx.vocab, cfg.num_labels())?;
        Some(dataset_perplexity(&bb, &bank, &pipeline::terminated(&test)).stage("generate")?)
    } else {
        None
    };
    let summary = GenerateSummary {
        seed,
        samples: generated.len(),
        generated_accuracy: oracle_label_accuracy(&generated, &ctx.oracle).stage("generate")?,
        test_perplexity,
    };
    io::write_json(&opts.path("generation.json"), &summary)?;
    println!("generate: {} samples, oracle accuracy {:.4}", summary.samples, summary.generated_accuracy);
    Ok(())
}

#[derive(Serialize)]
struct ClassifierSummary {
    seed: u64,
    stage1: Stage1Report,
    stage2: Stage2Report,
}

pub fn train_clf(opts: &Options) -> Result<(), CliError> {
    let cfg = opts.load_config()?;
    let ctx = TaskContext::new(&cfg)?;
    let bb = load_backbone(opts, &ctx)?;
    let s = load_splits(opts, &ctx, &cfg)?;
    let gp = opts.path("generated.jsonl");
    need(&gp, "generate")?;
    let generated = io::load_dataset(&gp, &ctx.vocab, cfg.num_labels())?;
    let seed = opts.seed(&cfg);
    let s1 = pipeline::stage1(&cfg, &bb, &s, seed)?;
    let s2 = pipeline::stage2(&cfg, &s1.classifier, &generated, seed)?;
    io::save_classifier(&opts.path("stage1.ckpt"), &s1.classifier, &ctx.vocab)?;
    io::save_classifier(&opts.path("classifier.ckpt"), &s2.classifier, &ctx.vocab)?;
    io::write_stage2_csv(&opts.path("stage2.csv"), &s2.history)?;
    if cfg.experiment.trace {
        io::write_trace_csv(&opts.path("trace.csv"), &s2.trace, cfg.num_labels())?;
    }
    let summary = ClassifierSummary {
        seed,
        stage1: Stage1Report::new(&s1, pipeline::evaluate(&s1.classifier, &s.test)?),
        stage2: Stage2Report::new(&s2, pipeline::evaluate(&s2.classifier, &s.test)?),
    };
    io::write_json(&opts.path("classifier.json"), &summary)?;
    println!(
        "train-clf: stage 1 test accuracy {:.4}, stage 2 test accuracy {:.4}",
        summary.stage1.test.accuracy, summary.stage2.test.accuracy
    );
    Ok(())
}

pub fn eval(opts: &Options) -> Result<(), CliError> {
    let cfg = opts.load_config()?;
    let ctx = TaskContext::new(&cfg)?;
    let cp = opts.path("classifier.ckpt");
    need(&cp, "train-clf")?;
    let (clf, _) = io::load_classifier(&cp)?;
    let tp = opts.path("test.jsonl");
    need(&tp, "synth-task")?;
    let test = io::load_dataset(&tp, &ctx.vocab, cfg.num_labels())?;
    let m: MetricsReport = pipeline::evaluate(&clf, &test)?;
    io::write_json(&opts.path("metrics.json"), &m)?;
    println!("eval: accuracy {:.4}, macro-F1 {:.4}, MCC {:.4}", m.accuracy, m.macro_f1, m.mcc);
    Ok(())
}

pub fn run(opts: &Options) -> Result<(), CliError> {
    let cfg = opts.load_config()?;
    let report = pipeline::run_pipeline(&cfg, Some(&opts.out))?;
    io::write_file(&opts.path("report.json"), report.to_json().as_bytes())?;
    for a in &report.aggregates {
        let f = |m: &Option<crate::report::MeanStd>| m.as_ref().map_or("n/a".to_string(), |m| format!("{:.4} ± {:.4}", m.mean, m.std));
        let clf = a.classifier.as_ref().map_or("n/a".to_string(), |c| format!("{:.4} ± {:.4}", c.accuracy.mean, c.accuracy.std));
        println!(
            "{:>9}: generated accuracy {}, perplexity {}, classifier accuracy {clf}",
            a.objective,
            f(&a.generated_accuracy),
            f(&a.perplexity)
        );
    }
    let failed = report.failed_seeds();
    if !failed.is_empty() {
        for s in &report.seeds {
            if let Some(e) = &s.error {
                eprintln!("seed {}: {e}", s.seed);
            }
        }
        return Err(CliError::Failed(format!("{} of {} seeds failed", failed.len(), report.seeds.len())));
    }
    Ok(())
}

pub fn gradcheck(opts: &Options) -> Result<(), CliError> {
    if let Some(t) = opts.tol {
        if !(t > 0.0) {
            return Err(CliError::Config(format!("--tol must be positive, got {t}")));
        }
    }
    let reports = gradcheck::run_all(opts.tol).stage("gradcheck")?;
    let mut ok = true;
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        ok &= r.passed();
        println!("{status} {:<16} instances {:>3}  worst rel err {:.3e}  tol {:.1e}", r.name, r.instances, r.worst, r.tolerance);
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Failed("gradient check failed".into()))
    }
}
