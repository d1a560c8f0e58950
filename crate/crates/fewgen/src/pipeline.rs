//! End-to-end experiment: pretrain once, then per seed build the splits, tune a
//! generator per objective, synthesize data, and train and evaluate classifiers.

use std::path::Path;

use fewgen_core::classifier::{evaluate_classifier, train_stage1, train_stage2, Classifier, Stage1Outcome, Stage2Outcome};
use fewgen_core::lm::{
    backbone_perplexity, pretrain_backbone, unigram_perplexity, Backbone, LabeledSequence, PrefixBank, Vocabulary, SEP,
};
use fewgen_core::sampler::synthesize_dataset;
use fewgen_core::task::{bayes_accuracy, dataset_perplexity, make_synthetic_task, oracle_label_accuracy, sample_corpus, BayesOracle, Grammar, TaskMode};
use fewgen_core::tuning::{token_weights, tune_generators, Objective, TuningOutcome, WeightNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, PrefixInit};
use crate::error::{CliError, StageExt};
use crate::io;
use crate::report::{
    aggregate, MetricsReport, ObjectiveReport, PretrainReport, Report, SeedReport, Stage1Report, Stage2Report, TuningReport,
};

/// Offset between the pretraining corpus seed and its held-out sample.
const HELDOUT_SEED_OFFSET: u64 = 0x9e37;

/// The grammar, its oracle and the vocabulary shared by every stage.
pub struct TaskContext {
    pub grammar: Grammar,
    pub oracle: BayesOracle,
    pub vocab: Vocabulary,
}

impl TaskContext {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let grammar = Grammar::from_spec(&cfg.task_spec()).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self { oracle: BayesOracle::new(grammar.clone()), grammar, vocab: cfg.vocabulary() })
    }
}

/// Turns raw corpus token lists into sequences, splitting pairs at the separator.
pub fn corpus_sequences(corpus: &[Vec<usize>]) -> Vec<LabeledSequence> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, t)| match t.iter().position(|&x| x == SEP) {
            Some(p) => LabeledSequence::pair(i as u64, &t[..p], &t[p + 1..], 0),
            None => LabeledSequence::single(i as u64, t.clone(), 0),
        })
        .collect()
}

/// Label-independent first sequences used to condition pair generation.
pub fn conditioning_corpus(corpus: &[Vec<usize>]) -> Vec<Vec<usize>> {
    corpus.iter().map(|t| t.iter().position(|&x| x == SEP).map_or(t.clone(), |p| t[..p].to_vec())).collect()
}

pub fn pretraining_corpus(cfg: &ExperimentConfig, ctx: &TaskContext) -> Vec<Vec<usize>> {
    sample_corpus(&ctx.grammar, cfg.pretrain.corpus_size, cfg.pretrain.corpus_seed)
}

/// Pretrains the backbone on the unlabeled corpus and scores it on a held-out sample.
pub fn pretrain(cfg: &ExperimentConfig, ctx: &TaskContext, corpus: &[Vec<usize>]) -> Result<(Backbone, PretrainReport), CliError> {
    let seqs = corpus_sequences(corpus);
    let backbone = pretrain_backbone(&seqs, cfg.model_config(), &cfg.pretrain_config(), cfg.pretrain.seed).stage("pretrain")?;
    let heldout_size = (cfg.pretrain.corpus_size / 10).max(1);
    let heldout = corpus_sequences(&sample_corpus(&ctx.grammar, heldout_size, cfg.pretrain.corpus_seed ^ HELDOUT_SEED_OFFSET));
    let terminated: Vec<LabeledSequence> = heldout.iter().map(|s| s.terminated()).collect();
    let m = cfg.model_config();
    let report = PretrainReport {
        corpus_size: corpus.len(),
        heldout_size,
        heldout_perplexity: backbone_perplexity(&backbone, &terminated).stage("pretrain")?,
        unigram_perplexity: unigram_perplexity(&terminated, m.vocab_size, m.max_len).stage("pretrain")?,
    };
    Ok((backbone, report))
}

pub struct Splits {
    pub train: Vec<LabeledSequence>,
    pub dev: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
}

/// Few-shot, dev and test splits for one seed: read from `[data]` or drawn from the grammar.
pub fn splits(cfg: &ExperimentConfig, ctx: &TaskContext, seed: u64) -> Result<Splits, CliError> {
    if let Some(d) = &cfg.data {
        let l = cfg.num_labels();
        let out = Splits {
            train: io::load_dataset(&d.train, &ctx.vocab, l)?,
            dev: io::load_dataset(&d.dev, &ctx.vocab, l)?,
            test: io::load_dataset(&d.test, &ctx.vocab, l)?,
        };
        if out.dev.len() != out.train.len() {
            return Err(CliError::Config(format!(
                "dev set has {} records but the training set has {}",
                out.dev.len(),
                out.train.len()
            )));
        }
        return Ok(out);
    }
    let e = &cfg.experiment;
    let t = make_synthetic_task(&cfg.task_spec(), e.shots, e.dev_per_label, e.test_per_label, 0, seed).stage("synth-task")?;
    Ok(Splits { train: t.train, dev: t.dev, test: t.test })
}

/// Fresh prefixes and weighting network for `seed`; identical across objectives.
pub fn initial_generators(cfg: &ExperimentConfig, ctx: &TaskContext, backbone: &Backbone, seed: u64) -> Result<(PrefixBank, WeightNet), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let infix = cfg.task_spec().mode == TaskMode::Pair;
    let bank = match cfg.tuning.init {
        PrefixInit::Phrase => PrefixBank::from_phrases(backbone, &ctx.grammar.disc_tokens, infix, &mut rng),
        PrefixInit::Random => PrefixBank::random(backbone, cfg.num_labels(), infix, &mut rng),
    }
    .stage("tune-gen")?;
    let net = WeightNet::init(cfg.tuning.weight_hidden, &mut rng).stage("tune-gen")?;
    Ok((bank, net))
}

pub fn terminated(data: &[LabeledSequence]) -> Vec<LabeledSequence> {
    data.iter().map(|s| s.terminated()).collect()
}

pub fn tune(
    cfg: &ExperimentConfig,
    ctx: &TaskContext,
    backbone: &Backbone,
    train: &[LabeledSequence],
    objective: Objective,
    seed: u64,
) -> Result<TuningOutcome, CliError> {
    let (bank, net) = initial_generators(cfg, ctx, backbone, seed)?;
    tune_generators(backbone, &terminated(train), bank, net, &cfg.tuning_config(objective), seed).stage("tune-gen")
}

pub fn generate(
    cfg: &ExperimentConfig,
    backbone: &Backbone,
    prefixes: &PrefixBank,
    corpus: &[Vec<usize>],
    seed: u64,
) -> Result<Vec<LabeledSequence>, CliError> {
    let conditioning = conditioning_corpus(corpus);
    synthesize_dataset(backbone, prefixes, &cfg.generation_configs()?, &conditioning, seed).stage("generate")
}

/// Mean `L_w-gen` over the first and the last epoch of a tuning history.
pub fn epoch_means(history: &[fewgen_core::tuning::StepLosses], steps_per_epoch: usize) -> (f64, f64) {
    if history.is_empty() || steps_per_epoch == 0 {
        return (f64::NAN, f64::NAN);
    }
    let k = steps_per_epoch.min(history.len());
    let mean = |h: &[fewgen_core::tuning::StepLosses]| h.iter().map(|x| x.wgen).sum::<f64>() / h.len() as f64;
    (mean(&history[..k]), mean(&history[history.len() - k..]))
}

pub fn stage1(cfg: &ExperimentConfig, backbone: &Backbone, s: &Splits, seed: u64) -> Result<Stage1Outcome, CliError> {
    train_stage1(backbone, &s.train, &s.dev, cfg.num_labels(), &cfg.classifier_config(), seed).stage("train-clf")
}

pub fn stage2(cfg: &ExperimentConfig, stage1: &Classifier, generated: &[LabeledSequence], seed: u64) -> Result<Stage2Outcome, CliError> {
    train_stage2(stage1, generated, &cfg.classifier_config(), seed.wrapping_add(1)).stage("train-clf")
}

pub fn evaluate(clf: &Classifier, data: &[LabeledSequence]) -> Result<MetricsReport, CliError> {
    Ok(MetricsReport::from(&evaluate_classifier(clf, data).stage("eval")?))
}

fn objective_dir(out: &Path, seed: u64, objective: Objective) -> std::path::PathBuf {
    out.join(format!("seed{seed}")).join(objective.name())
}

#[allow(clippy::too_many_arguments)]
fn run_objective(
    cfg: &ExperimentConfig,
    ctx: &TaskContext,
    backbone: &Backbone,
    corpus: &[Vec<usize>],
    s: &Splits,
    stage1: Option<&Stage1Outcome>,
    objective: Objective,
    seed: u64,
    out: Option<&Path>,
) -> Result<ObjectiveReport, CliError> {
    let tuned = tune(cfg, ctx, backbone, &s.train, objective, seed)?;
    let steps_per_epoch = s.train.len().div_ceil(cfg.tuning.batch_size);
    let (first, last) = epoch_means(&tuned.history, steps_per_epoch);
    let weights = if objective == Objective::WeightedGen {
        io::weight_dumps(&token_weights(backbone, &tuned.prefixes, &tuned.weight_net, &terminated(&s.train)).stage("tune-gen")?, &ctx.vocab)
    } else {
        Vec::new()
    };
    let generated = generate(cfg, backbone, &tuned.prefixes, corpus, seed)?;
    let generated_accuracy = oracle_label_accuracy(&generated, &ctx.oracle).stage("generate")?;
    let perplexity = dataset_perplexity(backbone, &tuned.prefixes, &terminated(&s.test)).stage("eval")?;
    let classifier = match stage1 {
        Some(s1) => {
            let s2 = stage2(cfg, &s1.classifier, &generated, seed)?;
            let test = evaluate(&s2.classifier, &s.test)?;
            if let Some(dir) = out {
                let dir = objective_dir(dir, seed, objective);
                io::write_stage2_csv(&dir.join("stage2.csv"), &s2.history)?;
                if cfg.experiment.trace {
                    io::write_trace_csv(&dir.join("trace.csv"), &s2.trace, cfg.num_labels())?;
                }
            }
            Some(Stage2Report::new(&s2, test))
        }
        None => None,
    };
    if let Some(dir) = out {
        let dir = objective_dir(dir, seed, objective);
        io::write_losses_csv(&dir.join("losses.csv"), &tuned.history)?;
        io::write_json(&dir.join("weights.json"), &weights)?;
        io::write_dataset(&dir.join("generated.jsonl"), &generated, &ctx.vocab, "generated")?;
    }
    Ok(ObjectiveReport {
        objective: objective.name().to_string(),
        generated_accuracy,
        perplexity,
        tuning: TuningReport::new(&tuned, first, last),
        weights,
        classifier,
    })
}

fn run_seed(
    cfg: &ExperimentConfig,
    ctx: &TaskContext,
    backbone: &Backbone,
    corpus: &[Vec<usize>],
    seed: u64,
    out: Option<&Path>,
) -> Result<SeedReport, CliError> {
    let s = splits(cfg, ctx, seed)?;
    let classify = cfg.classified_objectives()?;
    let s1 = if classify.is_empty() { None } else { Some(stage1(cfg, backbone, &s, seed)?) };
    let stage1_report = match &s1 {
        Some(o) => Some(Stage1Report::new(o, evaluate(&o.classifier, &s.test)?)),
        None => None,
    };
    let mut objectives = Vec::new();
    for objective in cfg.objectives()? {
        let with_clf = if classify.contains(&objective) { s1.as_ref() } else { None };
        objectives.push(run_objective(cfg, ctx, backbone, corpus, &s, with_clf, objective, seed, out)?);
    }
    Ok(SeedReport { seed, error: None, stage1: stage1_report, objectives })
}

/// Runs every seed. A failing seed is recorded with its error and the others continue.
/// With `out` set, per-seed artifacts are written under `out/seed{n}/{objective}/`.
pub fn run_pipeline(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Report, CliError> {
    cfg.validate()?;
    let ctx = TaskContext::new(cfg)?;
    let corpus = pretraining_corpus(cfg, &ctx);
    let (backbone, pretrain_report) = pretrain(cfg, &ctx, &corpus)?;
    let seeds: Vec<SeedReport> = cfg
        .experiment
        .seeds
        .iter()
        .map(|&seed| {
            run_seed(cfg, &ctx, &backbone, &corpus, seed, out).unwrap_or_else(|e| SeedReport {
                seed,
                error: Some(e.to_string()),
                stage1: None,
                objectives: Vec::new(),
            })
        })
        .collect();
    let (aggregates, stage1_aggregate) = aggregate(&seeds, &cfg.objectives()?);
    Ok(Report::new(cfg.clone(), pretrain_report, bayes_accuracy(&ctx.grammar), seeds, aggregates, stage1_aggregate))
}
