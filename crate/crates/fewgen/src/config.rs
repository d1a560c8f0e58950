//! Experiment configuration read from a TOML file. Every field has a default,
//! and the fully resolved configuration is echoed into each report.

use std::path::{Path, PathBuf};

use fewgen_core::classifier::ClassifierConfig;
use fewgen_core::lm::{ModelConfig, PretrainConfig, Vocabulary};
use fewgen_core::sampler::{GenerationConfig, Mode, StartPolicy};
use fewgen_core::task::{SyntheticTaskSpec, TaskMode};
use fewgen_core::tuning::{Objective, TuningConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub task: TaskSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub tuning: TuningSection,
    pub generation: GenerationSection,
    pub classifier: ClassifierSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentSection::default(),
            task: TaskSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            tuning: TuningSection::default(),
            generation: GenerationSection::default(),
            classifier: ClassifierSection::default(),
            data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// One pipeline run per seed; a seed fixes the splits, the initializations and the sampling.
    pub seeds: Vec<u64>,
    /// Training examples per label (K).
    pub shots: usize,
    /// Dev examples per label; must equal `shots`.
    pub dev_per_label: usize,
    pub test_per_label: usize,
    /// Generator objectives compared in a run.
    pub objectives: Vec<String>,
    /// Objectives whose generated data also trains a classifier.
    pub classify: Vec<String>,
    /// Write the per-sample ensemble trace during stage 2.
    pub trace: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let all: Vec<String> = Objective::ALL.iter().map(|o| o.name().to_string()).collect();
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            shots: 16,
            dev_per_label: 16,
            test_per_label: 200,
            objectives: all.clone(),
            classify: all,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskModeName {
    Single,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub vocab_size: usize,
    pub num_labels: usize,
    pub template_size: usize,
    pub successors: usize,
    pub disc_size: usize,
    pub insertion: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
    pub mode: TaskModeName,
    /// Seed of the grammar tables.
    pub seed: u64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let s = SyntheticTaskSpec::default();
        Self {
            vocab_size: s.vocab_size,
            num_labels: s.num_labels,
            template_size: s.template_size,
            successors: s.successors,
            disc_size: s.disc_size,
            insertion: s.insertion,
            min_len: s.min_len,
            max_len: s.max_len,
            mode: match s.mode {
                TaskMode::Single => TaskModeName::Single,
                TaskMode::Pair => TaskModeName::Pair,
            },
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub prefix_len: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from(&ModelConfig::default())
    }
}

impl From<&ModelConfig> for ModelSection {
    fn from(m: &ModelConfig) -> Self {
        Self {
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            prefix_len: m.prefix_len,
            max_len: m.max_len,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            prefix_len: self.prefix_len,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self { corpus_size: 2000, corpus_seed: 1, steps: p.steps, batch_size: p.batch_size, lr: p.lr, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixInit {
    /// Backbone keys/values of each label's discriminative tokens.
    Phrase,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSection {
    pub lookahead_lr: f64,
    pub weight_lr: f64,
    pub prefix_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mu: f64,
    pub weight_hidden: usize,
    pub init: PrefixInit,
}

impl Default for TuningSection {
    fn default() -> Self {
        // Reference step sizes scaled by 20 for the small backbone.
        let t = TuningConfig::default();
        Self {
            lookahead_lr: 0.4,
            weight_lr: 0.2,
            prefix_lr: 0.1,
            batch_size: t.batch_size,
            epochs: t.epochs,
            mu: t.mu,
            weight_hidden: fewgen_core::tuning::WEIGHT_NET_HIDDEN,
            init: PrefixInit::Phrase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelGeneration {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetition_penalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub samples_per_label: usize,
    /// Token names; when non-empty each sample starts with one of them.
    pub start_tokens: Vec<String>,
    /// Pair mode only: labels whose second sequence tends to reuse the first one's tokens.
    pub favors_overlap: Vec<bool>,
    /// Per-label overrides, indexed by label.
    pub labels: Vec<LabelGeneration>,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            temperature: g.temperature,
            repetition_penalty: g.repetition_penalty,
            top_k: g.top_k,
            max_new_tokens: g.max_new_tokens,
            samples_per_label: g.samples_per_label,
            start_tokens: Vec::new(),
            favors_overlap: vec![true, false],
            labels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub epsilon: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub delta: f64,
    pub period: usize,
    pub steps: usize,
    pub stage2_lr: f64,
    pub stage2_batch: usize,
    pub stage1_lrs: Vec<f64>,
    pub stage1_batches: Vec<usize>,
    pub stage1_steps: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        // Stage-2 step size raised for the small classifier.
        let c = ClassifierConfig::default();
        Self {
            epsilon: c.epsilon,
            gamma: c.gamma,
            lambda: c.lambda,
            delta: c.delta,
            period: c.period,
            steps: c.steps,
            stage2_lr: 3e-3,
            stage2_batch: c.stage2_batch,
            stage1_lrs: c.stage1_lrs,
            stage1_batches: c.stage1_batches,
            stage1_steps: c.stage1_steps,
        }
    }
}

/// Labeled splits read from disk instead of drawn from the grammar. The grammar in
/// `[task]` still supplies the oracle and the pretraining corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl ExperimentConfig {
    /// Reads and validates a config file. Relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(data), Some(dir)) = (cfg.data.as_mut(), path.parent()) {
            for p in [&mut data.train, &mut data.dev, &mut data.test] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(config_err("experiment.seeds must not be empty"));
        }
        if e.shots == 0 {
            return Err(config_err("experiment.shots must be at least 1"));
        }
        if e.dev_per_label != e.shots {
            return Err(config_err(format!(
                "experiment.dev_per_label ({}) must equal experiment.shots ({})",
                e.dev_per_label, e.shots
            )));
        }
        if e.test_per_label == 0 {
            return Err(config_err("experiment.test_per_label must be at least 1"));
        }
        let objectives = self.objectives()?;
        if objectives.is_empty() {
            return Err(config_err("experiment.objectives must not be empty"));
        }
        for o in self.classified_objectives()? {
            if !objectives.contains(&o) {
                return Err(config_err(format!("experiment.classify lists `{o}`, which is not in experiment.objectives")));
            }
        }
        let spec = self.task_spec();
        spec.validate().map_err(config_err)?;
        let model = self.model_config();
        model.validate().map_err(config_err)?;
        if model.vocab_size != spec.vocab_size {
            return Err(config_err(format!(
                "model.vocab_size ({}) must equal task.vocab_size ({})",
                model.vocab_size, spec.vocab_size
            )));
        }
        let longest = match spec.mode {
            TaskMode::Single => spec.max_len,
            TaskMode::Pair => 2 * spec.max_len + 1,
        };
        if longest + 1 > model.max_len {
            return Err(config_err(format!("model.max_len ({}) is too short for task sequences of {longest} tokens", model.max_len)));
        }
        if self.pretrain.corpus_size == 0 || self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(config_err("pretrain needs a non-empty corpus, a positive batch size and a positive lr"));
        }
        self.tuning_config(Objective::WeightedGen).validate().map_err(config_err)?;
        if self.tuning.weight_hidden == 0 {
            return Err(config_err("tuning.weight_hidden must be positive"));
        }
        for g in self.generation_configs()? {
            g.validate(spec.vocab_size).map_err(config_err)?;
        }
        if self.generation.labels.len() > spec.num_labels {
            return Err(config_err("generation.labels has more entries than there are labels"));
        }
        self.classifier_config().validate().map_err(config_err)?;
        Ok(())
    }

    pub fn objectives(&self) -> Result<Vec<Objective>, CliError> {
        self.experiment.objectives.iter().map(|s| s.parse().map_err(config_err)).collect()
    }

    pub fn classified_objectives(&self) -> Result<Vec<Objective>, CliError> {
        self.experiment.classify.iter().map(|s| s.parse().map_err(config_err)).collect()
    }

    pub fn num_labels(&self) -> usize {
        self.task.num_labels
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::synthetic(self.task.vocab_size).expect("validated vocabulary size")
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        let t = &self.task;
        SyntheticTaskSpec {
            vocab_size: t.vocab_size,
            num_labels: t.num_labels,
            template_size: t.template_size,
            successors: t.successors,
            disc_size: t.disc_size,
            insertion: t.insertion.clone(),
            min_len: t.min_len,
            max_len: t.max_len,
            mode: match t.mode {
                TaskModeName::Single => TaskMode::Single,
                TaskModeName::Pair => TaskMode::Pair,
            },
            seed: t.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_config()
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig { steps: self.pretrain.steps, batch_size: self.pretrain.batch_size, lr: self.pretrain.lr }
    }

    pub fn tuning_config(&self, objective: Objective) -> TuningConfig {
        let t = &self.tuning;
        TuningConfig {
            objective,
            lookahead_lr: t.lookahead_lr,
            weight_lr: t.weight_lr,
            prefix_lr: t.prefix_lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            mu: t.mu,
        }
    }

    /// One sampling configuration per label.
    pub fn generation_configs(&self) -> Result<Vec<GenerationConfig>, CliError> {
        let g = &self.generation;
        let vocab = self.vocabulary();
        let start: Vec<usize> = g
            .start_tokens
            .iter()
            .map(|name| vocab.lookup(name).ok_or_else(|| config_err(format!("unknown start token `{name}`"))))
            .collect::<Result<_, _>>()?;
        let pair = self.task.mode == TaskModeName::Pair;
        Ok((0..self.task.num_labels)
            .map(|l| {
                let mut c = if pair {
                    GenerationConfig::pair_default(g.favors_overlap.get(l).copied().unwrap_or(false))
                } else {
                    GenerationConfig {
                        temperature: g.temperature,
                        repetition_penalty: g.repetition_penalty,
                        top_k: g.top_k,
                        mode: Mode::Single,
                        ..GenerationConfig::default()
                    }
                };
                c.max_new_tokens = g.max_new_tokens;
                c.samples_per_label = g.samples_per_label;
                c.start = if start.is_empty() { StartPolicy::Empty } else { StartPolicy::RandomToken(start.clone()) };
                if let Some(o) = g.labels.get(l) {
                    c.temperature = o.temperature.unwrap_or(c.temperature);
                    c.repetition_penalty = o.repetition_penalty.unwrap_or(c.repetition_penalty);
                    c.top_k = o.top_k.unwrap_or(c.top_k);
                }
                c
            })
            .collect())
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        let c = &self.classifier;
        ClassifierConfig {
            epsilon: c.epsilon,
            gamma: c.gamma,
            lambda: c.lambda,
            delta: c.delta,
            period: c.period,
            steps: c.steps,
            stage2_lr: c.stage2_lr,
            stage2_batch: c.stage2_batch,
            stage1_lrs: c.stage1_lrs.clone(),
            stage1_batches: c.stage1_batches.clone(),
            stage1_steps: c.stage1_steps,
            trace: self.experiment.trace,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_file_means_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn dev_size_must_match_shots() {
        let err = ExperimentConfig::from_toml("[experiment]\nshots = 8\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_and_objectives_are_rejected() {
        assert!(ExperimentConfig::from_toml("[tuning]\nalpha = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[experiment]\nobjectives = [\"disc\"]\n").is_err());
        assert!(ExperimentConfig::from_toml("[experiment]\nobjectives = [\"gen\"]\nclassify = [\"w-gen\"]\n").is_err());
    }

    #[test]
    fn vocab_mismatch_is_a_config_error() {
        assert!(ExperimentConfig::from_toml("[model]\nvocab_size = 80\n").is_err());
    }

    #[test]
    fn pair_mode_uses_greedy_label_defaults() {
        let cfg = ExperimentConfig::from_toml("[task]\nmode = \"pair\"\n[[generation.labels]]\n[[generation.labels]]\ntop_k = 3\n").unwrap();
        let g = cfg.generation_configs().unwrap();
        assert_eq!(g[0].temperature, 0.0);
        assert_eq!(g[0].repetition_penalty, 1.0);
        assert_eq!(g[1].repetition_penalty, 1.5);
        assert_eq!(g[1].top_k, 3);
        assert_eq!(g[0].mode, Mode::Pair);
    }
}
