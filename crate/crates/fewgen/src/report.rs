use std::time::{SystemTime, UNIX_EPOCH};

use fewgen_core::classifier::{Metrics, Stage1Outcome, Stage2Outcome};
use fewgen_core::tuning::{Objective, TuningOutcome};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::io::WeightDump;

pub const SEED_NOTE: &str = "Each seed reseeds the few-shot/dev/test split, the prefix and weighting-network initialization, \
the tuning order, the sampling streams and the classifier jointly; variation across seeds mixes all of these sources.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mcc: f64,
    pub mcc_undefined: bool,
}

impl From<&Metrics> for MetricsReport {
    fn from(m: &Metrics) -> Self {
        Self { accuracy: m.accuracy, macro_f1: m.macro_f1, mcc: m.mcc, mcc_undefined: m.mcc_undefined }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub corpus_size: usize,
    pub heldout_size: usize,
    pub heldout_perplexity: f64,
    pub unigram_perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub batch: usize,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub lr: f64,
    pub batch: usize,
    pub dev_accuracy: f64,
    pub grid: Vec<GridPoint>,
    pub test: MetricsReport,
}

impl Stage1Report {
    pub fn new(o: &Stage1Outcome, test: MetricsReport) -> Self {
        Self {
            lr: o.lr,
            batch: o.batch,
            dev_accuracy: o.dev_accuracy,
            grid: o.grid.iter().map(|&(lr, batch, dev_accuracy)| GridPoint { lr, batch, dev_accuracy }).collect(),
            test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refresh {
    pub step: usize,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Row {
    pub step: usize,
    /// Absent when the retained set was empty and the step was skipped.
    pub loss: Option<f64>,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub test: MetricsReport,
    pub final_retained: Option<usize>,
    pub floored: bool,
    pub refreshes: Vec<Refresh>,
    pub history: Vec<Stage2Row>,
}

impl Stage2Report {
    pub fn new(o: &Stage2Outcome, test: MetricsReport) -> Self {
        Self {
            test,
            final_retained: o.refreshes.last().map(|r| r.1),
            floored: o.floored,
            refreshes: o.refreshes.iter().map(|&(step, retained)| Refresh { step, retained }).collect(),
            history: o
                .history
                .iter()
                .map(|h| Stage2Row { step: h.step, loss: h.loss.is_finite().then_some(h.loss), retained: h.retained })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub wgen: f64,
    pub gen: f64,
    pub disc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub steps: usize,
    /// Mean minibatch `L_w-gen` over the first epoch.
    pub first_epoch_wgen: f64,
    /// Mean minibatch `L_w-gen` over the last epoch.
    pub last_epoch_wgen: f64,
    pub clamped: bool,
    pub history: Vec<LossRow>,
}

impl TuningReport {
    pub fn new(o: &TuningOutcome, first_epoch_wgen: f64, last_epoch_wgen: f64) -> Self {
        Self {
            steps: o.history.len(),
            first_epoch_wgen,
            last_epoch_wgen,
            clamped: o.clamped,
            history: o.history.iter().map(|h| LossRow { step: h.step, wgen: h.wgen, gen: h.gen, disc: h.disc }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub objective: String,
    /// Fraction of generated samples the oracle assigns to their generating label.
    pub generated_accuracy: f64,
    /// Generator perplexity on the test split, each sequence under its own label.
    pub perplexity: f64,
    pub tuning: TuningReport,
    /// Token weights on the few-shot set (weighted objective only).
    pub weights: Vec<WeightDump>,
    /// Stage-2 classifier trained on this objective's generated data.
    pub classifier: Option<Stage2Report>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub error: Option<String>,
    pub stage1: Option<Stage1Report>,
    pub objectives: Vec<ObjectiveReport>,
}

/// Arithmetic mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { n: values.len(), mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierAggregate {
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub mcc: MeanStd,
}

impl ClassifierAggregate {
    fn of(metrics: &[&MetricsReport]) -> Option<Self> {
        let col = |f: fn(&MetricsReport) -> f64| metrics.iter().map(|m| f(m)).collect::<Vec<_>>();
        Some(Self {
            accuracy: MeanStd::of(&col(|m| m.accuracy))?,
            macro_f1: MeanStd::of(&col(|m| m.macro_f1))?,
            mcc: MeanStd::of(&col(|m| m.mcc))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub objective: String,
    pub generated_accuracy: Option<MeanStd>,
    pub perplexity: Option<MeanStd>,
    pub classifier: Option<ClassifierAggregate>,
}

/// Per-objective and stage-1 aggregates over the seeds that completed.
pub fn aggregate(seeds: &[SeedReport], objectives: &[Objective]) -> (Vec<Aggregate>, Option<ClassifierAggregate>) {
    let per_objective = objectives
        .iter()
        .map(|o| {
            let rows: Vec<&ObjectiveReport> =
                seeds.iter().flat_map(|s| s.objectives.iter()).filter(|r| r.objective == o.name()).collect();
            let clf: Vec<&MetricsReport> = rows.iter().filter_map(|r| r.classifier.as_ref().map(|c| &c.test)).collect();
            Aggregate {
                objective: o.name().to_string(),
                generated_accuracy: MeanStd::of(&rows.iter().map(|r| r.generated_accuracy).collect::<Vec<_>>()),
                perplexity: MeanStd::of(&rows.iter().map(|r| r.perplexity).collect::<Vec<_>>()),
                classifier: ClassifierAggregate::of(&clf),
            }
        })
        .collect();
    let s1: Vec<&MetricsReport> = seeds.iter().filter_map(|s| s.stage1.as_ref().map(|r| &r.test)).collect();
    (per_objective, ClassifierAggregate::of(&s1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub software: String,
    pub version: String,
    /// Seconds since the Unix epoch; the only field that differs between identical runs.
    pub timestamp: u64,
    pub note: String,
    pub bayes_accuracy: f64,
    pub pretrain: PretrainReport,
    pub aggregates: Vec<Aggregate>,
    pub stage1: Option<ClassifierAggregate>,
    pub seeds: Vec<SeedReport>,
    pub config: ExperimentConfig,
}

impl Report {
    pub fn new(
        config: ExperimentConfig,
        pretrain: PretrainReport,
        bayes_accuracy: f64,
        seeds: Vec<SeedReport>,
        aggregates: Vec<Aggregate>,
        stage1: Option<ClassifierAggregate>,
    ) -> Self {
        Self {
            software: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            note: SEED_NOTE.to_string(),
            bayes_accuracy,
            pretrain,
            aggregates,
            stage1,
            seeds,
            config,
        }
    }

    pub fn failed_seeds(&self) -> Vec<u64> {
        self.seeds.iter().filter(|s| s.error.is_some()).map(|s| s.seed).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// The serialized report with the timestamp removed, for reproducibility checks.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("timestamp");
        }
        serde_json::to_string(&v).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_is_population() {
        let m = MeanStd::of(&[1.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert!(MeanStd::of(&[]).is_none());
    }
}
