//! Two-stage classifier training: supervised fitting on the few-shot set, then
//! label-smoothed, ensemble-regularized fitting on filtered generated data.

mod loss;
mod metrics;
mod model;
mod train;

pub use loss::{class_loss, filter_retained, kl_divergence, smoothed_targets, ClassLoss, EnsembleState, PROB_FLOOR};
pub use metrics::{classification_metrics, Metrics};
pub use model::Classifier;
pub use train::{
    class_loss_gradient, evaluate_classifier, train_classifier, train_stage1, train_stage2, ClassifierConfig,
    ClassifierOutcome, EnsembleTrace, Stage1Outcome, Stage2Outcome, Stage2Step,
};

#[cfg(test)]
mod tests;
