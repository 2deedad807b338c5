//! Downstream protocols: zero-shot prompts, few-shot linear probing and
//! attention-based MIL, plus the metrics and replicate bookkeeping they share.

mod abmil;
mod metrics;
mod probe;
mod replicates;
mod results;
mod zeroshot;

use thiserror::Error;

use crate::agents::AgentError;

pub use abmil::{
    abmil_forward, abmil_loss_grad, abmil_train, evaluate_bags, n_classes, AbmilHyper, AbmilParams, EpochMetrics,
    MilAggregator, MilBag, MilOutput, MilScores, MilSplit,
};
pub use metrics::{accuracy, argmax, auc, confusion_matrix, macro_auc, macro_f1};
pub use probe::{
    fit_logreg, linear_probe, linear_probe_with, logreg_loss_grad, quantile, BoxStats, FitOptions, LogReg, ProbeResult,
    ProbeTask, DEFAULT_REPEATS, DEFAULT_SHOTS,
};
pub use replicates::{replicate_seeds, seeded_replicates, MeanStd, Replicates, RunRecord, DEFAULT_SEEDS};
pub use results::{
    read_results, render_mil_table, render_probe_table, render_report, render_table, render_zeroshot_table,
    write_results, ResultRecord, ResultsHeader, TASK_MIL, TASK_PROBE, TASK_ZEROSHOT,
};
pub use zeroshot::{
    zero_shot_classify, zero_shot_classify_with, zero_shot_predict, ZeroShotResult, ZeroShotTask, ZERO_SHOT_TEMPLATE,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Shape(String),
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("training split holds a single class")]
    SingleClassSplit,
    #[error("shot {shot} exceeds the {available} training examples of class {class}")]
    ShotTooLarge { shot: usize, class: usize, available: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("replicates need at least 2 seeds, got {0}")]
    TooFewSeeds(usize),
    #[error(transparent)]
    Backend(#[from] AgentError),
    #[error("results line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
