//! Metrics, per-emotion tables, rank-based AUC, the Wilcoxon signed-rank
//! test, and the routing/decoder ablation and noise experiments.

mod experiments;
mod metrics;
mod report;
mod stats;

pub use experiments::{ablation_grid, noise_eval, AblationCell, AblationReport, NoiseReport, ABLATION_ROUTINGS};
pub use metrics::{
    auc_macro, f1, metrics, micro_average, midranks, per_emotion_report, AucResult, ClassMetrics, Confusion,
    EmotionTable, Metrics,
};
pub use report::{
    confusion_csv, confusion_pgm, evaluate, predict_items, AveragedReport, EvalReport, Prediction,
};
pub use stats::{signed_rank_counts, wilcoxon_signed_rank, Sidedness, WilcoxonResult, EXACT_MAX_N};
