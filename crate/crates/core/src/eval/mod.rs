//! Downstream protocols: zero-shot, linear probe, few-shot, retrieval.

mod fewshot;
mod probe;
mod report;
mod retrieve;
mod zeroshot;

pub use fewshot::{fewshot_episode, fewshot_eval, trial_seed, EpisodeSpec, FewShotResult, QUERY_PER_CLASS};
pub use probe::{linear_probe, probe_features, probe_loss, stratified_split, LinearProbe, ProbeConfig};
pub use report::{Report, ReportRow, REPORT_HEADER};
pub use retrieve::{retrieve, QueryKind};
pub use zeroshot::{argmax, zeroshot_classify, zeroshot_scores, zeroshot_topk, CategoryBank, InferenceMode};

pub(crate) use report::csv_err;
