//! Few-shot node classification: tasks, classifiers, inference modes and
//! reports.

pub mod logreg;
pub mod modes;
pub mod report;
pub mod task;

pub use logreg::{fit_logistic_regression, LogRegConfig, LogisticRegression};
pub use modes::{evaluate, linear_probe, EvalContext, GnnMode, InferenceMode, LmMode, ModeRegistry, PromptMode, RandomMode};
pub use report::{aggregate, EvalReport, TaskRecord};
pub use task::{sample_tasks, FewShotTask, TaskSet, TaskSpec};
