//! Evaluation statistics: ROC with DeLong intervals and paired tests,
//! Bland-Altman agreement, error metrics and exact t-SNE.

mod agreement;
pub mod io;
mod roc;
mod tsne;

pub use agreement::{bland_altman, regression_metrics, AgreementResult, RegressionMetrics};
pub use roc::{auroc, delong_ci, delong_compare, samples, DelongComparison, RocResult, ScoredSample};
pub use tsne::{conditional_p, tsne, TsneConfig, TsneResult};
