//! Splitting, metrics, the convergence-bound checker and the gate anomaly
//! detector.

mod anomaly;
mod convergence;
mod metrics;
mod split;
mod tower_gd;

pub use anomaly::{detect_gate_anomaly, AnomalyReport, DEFAULT_GAP_THRESHOLD, DEFAULT_GRACE_EPOCHS};
pub use convergence::{
    check_convergence, check_quadratic, estimate_lipschitz, quadratic_descent, ConvergenceReport, LossTrace, Optimizer, Verdict,
};
pub use metrics::{compute_metrics, evaluate, evaluate_by_source, predictions, Metrics, TaskPredictor};
pub use split::{split_dataset, split_indices, split_sizes, SplitIndices, DEFAULT_SPLIT};
pub use tower_gd::{curvature_probes, gradient_descent, tower_convergence_check, TowerConvergenceRun, TowerProblem};
