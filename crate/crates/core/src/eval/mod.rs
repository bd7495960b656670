//! Proxy metrics and the experiments built on them.

pub mod experiments;
pub mod proxy;

pub use experiments::{
    calibrate_subject_threshold, evaluate_cells, pareto_dominates, run_ablation, run_baseline,
    run_lambda_sweep, run_ppl_comparison, spearman, Aggregate, Cell, PplComparison, Row, SweepSpec,
    Table, ARM_BASELINE, ARM_MINDIFF, ARM_NO_MASK, ARM_PPL, CSV_HEADER, PPL_WEIGHTS,
};
pub use proxy::{PromptAttributes, ProxyScorer, ProxyScores};
