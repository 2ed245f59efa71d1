//! Block-sparse causal attention with a position-decay budget and an
//! output-aware block metric, plus the dense reference, cost algebra and a
//! small propagation testbed used to check it.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for callers that do not care.

pub mod dense;
pub mod error;
pub mod metric;
pub mod propagation;
pub mod scalar;
pub mod schedule;
pub mod sparse;
pub mod tensor;
pub mod validate;

pub use dense::{
    causal_scores, dense_attention, row_softmax_causal, truncated_output, truncation_bound,
    AttentionProbs, KeepSets,
};
pub use error::{Result, StemError};
pub use metric::{
    block_summary, oam_block, oam_token, oam_token_exact, pool_antidiagonal_scores,
    pool_mean_scores, pool_scores, pool_value_magnitude, sam_block, BlockSummary, MetricConfig,
    Pooling,
};
pub use propagation::{
    asymmetry_experiment, compare_sam_oam, equal_segments, forward_dense,
    forward_with_segment_prune, segment_sensitivity, token_keep_sets, verify_rank_equivalence,
    verify_separable_bound, AsymmetryConfig, AsymmetryReport, BoundCheck, ErrorReport, PruneMode,
    RankCheck, SamOamComparison, Segment, SegmentBudget, SegmentSpec, TokenMetric, ToyTransformer,
};
pub use scalar::Scalar;
pub use schedule::{
    block_budget, cost_decay, cost_report, cost_uniform, dense_complexity, enumerated_decay_cost,
    stem_complexity, tpd_budget, uniform_equivalent, BudgetSchedule, BudgetUnit, CostReport,
    DecayCost, GuardWindows, MinBudgetMode,
};
pub use sparse::{
    execute_selection, keep_set_attention, plan_blocks, select_blocks, sparse_block_attention,
    stem_forward, stem_forward_heads, BlockSelection, RowSelection, StemStats,
};
pub use tensor::{
    gen_gaussian_matrix, gen_gaussian_qkv, gen_outlier_qkv, load_tensor, save_tensor, Matrix,
    OutlierQkv, Qkv,
};

pub use validate::{run_validation, ValidationReport};

pub type MatrixF32 = Matrix<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type QkvF32 = Qkv<f32>;
pub type QkvF64 = Qkv<f64>;
pub type AttentionProbsF32 = AttentionProbs<f32>;
pub type AttentionProbsF64 = AttentionProbs<f64>;
pub type BlockSummaryF32 = BlockSummary<f32>;
pub type BlockSummaryF64 = BlockSummary<f64>;
pub type ToyTransformerF32 = ToyTransformer<f32>;
pub type ToyTransformerF64 = ToyTransformer<f64>;
