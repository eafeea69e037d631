//! SVD machinery and subspace alignment of tuning vectors.
//!
//! For a pretrained matrix `W` with left singular vectors `U_k` (k chosen by
//! the energy rule in [`select_rank`]) and an update `T`, the parallel part is
//! `U_k U_kᵀ T` and the rest is orthogonal; SSA is the parallel fraction of
//! `‖T‖_F`.

mod projection;
mod rank;
mod report;
mod svd;

pub use projection::{energy_decomposition, ssa, Projection};
pub use rank::select_rank;
pub use report::{
    component_report, factorize_selected, Aggregation, KindSummary, LayerEntry, SubspaceConfig, SubspaceReport,
    SvdChoice, TensorFailure,
};
pub use svd::{dense_svd, randomized_svd, SvdFactors, SvdMethod};
