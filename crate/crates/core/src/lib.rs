//! Block-sparse attention prefill laboratory.
//!
//! The estimation pipeline runs in four stages:
//!
//! 1. [`proxy`]: heads are grouped along key heads, each group is pooled into
//!    one proxy head, and strided token-level attention of the proxy head is
//!    max-pooled into a block score map shared by every head of the group.
//! 2. [`budget`]: each query head estimates its own block budget ratio from
//!    the attention of its final query block under a cumulative threshold.
//! 3. [`mask`]: shared scores plus per-head budgets give per-head top-k block
//!    masks.
//! 4. [`sparse`]: block-sparse causal attention executes under the mask with
//!    an online softmax.
//!
//! [`dense`] is the exact oracle every stage is checked against, and
//! [`comparators`] holds coarse sequence-pooling estimators and the
//! head-similarity analyses.

pub mod budget;
pub mod comparators;
pub mod config;
pub mod dense;
pub mod error;
pub mod mask;
pub mod pipeline;
pub mod proxy;
pub mod report;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod tensor_io;
pub mod workloads;

pub use budget::{budgets_for_all_heads, estimate_head_budget, HeadBudget};
pub use config::{AttnConfig, BlockGrid};
pub use dense::{block_reduce, dense_attention_probs, dense_causal_attention, BlockScoreMap, ProbMatrix, Reduce};
pub use error::{Error, Result};
pub use mask::{build_mask, mask_sparsity, min_budget_floor, BlockMask};
pub use proxy::{assign_groups, estimation_cost_ratio, GroupAssignment, ProxyScores};
pub use sparse::{attention_recall, block_sparse_attention, SparseAttnStats};
pub use tensor::HeadTensor;
