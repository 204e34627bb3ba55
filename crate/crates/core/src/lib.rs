//! Non-training machinery for strategy-aware code performance optimization.
//!
//! The crate covers the whole data and evaluation path around a planner /
//! optimizer model pair:
//!
//! - [`corpus`]: submission trajectories, final-submission pairing and
//!   global-best target replacement.
//! - [`strategy`]: strategy extraction through a chat model, name
//!   normalization, deduplication and classification into the fixed
//!   15-category taxonomy.
//! - [`sampling`]: rarity-weighted scoring and round-robin balanced selection.
//! - [`serialize`]: the `[SUGG/]…[/SUGG][OPT/]…[/OPT]` target format and the
//!   causal LM loss over supplied log-probabilities.
//! - [`evalbench`]: compile / judge / time harness and the three reported metrics.
//! - [`rlmath`]: reward, group-normalized advantages and the clipped GRPO objective.
//! - [`orchestrate`]: chat-completions clients, the request journal, the
//!   deterministic mock model server and planner / optimizer flows.

// Validation is written `!(x > 0.0)` so NaN fails the check as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod evalbench;
pub mod jsonl;
pub mod orchestrate;
pub mod rlmath;
pub mod sampling;
pub mod serialize;
pub mod strategy;
pub mod template;

pub use corpus::{CodePair, Corpus, Origin, Submission, Verdict};
pub use evalbench::{EvalResult, Harness, RunConfig, TestCase};
pub use rlmath::{GrpoConfig, RewardConfig};
pub use sampling::{BalancedSubset, FrequencyTable};
pub use serialize::{ControlTokens, ParsedOutput, TrainingExample};
pub use strategy::{AnnotatedPair, CategorizedStrategy, CategoryTaxonomy, Strategy};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes.as_ref()))
}
