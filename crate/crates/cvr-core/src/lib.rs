//! Desk-scale cross-video reasoning pipeline.
//!
//! The crate provides the full loop: semantic-script environments that stand
//! in for raw videos ([`script`]), a deterministic text simulator ([`sim`]),
//! the structured agent action protocol ([`protocol`]), the episode engine
//! running the interaction loop ([`episode`]), trajectory rewards
//! ([`reward`]), a group-relative policy optimizer over a tabular softmax
//! policy ([`grpo`]), interchangeable decision backends ([`policy`]), and the
//! evaluation metrics ([`eval`]).

pub mod episode;
pub mod eval;
pub mod grpo;
pub mod policy;
pub mod protocol;
pub mod reward;
pub mod script;
pub mod sim;

mod text;

pub use text::fmt_seconds;
