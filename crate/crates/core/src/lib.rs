//! Prompt-pool test-time adaptation for continually shifting domains.
//!
//! A frozen toy classifier is adapted batch by batch through two pools of
//! additive input prompts: a domain pool keyed by batch feature statistics
//! and a class pool keyed by prediction vectors. Each batch either matches
//! existing prompts (weighted composition) or fissions a fresh one; after a
//! few gradient steps the learned prompts are fused back into the pools.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pools;
pub mod stream;

pub use error::{KffError, Result};
pub use harness::{run_ctta, CttaEngine, Hyperparams};
pub use model::ToyModel;
pub use numerics::{BatchStats, Matrix, SeededRng, Vector};
pub use pools::{ClassPromptPool, DomainPromptPool, FissionOutcome, MatchParams};
