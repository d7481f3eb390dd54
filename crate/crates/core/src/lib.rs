//! Training pipeline for deep-search agents on synthetic reasoning-tree tasks.
//!
//! The crate builds a closed-world environment for multi-turn search agents
//! and everything needed to train a toy policy on it end to end:
//!
//! - [`protocol`] — the tag grammar all agents speak (`<think>`, `<search>`,
//!   `<answer>`, `<information>`).
//! - [`taskgen`] — deterministic generation of reasoning-tree tasks, weighted
//!   sub-goals, guiding hint queries, and a document corpus with distractors.
//! - [`retrieval`] — BM25 search over a task corpus.
//! - [`refiner`] — evidence condensers (truncating, oracle, remote) that turn
//!   raw hits into compact summaries.
//! - [`rollout`] — the turn-loop engine: transition, hint injection, turn
//!   budget, trajectory recording.
//! - [`reward`] — exact-match final reward, weighted sub-goal reward, shaped
//!   total, and reward density.
//! - [`optimize`] — group-normalized advantages, the clipped policy objective
//!   with KL regularization, rejection-sampling harvest, and supervised
//!   losses for the toy agents.
//! - [`gateway`] — adapter so an external chat-completion endpoint can play
//!   researcher or refiner.

pub mod gateway;
pub mod optimize;
pub mod protocol;
pub mod refiner;
pub mod retrieval;
pub mod reward;
pub mod rollout;
pub mod taskgen;
pub mod text;

pub use protocol::{Action, ActionBody, InfoBlock, InfoEntry, ParseError, RawActionText};
pub use refiner::{RefineRequest, Refiner, Summary};
pub use retrieval::{Evidence, Index};
pub use reward::{DensityReport, RewardBreakdown};
pub use rollout::{EngineConfig, EngineState, Trajectory};
pub use taskgen::{Document, ReasoningTree, SubGoal, Task};
