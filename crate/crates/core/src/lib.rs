//! Tree-structured speculative decoding over a deterministic toy transformer.
//!
//! A small drafter model proposes a tree of candidate continuations, the
//! teacher scores every node in one tree-masked forward pass, and the longest
//! path agreeing with the teacher's greedy choices is committed. Outputs are
//! identical to teacher-only greedy decoding.

pub mod cache_manager;
pub mod drafter;
pub mod engine;
pub mod harness;
pub mod mask;
pub mod real;
pub mod toy_model;
pub mod tree;

/// Vocabulary index.
pub type TokenId = u32;

pub use cache_manager::{BranchCache, CommitKind, CommitReport, CommittedCache};
pub use drafter::{DraftConfig, SubsetMap};
pub use engine::{CommitMode, DecodeConfig, Decoded, EngineError, Mode};
pub use mask::TreeMask;
pub use real::{Precision, Real};
pub use toy_model::{KvCache, Model, ModelConfig, ModelError};
pub use tree::{NodeRef, PathIndices, SpecTree, StructureError, StructureErrorKind};
