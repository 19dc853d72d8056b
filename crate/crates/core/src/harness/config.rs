//! Run configuration and manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trace::DecoderKind;
use super::HarnessError;
use crate::engine::DecodeConfig;
use crate::toy_model::ModelConfig;

/// Vocabulary-subset drafting: the subset holds the most frequent tokens in
/// teacher greedy continuations of `calibration_prompts` seeded prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub size: usize,
    #[serde(default = "default_calibration")]
    pub calibration_prompts: usize,
    /// Cache directory; defaults to `<out_dir>/subsets`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_calibration() -> usize {
    16
}

/// Everything needed to reproduce a run. The JSON form mirrors the CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub teacher: ModelConfig,
    pub drafter: ModelConfig,
    pub decode: DecodeConfig,
    pub decoders: Vec<DecoderKind>,
    /// Prompt generator seed.
    pub seed: u64,
    pub prompt_count: usize,
    /// Inclusive prompt length range.
    pub prompt_len: (usize, usize),
    pub world_size: usize,
    pub out_dir: PathBuf,
    pub vocab_subset: Option<SubsetSpec>,
    /// Test hook: corrupt the first draft tree of this prompt.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupt_tree_for_prompt: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let teacher = ModelConfig::teacher(0);
        Self {
            drafter: ModelConfig::early_exit(&teacher, 1),
            teacher,
            decode: DecodeConfig::default(),
            decoders: vec![DecoderKind::Baseline, DecoderKind::Speculative],
            seed: 0,
            prompt_count: 50,
            prompt_len: (8, 24),
            world_size: 1,
            out_dir: PathBuf::from("runs/latest"),
            vocab_subset: None,
            corrupt_tree_for_prompt: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.teacher.validate()?;
        self.drafter.validate()?;
        self.decode.validate()?;
        if self.teacher.vocab_size != self.drafter.vocab_size {
            return Err(HarnessError::Config("teacher and drafter vocabularies differ".into()));
        }
        if self.world_size == 0 {
            return Err(HarnessError::Config("world size must be >= 1".into()));
        }
        if self.decoders.is_empty() {
            return Err(HarnessError::Config("no decoders selected".into()));
        }
        Ok(())
    }

    /// Sets the prompt seed and both model seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.teacher.seed = seed;
        self.drafter.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub prompts: u64,
    pub teacher: u64,
    pub drafter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub timestamp_unix: u64,
    /// Resolved configuration, including any built vocabulary subset.
    pub config: RunConfig,
    pub seeds: SeedSet,
    pub teacher_checksum: u64,
    pub drafter_checksum: u64,
    pub prompt_ids: Vec<u64>,
    pub trace_files: Vec<PathBuf>,
    pub merged_traces: PathBuf,
}

pub const ARTIFACT_VERSION: &str = concat!("treespec-core/", env!("CARGO_PKG_VERSION"));
