//! Per-turn trace records written as JSON lines.

use serde::{Deserialize, Serialize};

use crate::cache_manager::CommitKind;
use crate::engine::Mode;
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Baseline,
    Speculative,
}

/// Nanoseconds per pipeline stage for one speculative iteration.
///
/// `prefill` is nonzero only on the first iteration of a turn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub draft: u64,
    pub tensorize: u64,
    pub mask: u64,
    pub verify: u64,
    pub accept: u64,
    pub commit: u64,
    pub prefill: u64,
}

impl StageTimings {
    pub const STAGES: [&'static str; 7] = ["draft", "tensorize", "mask", "verify", "accept", "commit", "prefill"];

    pub fn get(&self, stage: &str) -> Option<u64> {
        Some(match stage {
            "draft" => self.draft,
            "tensorize" => self.tensorize,
            "mask" => self.mask,
            "verify" => self.verify,
            "accept" => self.accept,
            "commit" => self.commit,
            "prefill" => self.prefill,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Accepted draft nodes (`L_k`).
    pub accepted: usize,
    /// Tokens committed this iteration (`L_k + 1`).
    pub emitted: usize,
    /// Draft nodes excluding the root slot.
    pub tree_size: usize,
    pub depth_used: usize,
    pub commit: CommitKind,
    pub fast_fallback: bool,
    pub teacher_calls: usize,
    pub mask_rows: usize,
    pub mask_cols: usize,
    pub mask_zeros: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub prompt_id: u64,
    pub decoder: DecoderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    pub prompt_len: usize,
    pub output_len: usize,
    pub output: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterations: Vec<IterationRecord>,
    /// Teacher verification passes (baseline: one step per token).
    pub teacher_forward_count: usize,
    pub prefill_count: usize,
    pub wall_clock_ns: u64,
    /// Time to first token, approximated by the prefill time.
    pub ttft_ns: u64,
    /// Per-token decode time for the baseline decoder.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_times_ns: Vec<u64>,
}

impl TurnTrace {
    /// Committed tokens per teacher verification pass.
    pub fn tokens_per_teacher_step(&self) -> f64 {
        if self.teacher_forward_count == 0 {
            return 0.0;
        }
        match self.decoder {
            DecoderKind::Baseline => self.output_len as f64 / self.teacher_forward_count as f64,
            DecoderKind::Speculative => {
                let emitted: usize = self.iterations.iter().map(|r| r.emitted).sum();
                emitted as f64 / self.teacher_forward_count as f64
            }
        }
    }

    pub fn mean_accepted(&self) -> Option<f64> {
        if self.iterations.is_empty() {
            return None;
        }
        let total: usize = self.iterations.iter().map(|r| r.accepted).sum();
        Some(total as f64 / self.iterations.len() as f64)
    }
}
