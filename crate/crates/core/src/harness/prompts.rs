//! Synthetic prompts and deterministic sharding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::toy_model::keyed_rng;
use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub tokens: Vec<TokenId>,
}

/// `count` prompts with ids `0..count`, lengths uniform in the inclusive
/// `length_range` and tokens uniform over the vocabulary.
pub fn gen_prompts(
    seed: u64,
    count: usize,
    length_range: (usize, usize),
    vocab_size: usize,
) -> Result<Vec<Prompt>, HarnessError> {
    let (lo, hi) = length_range;
    if count == 0 {
        return Err(HarnessError::Config("prompt count must be >= 1".into()));
    }
    if lo == 0 || lo > hi {
        return Err(HarnessError::Config(format!(
            "invalid prompt length range [{lo}, {hi}]"
        )));
    }
    if vocab_size == 0 {
        return Err(HarnessError::Config("vocabulary is empty".into()));
    }
    let mut rng = keyed_rng(seed ^ 0x7072_6f6d_7074_7321);
    Ok((0..count as u64)
        .map(|id| {
            let len = rng.random_range(lo..=hi);
            let tokens = (0..len).map(|_| rng.random_range(0..vocab_size as TokenId)).collect();
            Prompt { id, tokens }
        })
        .collect())
}

/// Prompts with `id % world_size == rank`, in input order.
pub fn shard(prompts: &[Prompt], world_size: usize, rank: usize) -> Result<Vec<Prompt>, HarnessError> {
    if world_size == 0 || rank >= world_size {
        return Err(HarnessError::Config(format!(
            "rank {rank} out of range for world size {world_size}"
        )));
    }
    Ok(prompts
        .iter()
        .filter(|p| p.id % world_size as u64 == rank as u64)
        .cloned()
        .collect())
}
