//! Baseline and speculative decoding loops.
//!
//! Each speculative iteration:
//!
//! 1. the drafter proposes a tree from `committed tokens ++ [pending]`;
//! 2. slot 0 of the tree carries `pending` (last iteration's bonus token);
//! 3. the teacher verifies every slot in one tree-masked forward
//!    (performance mode) or per root-to-node path (reference mode);
//! 4. the greedy walk accepts the longest chain matching teacher argmaxes;
//! 5. the root slot and the accepted chain are committed and emitted, and the
//!    teacher argmax after the chain becomes the next `pending` token.
//!
//! The committed cache always holds exactly `prompt ++ output`.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache_manager::{
    commit_by_length, commit_by_path_indices, replicate, BranchCache, CommitError, CommitKind, CommitReport,
    CommittedCache,
};
use crate::drafter::{propose_tree, DraftConfig, DraftError};
use crate::harness::trace::{DecoderKind, IterationRecord, StageTimings, TurnTrace};
use crate::mask::{build_tree_mask, TreeMask};
use crate::real::{argmax, Real};
use crate::toy_model::{Model, ModelError};
use crate::tree::{
    accepted_path_indices, build_ancestor_table, path_to_node, validate_tree, PathIndices, SpecTree, StructureError,
};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Draft(#[from] DraftError),
    #[error(transparent)]
    Commit(#[from] CommitError),
    #[error("tree invariant violated before verification: {}", .0.error)]
    Structure(Box<InvariantViolation>),
    #[error("invalid decode configuration: {0}")]
    Config(String),
}

/// Offending tree plus the committed length it was proposed against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantViolation {
    pub error: StructureError,
    pub tree: SpecTree,
    pub committed_len: usize,
}

impl EngineError {
    fn structure(error: StructureError, tree: &SpecTree, committed_len: usize) -> Self {
        EngineError::Structure(Box::new(InvariantViolation {
            error,
            tree: tree.clone(),
            committed_len,
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Per-path sequential verification.
    Reference,
    /// One tree-masked batched forward per iteration.
    #[default]
    Performance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CommitMode {
    Length,
    #[default]
    Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub mode: Mode,
    pub draft: DraftConfig,
    pub eos_token: Option<TokenId>,
    pub fast_cache_reorder: bool,
    pub commit_mode: CommitMode,
    /// Record per-stage timings.
    pub profile: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            mode: Mode::Performance,
            draft: DraftConfig::default(),
            eos_token: None,
            fast_cache_reorder: true,
            commit_mode: CommitMode::Path,
            profile: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_new_tokens == 0 {
            return Err(EngineError::Config("max_new_tokens must be >= 1".into()));
        }
        self.draft.validate()?;
        Ok(())
    }
}

/// Teacher scores for every slot of a tree.
#[derive(Debug, Clone)]
pub struct VerifyResult<T> {
    pub logits: Vec<Vec<T>>,
    pub argmax: Vec<TokenId>,
    /// Committed prefix followed by the `M + 1` slots in tree order.
    pub branch: BranchCache<T>,
    /// Teacher forward calls spent on this verification.
    pub teacher_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptOutcome {
    /// Accepted node ids, root-descending.
    pub chain: Vec<usize>,
    pub accepted: usize,
    pub bonus: TokenId,
    /// Path tokens of the chain followed by the bonus token.
    pub emitted: Vec<TokenId>,
}

/// Result of one decode turn.
#[derive(Debug, Clone)]
pub struct Decoded<T> {
    pub tokens: Vec<TokenId>,
    pub trace: TurnTrace,
    /// Teacher cache after the turn; covers `prompt ++ tokens` (plus any
    /// committed overshoot).
    pub cache: CommittedCache<T>,
}

/// Per-iteration state handed to an [`Observer`].
pub struct IterationView<'a, T> {
    pub index: usize,
    pub tree: &'a SpecTree,
    pub committed_before: &'a CommittedCache<T>,
    pub verify: &'a VerifyResult<T>,
    pub outcome: &'a AcceptOutcome,
    /// Path indices, when committing by path.
    pub path: Option<&'a PathIndices>,
    pub report: CommitReport,
    pub committed_after: &'a CommittedCache<T>,
    /// All tokens whose KV is in `committed_after`.
    pub committed_tokens: &'a [TokenId],
}

/// Hooks into the speculative loop, for tests and fault injection.
pub trait Observer<T> {
    /// Called with each proposed tree before validation.
    fn inspect_tree(&mut self, _tree: &mut SpecTree) {}

    fn after_iteration(&mut self, _view: &IterationView<'_, T>) {}
}

impl<T> Observer<T> for () {}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos() as u64
}

fn greedy_token<T: Real>(logits: &[T]) -> TokenId {
    argmax(logits) as TokenId
}

/// Teacher-only greedy decoding. Each emitted token is fed back through one
/// `forward_step`, so the returned cache covers `prompt ++ tokens`.
pub fn generate_baseline<T: Real>(
    teacher: &Model<T>,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Decoded<T>, EngineError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut committed = CommittedCache::new(teacher.empty_cache());
    let prefill_start = Instant::now();
    let mut logits = teacher
        .prefill(prompt, committed.kv_mut())?
        .logits
        .pop()
        .expect("one row");
    let prefill_ns = elapsed_ns(prefill_start);

    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);
    let mut token_times = Vec::with_capacity(cfg.max_new_tokens);
    let mut steps = 0;
    while tokens.len() < cfg.max_new_tokens {
        let t0 = Instant::now();
        let next = greedy_token(&logits);
        tokens.push(next);
        logits = teacher
            .forward_step(next, committed.kv_mut())?
            .logits
            .pop()
            .expect("one row");
        steps += 1;
        token_times.push(elapsed_ns(t0));
        if cfg.eos_token == Some(next) {
            break;
        }
    }

    let trace = TurnTrace {
        prompt_id: 0,
        decoder: DecoderKind::Baseline,
        mode: None,
        prompt_len: prompt.len(),
        output_len: tokens.len(),
        output: tokens.clone(),
        iterations: Vec::new(),
        teacher_forward_count: steps,
        prefill_count: 1,
        wall_clock_ns: elapsed_ns(start),
        ttft_ns: prefill_ns,
        token_times_ns: token_times,
    };
    Ok(Decoded {
        tokens,
        trace,
        cache: committed,
    })
}

fn check_prefix(committed_len: usize, prefix_len: usize) -> Result<(), EngineError> {
    if committed_len != prefix_len {
        return Err(EngineError::Config(format!(
            "prefix length {prefix_len} does not match committed cache length {committed_len}"
        )));
    }
    Ok(())
}

fn require_dense(tree: &SpecTree) -> Result<(), EngineError> {
    if tree.valid.iter().all(|&v| v) {
        Ok(())
    } else {
        Err(EngineError::Config("padded trees cannot be decoded".into()))
    }
}

/// Single tree-masked forward over all slots of `tree` on a replica of the
/// committed cache. Slot `k` sits at position `prefix_len + depth[k]`.
pub fn verify_tree_batched<T: Real>(
    teacher: &Model<T>,
    committed: &CommittedCache<T>,
    tree: &SpecTree,
    prefix_len: usize,
) -> Result<VerifyResult<T>, EngineError> {
    check_prefix(committed.seq_len(), prefix_len)?;
    validate_tree(tree).map_err(|error| EngineError::structure(error, tree, committed.seq_len()))?;
    let anc = build_ancestor_table(tree);
    let mask = build_tree_mask(tree, &anc, prefix_len);
    verify_with_mask(teacher, committed, tree, &mask)
}

fn verify_with_mask<T: Real>(
    teacher: &Model<T>,
    committed: &CommittedCache<T>,
    tree: &SpecTree,
    mask: &TreeMask<T>,
) -> Result<VerifyResult<T>, EngineError> {
    require_dense(tree)?;
    let prefix_len = committed.seq_len();
    let positions: Vec<usize> = tree.depth.iter().map(|d| prefix_len + d).collect();
    let mut branch = replicate(committed);
    let out = teacher.forward_masked_batch(&tree.tokens, branch.kv_mut(), mask, &positions)?;
    let argmax = out.logits.iter().map(|l| greedy_token(l)).collect();
    Ok(VerifyResult {
        logits: out.logits,
        argmax,
        branch,
        teacher_calls: 1,
    })
}

/// Evaluates every slot by sequential `forward_step` along its root path,
/// reusing the parent's cache. The branch is reassembled in tree order so
/// commits see the same layout as in performance mode.
pub fn verify_tree_reference<T: Real>(
    teacher: &Model<T>,
    committed: &CommittedCache<T>,
    tree: &SpecTree,
    prefix_len: usize,
) -> Result<VerifyResult<T>, EngineError> {
    check_prefix(committed.seq_len(), prefix_len)?;
    validate_tree(tree).map_err(|error| EngineError::structure(error, tree, committed.seq_len()))?;
    require_dense(tree)?;

    let slots = tree.slot_count();
    let mut path_caches: Vec<BranchCache<T>> = Vec::with_capacity(slots);
    let mut logits = Vec::with_capacity(slots);
    for k in 0..slots {
        let mut cache = if k == 0 {
            replicate(committed)
        } else {
            path_caches[tree.parent[k]].clone()
        };
        let out = teacher.forward_step(tree.tokens[k], cache.kv_mut())?;
        logits.push(out.logits.into_iter().next().expect("one row"));
        path_caches.push(cache);
    }

    let mut branch = replicate(committed);
    for (k, cache) in path_caches.iter().enumerate() {
        branch.push_from(cache.kv(), prefix_len + tree.depth[k]);
    }
    let argmax = logits.iter().map(|l| greedy_token(l)).collect();
    Ok(VerifyResult {
        logits,
        argmax,
        branch,
        teacher_calls: slots,
    })
}

/// Greedy acceptance walk from the root slot.
pub fn accept_greedy<T: Real>(tree: &SpecTree, verify: &VerifyResult<T>) -> AcceptOutcome {
    let mut chain = Vec::new();
    let mut cur = 0;
    loop {
        let want = verify.argmax[cur];
        match tree.children(cur).find(|&k| tree.tokens[k] == want) {
            Some(k) => {
                chain.push(k);
                cur = k;
            }
            None => break,
        }
    }
    let bonus = verify.argmax[cur];
    let mut emitted = match chain.last() {
        Some(&leaf) => path_to_node(tree, leaf).expect("chain nodes are valid"),
        None => Vec::new(),
    };
    emitted.push(bonus);
    AcceptOutcome {
        accepted: chain.len(),
        chain,
        bonus,
        emitted,
    }
}

pub fn generate_speculative<T: Real, D: Real>(
    teacher: &Model<T>,
    drafter: &Model<D>,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Decoded<T>, EngineError> {
    generate_speculative_observed(teacher, drafter, prompt, cfg, &mut ())
}

pub fn generate_speculative_observed<T: Real, D: Real>(
    teacher: &Model<T>,
    drafter: &Model<D>,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    observer: &mut dyn Observer<T>,
) -> Result<Decoded<T>, EngineError> {
    cfg.validate()?;
    if teacher.vocab_size() != drafter.vocab_size() {
        return Err(EngineError::Config(format!(
            "teacher vocabulary {} differs from drafter vocabulary {}",
            teacher.vocab_size(),
            drafter.vocab_size()
        )));
    }
    let start = Instant::now();
    let mut committed = CommittedCache::new(teacher.empty_cache());
    let prefill_start = Instant::now();
    let prefill = teacher.prefill(prompt, committed.kv_mut())?;
    let prefill_ns = elapsed_ns(prefill_start);
    let mut pending = greedy_token(prefill.last());

    let mut committed_tokens = prompt.to_vec();
    let mut output: Vec<TokenId> = Vec::with_capacity(cfg.max_new_tokens);
    let mut iterations = Vec::new();
    let mut hit_eos = false;

    while output.len() < cfg.max_new_tokens && !hit_eos {
        let mut timings = StageTimings::default();
        if iterations.is_empty() {
            timings.prefill = prefill_ns;
        }
        let prefix_len = committed.seq_len();

        let t = Instant::now();
        let mut context = Vec::with_capacity(committed_tokens.len() + 1);
        context.extend_from_slice(&committed_tokens);
        context.push(pending);
        let mut tree = propose_tree(drafter, &context, &cfg.draft)?;
        tree.set_root_token(pending);
        timings.draft = elapsed_ns(t);

        observer.inspect_tree(&mut tree);

        let t = Instant::now();
        validate_tree(&tree).map_err(|error| EngineError::structure(error, &tree, prefix_len))?;
        let anc = build_ancestor_table(&tree);
        timings.tensorize = elapsed_ns(t);

        let t = Instant::now();
        let mask: TreeMask<T> = build_tree_mask(&tree, &anc, prefix_len);
        timings.mask = elapsed_ns(t);

        let t = Instant::now();
        let verify = match cfg.mode {
            Mode::Performance => verify_with_mask(teacher, &committed, &tree, &mask)?,
            Mode::Reference => verify_tree_reference(teacher, &committed, &tree, prefix_len)?,
        };
        timings.verify = elapsed_ns(t);

        let t = Instant::now();
        let outcome = accept_greedy(&tree, &verify);
        timings.accept = elapsed_ns(t);

        let t = Instant::now();
        let (next, report, path) = match cfg.commit_mode {
            CommitMode::Path => {
                let path = accepted_path_indices(&tree, &outcome.chain, prefix_len)
                    .map_err(|error| EngineError::structure(error, &tree, prefix_len))?;
                let (next, report) = commit_by_path_indices(&committed, &verify.branch, &path, cfg.fast_cache_reorder)?;
                (next, report, Some(path))
            }
            CommitMode::Length => {
                let slots: Vec<usize> = std::iter::once(0).chain(outcome.chain.iter().copied()).collect();
                let selected = verify.branch.select_slots(&slots)?;
                let next = commit_by_length(&committed, &selected, slots.len())?;
                (
                    next,
                    CommitReport {
                        kind: CommitKind::Length,
                        fast_fallback: false,
                    },
                    None,
                )
            }
        };
        timings.commit = elapsed_ns(t);

        // The root slot (pending) and the accepted chain are now committed.
        let fresh: Vec<TokenId> = std::iter::once(pending)
            .chain(outcome.chain.iter().map(|&k| tree.tokens[k]))
            .collect();
        committed_tokens.extend_from_slice(&fresh);
        for &tok in &fresh {
            if output.len() < cfg.max_new_tokens && !hit_eos {
                output.push(tok);
                hit_eos = cfg.eos_token == Some(tok);
            }
        }

        observer.after_iteration(&IterationView {
            index: iterations.len(),
            tree: &tree,
            committed_before: &committed,
            verify: &verify,
            outcome: &outcome,
            path: path.as_ref(),
            report,
            committed_after: &next,
            committed_tokens: &committed_tokens,
        });

        iterations.push(IterationRecord {
            accepted: outcome.accepted,
            emitted: fresh.len(),
            tree_size: tree.node_count(),
            depth_used: tree.max_depth(),
            commit: report.kind,
            fast_fallback: report.fast_fallback,
            teacher_calls: verify.teacher_calls,
            mask_rows: mask.rows(),
            mask_cols: mask.cols(),
            mask_zeros: mask.zero_count(),
            timings: cfg.profile.then_some(timings),
        });
        committed = next;
        pending = outcome.bonus;
    }

    let trace = TurnTrace {
        prompt_id: 0,
        decoder: DecoderKind::Speculative,
        mode: Some(cfg.mode),
        prompt_len: prompt.len(),
        output_len: output.len(),
        output: output.clone(),
        teacher_forward_count: iterations.len(),
        iterations,
        prefill_count: 1,
        wall_clock_ns: elapsed_ns(start),
        ttft_ns: prefill_ns,
        token_times_ns: Vec::new(),
    };
    Ok(Decoded {
        tokens: output,
        trace,
        cache: committed,
    })
}
