//! Draft-tree proposal, drafter context truncation and vocabulary subsets.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::real::{log_softmax, Real};
use crate::toy_model::{Model, ModelError};
use crate::tree::{linearize, NodeRef, SpecTree};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum DraftError {
    #[error("invalid draft configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("subset cache I/O: {0}")]
    Io(#[from] io::Error),
    #[error("subset cache file is malformed: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DraftConfig {
    /// Node budget `M`.
    pub node_budget: usize,
    /// Depth bound `D_max`.
    pub depth_bound: usize,
    /// Children added per expanded node.
    pub branch_factor: usize,
    /// Drafter-only context window.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_subset: Option<SubsetMap>,
}

impl Default for DraftConfig {
    fn default() -> Self {
        Self {
            node_budget: 16,
            depth_bound: 10,
            branch_factor: 4,
            window: None,
            vocab_subset: None,
        }
    }
}

impl DraftConfig {
    pub fn validate(&self) -> Result<(), DraftError> {
        if self.node_budget == 0 || self.depth_bound == 0 || self.branch_factor == 0 {
            return Err(DraftError::Config(format!(
                "node_budget, depth_bound and branch_factor must be >= 1 (got {}, {}, {})",
                self.node_budget, self.depth_bound, self.branch_factor
            )));
        }
        if self.window == Some(0) {
            return Err(DraftError::Config("window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Last `window` tokens of `context` (all of it when `window` is `None`).
pub fn truncate_context(context: &[TokenId], window: Option<usize>) -> &[TokenId] {
    match window {
        Some(w) if w < context.len() => &context[context.len() - w..],
        _ => context,
    }
}

/// Restriction of the drafter's output vocabulary to a kept token set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct SubsetMap {
    kept: Vec<TokenId>,
    to_subset: BTreeMap<TokenId, usize>,
}

impl SubsetMap {
    /// `kept` is sorted and deduplicated.
    pub fn new(mut kept: Vec<TokenId>) -> Self {
        kept.sort_unstable();
        kept.dedup();
        let to_subset = kept.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        Self { kept, to_subset }
    }

    pub fn identity(vocab_size: usize) -> Self {
        Self::new((0..vocab_size as TokenId).collect())
    }

    pub fn kept(&self) -> &[TokenId] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn to_subset(&self, token: TokenId) -> Option<usize> {
        self.to_subset.get(&token).copied()
    }

    pub fn to_full(&self, index: usize) -> TokenId {
        self.kept[index]
    }
}

impl TryFrom<Vec<TokenId>> for SubsetMap {
    type Error = String;

    fn try_from(kept: Vec<TokenId>) -> Result<Self, String> {
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err("kept tokens must be strictly increasing".into());
        }
        Ok(Self::new(kept))
    }
}

impl From<SubsetMap> for Vec<TokenId> {
    fn from(s: SubsetMap) -> Self {
        s.kept
    }
}

/// Top-`size` tokens by corpus frequency, ties to the smaller id.
pub fn build_vocab_subset(corpus: &[Vec<TokenId>], size: usize, vocab_size: usize) -> Result<SubsetMap, DraftError> {
    if size == 0 || size > vocab_size {
        return Err(DraftError::Config(format!(
            "subset size {size} not in [1, {vocab_size}]"
        )));
    }
    if corpus.iter().all(Vec::is_empty) {
        return Err(DraftError::Config("empty corpus".into()));
    }
    let mut counts = vec![0usize; vocab_size];
    for &t in corpus.iter().flatten() {
        if (t as usize) >= vocab_size {
            return Err(DraftError::Config(format!(
                "corpus token {t} outside vocabulary {vocab_size}"
            )));
        }
        counts[t as usize] += 1;
    }
    let mut order: Vec<TokenId> = (0..vocab_size as TokenId).collect();
    order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    order.truncate(size);
    Ok(SubsetMap::new(order))
}

/// Hex SHA-256 over the corpus: per sequence, its length then its tokens,
/// all as little-endian `u32`.
pub fn corpus_hash(corpus: &[Vec<TokenId>]) -> String {
    let mut h = Sha256::new();
    for seq in corpus {
        h.update((seq.len() as u32).to_le_bytes());
        for t in seq {
            h.update(t.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SubsetCacheFile {
    corpus_hash: String,
    #[serde(rename = "V'")]
    size: usize,
    kept: Vec<TokenId>,
}

/// Content-addressed on-disk cache of vocabulary subsets.
#[derive(Debug, Clone)]
pub struct SubsetCache {
    dir: PathBuf,
}

impl SubsetCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, hash: &str, size: usize) -> PathBuf {
        self.dir.join(format!("subset-{}-{size}.json", &hash[..16]))
    }

    /// Loads the cached subset for `(corpus, size)`, building and writing it
    /// on a miss. Returns the map and whether it came from disk.
    pub fn load_or_build(
        &self,
        corpus: &[Vec<TokenId>],
        size: usize,
        vocab_size: usize,
    ) -> Result<(SubsetMap, bool), DraftError> {
        let hash = corpus_hash(corpus);
        let path = self.path_for(&hash, size);
        if let Some(map) = Self::read(&path, &hash, size)? {
            return Ok((map, true));
        }
        let map = build_vocab_subset(corpus, size, vocab_size)?;
        fs::create_dir_all(&self.dir)?;
        let file = SubsetCacheFile {
            corpus_hash: hash,
            size,
            kept: map.kept().to_vec(),
        };
        fs::write(&path, serde_json::to_vec_pretty(&file)?)?;
        Ok((map, false))
    }

    fn read(path: &Path, hash: &str, size: usize) -> Result<Option<SubsetMap>, DraftError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let file: SubsetCacheFile = serde_json::from_slice(&bytes)?;
        if file.corpus_hash != hash || file.size != size {
            log::warn!("subset cache {} does not match its key, rebuilding", path.display());
            return Ok(None);
        }
        Ok(Some(SubsetMap::new(file.kept)))
    }
}

/// Full-vocabulary draft logits gathered at the subset's kept tokens.
pub fn draft_logits_on_subset<T: Real>(
    draft: &Model<T>,
    context: &[TokenId],
    subset: &SubsetMap,
) -> Result<Vec<T>, ModelError> {
    let mut cache = draft.empty_cache();
    let out = draft.prefill(context, &mut cache)?;
    Ok(gather_subset(out.last(), subset))
}

fn gather_subset<T: Real>(logits: &[T], subset: &SubsetMap) -> Vec<T> {
    subset.kept().iter().map(|&t| logits[t as usize]).collect()
}

/// `(token, log-prob)` for the `b` best tokens, best first, ties to the
/// smaller id. With a subset, probabilities are renormalized over it.
pub fn top_tokens<T: Real>(logits: &[T], b: usize, subset: Option<&SubsetMap>) -> Vec<(TokenId, f64)> {
    let (scores, ids): (Vec<T>, Vec<TokenId>) = match subset {
        Some(s) => (gather_subset(logits, s), s.kept().to_vec()),
        None => (logits.to_vec(), (0..logits.len() as TokenId).collect()),
    };
    let lp = log_softmax(&scores);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &c| {
        scores[c]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&c))
    });
    order.into_iter().take(b).map(|i| (ids[i], lp[i])).collect()
}

struct Frontier {
    score: f64,
    created: usize,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    // Max-heap: higher cumulative log-prob first, then earlier creation.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.created.cmp(&self.created))
    }
}

/// Best-first draft tree.
///
/// Starting from the root (the end of `context`), repeatedly expands the
/// frontier node with the highest cumulative draft log-probability by its
/// top-`b` tokens, until `M` nodes exist or no node shallower than `D_max`
/// remains. The result is BFS-linearized; slot 0's token is left for the
/// caller.
///
/// The context (after windowing) is prefilled once per call; each expansion
/// extends a copy of that cache along the node's path.
pub fn propose_tree<T: Real>(draft: &Model<T>, context: &[TokenId], cfg: &DraftConfig) -> Result<SpecTree, DraftError> {
    cfg.validate()?;
    let context = truncate_context(context, cfg.window);
    let mut base = draft.empty_cache();
    let root_logits = draft.prefill(context, &mut base)?.logits.pop().expect("one row");

    // Nodes in creation order: (parent creation index, 0 = root; token; depth).
    let mut nodes: Vec<(usize, TokenId, usize)> = Vec::new();
    let mut heap = BinaryHeap::from([Frontier { score: 0.0, created: 0 }]);

    while nodes.len() < cfg.node_budget {
        let Some(Frontier { score, created }) = heap.pop() else {
            break;
        };
        let depth = if created == 0 { 0 } else { nodes[created - 1].2 };
        if depth >= cfg.depth_bound {
            continue;
        }
        let logits = if created == 0 {
            root_logits.clone()
        } else {
            let mut path = Vec::with_capacity(depth);
            let mut cur = created;
            while cur != 0 {
                let (p, tok, _) = nodes[cur - 1];
                path.push(tok);
                cur = p;
            }
            path.reverse();
            let mut cache = base.clone();
            let mut out = None;
            for tok in path {
                out = Some(draft.forward_step(tok, &mut cache)?);
            }
            out.expect("non-root node has a path").logits.pop().expect("one row")
        };
        for (tok, lp) in top_tokens(&logits, cfg.branch_factor, cfg.vocab_subset.as_ref()) {
            if nodes.len() == cfg.node_budget {
                break;
            }
            nodes.push((created, tok, depth + 1));
            heap.push(Frontier {
                score: score + lp,
                created: nodes.len(),
            });
        }
    }

    let edges: Vec<(NodeRef, TokenId)> = nodes
        .iter()
        .map(|&(p, tok, _)| (if p == 0 { NodeRef::Root } else { NodeRef::Inserted(p) }, tok))
        .collect();
    Ok(linearize(&edges).expect("creation order lists parents first"))
}
