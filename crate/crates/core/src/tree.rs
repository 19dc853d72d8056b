//! Sentinel-free tree tensorization.
//!
//! A speculative tree is stored as flat arrays of length `M + 1`. Index 0 is
//! the root row and carries the pending root token; speculative nodes occupy
//! `1..=M` in breadth-first order. The root is its own parent, so every
//! parent and ancestor lookup stays inside `[0, M]` and no negative sentinel
//! ever reaches a gather.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureErrorKind {
    Range,
    DepthInconsistency,
    Cycle,
    ValidityClosure,
    Ordering,
}

impl fmt::Display for StructureErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Range => "range",
            Self::DepthInconsistency => "depth_inconsistency",
            Self::Cycle => "cycle",
            Self::ValidityClosure => "validity_closure",
            Self::Ordering => "ordering",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind} violation at node {node}: {detail}")]
pub struct StructureError {
    pub kind: StructureErrorKind,
    pub node: usize,
    pub detail: String,
}

impl StructureError {
    fn new(kind: StructureErrorKind, node: usize, detail: impl Into<String>) -> Self {
        Self {
            kind,
            node,
            detail: detail.into(),
        }
    }
}

/// Reference to the parent of an edge passed to [`linearize`]: either the
/// root or the 1-based insertion index of an earlier edge's child.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Root,
    Inserted(usize),
}

/// Linearized speculative tree.
///
/// Fields are public so that corrupted trees can be built for testing;
/// anything consuming a tree from outside should call [`validate_tree`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "SpecTreeRepr", try_from = "SpecTreeRepr")]
pub struct SpecTree {
    pub parent: Vec<usize>,
    pub depth: Vec<usize>,
    pub tokens: Vec<TokenId>,
    pub valid: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct SpecTreeRepr {
    #[serde(rename = "M")]
    m: usize,
    parent: Vec<usize>,
    depth: Vec<usize>,
    tokens: Vec<TokenId>,
    valid: Vec<bool>,
}

impl From<SpecTree> for SpecTreeRepr {
    fn from(t: SpecTree) -> Self {
        Self {
            m: t.node_count(),
            parent: t.parent,
            depth: t.depth,
            tokens: t.tokens,
            valid: t.valid,
        }
    }
}

impl TryFrom<SpecTreeRepr> for SpecTree {
    type Error = String;

    fn try_from(r: SpecTreeRepr) -> Result<Self, String> {
        let n = r.m + 1;
        if [r.parent.len(), r.depth.len(), r.tokens.len(), r.valid.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(format!("array lengths do not match M={}", r.m));
        }
        Ok(Self {
            parent: r.parent,
            depth: r.depth,
            tokens: r.tokens,
            valid: r.valid,
        })
    }
}

impl SpecTree {
    /// Tree with only the root row.
    pub fn root_only(root_token: TokenId) -> Self {
        Self {
            parent: vec![0],
            depth: vec![0],
            tokens: vec![root_token],
            valid: vec![true],
        }
    }

    /// Number of speculative nodes, excluding the root row.
    pub fn node_count(&self) -> usize {
        self.parent.len().saturating_sub(1)
    }

    /// Number of slots, including the root row.
    pub fn slot_count(&self) -> usize {
        self.parent.len()
    }

    pub fn root_token(&self) -> TokenId {
        self.tokens[0]
    }

    pub fn set_root_token(&mut self, token: TokenId) {
        self.tokens[0] = token;
    }

    /// Deepest valid node.
    pub fn max_depth(&self) -> usize {
        self.depth
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
            .max()
            .unwrap_or(0)
    }

    pub fn valid_node_count(&self) -> usize {
        self.valid.iter().skip(1).filter(|&&v| v).count()
    }

    /// Valid children of `node`, ascending by id.
    pub fn children(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        (1..self.slot_count()).filter(move |&k| self.valid[k] && self.parent[k] == node)
    }

    /// Whether `ancestor` lies on the root path of `node` (inclusive),
    /// found by walking parent pointers. Assumes a validated tree.
    pub fn is_ancestor(&self, ancestor: usize, node: usize) -> bool {
        let mut cur = node;
        for _ in 0..=self.depth[node] {
            if cur == ancestor {
                return true;
            }
            if cur == 0 {
                break;
            }
            cur = self.parent[cur];
        }
        false
    }
}

/// Builds a BFS-ordered tree from edges given in insertion order.
///
/// Edge `i` (0-based) creates the node with insertion index `i + 1`. The root
/// token slot is left as 0 for the caller to fill.
pub fn linearize(edges: &[(NodeRef, TokenId)]) -> Result<SpecTree, StructureError> {
    let n = edges.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (i, &(parent, _)) in edges.iter().enumerate() {
        let this = i + 1;
        let p = match parent {
            NodeRef::Root => 0,
            NodeRef::Inserted(p) if p >= 1 && p < this => p,
            NodeRef::Inserted(p) => {
                return Err(StructureError::new(
                    StructureErrorKind::Ordering,
                    this,
                    format!("edge {i} references node {p}, which is not yet defined"),
                ))
            }
        };
        children[p].push(this);
    }

    let mut tree = SpecTree::root_only(0);
    let mut new_id = vec![0usize; n + 1];
    let mut queue = VecDeque::from([0usize]);
    while let Some(old) = queue.pop_front() {
        for &child in &children[old] {
            let id = tree.slot_count();
            new_id[child] = id;
            let p = new_id[old];
            tree.parent.push(p);
            tree.depth.push(tree.depth[p] + 1);
            tree.tokens.push(edges[child - 1].1);
            tree.valid.push(true);
            queue.push_back(child);
        }
    }
    Ok(tree)
}

/// Checks every structural invariant, reporting the first failing kind in the
/// order range, cycle, depth, validity closure, ordering, and within a kind
/// the smallest offending node.
pub fn validate_tree(tree: &SpecTree) -> Result<(), StructureError> {
    use StructureErrorKind::*;
    let n = tree.parent.len();
    if n == 0 {
        return Err(StructureError::new(Range, 0, "tree has no root row"));
    }
    let m = n - 1;
    for (name, len) in [
        ("depth", tree.depth.len()),
        ("tokens", tree.tokens.len()),
        ("valid", tree.valid.len()),
    ] {
        if len != n {
            return Err(StructureError::new(
                Range,
                0,
                format!("{name} has length {len}, expected {n}"),
            ));
        }
    }
    if tree.parent[0] != 0 || tree.depth[0] != 0 {
        return Err(StructureError::new(Range, 0, "root row must have parent 0 and depth 0"));
    }
    if let Some(k) = (1..n).find(|&k| tree.parent[k] > m) {
        return Err(StructureError::new(
            Range,
            k,
            format!("parent {} outside [0, {m}]", tree.parent[k]),
        ));
    }
    for k in 1..n {
        let mut cur = k;
        let mut steps = 0;
        while cur != 0 {
            cur = tree.parent[cur];
            steps += 1;
            if steps > m {
                return Err(StructureError::new(Cycle, k, "parent chain never reaches the root"));
            }
        }
    }
    for k in (1..n).filter(|&k| tree.valid[k]) {
        let p = tree.parent[k];
        if tree.depth[k] == 0 || tree.depth[p] != tree.depth[k] - 1 {
            return Err(StructureError::new(
                DepthInconsistency,
                k,
                format!("depth {} under parent {p} of depth {}", tree.depth[k], tree.depth[p]),
            ));
        }
    }
    if !tree.valid[0] {
        return Err(StructureError::new(ValidityClosure, 0, "root row must be valid"));
    }
    if let Some(k) = (1..n).find(|&k| tree.valid[k] && !tree.valid[tree.parent[k]]) {
        return Err(StructureError::new(
            ValidityClosure,
            k,
            format!("valid node has invalid parent {}", tree.parent[k]),
        ));
    }
    if let Some(k) = (1..n).find(|&k| tree.parent[k] >= k) {
        return Err(StructureError::new(
            Ordering,
            k,
            format!("parent {} is not numbered before its child", tree.parent[k]),
        ));
    }
    Ok(())
}

/// `table[l][k]` is the `l`-th ancestor of slot `k`, saturating at the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AncestorTable {
    pub table: Vec<Vec<usize>>,
    pub max_depth: usize,
}

impl AncestorTable {
    pub fn get(&self, level: usize, node: usize) -> usize {
        self.table[level][node]
    }

    pub fn rows(&self) -> usize {
        self.table.len()
    }
}

pub fn build_ancestor_table(tree: &SpecTree) -> AncestorTable {
    build_ancestor_table_counted(tree).0
}

/// Same as [`build_ancestor_table`], also returning the number of parent
/// lookups performed: exactly `max_depth · (M + 1)`.
pub fn build_ancestor_table_counted(tree: &SpecTree) -> (AncestorTable, usize) {
    let max_depth = tree.max_depth();
    let mut table = Vec::with_capacity(max_depth + 1);
    table.push((0..tree.slot_count()).collect::<Vec<_>>());
    let mut lookups = 0;
    for l in 0..max_depth {
        let next = table[l]
            .iter()
            .map(|&a| {
                lookups += 1;
                tree.parent[a]
            })
            .collect();
        table.push(next);
    }
    (AncestorTable { table, max_depth }, lookups)
}

/// Trees padded to a common `M_max`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub trees: Vec<SpecTree>,
    pub m_max: usize,
}

/// Pads each tree with invalid slots (parent 0, depth 0, `pad_token`).
pub fn pad_batch(trees: &[SpecTree], pad_token: TokenId) -> PaddedBatch {
    let m_max = trees.iter().map(SpecTree::node_count).max().unwrap_or(0);
    let trees = trees
        .iter()
        .map(|t| {
            let mut t = t.clone();
            let extra = m_max - t.node_count();
            t.parent.extend(std::iter::repeat_n(0, extra));
            t.depth.extend(std::iter::repeat_n(0, extra));
            t.tokens.extend(std::iter::repeat_n(pad_token, extra));
            t.valid.extend(std::iter::repeat_n(false, extra));
            t
        })
        .collect();
    PaddedBatch { trees, m_max }
}

/// Tokens on the path from depth 1 down to node `k`.
pub fn path_to_node(tree: &SpecTree, k: usize) -> Result<Vec<TokenId>, StructureError> {
    if k == 0 || k > tree.node_count() || !tree.valid[k] {
        return Err(StructureError::new(
            StructureErrorKind::Range,
            k,
            "not a valid speculative node",
        ));
    }
    let mut path = Vec::with_capacity(tree.depth[k]);
    let mut cur = k;
    while cur != 0 {
        path.push(tree.tokens[cur]);
        cur = tree.parent[cur];
    }
    path.reverse();
    Ok(path)
}

/// Map from next-step committed positions to branch-cache slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathIndices(pub Vec<usize>);

impl PathIndices {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when the first `prefix_len` entries are `0..prefix_len`.
    pub fn preserves_prefix(&self, prefix_len: usize) -> bool {
        self.0.len() >= prefix_len && self.0.iter().take(prefix_len).copied().eq(0..prefix_len)
    }
}

/// Checks that `chain` descends from the root one level at a time.
pub fn check_chain(tree: &SpecTree, chain: &[usize]) -> Result<(), StructureError> {
    let mut prev = 0;
    for &node in chain {
        if node == 0 || node > tree.node_count() || !tree.valid[node] || tree.parent[node] != prev {
            return Err(StructureError::new(
                StructureErrorKind::DepthInconsistency,
                node,
                format!("node {node} is not a child of {prev}"),
            ));
        }
        prev = node;
    }
    Ok(())
}

/// Path indices for a branch laid out as `prefix_len` committed slots
/// followed by the `M + 1` speculative slots in tree order: the prefix maps
/// to itself, then the root slot, then each accepted node `k` at
/// `prefix_len + k`.
pub fn accepted_path_indices(
    tree: &SpecTree,
    chain: &[usize],
    prefix_len: usize,
) -> Result<PathIndices, StructureError> {
    check_chain(tree, chain)?;
    let indices = (0..prefix_len)
        .chain(std::iter::once(prefix_len))
        .chain(chain.iter().map(|&k| prefix_len + k))
        .collect();
    Ok(PathIndices(indices))
}
