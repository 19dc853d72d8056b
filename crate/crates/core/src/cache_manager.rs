//! Committed prefix cache and speculative branch caches.
//!
//! Branches are full copies of the committed cache. Speculative forwards only
//! ever write to a branch; the committed cache is replaced wholesale by one of
//! the commit operations after acceptance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;
use crate::toy_model::{KvCache, LayerKv};
use crate::tree::PathIndices;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommitError {
    #[error("cannot adopt {requested} slots from a branch with {available} new slots")]
    LengthOutOfRange { requested: usize, available: usize },
    #[error("path index {index} at position {position} outside branch of length {branch_len}")]
    IndexOutOfRange {
        position: usize,
        index: usize,
        branch_len: usize,
    },
    #[error("committed cache has length {committed}, branch was replicated at {base}")]
    BaseMismatch { committed: usize, base: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("no layers")]
    Empty,
    #[error("layer {layer}: {detail}")]
    Ragged { layer: usize, detail: String },
}

/// KV state of the accepted prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct CommittedCache<T> {
    kv: KvCache<T>,
}

impl<T: Real> CommittedCache<T> {
    pub fn new(kv: KvCache<T>) -> Self {
        Self { kv }
    }

    pub fn kv(&self) -> &KvCache<T> {
        &self.kv
    }

    /// Mutable access for non-speculative decoding (prefill, baseline steps).
    pub fn kv_mut(&mut self) -> &mut KvCache<T> {
        &mut self.kv
    }

    pub fn into_kv(self) -> KvCache<T> {
        self.kv
    }

    pub fn seq_len(&self) -> usize {
        self.kv.seq_len()
    }
}

/// Replica of a committed cache, extended in place by speculative slots.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchCache<T> {
    kv: KvCache<T>,
    base_len: usize,
}

impl<T: Real> BranchCache<T> {
    pub fn kv(&self) -> &KvCache<T> {
        &self.kv
    }

    pub fn kv_mut(&mut self) -> &mut KvCache<T> {
        &mut self.kv
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn seq_len(&self) -> usize {
        self.kv.seq_len()
    }

    /// Slots written after replication.
    pub fn extension_len(&self) -> usize {
        self.seq_len() - self.base_len
    }

    /// Appends one position, copied from `source` at `pos`, to every layer.
    pub fn push_from(&mut self, source: &KvCache<T>, pos: usize) {
        for (dst, src) in self.kv.layers_mut().iter_mut().zip(source.layers()) {
            dst.push(src.key(pos), src.value(pos));
        }
    }

    /// The per-candidate branch for one root-to-node path: the base prefix
    /// followed by the speculative slots listed in `slots` (offsets from
    /// `base_len`), in that order.
    pub fn select_slots(&self, slots: &[usize]) -> Result<Self, CommitError> {
        let mut out = Self {
            kv: self.kv.clone(),
            base_len: self.base_len,
        };
        out.kv.truncate(self.base_len);
        for (position, &s) in slots.iter().enumerate() {
            let index = self.base_len + s;
            if index >= self.seq_len() {
                return Err(CommitError::IndexOutOfRange {
                    position,
                    index,
                    branch_len: self.seq_len(),
                });
            }
            out.push_from(&self.kv, index);
        }
        Ok(out)
    }
}

pub fn replicate<T: Real>(committed: &CommittedCache<T>) -> BranchCache<T> {
    BranchCache {
        kv: committed.kv.clone(),
        base_len: committed.seq_len(),
    }
}

pub fn seq_length<T: Real>(cache: &CommittedCache<T>) -> usize {
    cache.seq_len()
}

/// How a commit was carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommitKind {
    Length,
    Path,
    PathFast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitReport {
    pub kind: CommitKind,
    /// Fast reorder was requested but the full gather ran instead.
    pub fast_fallback: bool,
}

/// Keeps the committed prefix and adopts the branch's first `accepted` new
/// slots.
pub fn commit_by_length<T: Real>(
    committed: &CommittedCache<T>,
    branch: &BranchCache<T>,
    accepted: usize,
) -> Result<CommittedCache<T>, CommitError> {
    if committed.seq_len() != branch.base_len {
        return Err(CommitError::BaseMismatch {
            committed: committed.seq_len(),
            base: branch.base_len,
        });
    }
    if accepted > branch.extension_len() {
        return Err(CommitError::LengthOutOfRange {
            requested: accepted,
            available: branch.extension_len(),
        });
    }
    let mut kv = committed.kv.clone();
    let range = branch.base_len..branch.base_len + accepted;
    for (dst, src) in kv.layers_mut().iter_mut().zip(branch.kv.layers()) {
        dst.extend_from(&src.slice(range.clone()));
    }
    Ok(CommittedCache { kv })
}

/// Rebuilds the committed cache as `new[i] = branch[path[i]]`.
///
/// With `fast` set and a prefix-preserving path, the first `base_len`
/// positions are copied as one slice and only the tail is gathered. Any other
/// shape falls back to the full gather, which is flagged in the report.
pub fn commit_by_path_indices<T: Real>(
    committed: &CommittedCache<T>,
    branch: &BranchCache<T>,
    path: &PathIndices,
    fast: bool,
) -> Result<(CommittedCache<T>, CommitReport), CommitError> {
    let branch_len = branch.seq_len();
    if let Some((position, &index)) = path.as_slice().iter().enumerate().find(|(_, &i)| i >= branch_len) {
        return Err(CommitError::IndexOutOfRange {
            position,
            index,
            branch_len,
        });
    }
    if !fast {
        let kv = gather(&branch.kv, path.as_slice());
        return Ok((
            CommittedCache { kv },
            CommitReport {
                kind: CommitKind::Path,
                fast_fallback: false,
            },
        ));
    }
    let base = branch.base_len;
    let fast_ok = committed.seq_len() == base && path.preserves_prefix(base);
    if !fast_ok {
        let kv = gather(&branch.kv, path.as_slice());
        return Ok((
            CommittedCache { kv },
            CommitReport {
                kind: CommitKind::Path,
                fast_fallback: true,
            },
        ));
    }
    let mut kv = committed.kv.clone();
    let tail = &path.as_slice()[base..];
    for (dst, src) in kv.layers_mut().iter_mut().zip(branch.kv.layers()) {
        for &i in tail {
            dst.push(src.key(i), src.value(i));
        }
    }
    Ok((
        CommittedCache { kv },
        CommitReport {
            kind: CommitKind::PathFast,
            fast_fallback: false,
        },
    ))
}

/// Full reorder along the sequence dimension.
fn gather<T: Real>(kv: &KvCache<T>, indices: &[usize]) -> KvCache<T> {
    let layers = kv
        .layers()
        .iter()
        .map(|src| {
            let mut dst = LayerKv::new(src.dim());
            for &i in indices {
                dst.push(src.key(i), src.value(i));
            }
            dst
        })
        .collect();
    KvCache::from_layers(layers).expect("gather keeps layers aligned")
}

/// One layer as `seq_len × dim` row matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatrices<T> {
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
}

/// Layer-ordered `(keys, values)` matrices.
pub fn export_layers<T: Real>(kv: &KvCache<T>) -> Vec<LayerMatrices<T>> {
    kv.layers()
        .iter()
        .map(|l| LayerMatrices {
            keys: (0..l.len()).map(|p| l.key(p).to_vec()).collect(),
            values: (0..l.len()).map(|p| l.value(p).to_vec()).collect(),
        })
        .collect()
}

/// Inverse of [`export_layers`].
///
/// An empty cache exports rows with no width information, so `dim` is needed
/// to rebuild it.
pub fn import_layers<T: Real>(layers: &[LayerMatrices<T>], dim: usize) -> Result<KvCache<T>, FormatError> {
    let len = layers.first().ok_or(FormatError::Empty)?.keys.len();
    let mut out = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let ragged = |detail: String| FormatError::Ragged { layer: i, detail };
        if l.keys.len() != len || l.values.len() != len {
            return Err(ragged(format!(
                "{} keys / {} values, expected {len}",
                l.keys.len(),
                l.values.len()
            )));
        }
        if let Some(row) = l.keys.iter().chain(&l.values).find(|r| r.len() != dim) {
            return Err(ragged(format!("row width {}, expected {dim}", row.len())));
        }
        let layer = LayerKv::from_flat(dim, l.keys.concat(), l.values.concat())
            .ok_or_else(|| ragged("inconsistent layer".into()))?;
        out.push(layer);
    }
    Ok(KvCache::from_layers(out).expect("lengths checked above"))
}

/// Commit operations written only against [`export_layers`] /
/// [`import_layers`], used to check that the direct implementations do not
/// depend on the internal layout.
pub mod portable {
    use super::*;

    pub fn commit_by_length<T: Real>(
        committed: &CommittedCache<T>,
        branch: &BranchCache<T>,
        accepted: usize,
    ) -> Result<CommittedCache<T>, CommitError> {
        let base = branch.base_len();
        if committed.seq_len() != base {
            return Err(CommitError::BaseMismatch {
                committed: committed.seq_len(),
                base,
            });
        }
        if accepted > branch.extension_len() {
            return Err(CommitError::LengthOutOfRange {
                requested: accepted,
                available: branch.extension_len(),
            });
        }
        let mut layers = export_layers(committed.kv());
        for (dst, src) in layers.iter_mut().zip(export_layers(branch.kv())) {
            dst.keys.extend_from_slice(&src.keys[base..base + accepted]);
            dst.values.extend_from_slice(&src.values[base..base + accepted]);
        }
        Ok(CommittedCache::new(rebuild(&layers, branch.kv().dim())))
    }

    pub fn commit_by_path_indices<T: Real>(
        branch: &BranchCache<T>,
        path: &PathIndices,
    ) -> Result<CommittedCache<T>, CommitError> {
        let src = export_layers(branch.kv());
        let branch_len = branch.seq_len();
        let mut layers = Vec::with_capacity(src.len());
        for l in &src {
            let mut keys = Vec::with_capacity(path.len());
            let mut values = Vec::with_capacity(path.len());
            for (position, &index) in path.as_slice().iter().enumerate() {
                if index >= branch_len {
                    return Err(CommitError::IndexOutOfRange {
                        position,
                        index,
                        branch_len,
                    });
                }
                keys.push(l.keys[index].clone());
                values.push(l.values[index].clone());
            }
            layers.push(LayerMatrices { keys, values });
        }
        Ok(CommittedCache::new(rebuild(&layers, branch.kv().dim())))
    }

    fn rebuild<T: Real>(layers: &[LayerMatrices<T>], dim: usize) -> KvCache<T> {
        import_layers(layers, dim).expect("exported layers are rectangular")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cache whose entries encode (layer, position, channel) so copies are
    /// traceable.
    fn synthetic(layers: usize, len: usize, dim: usize, tag: f64) -> KvCache<f64> {
        let mut kv = KvCache::new(layers, dim);
        for (l, layer) in kv.layers_mut().iter_mut().enumerate() {
            for p in 0..len {
                let k: Vec<f64> = (0..dim).map(|c| tag + (l * 1000 + p * 10 + c) as f64).collect();
                let v: Vec<f64> = k.iter().map(|x| -x).collect();
                layer.push(&k, &v);
            }
        }
        kv
    }

    fn extend(branch: &mut BranchCache<f64>, n: usize, tag: f64) {
        let extra = synthetic(branch.kv().num_layers(), n, branch.kv().dim(), tag);
        for p in 0..n {
            branch.push_from(&extra, p);
        }
    }

    #[test]
    fn replicas_are_isolated() {
        let committed = CommittedCache::new(synthetic(2, 4, 3, 0.0));
        let before = committed.clone();
        let mut a = replicate(&committed);
        let mut b = replicate(&committed);
        extend(&mut a, 3, 0.5);
        extend(&mut b, 2, 0.25);
        assert_eq!(committed, before);
        assert_eq!(committed.seq_len(), 4);
        assert_eq!(a.kv().layer(0).slice(0..4), b.kv().layer(0).slice(0..4));
        assert_ne!(a.kv().layer(0).key(4), b.kv().layer(0).key(4));

        let empty = CommittedCache::new(KvCache::<f64>::new(2, 3));
        assert_eq!(replicate(&empty).base_len(), 0);
    }

    #[test]
    fn length_commit() {
        let committed = CommittedCache::new(synthetic(2, 4, 3, 0.0));
        let mut branch = replicate(&committed);
        extend(&mut branch, 6, 0.5);
        let c = commit_by_length(&committed, &branch, 2).unwrap();
        assert_eq!(seq_length(&c), 6);
        assert_eq!(c.kv().layer(1).key(5), branch.kv().layer(1).key(5));
        assert_eq!(commit_by_length(&committed, &branch, 0).unwrap(), committed);
        assert_eq!(
            commit_by_length(&committed, &branch, 7).unwrap_err(),
            CommitError::LengthOutOfRange {
                requested: 7,
                available: 6
            }
        );
    }

    #[test]
    fn path_commit_fast_matches_full() {
        let committed = CommittedCache::new(synthetic(2, 4, 3, 0.0));
        let mut branch = replicate(&committed);
        extend(&mut branch, 6, 0.5);
        let path = PathIndices(vec![0, 1, 2, 3, 4, 6]);
        let (fast, rf) = commit_by_path_indices(&committed, &branch, &path, true).unwrap();
        let (full, rs) = commit_by_path_indices(&committed, &branch, &path, false).unwrap();
        assert_eq!(fast, full);
        assert_eq!(fast.seq_len(), 6);
        assert_eq!((rf.kind, rf.fast_fallback), (CommitKind::PathFast, false));
        assert_eq!(rs.kind, CommitKind::Path);
        assert_eq!(fast.kv().layer(0).key(5), branch.kv().layer(0).key(6));
    }

    #[test]
    fn path_commit_identity_and_bounds() {
        let committed = CommittedCache::new(synthetic(2, 4, 3, 0.0));
        let mut branch = replicate(&committed);
        extend(&mut branch, 2, 0.5);
        let (same, _) = commit_by_path_indices(&committed, &branch, &PathIndices(vec![0, 1, 2, 3]), true).unwrap();
        assert_eq!(same, committed);
        let err = commit_by_path_indices(&committed, &branch, &PathIndices(vec![0, 1, 9]), true).unwrap_err();
        assert_eq!(
            err,
            CommitError::IndexOutOfRange {
                position: 2,
                index: 9,
                branch_len: 6
            }
        );
    }

    #[test]
    fn non_prefix_path_falls_back() {
        let committed = CommittedCache::new(synthetic(1, 4, 2, 0.0));
        let mut branch = replicate(&committed);
        extend(&mut branch, 3, 0.5);
        let path = PathIndices(vec![1, 0, 2, 3, 5]);
        let (fast, report) = commit_by_path_indices(&committed, &branch, &path, true).unwrap();
        assert!(report.fast_fallback);
        assert_eq!(report.kind, CommitKind::Path);
        let (full, _) = commit_by_path_indices(&committed, &branch, &path, false).unwrap();
        assert_eq!(fast, full);
        assert_eq!(fast.kv().layer(0).key(0), committed.kv().layer(0).key(1));

        // Path shorter than the prefix is a shape inconsistency.
        let (_, report) = commit_by_path_indices(&committed, &branch, &PathIndices(vec![0, 1]), true).unwrap();
        assert!(report.fast_fallback);
    }

    #[test]
    fn select_slots_builds_path_branch() {
        let committed = CommittedCache::new(synthetic(2, 3, 2, 0.0));
        let mut branch = replicate(&committed);
        extend(&mut branch, 5, 0.5);
        let sel = branch.select_slots(&[0, 2, 4]).unwrap();
        assert_eq!(sel.base_len(), 3);
        assert_eq!(sel.extension_len(), 3);
        assert_eq!(sel.kv().layer(1).key(4), branch.kv().layer(1).key(5));
        assert!(branch.select_slots(&[5]).is_err());
    }

    #[test]
    fn export_import_round_trip_and_errors() {
        let kv = synthetic(3, 5, 4, 0.125);
        let back = import_layers(&export_layers(&kv), 4).unwrap();
        assert_eq!(back, kv);

        let empty = KvCache::<f64>::new(2, 4);
        let exported = export_layers(&empty);
        assert_eq!(exported.len(), 2);
        assert!(exported.iter().all(|l| l.keys.is_empty() && l.values.is_empty()));
        assert_eq!(import_layers(&exported, 4).unwrap(), empty);

        let mut ragged = export_layers(&synthetic(2, 4, 2, 0.0));
        ragged[1].keys.push(vec![0.0, 0.0]);
        ragged[1].values.push(vec![0.0, 0.0]);
        assert!(matches!(
            import_layers(&ragged, 2),
            Err(FormatError::Ragged { layer: 1, .. })
        ));
        assert_eq!(import_layers::<f64>(&[], 2).unwrap_err(), FormatError::Empty);
    }

    #[test]
    fn portable_commits_agree_with_direct() {
        let committed = CommittedCache::new(synthetic(2, 4, 3, 0.0));
        let mut branch = replicate(&committed);
        extend(&mut branch, 5, 0.5);
        for a in 0..=5 {
            assert_eq!(
                portable::commit_by_length(&committed, &branch, a).unwrap(),
                commit_by_length(&committed, &branch, a).unwrap()
            );
        }
        for path in [vec![0, 1, 2, 3, 4, 7], vec![3, 2, 8], vec![]] {
            let p = PathIndices(path);
            let (direct, _) = commit_by_path_indices(&committed, &branch, &p, true).unwrap();
            let portable = portable::commit_by_path_indices(&branch, &p);
            if p.is_empty() {
                assert_eq!(direct.seq_len(), 0);
                assert_eq!(portable.unwrap().seq_len(), 0);
            } else {
                assert_eq!(portable.unwrap(), direct);
            }
        }
    }
}
