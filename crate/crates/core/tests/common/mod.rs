#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use treespec_core::tree::{linearize, NodeRef, SpecTree};
use treespec_core::TokenId;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tree with exactly `m` draft nodes and depth at most `d_max`,
/// built from edges in creation order and BFS-linearized.
pub fn random_tree(rng: &mut impl Rng, m: usize, d_max: usize, vocab: TokenId) -> SpecTree {
    let mut depth_of = vec![0usize];
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let candidates: Vec<usize> = (0..depth_of.len()).filter(|&i| depth_of[i] < d_max).collect();
        let parent = candidates[rng.random_range(0..candidates.len())];
        let node_ref = if parent == 0 {
            NodeRef::Root
        } else {
            NodeRef::Inserted(parent)
        };
        edges.push((node_ref, rng.random_range(0..vocab)));
        depth_of.push(depth_of[parent] + 1);
    }
    let mut tree = linearize(&edges).expect("edges reference earlier nodes");
    tree.set_root_token(rng.random_range(0..vocab));
    tree
}

/// Ancestor test by walking parent pointers, independent of the crate.
pub fn walks_to(tree: &SpecTree, ancestor: usize, node: usize) -> bool {
    let mut cur = node;
    loop {
        if cur == ancestor {
            return true;
        }
        if cur == 0 {
            return false;
        }
        cur = tree.parent[cur];
    }
}
