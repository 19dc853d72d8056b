mod common;

use proptest::prelude::*;
use treespec_core::cache_manager::{
    commit_by_length, commit_by_path_indices, export_layers, import_layers, portable, replicate, CommittedCache,
};
use treespec_core::drafter::{build_vocab_subset, truncate_context};
use treespec_core::harness::{accept_pos, gen_prompts, merge_traces, shard, SummaryStats, TurnTrace};
use treespec_core::mask::{brute_force_mask, build_tree_mask, TreeMask};
use treespec_core::tree::{
    accepted_path_indices, build_ancestor_table, build_ancestor_table_counted, pad_batch, path_to_node, validate_tree,
};
use treespec_core::{Model, ModelConfig, SpecTree, TokenId};

use common::{random_tree, rng, walks_to};

fn tree_strategy(max_m: usize, max_d: usize) -> impl Strategy<Value = SpecTree> {
    (0..=max_m, 1..=max_d, any::<u64>()).prop_map(|(m, d, seed)| random_tree(&mut rng(seed), m, d, 64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn linearized_trees_are_valid(tree in tree_strategy(64, 16)) {
        prop_assert!(validate_tree(&tree).is_ok());
        for k in 1..tree.slot_count() {
            prop_assert!(tree.parent[k] < k);
            prop_assert!(tree.depth[k] >= tree.depth[k - 1]);
        }
    }

    #[test]
    fn mask_matches_parent_walk(tree in tree_strategy(64, 16), prefix in 0usize..8) {
        let mask: TreeMask<f64> = build_tree_mask(&tree, &build_ancestor_table(&tree), prefix);
        prop_assert_eq!(&mask, &brute_force_mask(&tree, prefix));
        for k in 0..tree.slot_count() {
            for j in 0..tree.slot_count() {
                prop_assert_eq!(mask.allows_slot(k, j), walks_to(&tree, j, k));
            }
        }
    }

    #[test]
    fn padded_mask_isolates_pads(a in tree_strategy(16, 6), b in tree_strategy(16, 6)) {
        let batch = pad_batch(&[a.clone(), b.clone()], 0);
        for (orig, padded) in [a, b].iter().zip(&batch.trees) {
            prop_assert_eq!(padded.slot_count(), batch.m_max + 1);
            let mask: TreeMask<f64> = build_tree_mask(padded, &build_ancestor_table(padded), 2);
            let plain: TreeMask<f64> = build_tree_mask(orig, &build_ancestor_table(orig), 2);
            for k in 0..padded.slot_count() {
                for j in 0..padded.slot_count() {
                    let expected = k < orig.slot_count() && j < orig.slot_count() && plain.allows_slot(k, j);
                    prop_assert_eq!(mask.allows_slot(k, j), expected);
                }
            }
        }
    }

    #[test]
    fn ancestor_table_saturates(tree in tree_strategy(48, 12)) {
        let (anc, lookups) = build_ancestor_table_counted(&tree);
        prop_assert!(lookups <= anc.rows() * tree.slot_count());
        for k in 0..tree.slot_count() {
            prop_assert_eq!(anc.get(0, k), k);
            let mut cur = k;
            for l in 0..anc.rows() {
                prop_assert_eq!(anc.get(l, k), cur);
                cur = tree.parent[cur];
            }
        }
    }

    #[test]
    fn path_tokens_follow_parents(tree in tree_strategy(32, 8)) {
        for k in 1..tree.slot_count() {
            let path = path_to_node(&tree, k).unwrap();
            prop_assert_eq!(path.len(), tree.depth[k]);
            prop_assert_eq!(*path.last().unwrap(), tree.tokens[k]);
        }
    }

    #[test]
    fn percentiles_are_ordered_and_sampled(values in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let s = SummaryStats::from_samples(&values).unwrap();
        prop_assert!(s.p50 <= s.p90 && s.p90 <= s.p99);
        for p in [s.p50, s.p90, s.p99] {
            prop_assert!(values.contains(&p));
        }
    }

    #[test]
    fn accept_pos_is_monotone(accepted in prop::collection::vec(0usize..12, 1..100)) {
        let pos = accept_pos(&accepted);
        prop_assert!(pos.windows(2).all(|w| w[0] >= w[1]));
        let at_least_one = accepted.iter().filter(|&&a| a >= 1).count();
        prop_assert!((pos[0] * accepted.len() as f64 - at_least_one as f64).abs() < 1e-9);
        prop_assert_eq!(*pos.last().unwrap(), 0.0);
    }

    #[test]
    fn shards_partition(count in 1usize..300, ws in 1usize..12) {
        let prompts = gen_prompts(7, count, (1, 2), 8).unwrap();
        let mut ids: Vec<u64> = (0..ws).flat_map(|r| shard(&prompts, ws, r).unwrap()).map(|p| p.id).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..count as u64).collect::<Vec<_>>());
    }

    #[test]
    fn window_keeps_suffix(ctx in prop::collection::vec(0u32..64, 0..40), w in 1usize..50) {
        let kept = truncate_context(&ctx, Some(w));
        prop_assert_eq!(kept.len(), ctx.len().min(w));
        prop_assert!(ctx.ends_with(kept));
        prop_assert_eq!(truncate_context(&ctx, None), &ctx[..]);
    }

    #[test]
    fn subset_prefers_frequent_tokens(
        corpus in prop::collection::vec(prop::collection::vec(0u32..16, 1..20), 1..6),
        size in 1usize..16,
    ) {
        let map = build_vocab_subset(&corpus, size, 16).unwrap();
        prop_assert_eq!(map.len(), size);
        let count = |t: TokenId| corpus.iter().flatten().filter(|&&x| x == t).count();
        let min_kept = map.kept().iter().map(|&t| count(t)).min().unwrap();
        for t in (0..16).filter(|t| map.to_subset(*t).is_none()) {
            prop_assert!(count(t) <= min_kept);
        }
        for i in 0..map.len() {
            prop_assert_eq!(map.to_subset(map.to_full(i)), Some(i));
        }
    }
}

fn trace(id: u64, decoder: treespec_core::harness::DecoderKind) -> TurnTrace {
    TurnTrace {
        prompt_id: id,
        decoder,
        mode: None,
        prompt_len: 1,
        output_len: 0,
        output: vec![],
        iterations: vec![],
        teacher_forward_count: 0,
        prefill_count: 1,
        wall_clock_ns: 1,
        ttft_ns: 0,
        token_times_ns: vec![],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_ignores_arrival_order(perm in Just((0..20usize).collect::<Vec<_>>()).prop_shuffle()) {
        use treespec_core::harness::DecoderKind::*;
        let all: Vec<TurnTrace> = (0..10).flat_map(|i| [trace(i, Baseline), trace(i, Speculative)]).collect();
        let shuffled: Vec<TurnTrace> = perm.iter().map(|&i| all[i].clone()).collect();
        prop_assert_eq!(merge_traces(shuffled), all);
    }

    #[test]
    fn commits_agree_across_implementations(
        prompt in prop::collection::vec(0u32..64, 1..10),
        tree_seed in any::<u64>(),
        m in 0usize..12,
    ) {
        let t: Model<f64> = Model::new(ModelConfig::teacher(5)).unwrap();
        let mut committed = CommittedCache::new(t.empty_cache());
        t.prefill(&prompt, committed.kv_mut()).unwrap();
        let tree = random_tree(&mut rng(tree_seed), m, 5, 64);
        let mut branch = replicate(&committed);
        let positions: Vec<usize> = tree.depth.iter().map(|d| prompt.len() + d).collect();
        let mask: TreeMask<f64> = build_tree_mask(&tree, &build_ancestor_table(&tree), prompt.len());
        t.forward_masked_batch(&tree.tokens, branch.kv_mut(), &mask, &positions).unwrap();

        // Deepest node's chain.
        let leaf = (0..tree.slot_count()).max_by_key(|&k| tree.depth[k]).unwrap();
        let mut chain = Vec::new();
        let mut cur = leaf;
        while cur != 0 {
            chain.push(cur);
            cur = tree.parent[cur];
        }
        chain.reverse();
        let path = accepted_path_indices(&tree, &chain, prompt.len()).unwrap();

        let (fast, _) = commit_by_path_indices(&committed, &branch, &path, true).unwrap();
        let (full, _) = commit_by_path_indices(&committed, &branch, &path, false).unwrap();
        prop_assert_eq!(&fast, &full);
        prop_assert_eq!(&portable::commit_by_path_indices(&branch, &path).unwrap(), &full);

        let slots: Vec<usize> = std::iter::once(0).chain(chain.iter().copied()).collect();
        let selected = branch.select_slots(&slots).unwrap();
        let by_len = commit_by_length(&committed, &selected, slots.len()).unwrap();
        prop_assert_eq!(&by_len, &full);
        prop_assert_eq!(&portable::commit_by_length(&committed, &selected, slots.len()).unwrap(), &full);

        let dim = full.kv().dim();
        prop_assert_eq!(&import_layers(&export_layers(full.kv()), dim).unwrap(), full.kv());
    }
}
