//! Sharded execution, trace files, failure dumps and the manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, RunManifest, SeedSet, ARTIFACT_VERSION};
use super::prompts::{gen_prompts, shard, Prompt};
use super::trace::{DecoderKind, TurnTrace};
use super::HarnessError;
use crate::drafter::SubsetCache;
use crate::engine::{generate_baseline, generate_speculative_observed, DecodeConfig, EngineError, Observer};
use crate::real::{Precision, Real};
use crate::toy_model::Model;
use crate::tree::{SpecTree, StructureErrorKind};
use crate::TokenId;

/// Inputs and tree/cache metadata for a turn that hit an invariant failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureDump {
    pub prompt_id: u64,
    pub decoder: DecoderKind,
    pub prompt: Vec<TokenId>,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<StructureErrorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub committed_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<SpecTree>,
    pub decode: DecodeConfig,
}

impl FailureDump {
    fn new(prompt: &Prompt, decoder: DecoderKind, decode: &DecodeConfig, err: &EngineError) -> Self {
        let (error_kind, committed_len, tree) = match err {
            EngineError::Structure(v) => (Some(v.error.kind), Some(v.committed_len), Some(v.tree.clone())),
            _ => (None, None, None),
        };
        Self {
            prompt_id: prompt.id,
            decoder,
            prompt: prompt.tokens.clone(),
            error: err.to_string(),
            error_kind,
            committed_len,
            tree,
            decode: decode.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    /// Merged traces sorted by `(prompt_id, decoder)`.
    pub traces: Vec<TurnTrace>,
    pub failures: Vec<FailureDump>,
    pub out_dir: PathBuf,
}

/// Corrupts the first proposed tree by pointing its last slot's parent out
/// of range.
struct CorruptFirstTree {
    armed: bool,
}

impl<T> Observer<T> for CorruptFirstTree {
    fn inspect_tree(&mut self, tree: &mut SpecTree) {
        if std::mem::take(&mut self.armed) {
            let last = tree.slot_count() - 1;
            tree.parent[last] = tree.slot_count() + 3;
        }
    }
}

struct Decoders<'a, T, D> {
    teacher: &'a Model<T>,
    drafter: &'a Model<D>,
    cfg: &'a RunConfig,
}

impl<T: Real, D: Real> Decoders<'_, T, D> {
    fn decode(&self, prompt: &Prompt, out: &mut Vec<TurnTrace>, failures: &mut Vec<FailureDump>) {
        let decode = &self.cfg.decode;
        for &kind in &self.cfg.decoders {
            let result = match kind {
                DecoderKind::Baseline => generate_baseline(self.teacher, &prompt.tokens, decode),
                DecoderKind::Speculative => {
                    let mut hook = CorruptFirstTree {
                        armed: self.cfg.corrupt_tree_for_prompt == Some(prompt.id),
                    };
                    generate_speculative_observed(self.teacher, self.drafter, &prompt.tokens, decode, &mut hook)
                }
            };
            match result {
                Ok(d) => {
                    let mut trace = d.trace;
                    trace.prompt_id = prompt.id;
                    out.push(trace);
                }
                Err(e) => {
                    log::error!("prompt {} ({kind:?}) failed: {e}", prompt.id);
                    failures.push(FailureDump::new(prompt, kind, decode, &e));
                }
            }
        }
    }

    fn run_shard(
        &self,
        prompts: &[Prompt],
        rank: usize,
        trace_dir: Option<&Path>,
    ) -> Result<(Vec<TurnTrace>, Vec<FailureDump>), HarnessError> {
        let mine = shard(prompts, self.cfg.world_size, rank)?;
        let mut writer = match trace_dir {
            Some(dir) => Some(BufWriter::new(File::create(rank_trace_path(dir, rank))?)),
            None => None,
        };
        let mut traces = Vec::new();
        let mut failures = Vec::new();
        for prompt in &mine {
            let start = traces.len();
            self.decode(prompt, &mut traces, &mut failures);
            if let Some(w) = writer.as_mut() {
                for t in &traces[start..] {
                    serde_json::to_writer(&mut *w, t)?;
                    w.write_all(b"\n")?;
                }
            }
        }
        if let Some(mut w) = writer {
            w.flush()?;
        }
        Ok((traces, failures))
    }

    /// Runs every shard on its own thread and merges the results.
    fn run_all(
        &self,
        prompts: &[Prompt],
        trace_dir: Option<&Path>,
    ) -> Result<(Vec<TurnTrace>, Vec<FailureDump>), HarnessError> {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..self.cfg.world_size)
                .map(|rank| s.spawn(move || self.run_shard(prompts, rank, trace_dir)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("shard thread panicked"))
                .collect()
        });
        let mut traces = Vec::new();
        let mut failures = Vec::new();
        for r in results {
            let (t, f) = r?;
            traces.extend(t);
            failures.extend(f);
        }
        failures.sort_by_key(|f| (f.prompt_id, f.decoder));
        Ok((merge_traces(traces), failures))
    }
}

macro_rules! with_precisions {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match ($cfg.teacher.precision, $cfg.drafter.precision) {
            (Precision::Double, Precision::Double) => $f::<f64, f64>($($arg),*),
            (Precision::Double, Precision::Single) => $f::<f64, f32>($($arg),*),
            (Precision::Single, Precision::Double) => $f::<f32, f64>($($arg),*),
            (Precision::Single, Precision::Single) => $f::<f32, f32>($($arg),*),
        }
    };
}

/// Sorts by `(prompt_id, decoder)`; the result does not depend on the order
/// in which shards finished.
pub fn merge_traces(mut traces: Vec<TurnTrace>) -> Vec<TurnTrace> {
    traces.sort_by_key(|t| (t.prompt_id, t.decoder));
    traces
}

pub fn rank_trace_path(dir: &Path, rank: usize) -> PathBuf {
    dir.join(format!("traces-rank{rank}.jsonl"))
}

pub fn read_traces(path: &Path) -> Result<Vec<TurnTrace>, HarnessError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_jsonl(path: &Path, traces: &[TurnTrace]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Fills in `decode.draft.vocab_subset` when a subset is requested.
fn resolve_subset<T: Real>(cfg: &RunConfig, teacher: &Model<T>) -> Result<RunConfig, HarnessError> {
    let mut resolved = cfg.clone();
    let Some(spec) = &cfg.vocab_subset else {
        return Ok(resolved);
    };
    let calibration = gen_prompts(
        cfg.seed.wrapping_add(0x9e37_79b9),
        spec.calibration_prompts,
        cfg.prompt_len,
        cfg.teacher.vocab_size,
    )?;
    let greedy = DecodeConfig {
        eos_token: None,
        ..cfg.decode.clone()
    };
    let mut corpus = Vec::with_capacity(calibration.len());
    for p in &calibration {
        let mut seq = p.tokens.clone();
        seq.extend(generate_baseline(teacher, &p.tokens, &greedy)?.tokens);
        corpus.push(seq);
    }
    let dir = spec.cache_dir.clone().unwrap_or_else(|| cfg.out_dir.join("subsets"));
    let (map, cached) = SubsetCache::new(dir).load_or_build(&corpus, spec.size, cfg.teacher.vocab_size)?;
    log::info!(
        "vocabulary subset of {} tokens ({})",
        map.len(),
        if cached { "cached" } else { "built" }
    );
    resolved.decode.draft.vocab_subset = Some(map);
    Ok(resolved)
}

fn execute_typed<T: Real, D: Real>(
    cfg: &RunConfig,
    prompts: &[Prompt],
) -> Result<(Vec<TurnTrace>, Vec<FailureDump>), HarnessError> {
    let teacher = Model::<T>::new(cfg.teacher.clone())?;
    let drafter = Model::<D>::new(cfg.drafter.clone())?;
    let cfg = resolve_subset(cfg, &teacher)?;
    Decoders {
        teacher: &teacher,
        drafter: &drafter,
        cfg: &cfg,
    }
    .run_all(prompts, None)
}

/// Decodes `prompts` in memory across `cfg.world_size` shards.
pub fn execute(cfg: &RunConfig, prompts: &[Prompt]) -> Result<(Vec<TurnTrace>, Vec<FailureDump>), HarnessError> {
    cfg.validate()?;
    with_precisions!(cfg, execute_typed(cfg, prompts))
}

fn run_typed<T: Real, D: Real>(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    let teacher = Model::<T>::new(cfg.teacher.clone())?;
    let drafter = Model::<D>::new(cfg.drafter.clone())?;
    let out_dir = cfg.out_dir.clone();
    fs::create_dir_all(&out_dir)?;
    let resolved = resolve_subset(cfg, &teacher)?;
    let prompts = gen_prompts(cfg.seed, cfg.prompt_count, cfg.prompt_len, cfg.teacher.vocab_size)?;

    let decoders = Decoders {
        teacher: &teacher,
        drafter: &drafter,
        cfg: &resolved,
    };
    let (traces, failures) = decoders.run_all(&prompts, Some(&out_dir))?;

    let merged = out_dir.join("traces.jsonl");
    write_jsonl(&merged, &traces)?;
    if !failures.is_empty() {
        let dir = out_dir.join("failures");
        fs::create_dir_all(&dir)?;
        for f in &failures {
            let name = match f.decoder {
                DecoderKind::Speculative => format!("prompt-{}.json", f.prompt_id),
                DecoderKind::Baseline => format!("prompt-{}-baseline.json", f.prompt_id),
            };
            fs::write(dir.join(name), serde_json::to_vec_pretty(f)?)?;
        }
    }

    let manifest = RunManifest {
        version: ARTIFACT_VERSION.into(),
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seeds: SeedSet {
            prompts: cfg.seed,
            teacher: cfg.teacher.seed,
            drafter: cfg.drafter.seed,
        },
        config: resolved,
        teacher_checksum: teacher.param_checksum(),
        drafter_checksum: drafter.param_checksum(),
        prompt_ids: prompts.iter().map(|p| p.id).collect(),
        trace_files: (0..cfg.world_size).map(|r| rank_trace_path(&out_dir, r)).collect(),
        merged_traces: merged,
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(RunOutput {
        manifest,
        traces,
        failures,
        out_dir,
    })
}

/// Full run: generates prompts, decodes every shard concurrently, writes
/// per-rank traces, the merged trace file, failure dumps and the manifest.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    with_precisions!(cfg, run_typed(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        RunConfig {
            prompt_count: 10,
            prompt_len: (4, 10),
            world_size: 3,
            out_dir: dir.to_path_buf(),
            decode: DecodeConfig {
                max_new_tokens: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn run_writes_paired_lossless_traces() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&small(dir.path())).unwrap();
        assert_eq!(out.traces.len(), 20);
        for pair in out.traces.chunks(2) {
            assert_eq!(pair[0].prompt_id, pair[1].prompt_id);
            assert_eq!(
                (pair[0].decoder, pair[1].decoder),
                (DecoderKind::Baseline, DecoderKind::Speculative)
            );
            assert_eq!(pair[0].output, pair[1].output);
        }
        assert!(out
            .traces
            .iter()
            .flat_map(|t| &t.iterations)
            .all(|r| r.timings.is_none()));
        assert_eq!(read_traces(&dir.path().join("traces.jsonl")).unwrap(), out.traces);
        let mut from_ranks: Vec<TurnTrace> = (0..3)
            .flat_map(|r| read_traces(&rank_trace_path(dir.path(), r)).unwrap())
            .collect();
        from_ranks = merge_traces(from_ranks);
        assert_eq!(from_ranks, out.traces);
        let manifest: RunManifest =
            serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.prompt_ids, (0..10).collect::<Vec<_>>());
        assert!(out.failures.is_empty());
    }

    #[test]
    fn profiling_adds_stage_timings() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.decode.profile = true;
        cfg.decoders = vec![DecoderKind::Speculative];
        let out = run(&cfg).unwrap();
        assert!(out
            .traces
            .iter()
            .flat_map(|t| &t.iterations)
            .all(|r| r.timings.is_some()));
    }

    #[test]
    fn corrupted_tree_is_dumped_and_run_continues() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.corrupt_tree_for_prompt = Some(4);
        let out = run(&cfg).unwrap();
        assert_eq!(out.traces.len(), 19);
        let dump: FailureDump =
            serde_json::from_slice(&fs::read(dir.path().join("failures/prompt-4.json")).unwrap()).unwrap();
        assert_eq!(dump.error_kind, Some(StructureErrorKind::Range));
        let tree = dump.tree.unwrap();
        assert!(tree.parent[tree.slot_count() - 1] > tree.node_count());
    }

    #[test]
    fn merge_is_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let prompts = gen_prompts(0, 6, (3, 5), 64).unwrap();
        let (traces, _) = execute(&cfg, &prompts).unwrap();
        let mut reversed = traces.clone();
        reversed.reverse();
        assert_eq!(merge_traces(reversed), traces);
    }

    #[test]
    fn subset_drafting_stays_lossless_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.prompt_count = 4;
        cfg.vocab_subset = Some(super::super::SubsetSpec {
            size: 24,
            calibration_prompts: 4,
            cache_dir: None,
        });
        let out = run(&cfg).unwrap();
        assert_eq!(
            out.manifest.config.decode.draft.vocab_subset.as_ref().unwrap().len(),
            24
        );
        for pair in out.traces.chunks(2) {
            assert_eq!(pair[0].output, pair[1].output);
        }
        assert_eq!(fs::read_dir(dir.path().join("subsets")).unwrap().count(), 1);
    }
}
