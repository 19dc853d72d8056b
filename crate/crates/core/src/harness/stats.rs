//! Summary statistics over traces.
//!
//! Percentiles use the nearest-rank rule: the `p`-th percentile of `n`
//! sorted samples is the sample at 1-based rank `ceil(p / 100 · n)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trace::{DecoderKind, StageTimings, TurnTrace};
use super::HarnessError;

pub const PERCENTILE_METHOD: &str = "nearest-rank";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Nearest-rank percentile of ascending `sorted`; `p` in `(0, 100]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl SummaryStats {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: nearest_rank(&sorted, 50.0),
            p90: nearest_rank(&sorted, 90.0),
            p99: nearest_rank(&sorted, 99.0),
        })
    }
}

/// `out[p - 1]` is the fraction of samples with `A >= p`, for
/// `p = 1..=max(A) + 1`.
pub fn accept_pos(accepted: &[usize]) -> Vec<f64> {
    let Some(&max) = accepted.iter().max() else {
        return Vec::new();
    };
    let n = accepted.len() as f64;
    (1..=max + 1)
        .map(|p| accepted.iter().filter(|&&a| a >= p).count() as f64 / n)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub percentile_method: String,
    pub baseline_turns: usize,
    pub speculative_turns: usize,
    /// Committed tokens per teacher verification pass, pooled over all
    /// speculative iterations.
    pub tokens_per_teacher_step: Option<f64>,
    /// Metric name to stats; absent metrics had no samples.
    pub metrics: BTreeMap<String, SummaryStats>,
    pub accept_pos: Vec<f64>,
    /// Prompts with a speculative trace but no baseline trace.
    pub unpaired_prompts: Vec<u64>,
}

impl SummaryReport {
    pub fn metric(&self, name: &str) -> Option<&SummaryStats> {
        self.metrics.get(name)
    }
}

fn tok_per_s(t: &TurnTrace) -> f64 {
    t.output_len as f64 / (t.wall_clock_ns.max(1) as f64 * 1e-9)
}

pub fn summarize(traces: &[TurnTrace]) -> Result<SummaryReport, HarnessError> {
    if traces.is_empty() {
        return Err(HarnessError::Config("no traces to summarize".into()));
    }
    let (base, spec): (Vec<&TurnTrace>, Vec<&TurnTrace>) =
        traces.iter().partition(|t| t.decoder == DecoderKind::Baseline);
    let baseline_by_id: BTreeMap<u64, &TurnTrace> = base.iter().map(|t| (t.prompt_id, *t)).collect();

    let mut metrics = BTreeMap::new();
    let mut put = |name: &str, samples: Vec<f64>| {
        if let Some(s) = SummaryStats::from_samples(&samples) {
            metrics.insert(name.to_string(), s);
        }
    };

    put("baseline_tok_s", base.iter().map(|t| tok_per_s(t)).collect());
    put(
        "baseline_ttft_ms",
        base.iter().map(|t| t.ttft_ns as f64 * 1e-6).collect(),
    );
    put("speculative_tok_s", spec.iter().map(|t| tok_per_s(t)).collect());
    put(
        "speculative_ttft_ms",
        spec.iter().map(|t| t.ttft_ns as f64 * 1e-6).collect(),
    );

    let mut speedups = Vec::new();
    let mut unpaired = Vec::new();
    for t in &spec {
        match baseline_by_id.get(&t.prompt_id) {
            Some(b) => speedups.push(tok_per_s(t) / tok_per_s(b)),
            None => {
                log::warn!("prompt {} has no baseline trace; speedup omitted", t.prompt_id);
                unpaired.push(t.prompt_id);
            }
        }
    }
    put("speedup", speedups);

    let iterations: Vec<_> = spec.iter().flat_map(|t| &t.iterations).collect();
    let accepted: Vec<usize> = iterations.iter().map(|r| r.accepted).collect();
    put("accept_l", accepted.iter().map(|&a| a as f64).collect());
    put("tree_size", iterations.iter().map(|r| r.tree_size as f64).collect());
    put("depth_used", iterations.iter().map(|r| r.depth_used as f64).collect());
    put(
        "turn_tokens_per_teacher_step",
        spec.iter().map(|t| t.tokens_per_teacher_step()).collect(),
    );

    let tokens_per_teacher_step = (!iterations.is_empty()).then(|| {
        let emitted: usize = iterations.iter().map(|r| r.emitted).sum();
        emitted as f64 / iterations.len() as f64
    });

    Ok(SummaryReport {
        percentile_method: PERCENTILE_METHOD.into(),
        baseline_turns: base.len(),
        speculative_turns: spec.len(),
        tokens_per_teacher_step,
        metrics,
        accept_pos: accept_pos(&accepted),
        unpaired_prompts: unpaired,
    })
}

/// Writes `summary.json`, `summary.csv` and `accept_pos.csv` into `dir`.
pub fn write_summary(report: &SummaryReport, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(report)?)?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["metric", "count", "mean", "p50", "p90", "p99", "percentile_method"])?;
    for (name, s) in &report.metrics {
        w.write_record([
            name.clone(),
            s.count.to_string(),
            s.mean.to_string(),
            s.p50.to_string(),
            s.p90.to_string(),
            s.p99.to_string(),
            PERCENTILE_METHOD.to_string(),
        ])?;
    }
    if let Some(v) = report.tokens_per_teacher_step {
        w.write_record(["tokens_per_teacher_step", "", &v.to_string(), "", "", "", ""])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("accept_pos.csv"))?;
    w.write_record(["position", "fraction"])?;
    for (i, f) in report.accept_pos.iter().enumerate() {
        w.write_record([(i + 1).to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub samples: usize,
    pub mean_ns: f64,
    pub p99_ns: f64,
    /// `p99 / mean`; zero when the mean is zero.
    pub tail_ratio: f64,
}

/// Per-stage mean, p99 and tail ratio. Prefill is sampled once per turn,
/// every other stage once per iteration.
pub fn stage_breakdown(traces: &[TurnTrace]) -> Result<Vec<StageRow>, HarnessError> {
    let profiled: Vec<(usize, &StageTimings)> = traces
        .iter()
        .flat_map(|t| t.iterations.iter().enumerate())
        .filter_map(|(i, r)| r.timings.as_ref().map(|s| (i, s)))
        .collect();
    if profiled.is_empty() {
        return Err(HarnessError::NoTimings);
    }
    Ok(StageTimings::STAGES
        .iter()
        .map(|&stage| {
            let samples: Vec<f64> = profiled
                .iter()
                .filter(|(i, _)| stage != "prefill" || *i == 0)
                .map(|(_, s)| s.get(stage).expect("known stage") as f64)
                .collect();
            let stats = SummaryStats::from_samples(&samples).expect("at least one profiled iteration");
            let tail_ratio = if stats.mean > 0.0 { stats.p99 / stats.mean } else { 0.0 };
            StageRow {
                stage: stage.into(),
                samples: stats.count,
                mean_ns: stats.mean,
                p99_ns: stats.p99,
                tail_ratio,
            }
        })
        .collect())
}

pub fn write_stage_breakdown(rows: &[StageRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_manager::CommitKind;
    use crate::harness::trace::IterationRecord;

    #[test]
    fn nearest_rank_example() {
        let s = SummaryStats::from_samples(&[3.0, 3.0, 6.0, 8.0]).unwrap();
        assert_eq!((s.mean, s.p50, s.p90, s.p99), (5.0, 3.0, 8.0, 8.0));
        let one = SummaryStats::from_samples(&[2.5]).unwrap();
        assert_eq!((one.mean, one.p50, one.p90, one.p99), (2.5, 2.5, 2.5, 2.5));
        assert!(SummaryStats::from_samples(&[]).is_none());
    }

    #[test]
    fn accept_pos_example() {
        let pos = accept_pos(&[2, 0, 1]);
        assert_eq!(pos, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    fn record(accepted: usize, timings: Option<StageTimings>) -> IterationRecord {
        IterationRecord {
            accepted,
            emitted: accepted + 1,
            tree_size: 4,
            depth_used: 2,
            commit: CommitKind::PathFast,
            fast_fallback: false,
            teacher_calls: 1,
            mask_rows: 5,
            mask_cols: 10,
            mask_zeros: 20,
            timings,
        }
    }

    fn turn(id: u64, decoder: DecoderKind, iterations: Vec<IterationRecord>) -> TurnTrace {
        let output_len = if iterations.is_empty() {
            8
        } else {
            iterations.iter().map(|r| r.emitted).sum()
        };
        TurnTrace {
            prompt_id: id,
            decoder,
            mode: None,
            prompt_len: 3,
            output_len,
            output: vec![0; output_len],
            teacher_forward_count: if iterations.is_empty() {
                output_len
            } else {
                iterations.len()
            },
            iterations,
            prefill_count: 1,
            wall_clock_ns: 1_000_000,
            ttft_ns: 10,
            token_times_ns: Vec::new(),
        }
    }

    #[test]
    fn summary_pairs_and_pools() {
        let traces = vec![
            turn(0, DecoderKind::Baseline, vec![]),
            turn(0, DecoderKind::Speculative, vec![record(3, None), record(3, None)]),
            turn(1, DecoderKind::Speculative, vec![record(6, None), record(8, None)]),
        ];
        let r = summarize(&traces).unwrap();
        assert_eq!(r.unpaired_prompts, vec![1]);
        assert_eq!(r.metric("speedup").unwrap().count, 1);
        assert!((r.metric("speedup").unwrap().mean - 1.0).abs() < 1e-12);
        let a = r.metric("accept_l").unwrap();
        assert_eq!((a.mean, a.p50, a.p90, a.p99), (5.0, 3.0, 8.0, 8.0));
        assert_eq!(r.tokens_per_teacher_step, Some(6.0));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn breakdown_tail_ratios() {
        let flat = StageTimings {
            draft: 5,
            tensorize: 5,
            mask: 5,
            verify: 5,
            accept: 5,
            commit: 5,
            prefill: 5,
        };
        let traces = vec![turn(0, DecoderKind::Speculative, vec![record(1, Some(flat)); 10])];
        let rows = stage_breakdown(&traces).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().all(|r| r.tail_ratio == 1.0));

        // Nearest-rank p99 of 100 samples is rank 99, so a single outlier
        // does not reach it; two do.
        let mut iters = vec![record(1, Some(flat)); 100];
        iters[37].timings.as_mut().unwrap().verify = 50;
        let rows = stage_breakdown(&[turn(0, DecoderKind::Speculative, iters.clone())]).unwrap();
        assert!(rows.iter().find(|r| r.stage == "verify").unwrap().tail_ratio < 1.0);
        iters[80].timings.as_mut().unwrap().verify = 50;
        let rows = stage_breakdown(&[turn(0, DecoderKind::Speculative, iters)]).unwrap();
        let verify = rows.iter().find(|r| r.stage == "verify").unwrap();
        assert!(verify.tail_ratio > 1.0);
        assert_eq!(rows.iter().find(|r| r.stage == "prefill").unwrap().samples, 1);

        let bare = vec![turn(0, DecoderKind::Speculative, vec![record(1, None)])];
        assert!(matches!(stage_breakdown(&bare), Err(HarnessError::NoTimings)));
    }
}
