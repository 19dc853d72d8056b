//! Draft-budget and window sweeps over a fixed prompt set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::prompts::{gen_prompts, Prompt};
use super::runner::execute;
use super::stats::summarize;
use super::trace::DecoderKind;
use super::HarnessError;
use crate::toy_model::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub node_budget: usize,
    pub depth_bound: usize,
    pub branch_factor: usize,
    pub window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub name: String,
    pub points: Vec<SweepPoint>,
}

impl SweepGrid {
    /// Vary `M` at a fixed depth bound.
    pub fn m_scan(budgets: &[usize], depth_bound: usize, branch_factor: usize) -> Self {
        let points = budgets
            .iter()
            .map(|&m| SweepPoint {
                node_budget: m,
                depth_bound,
                branch_factor,
                window: None,
            })
            .collect();
        Self {
            name: "m-scan".into(),
            points,
        }
    }

    /// Vary `D_max` at a fixed budget.
    pub fn dmax_scan(depths: &[usize], node_budget: usize, branch_factor: usize) -> Self {
        let points = depths
            .iter()
            .map(|&d| SweepPoint {
                node_budget,
                depth_bound: d,
                branch_factor,
                window: None,
            })
            .collect();
        Self {
            name: "dmax-scan".into(),
            points,
        }
    }

    /// Vary the drafter window with the tree shape held fixed.
    pub fn window_scan(
        windows: &[Option<usize>],
        node_budget: usize,
        depth_bound: usize,
        branch_factor: usize,
    ) -> Self {
        let points = windows
            .iter()
            .map(|&window| SweepPoint {
                node_budget,
                depth_bound,
                branch_factor,
                window,
            })
            .collect();
        Self {
            name: "window-scan".into(),
            points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub recipe: String,
    pub node_budget: usize,
    pub depth_bound: usize,
    pub branch_factor: usize,
    pub window: Option<usize>,
    pub prompts: usize,
    /// FNV-1a over the prompt ids and tokens; equal across rows of one sweep.
    pub prompt_set: String,
    pub iterations: usize,
    pub accept_l_mean: f64,
    pub accept_l_p50: f64,
    pub accept_l_p90: f64,
    pub accept_l_p99: f64,
    pub tree_size_mean: f64,
    pub depth_used_mean: f64,
    pub tokens_per_teacher_step: f64,
    pub speedup_mean: Option<f64>,
    pub speedup_p99: Option<f64>,
    pub failures: usize,
}

fn prompt_set_hash(prompts: &[Prompt]) -> String {
    let mut bytes = Vec::new();
    for p in prompts {
        bytes.extend(p.id.to_le_bytes());
        bytes.extend((p.tokens.len() as u32).to_le_bytes());
        for t in &p.tokens {
            bytes.extend(t.to_le_bytes());
        }
    }
    format!("{:016x}", fnv1a64(&bytes))
}

/// One summary row per grid point. Every point decodes the same prompts with
/// the same seeds; the baseline is decoded once and shared for speedups.
pub fn sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>, HarnessError> {
    if grid.points.is_empty() {
        return Err(HarnessError::Config("sweep grid is empty".into()));
    }
    base.validate()?;
    let prompts = gen_prompts(base.seed, base.prompt_count, base.prompt_len, base.teacher.vocab_size)?;
    let prompt_set = prompt_set_hash(&prompts);

    let baseline = if base.decoders.contains(&DecoderKind::Baseline) {
        let cfg = RunConfig {
            decoders: vec![DecoderKind::Baseline],
            ..base.clone()
        };
        execute(&cfg, &prompts)?.0
    } else {
        Vec::new()
    };

    let mut rows = Vec::with_capacity(grid.points.len());
    for point in &grid.points {
        let mut cfg = RunConfig {
            decoders: vec![DecoderKind::Speculative],
            ..base.clone()
        };
        cfg.decode.draft.node_budget = point.node_budget;
        cfg.decode.draft.depth_bound = point.depth_bound;
        cfg.decode.draft.branch_factor = point.branch_factor;
        cfg.decode.draft.window = point.window;
        let (spec, failures) = execute(&cfg, &prompts)?;
        let mut all = baseline.clone();
        all.extend(spec);
        let report = summarize(&all)?;
        let stat = |name: &str| report.metric(name).copied();
        let accept =
            stat("accept_l").ok_or_else(|| HarnessError::Config("sweep point produced no iterations".into()))?;
        rows.push(SweepRow {
            recipe: grid.name.clone(),
            node_budget: point.node_budget,
            depth_bound: point.depth_bound,
            branch_factor: point.branch_factor,
            window: point.window,
            prompts: prompts.len(),
            prompt_set: prompt_set.clone(),
            iterations: accept.count,
            accept_l_mean: accept.mean,
            accept_l_p50: accept.p50,
            accept_l_p90: accept.p90,
            accept_l_p99: accept.p99,
            tree_size_mean: stat("tree_size").map_or(0.0, |s| s.mean),
            depth_used_mean: stat("depth_used").map_or(0.0, |s| s.mean),
            tokens_per_teacher_step: report.tokens_per_teacher_step.unwrap_or(0.0),
            speedup_mean: stat("speedup").map(|s| s.mean),
            speedup_p99: stat("speedup").map(|s| s.p99),
            failures: failures.len(),
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
