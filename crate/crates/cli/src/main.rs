use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use treespec_core::harness::{
    read_traces, run, stage_breakdown, summarize, sweep, write_stage_breakdown, write_summary, write_sweep_csv,
    HarnessError, RunConfig, SummaryReport, SweepGrid, TurnTrace,
};
use treespec_core::{CommitMode, Mode};

#[derive(Parser)]
#[command(
    name = "treespec",
    version,
    about = "Tree speculative decoding experiments on toy transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode the prompt set with the baseline and speculative decoders.
    Run(RunArgs),
    /// Run a draft-budget or window sweep over a fixed prompt set.
    Sweep(SweepArgs),
    /// Summarize JSON-lines trace files into CSV and JSON tables.
    Summarize(TraceArgs),
    /// Per-stage timing breakdown of profiled traces.
    Breakdown(TraceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Reference,
    Performance,
}

#[derive(Clone, Copy, ValueEnum)]
enum CommitArg {
    Length,
    Path,
}

#[derive(Clone, Copy, ValueEnum)]
enum Recipe {
    #[value(name = "m-scan")]
    M,
    #[value(name = "dmax-scan")]
    Dmax,
    #[value(name = "window-scan")]
    Window,
}

/// `none` or a positive integer.
fn parse_window(s: &str) -> Result<Option<usize>, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("expected a positive integer or `none`, got `{s}`")),
        Ok(w) => Ok(Some(w)),
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    fast_cache_reorder: Option<Switch>,
    #[arg(long, value_enum)]
    commit: Option<CommitArg>,
    /// Draft node budget.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Draft depth bound.
    #[arg(long)]
    dmax: Option<usize>,
    #[arg(long)]
    branch_factor: Option<usize>,
    /// Drafter context window (`none` for the full context).
    #[arg(long, value_parser = parse_window)]
    window: Option<Option<usize>>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Seeds the prompts and both models.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    world_size: Option<usize>,
    /// Number of synthetic prompts.
    #[arg(long)]
    prompts: Option<usize>,
    /// Record per-stage timings.
    #[arg(long)]
    profile: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(mode) = self.mode {
            cfg.decode.mode = match mode {
                ModeArg::Reference => Mode::Reference,
                ModeArg::Performance => Mode::Performance,
            };
        }
        if let Some(s) = self.fast_cache_reorder {
            cfg.decode.fast_cache_reorder = matches!(s, Switch::On);
        }
        if let Some(c) = self.commit {
            cfg.decode.commit_mode = match c {
                CommitArg::Length => CommitMode::Length,
                CommitArg::Path => CommitMode::Path,
            };
        }
        let draft = &mut cfg.decode.draft;
        draft.node_budget = self.m.unwrap_or(draft.node_budget);
        draft.depth_bound = self.dmax.unwrap_or(draft.depth_bound);
        draft.branch_factor = self.branch_factor.unwrap_or(draft.branch_factor);
        if let Some(w) = self.window {
            draft.window = w;
        }
        cfg.decode.max_new_tokens = self.max_new_tokens.unwrap_or(cfg.decode.max_new_tokens);
        cfg.world_size = self.world_size.unwrap_or(cfg.world_size);
        cfg.prompt_count = self.prompts.unwrap_or(cfg.prompt_count);
        cfg.decode.profile |= self.profile;
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    recipe: Recipe,
    /// Comma-separated settings for the scanned parameter; windows accept `none`.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<String>>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct TraceArgs {
    /// JSON-lines trace files.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Output directory; defaults to the first trace file's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl TraceArgs {
    fn load(&self) -> Result<Vec<TurnTrace>, HarnessError> {
        let mut all = Vec::new();
        for path in &self.traces {
            all.extend(read_traces(path)?);
        }
        Ok(all)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| {
            self.traces[0]
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        })
    }
}

fn print_summary(report: &SummaryReport) {
    println!(
        "turns: {} baseline, {} speculative",
        report.baseline_turns, report.speculative_turns
    );
    if let Some(tps) = report.tokens_per_teacher_step {
        println!("tokens per teacher step: {tps:.3}");
    }
    for (name, s) in &report.metrics {
        println!(
            "{name:<30} n={:<6} mean={:<12.4} p50={:<12.4} p90={:<12.4} p99={:.4}",
            s.count, s.mean, s.p50, s.p90, s.p99
        );
    }
}

fn parse_list<T: std::str::FromStr>(values: &[String]) -> Result<Vec<T>, HarnessError> {
    values
        .iter()
        .map(|v| {
            v.parse()
                .map_err(|_| HarnessError::Config(format!("invalid sweep value `{v}`")))
        })
        .collect()
}

fn build_grid(args: &SweepArgs, cfg: &RunConfig) -> Result<SweepGrid, HarnessError> {
    let d = &cfg.decode.draft;
    let values = args.values.as_deref();
    Ok(match args.recipe {
        Recipe::M => {
            let ms = values
                .map(parse_list)
                .transpose()?
                .unwrap_or_else(|| vec![4, 8, 16, 32, 64]);
            SweepGrid::m_scan(&ms, args.run.dmax.unwrap_or(10), d.branch_factor)
        }
        Recipe::Dmax => {
            let ds = values
                .map(parse_list)
                .transpose()?
                .unwrap_or_else(|| vec![2, 4, 6, 8, 10]);
            SweepGrid::dmax_scan(&ds, args.run.m.unwrap_or(64), d.branch_factor)
        }
        Recipe::Window => {
            let ws = match values {
                Some(v) => v
                    .iter()
                    .map(|s| parse_window(s).map_err(HarnessError::Config))
                    .collect::<Result<_, _>>()?,
                None => vec![Some(2), Some(8), None],
            };
            SweepGrid::window_scan(&ws, d.node_budget, d.depth_bound, d.branch_factor)
        }
    })
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let out = run(&cfg)?;
            let report = summarize(&out.traces)?;
            write_summary(&report, &out.out_dir)?;
            print_summary(&report);
            if !out.failures.is_empty() {
                println!(
                    "{} failed turns; dumps in {}",
                    out.failures.len(),
                    out.out_dir.join("failures").display()
                );
            }
            if cfg.decode.profile {
                let rows = stage_breakdown(&out.traces)?;
                write_stage_breakdown(&rows, &out.out_dir.join("stage_breakdown.csv"))?;
            }
            println!("artifacts written to {}", out.out_dir.display());
        }
        Command::Sweep(args) => {
            let cfg = args.run.resolve()?;
            let grid = build_grid(&args, &cfg)?;
            let rows = sweep(&cfg, &grid)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let csv_path = cfg.out_dir.join(format!("sweep-{}.csv", grid.name));
            write_sweep_csv(&rows, &csv_path)?;
            std::fs::write(
                cfg.out_dir.join(format!("sweep-{}.json", grid.name)),
                serde_json::to_vec_pretty(&rows)?,
            )?;
            for r in &rows {
                println!(
                    "M={:<3} dmax={:<3} window={:<5} accept_L={:.3} tree_size={:.2} tokens/step={:.3}",
                    r.node_budget,
                    r.depth_bound,
                    r.window.map_or("none".to_string(), |w| w.to_string()),
                    r.accept_l_mean,
                    r.tree_size_mean,
                    r.tokens_per_teacher_step
                );
            }
            println!("wrote {}", csv_path.display());
        }
        Command::Summarize(args) => {
            let report = summarize(&args.load()?)?;
            let dir = args.out_dir();
            write_summary(&report, &dir)?;
            print_summary(&report);
            println!("wrote {}", dir.join("summary.csv").display());
        }
        Command::Breakdown(args) => {
            let rows = stage_breakdown(&args.load()?)?;
            let path = args.out_dir().join("stage_breakdown.csv");
            write_stage_breakdown(&rows, &path)?;
            for r in &rows {
                println!(
                    "{:<10} n={:<6} mean={:>10.0}ns p99={:>10.0}ns tail={:.2}",
                    r.stage, r.samples, r.mean_ns, r.p99_ns, r.tail_ratio
                );
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
