use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "tilefabric",
    version,
    about = "Run, verify and time tilefabric communication patterns",
    args_conflicts_with_subcommands = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,

    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every cell of a cartesian grid and write one summary row per cell.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum Pattern {
    AgBaseline,
    AgPull,
    AgPush,
    FdBsp,
    FdAg,
    FdWait,
    FdFused,
}

impl Pattern {
    pub const AG: [Pattern; 3] = [Pattern::AgBaseline, Pattern::AgPull, Pattern::AgPush];
    pub const FD: [Pattern; 4] = [Pattern::FdBsp, Pattern::FdAg, Pattern::FdWait, Pattern::FdFused];

    pub fn is_ag(self) -> bool {
        Self::AG.contains(&self)
    }

    /// The bulk-synchronous member of this pattern's family.
    pub fn baseline(self) -> Pattern {
        if self.is_ag() {
            Pattern::AgBaseline
        } else {
            Pattern::FdBsp
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::AgBaseline => "ag-baseline",
            Pattern::AgPull => "ag-pull",
            Pattern::AgPush => "ag-push",
            Pattern::FdBsp => "fd-bsp",
            Pattern::FdAg => "fd-ag",
            Pattern::FdWait => "fd-wait",
            Pattern::FdFused => "fd-fused",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size All-Gather + GEMM shapes (N=28672, K=8192, W=8).
    PaperAgGemm,
    /// Full-size flash decode shapes (H=96, d=128, W=8).
    PaperFd,
    /// All-Gather + GEMM scaled to run on a laptop.
    DeskAgGemm,
    /// Flash decode scaled to run on a laptop.
    DeskFd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum FoldArg {
    #[default]
    Rank,
    Arrival,
}

/// Knobs shared by single runs and sweeps.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Start from a named shape preset; explicit flags override it.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,

    #[arg(long)]
    pub bm: Option<usize>,
    #[arg(long)]
    pub bn: Option<usize>,
    #[arg(long)]
    pub bk: Option<usize>,

    /// Delay the first compute stage of a rank, as `rank:millis`. Repeatable.
    #[arg(long = "skew", value_name = "RANK:MILLIS", value_parser = parse_skew)]
    pub skew: Vec<(usize, f64)>,

    /// Synthetic cost charged per task launch, in microseconds.
    #[arg(long, default_value_t = 20)]
    pub launch_cost_us: u64,

    /// Timed iterations per configuration.
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u32).range(1..))]
    pub iters: u32,

    /// Untimed iterations before measuring.
    #[arg(long, default_value_t = 100)]
    pub warmup: u32,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Compare every iteration against the brute-force oracle.
    #[arg(long)]
    pub verify: bool,

    /// Fold order used by fd-wait and fd-fused.
    #[arg(long, value_enum, default_value_t = FoldArg::Rank)]
    pub fold_order: FoldArg,

    /// Upper bound on any single barrier or signal wait.
    #[arg(long, env = "TILEFABRIC_WATCHDOG_SECS", default_value_t = 10.0)]
    pub watchdog_secs: f64,

    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub pattern: Option<Pattern>,

    #[arg(long)]
    pub world_size: Option<usize>,

    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,

    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub kv_len: Option<usize>,

    /// Per-iteration CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Summary JSON output; printed to stdout when omitted.
    #[arg(long)]
    pub summary: Option<PathBuf>,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Patterns to run; defaults to every variant of the preset's family.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub patterns: Vec<Pattern>,

    #[arg(long, value_delimiter = ',')]
    pub world_sizes: Vec<usize>,

    #[arg(long, value_delimiter = ',')]
    pub m: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub n: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,

    #[arg(long, value_delimiter = ',')]
    pub heads: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub head_dims: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub kv_lens: Vec<usize>,

    /// Summary CSV, one row per cell.
    #[arg(long)]
    pub out: PathBuf,

    /// Speedup curves for gnuplot; defaults to `out` with a `.dat` extension.
    #[arg(long)]
    pub dat: Option<PathBuf>,

    #[command(flatten)]
    pub common: CommonArgs,
}

fn parse_skew(s: &str) -> Result<(usize, f64), String> {
    let (rank, millis) = s
        .split_once(':')
        .ok_or_else(|| format!("expected RANK:MILLIS, got `{s}`"))?;
    let rank = rank
        .trim()
        .parse()
        .map_err(|_| format!("bad rank `{rank}` in skew `{s}`"))?;
    let millis: f64 = millis
        .trim()
        .parse()
        .map_err(|_| format!("bad millis `{millis}` in skew `{s}`"))?;
    if !millis.is_finite() || millis < 0.0 {
        return Err(format!("skew must be a non-negative number of millis, got `{s}`"));
    }
    Ok((rank, millis))
}
