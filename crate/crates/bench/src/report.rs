//! Output records. Column order of the CSV rows is the field order below and
//! is part of the tool's interface.

use std::time::Duration;

use serde::Serialize;

use crate::cli::Pattern;
use crate::config::{RunConfig, Shape};
use crate::measure::{Sample, Spread};

fn us(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

/// Shape columns; the other family's columns stay empty.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ShapeCols {
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub kv_len: Option<usize>,
}

impl From<Shape> for ShapeCols {
    fn from(s: Shape) -> Self {
        match s {
            Shape::Ag { m, n, k } => ShapeCols {
                m: Some(m),
                n: Some(n),
                k: Some(k),
                heads: None,
                head_dim: None,
                kv_len: None,
            },
            Shape::Fd {
                heads,
                head_dim,
                kv_len,
            } => ShapeCols {
                m: None,
                n: None,
                k: None,
                heads: Some(heads),
                head_dim: Some(head_dim),
                kv_len: Some(kv_len),
            },
        }
    }
}

/// One timed iteration of a single run.
#[derive(Debug, Clone, Serialize)]
pub struct IterRow {
    pub pattern: &'static str,
    pub world_size: usize,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub kv_len: Option<usize>,
    pub seed: u64,
    pub iter: u32,
    pub makespan_us: f64,
    pub wall_us: f64,
    pub launch_count: u32,
    pub launch_tax_us: f64,
    pub bulk_sync_tax_us: f64,
    pub wait_idle_us: f64,
    pub staged_bytes: u64,
    pub checksum: String,
    pub verified: Option<bool>,
    pub max_err: Option<f64>,
}

impl IterRow {
    pub fn new(cfg: &RunConfig, pattern: Pattern, s: &Sample) -> Self {
        let ShapeCols {
            m,
            n,
            k,
            heads,
            head_dim,
            kv_len,
        } = cfg.shape.into();
        IterRow {
            pattern: pattern.name(),
            world_size: cfg.world_size,
            m,
            n,
            k,
            heads,
            head_dim,
            kv_len,
            seed: cfg.knobs.seed,
            iter: s.iter,
            makespan_us: us(s.makespan),
            wall_us: us(s.wall),
            launch_count: s.report.launch_count,
            launch_tax_us: us(s.report.launch_tax),
            bulk_sync_tax_us: us(s.report.bulk_sync_tax),
            wait_idle_us: us(s.report.wait_idle),
            staged_bytes: s.report.staged_bytes,
            checksum: hex(s.checksum),
            verified: s.verified,
            max_err: s.max_err,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpreadUs {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub min: f64,
    pub max: f64,
}

impl From<Spread> for SpreadUs {
    fn from(s: Spread) -> Self {
        SpreadUs {
            median: us(s.median),
            p10: us(s.p10),
            p90: us(s.p90),
            min: us(s.min),
            max: us(s.max),
        }
    }
}

/// Tax totals per iteration, summarized over the timed iterations.
#[derive(Debug, Clone, Serialize)]
pub struct TaxSummary {
    pub launch_count: u32,
    pub launch_tax_us: f64,
    pub bulk_sync_tax_us: SpreadUs,
    pub wait_idle_us: SpreadUs,
    pub staged_bytes: u64,
    pub staged_bytes_note: &'static str,
}

pub const STAGED_NOTE: &str = "proxy for inter-task data-locality loss: bytes written into staging buffers";

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub pattern: &'static str,
    pub world_size: usize,
    pub shape: ShapeCols,
    pub tiles: [usize; 3],
    pub skew_ms: Vec<(usize, f64)>,
    pub launch_cost_us: f64,
    pub warmup: u32,
    pub iters: u32,
    pub completed_iters: usize,
    pub seed: u64,
    pub fold_order: String,
    /// Makespan per iteration, first start-gate to last event.
    pub latency_us: SpreadUs,
    pub wall_us: SpreadUs,
    pub taxes: TaxSummary,
    pub checksum: Option<String>,
    pub checksum_stable: bool,
    pub verified: Option<bool>,
    pub max_err: Option<f64>,
}

impl Summary {
    pub fn new(cfg: &RunConfig, pattern: Pattern, samples: &[Sample]) -> Self {
        let k = &cfg.knobs;
        let last = samples.last();
        let verified = k.verify.then(|| samples.iter().all(|s| s.verified == Some(true)));
        let max_err = samples.iter().filter_map(|s| s.max_err).reduce(f64::max);
        Summary {
            pattern: pattern.name(),
            world_size: cfg.world_size,
            shape: cfg.shape.into(),
            tiles: [k.tiles.bm, k.tiles.bn, k.tiles.bk],
            skew_ms: k.skew.iter().map(|&(r, d)| (r, d.as_secs_f64() * 1e3)).collect(),
            launch_cost_us: us(k.launch_cost),
            warmup: k.warmup,
            iters: k.iters,
            completed_iters: samples.len(),
            seed: k.seed,
            fold_order: format!("{:?}", k.fold).to_lowercase(),
            latency_us: Spread::of(samples.iter().map(|s| s.makespan)).into(),
            wall_us: Spread::of(samples.iter().map(|s| s.wall)).into(),
            taxes: TaxSummary {
                launch_count: last.map_or(0, |s| s.report.launch_count),
                launch_tax_us: last.map_or(0.0, |s| us(s.report.launch_tax)),
                bulk_sync_tax_us: Spread::of(samples.iter().map(|s| s.report.bulk_sync_tax)).into(),
                wait_idle_us: Spread::of(samples.iter().map(|s| s.report.wait_idle)).into(),
                staged_bytes: last.map_or(0, |s| s.report.staged_bytes),
                staged_bytes_note: STAGED_NOTE,
            },
            checksum: samples.first().map(|s| hex(s.checksum)),
            checksum_stable: samples.windows(2).all(|w| w[0].checksum == w[1].checksum),
            verified,
            max_err,
        }
    }
}

/// One sweep cell.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub pattern: &'static str,
    pub world_size: usize,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub kv_len: Option<usize>,
    pub bm: usize,
    pub bn: usize,
    pub bk: usize,
    pub seed: u64,
    pub iters: usize,
    pub median_us: Option<f64>,
    pub p10_us: Option<f64>,
    pub p90_us: Option<f64>,
    pub launch_count: Option<u32>,
    pub launch_tax_us: Option<f64>,
    pub bulk_sync_tax_us: Option<f64>,
    pub wait_idle_us: Option<f64>,
    pub staged_bytes: Option<u64>,
    pub checksum: Option<String>,
    pub verified: Option<bool>,
    pub max_err: Option<f64>,
    /// Median of the family baseline at the same coordinates over this
    /// cell's median. Empty when the baseline was not part of the sweep.
    pub speedup: Option<f64>,
    pub status: &'static str,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn new(cell: usize, cfg: &RunConfig, pattern: Pattern) -> Self {
        let ShapeCols {
            m,
            n,
            k,
            heads,
            head_dim,
            kv_len,
        } = cfg.shape.into();
        SweepRow {
            cell,
            pattern: pattern.name(),
            world_size: cfg.world_size,
            m,
            n,
            k,
            heads,
            head_dim,
            kv_len,
            bm: cfg.knobs.tiles.bm,
            bn: cfg.knobs.tiles.bn,
            bk: cfg.knobs.tiles.bk,
            seed: cfg.knobs.seed,
            iters: 0,
            median_us: None,
            p10_us: None,
            p90_us: None,
            launch_count: None,
            launch_tax_us: None,
            bulk_sync_tax_us: None,
            wait_idle_us: None,
            staged_bytes: None,
            checksum: None,
            verified: None,
            max_err: None,
            speedup: None,
            status: "ok",
            error: None,
        }
    }

    pub fn fill(&mut self, summary: &Summary) {
        self.iters = summary.completed_iters;
        self.median_us = Some(summary.latency_us.median);
        self.p10_us = Some(summary.latency_us.p10);
        self.p90_us = Some(summary.latency_us.p90);
        self.launch_count = Some(summary.taxes.launch_count);
        self.launch_tax_us = Some(summary.taxes.launch_tax_us);
        self.bulk_sync_tax_us = Some(summary.taxes.bulk_sync_tax_us.median);
        self.wait_idle_us = Some(summary.taxes.wait_idle_us.median);
        self.staged_bytes = Some(summary.taxes.staged_bytes);
        self.checksum = summary.checksum.clone();
        self.verified = summary.verified;
        self.max_err = summary.max_err;
        if summary.verified == Some(false) {
            self.status = "verify-failed";
        }
    }
}
