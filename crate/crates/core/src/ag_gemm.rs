//! All-Gather + GEMM: `C = A * B` where `A` (M x K) is sharded by columns
//! across ranks and `B` (K x N) is replicated.
//!
//! Three executions are provided:
//!
//! * [`AgVariant::Baseline`]: barrier, gather every shard into a staging
//!   copy of `A`, barrier, then a local tiled GEMM. Three launches.
//! * [`AgVariant::Pull`]: one task whose inner loop reads each `A` tile
//!   straight from the owning rank. No barrier, nothing staged.
//! * [`AgVariant::Push`]: a push task broadcasts local shard blocks into
//!   every rank's inbox and bumps a per-(source, k-block) flag; a concurrent
//!   compute task spins on each flag before reading that block.
//!
//! All three walk k-blocks in the same shard-major order and accumulate in
//! ascending k, so their outputs are bit-identical.

use std::ops::Range;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fabric::{Block, RankCtx, SignalBoard, Slot, SymmetricTensor, World, WorldConfig};
use crate::taxmeter::{self, charge_launch, TaskEvent, TaxReport};
use crate::tilemath::{gemm_acc, tile_ranges, Matrix, TileSpec};

const A_NAME: &str = "ag.a";
const B_NAME: &str = "ag.b";
const C_NAME: &str = "ag.c";
pub const GATHERED_NAME: &str = "ag.gathered";
pub const INBOX_NAME: &str = "ag.inbox";
pub const FLAGS_NAME: &str = "ag.flags";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgVariant {
    Baseline,
    Pull,
    Push,
}

impl AgVariant {
    pub const ALL: [AgVariant; 3] = [AgVariant::Baseline, AgVariant::Pull, AgVariant::Push];
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgGemmProblem {
    m: usize,
    n: usize,
    k: usize,
    world_size: usize,
    tiles: TileSpec,
    /// `shards[r]` is `M x K/W`: columns `[r K/W, (r+1) K/W)` of `A`.
    shards: Vec<Matrix>,
    b: Matrix,
}

impl AgGemmProblem {
    pub fn new(tiles: TileSpec, shards: Vec<Matrix>, b: Matrix) -> Result<Self> {
        tiles.validate()?;
        let world_size = shards.len();
        let first = shards
            .first()
            .ok_or_else(|| Error::Config("at least one shard required".into()))?;
        let (m, shard_cols) = (first.rows(), first.cols());
        if shards.iter().any(|s| s.rows() != m || s.cols() != shard_cols) {
            return Err(Error::Shape("shards differ in shape".into()));
        }
        let k = shard_cols * world_size;
        if m == 0 || k == 0 || b.cols() == 0 || b.rows() != k {
            return Err(Error::Shape(format!(
                "A is {m}x{k} but B is {}x{}",
                b.rows(),
                b.cols()
            )));
        }
        Ok(Self {
            m,
            n: b.cols(),
            k,
            world_size,
            tiles,
            shards,
            b,
        })
    }

    /// Seeded inputs uniform in `[-1, 1)`.
    pub fn random(m: usize, n: usize, k: usize, world_size: usize, tiles: TileSpec, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 || k == 0 || world_size == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive: M={m} N={n} K={k} W={world_size}"
            )));
        }
        if k % world_size != 0 {
            return Err(Error::Config(format!("K={k} not divisible by world size {world_size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::random(m, k, &mut rng);
        let b = Matrix::random(k, n, &mut rng);
        let sc = k / world_size;
        let shards = (0..world_size).map(|r| a.block(0..m, r * sc..(r + 1) * sc)).collect();
        Self::new(tiles, shards, b)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn tiles(&self) -> TileSpec {
        self.tiles
    }

    pub fn shard_cols(&self) -> usize {
        self.k / self.world_size
    }

    pub fn shards(&self) -> &[Matrix] {
        &self.shards
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// The logical unsharded `A`.
    pub fn full_a(&self) -> Matrix {
        Matrix::hconcat(&self.shards).expect("shards share row count")
    }

    /// k-block column ranges within one shard.
    pub fn shard_blocks(&self) -> Vec<Range<usize>> {
        tile_ranges(self.shard_cols(), self.tiles.bk).collect()
    }
}

/// Result of one variant execution.
#[derive(Debug)]
pub struct AgGemmRun {
    /// Output per rank.
    pub c: Vec<Matrix>,
    pub events: Vec<TaskEvent>,
    pub report: TaxReport,
}

/// A world holding one problem's inputs, reusable across runs and variants.
pub struct AgGemmRunner {
    prob: AgGemmProblem,
    world: World,
    a: SymmetricTensor,
    b: SymmetricTensor,
    c: SymmetricTensor,
    gathered: OnceLock<SymmetricTensor>,
    inbox: OnceLock<(SymmetricTensor, SignalBoard)>,
}

impl AgGemmRunner {
    pub fn new(prob: AgGemmProblem, cfg: WorldConfig) -> Result<Self> {
        if cfg.world_size != prob.world_size {
            return Err(Error::Config(format!(
                "world size {} but problem has {} shards",
                cfg.world_size, prob.world_size
            )));
        }
        let world = World::new(cfg)?;
        let a = world.alloc_symmetric(A_NAME, &[prob.m, prob.shard_cols()])?;
        let b = world.alloc_symmetric(B_NAME, &[prob.k, prob.n])?;
        let c = world.alloc_symmetric(C_NAME, &[prob.m, prob.n])?;
        for r in 0..prob.world_size {
            a.fill(r, prob.shards[r].data())?;
            b.fill(r, prob.b.data())?;
        }
        Ok(Self {
            prob,
            world,
            a,
            b,
            c,
            gathered: OnceLock::new(),
            inbox: OnceLock::new(),
        })
    }

    pub fn problem(&self) -> &AgGemmProblem {
        &self.prob
    }

    pub fn config(&self) -> &WorldConfig {
        self.world.config()
    }

    fn gathered(&self) -> Result<&SymmetricTensor> {
        if let Some(t) = self.gathered.get() {
            return Ok(t);
        }
        let t = self.world.alloc_staging(GATHERED_NAME, &[self.prob.m, self.prob.k])?;
        Ok(self.gathered.get_or_init(|| t))
    }

    fn inbox(&self) -> Result<&(SymmetricTensor, SignalBoard)> {
        if let Some(pair) = self.inbox.get() {
            return Ok(pair);
        }
        let inbox = self.world.alloc_staging(INBOX_NAME, &[self.prob.m, self.prob.k])?;
        let flags = self
            .world
            .alloc_board(FLAGS_NAME, self.prob.world_size, self.prob.shard_blocks().len())?;
        Ok(self.inbox.get_or_init(|| (inbox, flags)))
    }

    pub fn run(&self, variant: AgVariant) -> Result<AgGemmRun> {
        self.c.zero();
        let run = match variant {
            AgVariant::Baseline => {
                let gathered = self.gathered()?;
                gathered.zero();
                self.world.run(|ctx| self.baseline_rank(ctx, gathered))?
            }
            AgVariant::Pull => self.world.run(|ctx| self.pull_rank(ctx))?,
            AgVariant::Push => {
                let (inbox, flags) = self.inbox()?;
                inbox.zero();
                self.world.run(|ctx| self.push_rank(ctx, inbox, flags))?
            }
        };
        let c = (0..self.prob.world_size)
            .map(|r| Matrix::new(self.prob.m, self.prob.n, self.c.snapshot(r)?))
            .collect::<Result<Vec<_>>>()?;
        let report = taxmeter::report(&run.events, self.world.config())?;
        Ok(AgGemmRun {
            c,
            events: run.events,
            report,
        })
    }

    /// Final board state of the push variant, per rank.
    pub fn push_flags(&self, rank: usize) -> Result<Vec<u64>> {
        self.inbox()?.1.values(rank)
    }

    /// Walks output tiles; for each, accumulates over shard-major k-blocks
    /// using `fetch_a(rows, src, block_index, shard_cols)` for the `A` tile.
    fn tiled_gemm<F>(&self, ctx: &RankCtx, mut fetch_a: F) -> Result<()>
    where
        F: FnMut(Range<usize>, usize, usize, Range<usize>) -> Result<Vec<f32>>,
    {
        let p = &self.prob;
        let me = ctx.rank();
        let sc = p.shard_cols();
        let blocks = p.shard_blocks();
        for rows in tile_ranges(p.m, p.tiles.bm) {
            for cols in tile_ranges(p.n, p.tiles.bn) {
                let mut acc = Matrix::zeros(rows.len(), cols.len());
                for src in 0..p.world_size {
                    for (kb, kc) in blocks.iter().enumerate() {
                        let a_tile = Matrix::new(rows.len(), kc.len(), fetch_a(rows.clone(), src, kb, kc.clone())?)?;
                        let global = src * sc + kc.start..src * sc + kc.end;
                        let b_block = Block::from_ranges(global, cols.clone());
                        let b_tile = Matrix::new(kc.len(), cols.len(), ctx.load_block(&self.b, me, b_block, None)?)?;
                        gemm_acc(&a_tile, &b_tile, &mut acc)?;
                    }
                }
                ctx.store_block(&self.c, me, Block::from_ranges(rows.clone(), cols), acc.data(), None)?;
            }
        }
        Ok(())
    }

    fn baseline_rank(&self, ctx: &RankCtx, gathered: &SymmetricTensor) -> Result<()> {
        let p = &self.prob;
        let me = ctx.rank();
        let sc = p.shard_cols();

        charge_launch(ctx, "ag.sync");
        ctx.barrier()?;

        charge_launch(ctx, "ag.all_gather");
        for src in 0..p.world_size {
            let shard = ctx.load_block(&self.a, src, Block::new(0, 0, p.m, sc), None)?;
            ctx.store_block(gathered, me, Block::new(0, src * sc, p.m, sc), &shard, None)?;
        }
        ctx.barrier()?;

        charge_launch(ctx, "ag.gemm");
        ctx.skewed_compute("ag.gemm", || {
            self.tiled_gemm(ctx, |rows, src, _kb, kc| {
                let cols = src * sc + kc.start..src * sc + kc.end;
                ctx.load_block(gathered, me, Block::from_ranges(rows, cols), None)
            })
        })
    }

    fn pull_rank(&self, ctx: &RankCtx) -> Result<()> {
        charge_launch(ctx, "ag.pull_gemm");
        ctx.skewed_compute("ag.gemm", || {
            self.tiled_gemm(ctx, |rows, src, _kb, kc| {
                ctx.load_block(&self.a, src, Block::from_ranges(rows, kc), None)
            })
        })
    }

    fn push_rank(&self, ctx: &RankCtx, inbox: &SymmetricTensor, flags: &SignalBoard) -> Result<()> {
        let p = &self.prob;
        let sc = p.shard_cols();
        let blocks = p.shard_blocks();
        ctx.join_lanes(
            |ctx| {
                charge_launch(ctx, "ag.wait_compute");
                let me = ctx.rank();
                ctx.skewed_compute("ag.gemm", || {
                    self.tiled_gemm(ctx, |rows, src, kb, kc| {
                        let slot = Slot::new(src, kb);
                        ctx.wait_signal(flags, slot, 1)?;
                        let cols = src * sc + kc.start..src * sc + kc.end;
                        ctx.load_block(inbox, me, Block::from_ranges(rows, cols), Some(slot))
                    })
                })
            },
            |ctx| {
                charge_launch(ctx, "ag.push");
                let me = ctx.rank();
                for dst in 0..p.world_size {
                    for (kb, kc) in blocks.iter().enumerate() {
                        let slot = Slot::new(me, kb);
                        let tile = ctx.load_block(&self.a, me, Block::from_ranges(0..p.m, kc.clone()), None)?;
                        let cols = me * sc + kc.start..me * sc + kc.end;
                        ctx.store_block(inbox, dst, Block::from_ranges(0..p.m, cols), &tile, Some(slot))?;
                        ctx.atomic_signal(flags, dst, slot)?;
                    }
                }
                Ok(())
            },
        )
        .map(|_| ())
    }
}

pub fn run_baseline(prob: AgGemmProblem, cfg: WorldConfig) -> Result<AgGemmRun> {
    AgGemmRunner::new(prob, cfg)?.run(AgVariant::Baseline)
}

pub fn run_pull(prob: AgGemmProblem, cfg: WorldConfig) -> Result<AgGemmRun> {
    AgGemmRunner::new(prob, cfg)?.run(AgVariant::Pull)
}

pub fn run_push(prob: AgGemmProblem, cfg: WorldConfig) -> Result<AgGemmRun> {
    AgGemmRunner::new(prob, cfg)?.run(AgVariant::Push)
}
