use std::fmt;
use std::time::Duration;

use tilefabric::fabric::MAX_WORLD_SIZE;
use tilefabric::flash_decode::FoldOrder;
use tilefabric::tilemath::TileSpec;
use tilefabric::WorldConfig;

use crate::cli::{CommonArgs, FoldArg, Pattern, Preset, RunArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    AgGemm,
    FlashDecode,
}

impl Family {
    pub fn of(p: Pattern) -> Self {
        if p.is_ag() {
            Family::AgGemm
        } else {
            Family::FlashDecode
        }
    }

    pub fn patterns(self) -> &'static [Pattern] {
        match self {
            Family::AgGemm => &Pattern::AG,
            Family::FlashDecode => &Pattern::FD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Ag { m: usize, n: usize, k: usize },
    Fd { heads: usize, head_dim: usize, kv_len: usize },
}

impl Shape {
    pub fn family(&self) -> Family {
        match self {
            Shape::Ag { .. } => Family::AgGemm,
            Shape::Fd { .. } => Family::FlashDecode,
        }
    }
}

/// Shape grids and world size a preset starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDefaults {
    pub family: Option<Family>,
    pub world_size: usize,
    pub ms: Vec<usize>,
    pub n: usize,
    pub k: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub kv_lens: Vec<usize>,
}

fn powers_of_two(max: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |x| Some(x * 2))
        .take_while(|&x| x <= max)
        .collect()
}

impl ShapeDefaults {
    pub fn for_preset(preset: Option<Preset>) -> Self {
        let plain = ShapeDefaults {
            family: None,
            world_size: 2,
            ms: vec![16],
            n: 64,
            k: 64,
            heads: 2,
            head_dim: 16,
            kv_lens: vec![256],
        };
        match preset {
            None => plain,
            Some(Preset::PaperAgGemm) => ShapeDefaults {
                family: Some(Family::AgGemm),
                world_size: 8,
                ms: powers_of_two(8192),
                n: 28672,
                k: 8192,
                ..plain
            },
            // N:K kept at 3.5:1.
            Some(Preset::DeskAgGemm) => ShapeDefaults {
                family: Some(Family::AgGemm),
                world_size: 4,
                ms: powers_of_two(128),
                n: 448,
                k: 128,
                ..plain
            },
            Some(Preset::PaperFd) => ShapeDefaults {
                family: Some(Family::FlashDecode),
                world_size: 8,
                heads: 96,
                head_dim: 128,
                kv_lens: vec![32768],
                ..plain
            },
            Some(Preset::DeskFd) => ShapeDefaults {
                family: Some(Family::FlashDecode),
                world_size: 4,
                heads: 8,
                head_dim: 32,
                kv_lens: powers_of_two(32768).into_iter().filter(|&x| x >= 512).collect(),
                ..plain
            },
        }
    }
}

/// Everything except the pattern and shape, shared by all cells of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Knobs {
    pub tiles: TileSpec,
    pub skew: Vec<(usize, Duration)>,
    pub launch_cost: Duration,
    pub iters: u32,
    pub warmup: u32,
    pub seed: u64,
    pub verify: bool,
    pub fold: FoldOrder,
    pub watchdog: Duration,
}

impl Knobs {
    pub fn from_args(a: &CommonArgs) -> Result<Self, String> {
        let d = TileSpec::default();
        let tiles = TileSpec {
            bm: a.bm.unwrap_or(d.bm),
            bn: a.bn.unwrap_or(d.bn),
            bk: a.bk.unwrap_or(d.bk),
        };
        tiles.validate().map_err(|e| e.to_string())?;
        if !a.watchdog_secs.is_finite() || a.watchdog_secs <= 0.0 {
            return Err(format!("watchdog must be positive seconds, got {}", a.watchdog_secs));
        }
        Ok(Knobs {
            tiles,
            skew: a
                .skew
                .iter()
                .map(|&(r, ms)| (r, Duration::from_secs_f64(ms / 1e3)))
                .collect(),
            launch_cost: Duration::from_micros(a.launch_cost_us),
            iters: a.iters,
            warmup: a.warmup,
            seed: a.seed,
            verify: a.verify,
            fold: match a.fold_order {
                FoldArg::Rank => FoldOrder::Rank,
                FoldArg::Arrival => FoldOrder::Arrival,
            },
            watchdog: Duration::from_secs_f64(a.watchdog_secs),
        })
    }
}

/// One fully resolved configuration. `pattern` is unset only for dry runs
/// that echo a preset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pattern: Option<Pattern>,
    pub world_size: usize,
    pub shape: Shape,
    pub knobs: Knobs,
}

impl RunConfig {
    pub fn from_run_args(a: &RunArgs) -> Result<(Self, ShapeDefaults), String> {
        let defaults = ShapeDefaults::for_preset(a.common.preset);
        let family = match (a.pattern, defaults.family) {
            (Some(p), Some(f)) if Family::of(p) != f => {
                return Err(format!(
                    "pattern {} does not belong to the {:?} preset family",
                    p.name(),
                    f
                ))
            }
            (Some(p), _) => Family::of(p),
            (None, Some(f)) if a.common.dry_run => f,
            (None, _) => return Err("--pattern is required".into()),
        };
        let last = |v: &[usize]| *v.last().expect("preset grids are non-empty");
        let shape = match family {
            Family::AgGemm => Shape::Ag {
                m: a.m.unwrap_or(last(&defaults.ms)),
                n: a.n.unwrap_or(defaults.n),
                k: a.k.unwrap_or(defaults.k),
            },
            Family::FlashDecode => Shape::Fd {
                heads: a.heads.unwrap_or(defaults.heads),
                head_dim: a.head_dim.unwrap_or(defaults.head_dim),
                kv_len: a.kv_len.unwrap_or(last(&defaults.kv_lens)),
            },
        };
        let cfg = RunConfig {
            pattern: a.pattern,
            world_size: a.world_size.unwrap_or(defaults.world_size),
            shape,
            knobs: Knobs::from_args(&a.common)?,
        };
        cfg.validate()?;
        Ok((cfg, defaults))
    }

    /// Divisibility and range constraints, checked before any thread starts.
    pub fn validate(&self) -> Result<(), String> {
        let w = self.world_size;
        if !(1..=MAX_WORLD_SIZE).contains(&w) {
            return Err(format!("world size {w} outside 1..={MAX_WORLD_SIZE}"));
        }
        for &(rank, _) in &self.knobs.skew {
            if rank >= w {
                return Err(format!("skew targets rank {rank} but world size is {w}"));
            }
        }
        match self.shape {
            Shape::Ag { m, n, k } => {
                if m == 0 || n == 0 || k == 0 {
                    return Err(format!("M, N, K must be positive, got {m}x{n}x{k}"));
                }
                if k % w != 0 {
                    return Err(format!("K={k} is not divisible by world size {w}"));
                }
            }
            Shape::Fd {
                heads,
                head_dim,
                kv_len,
            } => {
                if heads == 0 || head_dim == 0 || kv_len == 0 {
                    return Err(format!(
                        "heads, head_dim, kv_len must be positive, got {heads}, {head_dim}, {kv_len}"
                    ));
                }
                if kv_len % w != 0 {
                    return Err(format!("kv_len={kv_len} is not divisible by world size {w}"));
                }
            }
        }
        Ok(())
    }

    pub fn world_config(&self) -> WorldConfig {
        let mut cfg = WorldConfig::new(self.world_size)
            .with_launch_cost(self.knobs.launch_cost)
            .with_seed(self.knobs.seed)
            .with_watchdog(self.knobs.watchdog);
        cfg.skew.extend(self.knobs.skew.iter().copied());
        cfg
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pattern = self.pattern.map_or("(not set)", Pattern::name);
        writeln!(f, "pattern      {pattern}")?;
        writeln!(f, "world        W={}", self.world_size)?;
        match self.shape {
            Shape::Ag { m, n, k } => writeln!(f, "shape        M={m} N={n} K={k}")?,
            Shape::Fd {
                heads,
                head_dim,
                kv_len,
            } => writeln!(f, "shape        H={heads} d={head_dim} kv_len={kv_len}")?,
        }
        let k = &self.knobs;
        writeln!(f, "tiles        bm={} bn={} bk={}", k.tiles.bm, k.tiles.bn, k.tiles.bk)?;
        let skew: Vec<String> = k
            .skew
            .iter()
            .map(|(r, d)| format!("{r}:{}", d.as_secs_f64() * 1e3))
            .collect();
        writeln!(
            f,
            "skew         {}",
            if skew.is_empty() { "none".into() } else { skew.join(",") }
        )?;
        writeln!(f, "launch_cost  {:?}", k.launch_cost)?;
        writeln!(f, "iterations   warmup={} iters={}", k.warmup, k.iters)?;
        writeln!(f, "seed         {}", k.seed)?;
        writeln!(f, "verify       {}", k.verify)?;
        writeln!(f, "fold_order   {:?}", k.fold)?;
        write!(f, "watchdog     {:?}", k.watchdog)
    }
}
