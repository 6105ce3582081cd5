use std::time::{Duration, Instant};

use tilefabric::ag_gemm::{AgGemmProblem, AgGemmRunner, AgVariant};
use tilefabric::flash_decode::{FdRunner, FdVariant};
use tilefabric::reference::{bitwise_eq, max_rel_err, max_rel_err_f32, monolithic_attention, naive_gemm};
use tilefabric::taxmeter::TaxReport;
use tilefabric::tilemath::DecodeProblem;
use tilefabric::Error;

use crate::cli::Pattern;
use crate::config::{RunConfig, Shape};

/// Flash decode outputs must match the f64 oracle this closely.
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Debug)]
pub enum Failure {
    /// The configuration itself is unusable.
    Setup(String),
    /// A wait hit the watchdog.
    Deadlock(String),
    Runtime(String),
}

impl Failure {
    fn from_core(e: Error) -> Self {
        match e {
            Error::SignalTimeout { .. } | Error::BarrierTimeout { .. } => Failure::Deadlock(e.to_string()),
            Error::Config(_) | Error::Shape(_) => Failure::Setup(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Setup(m) | Failure::Deadlock(m) | Failure::Runtime(m) => m,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub iter: u32,
    pub makespan: Duration,
    pub wall: Duration,
    pub report: TaxReport,
    pub checksum: u64,
    /// `None` when not verifying.
    pub verified: Option<bool>,
    pub max_err: Option<f64>,
}

enum Oracle {
    Exact(Vec<f32>),
    Approx(Vec<f64>),
}

enum Runner {
    Ag(AgGemmRunner, AgVariant),
    Fd(FdRunner, FdVariant),
}

impl Runner {
    fn build(cfg: &RunConfig, pattern: Pattern) -> Result<(Self, Option<Oracle>), Error> {
        let wcfg = cfg.world_config();
        let seed = cfg.knobs.seed;
        let verify = cfg.knobs.verify;
        Ok(match cfg.shape {
            Shape::Ag { m, n, k } => {
                let prob = AgGemmProblem::random(m, n, k, cfg.world_size, cfg.knobs.tiles, seed)?;
                let oracle = verify.then(|| Oracle::Exact(naive_gemm(&prob.full_a(), prob.b()).into_data()));
                let variant = match pattern {
                    Pattern::AgBaseline => AgVariant::Baseline,
                    Pattern::AgPull => AgVariant::Pull,
                    Pattern::AgPush => AgVariant::Push,
                    other => return Err(Error::Config(format!("{} is not an ag pattern", other.name()))),
                };
                (Runner::Ag(AgGemmRunner::new(prob, wcfg)?, variant), oracle)
            }
            Shape::Fd {
                heads,
                head_dim,
                kv_len,
            } => {
                let prob = DecodeProblem::random(heads, head_dim, kv_len, cfg.world_size, seed)?;
                let oracle = verify.then(|| Oracle::Approx(monolithic_attention(&prob)));
                let variant = match pattern {
                    Pattern::FdBsp => FdVariant::Bsp,
                    Pattern::FdAg => FdVariant::IndependentAg,
                    Pattern::FdWait => FdVariant::FineWaits,
                    Pattern::FdFused => FdVariant::Fused,
                    other => return Err(Error::Config(format!("{} is not an fd pattern", other.name()))),
                };
                let runner = FdRunner::new(prob, wcfg)?.with_fold_order(cfg.knobs.fold);
                (Runner::Fd(runner, variant), oracle)
            }
        })
    }

    /// One execution: per-rank outputs and the tax report.
    fn run_once(&self) -> Result<(Vec<Vec<f32>>, TaxReport), Error> {
        match self {
            Runner::Ag(r, v) => {
                let run = r.run(*v)?;
                Ok((run.c.into_iter().map(|c| c.into_data()).collect(), run.report))
            }
            Runner::Fd(r, v) => {
                let run = r.run(*v)?;
                Ok((run.outputs, run.report))
            }
        }
    }
}

/// FNV-1a over the bit patterns of every rank's output, in rank order.
pub fn checksum(outputs: &[Vec<f32>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in outputs.iter().flatten() {
        for b in x.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn check(oracle: &Oracle, outputs: &[Vec<f32>]) -> (bool, f64) {
    match oracle {
        Oracle::Exact(want) => outputs.iter().fold((true, 0.0), |(ok, err), out| {
            (ok && bitwise_eq(out, want), err.max(max_rel_err_f32(out, want)))
        }),
        Oracle::Approx(want) => {
            let err = outputs.iter().map(|out| max_rel_err(out, want)).fold(0.0, f64::max);
            (err <= FD_TOLERANCE, err)
        }
    }
}

/// Runs warmup then timed iterations of `pattern`, handing each sample to
/// `sink` as soon as it exists. Stops after the first sample that fails
/// verification.
pub fn measure(
    cfg: &RunConfig,
    pattern: Pattern,
    mut sink: impl FnMut(&Sample) -> std::io::Result<()>,
) -> Result<Vec<Sample>, Failure> {
    let (runner, oracle) = Runner::build(cfg, pattern).map_err(Failure::from_core)?;
    for _ in 0..cfg.knobs.warmup {
        runner.run_once().map_err(Failure::from_core)?;
    }
    let mut samples = Vec::with_capacity(cfg.knobs.iters as usize);
    for iter in 0..cfg.knobs.iters {
        let t = Instant::now();
        let (outputs, report) = runner.run_once().map_err(Failure::from_core)?;
        let wall = t.elapsed();
        let (verified, max_err) = match &oracle {
            Some(o) => {
                let (ok, err) = check(o, &outputs);
                (Some(ok), Some(err))
            }
            None => (None, None),
        };
        let sample = Sample {
            iter,
            makespan: report.makespan,
            wall,
            checksum: checksum(&outputs),
            report,
            verified,
            max_err,
        };
        sink(&sample).map_err(|e| Failure::Runtime(format!("writing results: {e}")))?;
        let failed = sample.verified == Some(false);
        samples.push(sample);
        if failed {
            break;
        }
    }
    Ok(samples)
}

/// Nearest-rank percentile of an already sorted slice.
pub fn percentile(sorted: &[Duration], p: f64) -> Duration {
    if sorted.is_empty() {
        return Duration::ZERO;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub median: Duration,
    pub p10: Duration,
    pub p90: Duration,
    pub min: Duration,
    pub max: Duration,
}

impl Spread {
    pub fn of(values: impl IntoIterator<Item = Duration>) -> Self {
        let mut v: Vec<Duration> = values.into_iter().collect();
        v.sort();
        Spread {
            median: percentile(&v, 50.0),
            p10: percentile(&v, 10.0),
            p90: percentile(&v, 90.0),
            min: v.first().copied().unwrap_or_default(),
            max: v.last().copied().unwrap_or_default(),
        }
    }
}
