//! The multi-rank world.
//!
//! A [`World`] owns the symmetric heap and signal boards. [`World::run`]
//! spawns one OS thread per rank (all simultaneously schedulable), hands each
//! a [`RankCtx`], and collects per-rank results plus the merged
//! [`TaskEvent`] log.
//!
//! Visibility contract: plain loads/stores carry no ordering. A store
//! followed by [`RankCtx::atomic_signal`] is visible to any rank whose
//! [`RankCtx::wait_signal`] observes that signal. [`RankCtx::barrier`] orders
//! everything issued before it against everything issued after it.

mod barrier;
mod heap;
mod signal;

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

pub use heap::{Block, SymmetricTensor};
pub use signal::{SignalBoard, Slot};

use crate::error::{Error, Result};
use crate::taxmeter::{CopyDir, CopyInfo, EventKind, TaskEvent};
use barrier::WorldBarrier;

pub const MAX_WORLD_SIZE: usize = 64;
pub const DEFAULT_SPIN_YIELD_EVERY: u32 = 64;
pub const DEFAULT_WATCHDOG: Duration = Duration::from_secs(10);
pub const DEFAULT_LAUNCH_COST: Duration = Duration::from_micros(20);

const PARK_AFTER_YIELDS: u32 = 32;
const PARK_SLICE: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub world_size: usize,
    /// Synthetic cost charged by every task launch.
    pub launch_cost: Duration,
    /// Extra delay added to the first compute stage of the given ranks.
    pub skew: BTreeMap<usize, Duration>,
    pub seed: u64,
    /// Spin iterations between scheduler yields in signal waits.
    pub spin_yield_every: u32,
    /// Upper bound on any single barrier or signal wait.
    pub watchdog: Duration,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            world_size: 1,
            launch_cost: DEFAULT_LAUNCH_COST,
            skew: BTreeMap::new(),
            seed: 0,
            spin_yield_every: DEFAULT_SPIN_YIELD_EVERY,
            watchdog: DEFAULT_WATCHDOG,
        }
    }
}

impl WorldConfig {
    pub fn new(world_size: usize) -> Self {
        Self {
            world_size,
            ..Self::default()
        }
    }

    pub fn with_launch_cost(mut self, cost: Duration) -> Self {
        self.launch_cost = cost;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_watchdog(mut self, watchdog: Duration) -> Self {
        self.watchdog = watchdog;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_WORLD_SIZE).contains(&self.world_size) {
            return Err(Error::Config(format!(
                "world_size {} outside 1..={MAX_WORLD_SIZE}",
                self.world_size
            )));
        }
        if self.spin_yield_every == 0 {
            return Err(Error::Config("spin_yield_every must be >= 1".into()));
        }
        if let Some((&rank, _)) = self.skew.range(self.world_size..).next() {
            return Err(Error::Config(format!(
                "skew targets rank {rank} but world_size is {}",
                self.world_size
            )));
        }
        Ok(())
    }

    pub fn skew_for(&self, rank: usize) -> Duration {
        self.skew.get(&rank).copied().unwrap_or_default()
    }
}

struct WorldShared {
    cfg: WorldConfig,
    tensors: Mutex<HashMap<String, SymmetricTensor>>,
    boards: Mutex<HashMap<String, SignalBoard>>,
}

struct RunShared {
    epoch: OnceLock<Instant>,
    barrier: WorldBarrier,
    abort: AtomicBool,
    /// Ranks that attached to each name during this run, as bitmasks.
    attached: Mutex<HashMap<String, u64>>,
}

impl RunShared {
    fn abort(&self) {
        self.abort.store(true, Ordering::Release);
        self.barrier.wake_all();
    }
}

/// Output of one [`World::run`].
#[derive(Debug)]
pub struct WorldRun<T> {
    /// Indexed by rank.
    pub results: Vec<T>,
    /// All ranks' events, ordered by start time.
    pub events: Vec<TaskEvent>,
}

pub struct World {
    shared: Arc<WorldShared>,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            shared: Arc::new(WorldShared {
                cfg,
                tensors: Mutex::new(HashMap::new()),
                boards: Mutex::new(HashMap::new()),
            }),
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.shared.cfg
    }

    pub fn world_size(&self) -> usize {
        self.shared.cfg.world_size
    }

    /// Owner-side allocation before any run.
    pub fn alloc_symmetric(&self, name: &str, shape: &[usize]) -> Result<SymmetricTensor> {
        self.alloc_tensor(name, shape, false)
    }

    /// Owner-side allocation of a tensor whose writes count as staged bytes.
    pub fn alloc_staging(&self, name: &str, shape: &[usize]) -> Result<SymmetricTensor> {
        self.alloc_tensor(name, shape, true)
    }

    fn alloc_tensor(&self, name: &str, shape: &[usize], staging: bool) -> Result<SymmetricTensor> {
        let mut tensors = lock(&self.shared.tensors);
        if tensors.contains_key(name) {
            return Err(Error::Config(format!("tensor `{name}` already allocated")));
        }
        let t = SymmetricTensor::new(name, shape, self.world_size(), staging)?;
        tensors.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn alloc_board(&self, name: &str, sources: usize, slots: usize) -> Result<SignalBoard> {
        let mut boards = lock(&self.shared.boards);
        if boards.contains_key(name) {
            return Err(Error::Config(format!("board `{name}` already allocated")));
        }
        let b = SignalBoard::new(name, self.world_size(), sources, slots)?;
        boards.insert(name.to_string(), b.clone());
        Ok(b)
    }

    /// Runs `program` once on every rank concurrently. Signal boards are
    /// reset to zero first; heap contents persist across runs.
    pub fn run<T, F>(&self, program: F) -> Result<WorldRun<T>>
    where
        T: Send,
        F: Fn(&RankCtx) -> Result<T> + Sync,
    {
        let w = self.world_size();
        for board in lock(&self.shared.boards).values() {
            board.reset();
        }
        let run = Arc::new(RunShared {
            epoch: OnceLock::new(),
            barrier: WorldBarrier::new(w),
            abort: AtomicBool::new(false),
            attached: Mutex::new(HashMap::new()),
        });
        let sinks: Vec<_> = (0..w).map(|_| Arc::new(Mutex::new(Vec::new()))).collect();
        let gate = std::sync::Barrier::new(w + 1);
        let program = &program;
        let gate = &gate;

        let outcomes: Vec<Result<T>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..w)
                .map(|rank| {
                    let ctx = RankCtx {
                        rank,
                        lane: 0,
                        world: self.shared.clone(),
                        run: run.clone(),
                        sink: sinks[rank].clone(),
                        skew_pending: Arc::new(AtomicBool::new(true)),
                    };
                    std::thread::Builder::new()
                        .name(format!("rank-{rank}"))
                        .spawn_scoped(s, move || {
                            gate.wait();
                            let out = catch_unwind(AssertUnwindSafe(|| program(&ctx)))
                                .unwrap_or_else(|payload| {
                                    Err(Error::WorkerPanic {
                                        rank,
                                        message: panic_message(payload.as_ref()),
                                    })
                                });
                            if out.is_err() {
                                ctx.run.abort();
                            }
                            out
                        })
                        .expect("spawn rank thread")
                })
                .collect();
            run.epoch.get_or_init(Instant::now);
            gate.wait();
            handles
                .into_iter()
                .enumerate()
                .map(|(rank, h)| {
                    h.join().unwrap_or_else(|payload| {
                        Err(Error::WorkerPanic {
                            rank,
                            message: panic_message(payload.as_ref()),
                        })
                    })
                })
                .collect()
        });

        let mut results = Vec::with_capacity(w);
        let mut errors = Vec::new();
        for out in outcomes {
            match out {
                Ok(v) => results.push(v),
                Err(e) => errors.push(e),
            }
        }
        if !errors.is_empty() {
            return Err(root_cause(errors));
        }

        let mut events: Vec<TaskEvent> = sinks
            .into_iter()
            .flat_map(|s| std::mem::take(&mut *lock(&s)))
            .collect();
        events.sort_by(|a, b| {
            (a.t_start, a.rank, a.lane).cmp(&(b.t_start, b.rank, b.lane))
        });
        Ok(WorldRun { results, events })
    }
}

/// Creates a world from `cfg` and runs `program` once.
pub fn launch_world<T, F>(cfg: WorldConfig, program: F) -> Result<WorldRun<T>>
where
    T: Send,
    F: Fn(&RankCtx) -> Result<T> + Sync,
{
    World::new(cfg)?.run(program)
}

fn root_cause(errors: Vec<Error>) -> Error {
    let mut fallback = None;
    for e in errors {
        if !e.is_secondary() {
            return e;
        }
        fallback.get_or_insert(e);
    }
    fallback.expect("at least one error")
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Per-task handle given to rank programs. A rank may run several
/// concurrent tasks ("lanes"), each with its own clone of the context.
#[derive(Clone)]
pub struct RankCtx {
    rank: usize,
    lane: usize,
    world: Arc<WorldShared>,
    run: Arc<RunShared>,
    sink: Arc<Mutex<Vec<TaskEvent>>>,
    skew_pending: Arc<AtomicBool>,
}

impl RankCtx {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lane(&self) -> usize {
        self.lane
    }

    pub fn world_size(&self) -> usize {
        self.world.cfg.world_size
    }

    pub fn config(&self) -> &WorldConfig {
        &self.world.cfg
    }

    /// Time since the world's start gate opened.
    pub fn now(&self) -> Duration {
        self.run
            .epoch
            .get()
            .map(|e| e.elapsed())
            .unwrap_or_default()
    }

    pub(crate) fn record(&self, event: TaskEvent) {
        lock(&self.sink).push(event);
    }

    fn event(&self, kind: EventKind, label: Arc<str>, t_start: Duration, t_end: Duration) -> TaskEvent {
        TaskEvent {
            rank: self.rank,
            lane: self.lane,
            kind,
            label,
            t_start,
            t_end,
            bytes: None,
            copy: None,
            slot: None,
        }
    }

    fn check_abort(&self) -> Result<()> {
        if self.run.abort.load(Ordering::Acquire) {
            Err(Error::Aborted { rank: self.rank })
        } else {
            Ok(())
        }
    }

    /// Marks the whole world as failed; blocked waits return
    /// [`Error::Aborted`].
    pub fn abort(&self) {
        self.run.abort();
    }

    /// Collective allocation from inside a run. Every rank must call it with
    /// the same name and shape; a rank calling twice is an error. Regions
    /// are zeroed when the first rank creates the tensor.
    pub fn alloc_symmetric(&self, name: &str, shape: &[usize]) -> Result<SymmetricTensor> {
        self.attach_tensor(name, shape, false)
    }

    pub fn alloc_staging(&self, name: &str, shape: &[usize]) -> Result<SymmetricTensor> {
        self.attach_tensor(name, shape, true)
    }

    fn attach_tensor(&self, name: &str, shape: &[usize], staging: bool) -> Result<SymmetricTensor> {
        let mut tensors = lock(&self.world.tensors);
        let t = match tensors.get(name) {
            Some(t) => {
                if t.shape() != shape || t.is_staging() != staging {
                    return Err(Error::SymmetryMismatch {
                        name: name.to_string(),
                        registered: t.shape().to_vec(),
                        requested: shape.to_vec(),
                    });
                }
                t.clone()
            }
            None => {
                let t = SymmetricTensor::new(name, shape, self.world_size(), staging)?;
                tensors.insert(name.to_string(), t.clone());
                t
            }
        };
        self.mark_attached(name)?;
        Ok(t)
    }

    pub fn alloc_board(&self, name: &str, sources: usize, slots: usize) -> Result<SignalBoard> {
        let mut boards = lock(&self.world.boards);
        let b = match boards.get(name) {
            Some(b) => {
                if b.sources() != sources || b.slots() != slots {
                    return Err(Error::SymmetryMismatch {
                        name: name.to_string(),
                        registered: vec![b.sources(), b.slots()],
                        requested: vec![sources, slots],
                    });
                }
                b.clone()
            }
            None => {
                let b = SignalBoard::new(name, self.world_size(), sources, slots)?;
                boards.insert(name.to_string(), b.clone());
                b
            }
        };
        self.mark_attached(name)?;
        Ok(b)
    }

    fn mark_attached(&self, name: &str) -> Result<()> {
        let mut attached = lock(&self.run.attached);
        let mask = attached.entry(name.to_string()).or_insert(0);
        let bit = 1u64 << self.rank;
        if *mask & bit != 0 {
            return Err(Error::Duplicate {
                name: name.to_string(),
                rank: self.rank,
            });
        }
        *mask |= bit;
        Ok(())
    }

    fn copy_event(
        &self,
        t: &SymmetricTensor,
        dir: CopyDir,
        peer: usize,
        elems: usize,
        slot: Option<Slot>,
        t_start: Duration,
    ) {
        let mut ev = self.event(EventKind::RemoteCopy, t.name_arc(), t_start, self.now());
        let bytes = (elems * std::mem::size_of::<f32>()) as u64;
        ev.bytes = (dir == CopyDir::Store && t.is_staging()).then_some(bytes);
        ev.copy = Some(CopyInfo { dir, peer, elems });
        ev.slot = slot;
        self.record(ev);
    }

    /// One-sided read of `src`'s region over a flat element range. A read of
    /// the caller's own rank is an ordinary local copy. `slot` tags the event
    /// with the signal slot that guards this data, if any.
    pub fn remote_load(
        &self,
        t: &SymmetricTensor,
        src: usize,
        range: Range<usize>,
        slot: Option<Slot>,
    ) -> Result<Vec<f32>> {
        let start = self.now();
        let n = range.len();
        let data = t.read_range(src, range)?;
        self.copy_event(t, CopyDir::Load, src, n, slot, start);
        Ok(data)
    }

    /// One-sided write into `dst`'s region. Not ordered with respect to any
    /// other rank until followed by a signal or barrier.
    pub fn remote_store(
        &self,
        t: &SymmetricTensor,
        dst: usize,
        range: Range<usize>,
        values: &[f32],
        slot: Option<Slot>,
    ) -> Result<()> {
        let start = self.now();
        let n = range.len();
        t.write_range(dst, range, values)?;
        self.copy_event(t, CopyDir::Store, dst, n, slot, start);
        Ok(())
    }

    /// 2-D variant of [`RankCtx::remote_load`].
    pub fn load_block(
        &self,
        t: &SymmetricTensor,
        src: usize,
        block: Block,
        slot: Option<Slot>,
    ) -> Result<Vec<f32>> {
        let start = self.now();
        let data = t.read_block(src, block)?;
        self.copy_event(t, CopyDir::Load, src, block.len(), slot, start);
        Ok(data)
    }

    /// 2-D variant of [`RankCtx::remote_store`].
    pub fn store_block(
        &self,
        t: &SymmetricTensor,
        dst: usize,
        block: Block,
        values: &[f32],
        slot: Option<Slot>,
    ) -> Result<()> {
        let start = self.now();
        t.write_block(dst, block, values)?;
        self.copy_event(t, CopyDir::Store, dst, block.len(), slot, start);
        Ok(())
    }

    /// Increments `dst`'s counter at `slot` with release ordering.
    pub fn atomic_signal(&self, board: &SignalBoard, dst: usize, slot: Slot) -> Result<()> {
        board.signal(dst, slot)
    }

    /// Non-blocking acquire read of one of the caller's own counters.
    pub fn poll_signal(&self, board: &SignalBoard, slot: Slot) -> Result<u64> {
        board.value(self.rank, slot)
    }

    /// Spins until the caller's own counter at `slot` reaches `expected`.
    /// After `PARK_AFTER_YIELDS` fruitless yields the waiter parks instead
    /// of spinning, so it stops competing with producers for a core.
    pub fn wait_signal(&self, board: &SignalBoard, slot: Slot, expected: u64) -> Result<()> {
        self.spin_until_any(board, &[slot], expected).map(|_| ())
    }

    /// Spins until any of `slots` reaches `expected` and returns the first
    /// ready one in the given order.
    pub fn wait_any_signal(&self, board: &SignalBoard, slots: &[Slot], expected: u64) -> Result<Slot> {
        if slots.is_empty() {
            return Err(Error::Config("wait_any_signal needs at least one slot".into()));
        }
        self.spin_until_any(board, slots, expected)
    }

    fn spin_until_any(&self, board: &SignalBoard, slots: &[Slot], expected: u64) -> Result<Slot> {
        if expected == 0 {
            return Err(Error::Config("signal waits expect a count >= 1".into()));
        }
        let counters = slots
            .iter()
            .map(|&s| board.counter(self.rank, s))
            .collect::<Result<Vec<_>>>()?;
        let t_start = self.now();
        let begun = Instant::now();
        let yield_every = self.world.cfg.spin_yield_every;
        let mut spins = 0u32;
        let mut yields = 0u32;
        let ready = loop {
            if let Some(i) = counters
                .iter()
                .position(|c| c.load(Ordering::Acquire) >= expected)
            {
                break slots[i];
            }
            spins += 1;
            if spins >= yield_every {
                spins = 0;
                if yields < PARK_AFTER_YIELDS {
                    yields += 1;
                    std::thread::yield_now();
                } else {
                    board.park(self.rank, PARK_SLICE, || {
                        counters.iter().any(|c| c.load(Ordering::Acquire) >= expected)
                    });
                }
                self.check_abort()?;
                let waited = begun.elapsed();
                if waited >= self.world.cfg.watchdog {
                    return Err(Error::SignalTimeout {
                        rank: self.rank,
                        board: board.name().to_string(),
                        slot: slots[0],
                        expected,
                        observed: counters[0].load(Ordering::Acquire),
                        waited,
                    });
                }
            } else {
                std::hint::spin_loop();
            }
        };
        let mut ev = self.event(EventKind::SignalWait, board.name().into(), t_start, self.now());
        ev.slot = Some(ready);
        self.record(ev);
        Ok(ready)
    }

    /// Global barrier across all ranks. Records the time spent waiting.
    pub fn barrier(&self) -> Result<()> {
        let t_start = self.now();
        if self.world_size() > 1 {
            self.run
                .barrier
                .wait(self.rank, self.world.cfg.watchdog, &self.run.abort)?;
        }
        let t_end = if self.world_size() > 1 { self.now() } else { t_start };
        self.record(self.event(EventKind::BarrierWait, "barrier".into(), t_start, t_end));
        Ok(())
    }

    /// Runs `f` as a recorded compute stage.
    pub fn compute<R>(&self, label: &str, f: impl FnOnce() -> R) -> R {
        let t_start = self.now();
        let out = f();
        self.record(self.event(EventKind::Compute, label.into(), t_start, self.now()));
        out
    }

    /// Like [`RankCtx::compute`], but the first such stage on a rank with
    /// configured skew is extended by that skew.
    pub fn skewed_compute<R>(&self, label: &str, f: impl FnOnce() -> R) -> R {
        let t_start = self.now();
        let skew = self.world.cfg.skew_for(self.rank);
        if !skew.is_zero() && self.skew_pending.swap(false, Ordering::AcqRel) {
            std::thread::sleep(skew);
        }
        let out = f();
        self.record(self.event(EventKind::Compute, label.into(), t_start, self.now()));
        out
    }

    /// Runs two cooperating tasks of this rank concurrently: `first` on the
    /// current thread, `second` on a new thread with the next lane index.
    /// A failure in either aborts the world so the other cannot hang.
    pub fn join_lanes<A, B, FA, FB>(&self, first: FA, second: FB) -> Result<(A, B)>
    where
        A: Send,
        B: Send,
        FA: FnOnce(&RankCtx) -> Result<A> + Send,
        FB: FnOnce(&RankCtx) -> Result<B> + Send,
    {
        let mut other = self.clone();
        other.lane = self.lane + 1;
        let (a, b) = std::thread::scope(|s| {
            let handle = std::thread::Builder::new()
                .name(format!("rank-{}-lane-{}", self.rank, other.lane))
                .spawn_scoped(s, move || {
                    let out = catch_unwind(AssertUnwindSafe(|| second(&other)))
                        .unwrap_or_else(|payload| {
                            Err(Error::WorkerPanic {
                                rank: other.rank,
                                message: panic_message(payload.as_ref()),
                            })
                        });
                    if out.is_err() {
                        other.abort();
                    }
                    out
                })
                .expect("spawn lane thread");
            let a = first(self);
            if a.is_err() {
                self.abort();
            }
            let b = handle.join().unwrap_or_else(|payload| {
                Err(Error::WorkerPanic {
                    rank: self.rank,
                    message: panic_message(payload.as_ref()),
                })
            });
            (a, b)
        });
        match (a, b) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            (Err(e), Ok(_)) | (Ok(_), Err(e)) => Err(e),
            (Err(ea), Err(eb)) => Err(root_cause(vec![ea, eb])),
        }
    }
}
