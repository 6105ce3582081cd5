use std::sync::atomic::{fence, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};

/// Address of one counter on a rank's board: the producing rank and a slot
/// index within that producer's row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub src: usize,
    pub index: usize,
}

impl Slot {
    pub const fn new(src: usize, index: usize) -> Self {
        Self { src, index }
    }
}

/// Symmetric grid of monotonic counters. Each rank owns a `sources x slots`
/// grid; any rank may increment any rank's counters.
#[derive(Clone)]
pub struct SignalBoard {
    inner: Arc<BoardInner>,
}

struct BoardInner {
    name: Arc<str>,
    sources: usize,
    slots: usize,
    counters: Vec<Box<[AtomicU64]>>,
    parking: Vec<Parking>,
}

/// Where a rank's long waiters sleep once their spin budget is spent.
#[derive(Default)]
struct Parking {
    parked: AtomicUsize,
    lock: Mutex<()>,
    cv: Condvar,
}

impl std::fmt::Debug for SignalBoard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SignalBoard")
            .field("name", &self.inner.name)
            .field("sources", &self.inner.sources)
            .field("slots", &self.inner.slots)
            .finish()
    }
}

impl SignalBoard {
    pub(crate) fn new(name: &str, world_size: usize, sources: usize, slots: usize) -> Result<Self> {
        if sources == 0 || slots == 0 {
            return Err(Error::Config(format!(
                "board `{name}` needs at least one source and one slot"
            )));
        }
        let counters = (0..world_size)
            .map(|_| (0..sources * slots).map(|_| AtomicU64::new(0)).collect())
            .collect();
        Ok(Self {
            inner: Arc::new(BoardInner {
                name: name.into(),
                sources,
                slots,
                counters,
                parking: (0..world_size).map(|_| Parking::default()).collect(),
            }),
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn sources(&self) -> usize {
        self.inner.sources
    }

    pub fn slots(&self) -> usize {
        self.inner.slots
    }

    pub(crate) fn counter(&self, rank: usize, slot: Slot) -> Result<&AtomicU64> {
        let region = self.inner.counters.get(rank).ok_or_else(|| Error::Bounds {
            name: self.name().to_string(),
            detail: format!("rank {rank} >= world size {}", self.inner.counters.len()),
        })?;
        if slot.src >= self.inner.sources || slot.index >= self.inner.slots {
            return Err(Error::Bounds {
                name: self.name().to_string(),
                detail: format!(
                    "slot {slot:?} outside {}x{} grid",
                    self.inner.sources, self.inner.slots
                ),
            });
        }
        Ok(&region[slot.src * self.inner.slots + slot.index])
    }

    /// Increments a counter and wakes any parked waiter on `rank`.
    pub(crate) fn signal(&self, rank: usize, slot: Slot) -> Result<()> {
        self.counter(rank, slot)?.fetch_add(1, Ordering::Release);
        // Pairs with the fence in `park`: either the waiter sees the new
        // count before sleeping or we see it parked and notify.
        fence(Ordering::SeqCst);
        let parking = &self.inner.parking[rank];
        if parking.parked.load(Ordering::Relaxed) > 0 {
            let _guard = parking.lock.lock().unwrap_or_else(|e| e.into_inner());
            parking.cv.notify_all();
        }
        Ok(())
    }

    /// Sleeps on `rank`'s parking spot until notified, `timeout` passes, or
    /// `ready()` already holds.
    pub(crate) fn park(&self, rank: usize, timeout: Duration, ready: impl Fn() -> bool) {
        let parking = &self.inner.parking[rank];
        parking.parked.fetch_add(1, Ordering::Relaxed);
        fence(Ordering::SeqCst);
        let guard = parking.lock.lock().unwrap_or_else(|e| e.into_inner());
        if !ready() {
            let _ = parking.cv.wait_timeout(guard, timeout);
        }
        parking.parked.fetch_sub(1, Ordering::Relaxed);
    }

    /// Acquire-load of one counter.
    pub fn value(&self, rank: usize, slot: Slot) -> Result<u64> {
        Ok(self.counter(rank, slot)?.load(Ordering::Acquire))
    }

    /// All counters of `rank`, row-major by source.
    pub fn values(&self, rank: usize) -> Result<Vec<u64>> {
        let region = self.inner.counters.get(rank).ok_or_else(|| Error::Bounds {
            name: self.name().to_string(),
            detail: format!("rank {rank} out of range"),
        })?;
        Ok(region.iter().map(|c| c.load(Ordering::Acquire)).collect())
    }

    /// Zeroes every counter. Only valid between runs.
    pub fn reset(&self) {
        for region in &self.inner.counters {
            for c in region.iter() {
                c.store(0, Ordering::Release);
            }
        }
    }
}
