//! Event timeline and tax accounting.
//!
//! Every fabric operation leaves a [`TaskEvent`]. [`report`] folds a run's
//! log into a [`TaxReport`]:
//!
//! * launch tax: number of task launches times the configured launch cost;
//! * bulk-synchronous tax: time ranks spend blocked in barriers;
//! * wait idle: time spent in fine-grained signal waits;
//! * staged bytes: bytes written into staging/inbox tensors. This is a proxy
//!   for inter-task data-locality loss, not a memory-traffic measurement.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::fabric::{RankCtx, Slot, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Launch,
    Compute,
    BarrierWait,
    SignalWait,
    RemoteCopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyDir {
    Load,
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyInfo {
    pub dir: CopyDir,
    /// Rank whose region was read or written.
    pub peer: usize,
    pub elems: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEvent {
    pub rank: usize,
    /// Concurrent task index within the rank.
    pub lane: usize,
    pub kind: EventKind,
    /// Task label, tensor name or board name depending on `kind`.
    pub label: Arc<str>,
    /// Offsets from the world's start gate.
    pub t_start: Duration,
    pub t_end: Duration,
    /// Bytes materialized into a staging tensor (staging stores only).
    pub bytes: Option<u64>,
    pub copy: Option<CopyInfo>,
    /// Signal slot awaited (SignalWait) or guarding the copied data.
    pub slot: Option<Slot>,
}

impl TaskEvent {
    pub fn duration(&self) -> Duration {
        self.t_end.saturating_sub(self.t_start)
    }

    pub fn is_load(&self) -> bool {
        matches!(self.copy, Some(CopyInfo { dir: CopyDir::Load, .. }))
    }

    pub fn is_store(&self) -> bool {
        matches!(self.copy, Some(CopyInfo { dir: CopyDir::Store, .. }))
    }
}

/// Per-rank tax totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RankTaxes {
    pub launch_count: u32,
    pub launch_tax: Duration,
    pub bulk_sync_tax: Duration,
    pub wait_idle: Duration,
    pub staged_bytes: u64,
    /// Latest event end on this rank.
    pub completion: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaxReport {
    pub per_rank: Vec<RankTaxes>,
    pub launch_cost: Duration,
    pub launch_count: u32,
    pub launch_tax: Duration,
    pub bulk_sync_tax: Duration,
    pub wait_idle: Duration,
    pub staged_bytes: u64,
    pub makespan: Duration,
}

impl TaxReport {
    pub fn barrier_count(events: &[TaskEvent], rank: usize) -> usize {
        count_kind(events, rank, EventKind::BarrierWait)
    }

    pub fn launch_count_of(events: &[TaskEvent], rank: usize) -> usize {
        count_kind(events, rank, EventKind::Launch)
    }
}

fn count_kind(events: &[TaskEvent], rank: usize, kind: EventKind) -> usize {
    events
        .iter()
        .filter(|e| e.rank == rank && e.kind == kind)
        .count()
}

/// Aggregates a complete event log. Pure: the same log always yields the
/// same report.
pub fn report(events: &[TaskEvent], cfg: &WorldConfig) -> Result<TaxReport> {
    let w = cfg.world_size;
    let mut per_rank = vec![RankTaxes::default(); w];
    let mut compute_spans: BTreeMap<(usize, usize), Vec<(Duration, Duration)>> = BTreeMap::new();

    for ev in events {
        if ev.rank >= w {
            return Err(Error::MalformedLog(format!(
                "event for rank {} in a world of {w}",
                ev.rank
            )));
        }
        if ev.t_end < ev.t_start {
            return Err(Error::MalformedLog(format!(
                "event `{}` on rank {} ends before it starts",
                ev.label, ev.rank
            )));
        }
        let taxes = &mut per_rank[ev.rank];
        taxes.completion = taxes.completion.max(ev.t_end);
        match ev.kind {
            EventKind::Launch => taxes.launch_count += 1,
            EventKind::BarrierWait => taxes.bulk_sync_tax += ev.duration(),
            EventKind::SignalWait => taxes.wait_idle += ev.duration(),
            EventKind::RemoteCopy => taxes.staged_bytes += ev.bytes.unwrap_or(0),
            EventKind::Compute => compute_spans
                .entry((ev.rank, ev.lane))
                .or_default()
                .push((ev.t_start, ev.t_end)),
        }
    }

    for ((rank, lane), mut spans) in compute_spans {
        spans.sort();
        if let Some(pair) = spans.windows(2).find(|p| p[1].0 < p[0].1) {
            return Err(Error::MalformedLog(format!(
                "overlapping compute on rank {rank} lane {lane}: {:?} and {:?}",
                pair[0], pair[1]
            )));
        }
    }

    let mut rep = TaxReport {
        launch_cost: cfg.launch_cost,
        ..TaxReport::default()
    };
    for taxes in &mut per_rank {
        taxes.launch_tax = cfg.launch_cost * taxes.launch_count;
        rep.launch_count += taxes.launch_count;
        rep.bulk_sync_tax += taxes.bulk_sync_tax;
        rep.wait_idle += taxes.wait_idle;
        rep.staged_bytes += taxes.staged_bytes;
        rep.makespan = rep.makespan.max(taxes.completion);
    }
    rep.launch_tax = cfg.launch_cost * rep.launch_count;
    rep.per_rank = per_rank;
    Ok(rep)
}

/// Charges one task launch: sleeps for the configured launch cost and
/// records a `Launch` event.
pub fn charge_launch(ctx: &RankCtx, label: &str) {
    let t_start = ctx.now();
    let cost = ctx.config().launch_cost;
    if !cost.is_zero() {
        std::thread::sleep(cost);
    }
    ctx.record(TaskEvent {
        rank: ctx.rank(),
        lane: ctx.lane(),
        kind: EventKind::Launch,
        label: label.into(),
        t_start,
        t_end: ctx.now(),
        bytes: None,
        copy: None,
        slot: None,
    });
}

/// Adds `delay` to the first compute stage of `rank`.
pub fn inject_skew(cfg: &mut WorldConfig, rank: usize, delay: Duration) -> Result<()> {
    if rank >= cfg.world_size {
        return Err(Error::Config(format!(
            "skew rank {rank} outside world of {}",
            cfg.world_size
        )));
    }
    cfg.skew.insert(rank, delay);
    Ok(())
}

/// Smallest observable step of the monotonic clock, sampled a few times and
/// taking the largest of the minima.
pub fn timer_granularity() -> Duration {
    (0..16)
        .map(|_| {
            let a = Instant::now();
            loop {
                let b = Instant::now();
                if b > a {
                    break b - a;
                }
            }
        })
        .max()
        .unwrap_or_default()
}

/// Checks that every load of `tensor` is tagged with a slot and preceded, on
/// the same rank and lane, by a completed wait on that slot of `board`.
pub fn check_signal_guarded(events: &[TaskEvent], tensor: &str, board: &str) -> Result<()> {
    let mut earliest_wait: BTreeMap<(usize, usize, Slot), Duration> = BTreeMap::new();
    for w in events
        .iter()
        .filter(|e| e.kind == EventKind::SignalWait && &*e.label == board)
    {
        if let Some(slot) = w.slot {
            let t = earliest_wait.entry((w.rank, w.lane, slot)).or_insert(w.t_end);
            *t = (*t).min(w.t_end);
        }
    }
    for load in events.iter().filter(|e| e.is_load() && &*e.label == tensor) {
        let slot = load.slot.ok_or_else(|| {
            Error::MalformedLog(format!(
                "rank {} read `{tensor}` at {:?} without a guarding slot",
                load.rank, load.t_start
            ))
        })?;
        let guarded = earliest_wait
            .get(&(load.rank, load.lane, slot))
            .is_some_and(|&end| end <= load.t_start);
        if !guarded {
            return Err(Error::MalformedLog(format!(
                "rank {} read `{tensor}` slot {slot:?} at {:?} before waiting on `{board}`",
                load.rank, load.t_start
            )));
        }
    }
    Ok(())
}

/// True if some rank began consuming its inbox (`tensor`) before the last
/// store into that rank's inbox finished.
pub fn overlap_witnessed(events: &[TaskEvent], tensor: &str) -> bool {
    let mut first_load: BTreeMap<usize, Duration> = BTreeMap::new();
    let mut last_store: BTreeMap<usize, Duration> = BTreeMap::new();
    for e in events.iter().filter(|e| &*e.label == tensor) {
        match e.copy {
            Some(CopyInfo { dir: CopyDir::Load, .. }) => {
                let t = first_load.entry(e.rank).or_insert(e.t_start);
                *t = (*t).min(e.t_start);
            }
            Some(CopyInfo { dir: CopyDir::Store, peer, .. }) => {
                let t = last_store.entry(peer).or_insert(e.t_end);
                *t = (*t).max(e.t_end);
            }
            None => {}
        }
    }
    first_load
        .iter()
        .any(|(rank, start)| last_store.get(rank).is_some_and(|end| start < end))
}
