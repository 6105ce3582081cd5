use std::time::Duration;

use thiserror::Error;

use crate::fabric::Slot;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("symmetric object `{name}` already attached on rank {rank}")]
    Duplicate { name: String, rank: usize },

    #[error("symmetric object `{name}` requested with shape {requested:?} but registered as {registered:?}")]
    SymmetryMismatch {
        name: String,
        registered: Vec<usize>,
        requested: Vec<usize>,
    },

    #[error("access to `{name}` out of bounds: {detail}")]
    Bounds { name: String, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty attention: head {head} has zero normalizer")]
    EmptyAttention { head: usize },

    #[error(
        "deadlock on rank {rank}: wait on `{board}` slot (src={}, index={}) expected >= {expected}, observed {observed} after {waited:?}",
        slot.src, slot.index
    )]
    SignalTimeout {
        rank: usize,
        board: String,
        slot: Slot,
        expected: u64,
        observed: u64,
        waited: Duration,
    },

    #[error("deadlock on rank {rank}: barrier generation {generation} saw {arrived}/{world_size} ranks after {waited:?}")]
    BarrierTimeout {
        rank: usize,
        generation: u64,
        arrived: usize,
        world_size: usize,
        waited: Duration,
    },

    #[error("rank {rank} panicked: {message}")]
    WorkerPanic { rank: usize, message: String },

    #[error("rank {rank} aborted after a failure elsewhere in the world")]
    Aborted { rank: usize },

    #[error("malformed event log: {0}")]
    MalformedLog(String),
}

impl Error {
    /// True for failures that are a consequence of another rank's failure.
    pub fn is_secondary(&self) -> bool {
        matches!(self, Error::Aborted { .. })
    }
}
