use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Generation-counting barrier with a watchdog and an abort escape hatch.
pub(crate) struct WorldBarrier {
    world_size: usize,
    state: Mutex<BarrierState>,
    cvar: Condvar,
}

struct BarrierState {
    arrived: usize,
    generation: u64,
}

/// Wake-up granularity while blocked, so aborts are noticed promptly.
const POLL: Duration = Duration::from_millis(5);

impl WorldBarrier {
    pub(crate) fn new(world_size: usize) -> Self {
        Self {
            world_size,
            state: Mutex::new(BarrierState {
                arrived: 0,
                generation: 0,
            }),
            cvar: Condvar::new(),
        }
    }

    pub(crate) fn wait(&self, rank: usize, watchdog: Duration, abort: &AtomicBool) -> Result<()> {
        let start = Instant::now();
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let generation = state.generation;
        state.arrived += 1;
        if state.arrived == self.world_size {
            state.arrived = 0;
            state.generation += 1;
            self.cvar.notify_all();
            return Ok(());
        }
        while state.generation == generation {
            if abort.load(Ordering::Acquire) {
                return Err(Error::Aborted { rank });
            }
            let waited = start.elapsed();
            if waited >= watchdog {
                return Err(Error::BarrierTimeout {
                    rank,
                    generation,
                    arrived: state.arrived,
                    world_size: self.world_size,
                    waited,
                });
            }
            let slice = POLL.min(watchdog - waited);
            state = self
                .cvar
                .wait_timeout(state, slice)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        Ok(())
    }

    pub(crate) fn wake_all(&self) {
        let _guard = self.state.lock().unwrap_or_else(|e| e.into_inner());
        self.cvar.notify_all();
    }
}
