#![allow(dead_code)]

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilefabric::fabric::{Slot, World, WorldConfig};
use tilefabric::Error;

pub const CHUNKS: usize = 4;
pub const CHUNK_LEN: usize = 8;

/// Value rank `src` writes at position `i` of chunk `c` in run `seed`.
fn payload(seed: u64, src: usize, c: usize, i: usize) -> f32 {
    ((seed % 997) as f32) * 1000.0 + (src * 100 + c * 10 + i) as f32
}

fn jitter(rng: &mut ChaCha8Rng) {
    for _ in 0..rng.gen_range(0..3) {
        std::thread::yield_now();
    }
    for _ in 0..rng.gen_range(0..256) {
        std::hint::spin_loop();
    }
}

/// One run of the signal-carries-data harness. Every rank pushes `CHUNKS`
/// chunks into its successor's region, signalling after each chunk, with
/// seeded jitter between steps; every rank consumes its predecessor's chunks
/// in a seeded random order. Returns the number of values that did not match
/// what the producer stored.
pub fn signal_carries_data(seed: u64) -> Result<usize, Error> {
    let w = 2 + (seed % 3) as usize;
    let cfg = WorldConfig::new(w)
        .with_seed(seed)
        .with_launch_cost(Duration::ZERO)
        .with_watchdog(Duration::from_secs(5));
    let world = World::new(cfg)?;
    let data = world.alloc_symmetric("harness.data", &[CHUNKS, CHUNK_LEN])?;
    let flags = world.alloc_board("harness.flags", w, CHUNKS)?;
    let run = world.run(|ctx| {
        let me = ctx.rank();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((me as u64 + 1) << 32));
        let dst = (me + 1) % w;
        let src = (me + w - 1) % w;

        let mut order: Vec<usize> = (0..CHUNKS).collect();
        for i in (1..CHUNKS).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let consume_first = rng.gen_bool(0.5);

        let produce = |rng: &mut ChaCha8Rng| -> Result<(), Error> {
            for c in 0..CHUNKS {
                jitter(rng);
                let vals: Vec<f32> = (0..CHUNK_LEN).map(|i| payload(seed, me, c, i)).collect();
                ctx.remote_store(&data, dst, c * CHUNK_LEN..(c + 1) * CHUNK_LEN, &vals, None)?;
                jitter(rng);
                ctx.atomic_signal(&flags, dst, Slot::new(me, c))?;
            }
            Ok(())
        };
        let consume = |rng: &mut ChaCha8Rng| -> Result<usize, Error> {
            let mut bad = 0;
            for &c in &order {
                jitter(rng);
                ctx.wait_signal(&flags, Slot::new(src, c), 1)?;
                let got = ctx.remote_load(&data, me, c * CHUNK_LEN..(c + 1) * CHUNK_LEN, None)?;
                bad += got
                    .iter()
                    .enumerate()
                    .filter(|&(i, &v)| v != payload(seed, src, c, i))
                    .count();
            }
            Ok(bad)
        };

        if consume_first && w > 1 {
            // Consume on a second lane so the wait can start before this
            // rank's own production.
            let (bad, _) = ctx.join_lanes(
                |_| consume(&mut rng.clone()),
                |_| produce(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(me as u64))),
            )?;
            Ok(bad)
        } else {
            produce(&mut rng)?;
            consume(&mut rng)
        }
    })?;
    Ok(run.results.iter().sum())
}

#[derive(Debug, Default)]
pub struct HarnessTally {
    pub runs: usize,
    pub violations: usize,
    pub timeouts: usize,
    pub other_errors: Vec<String>,
}

pub fn run_harness(seeds: std::ops::Range<u64>) -> HarnessTally {
    let mut tally = HarnessTally::default();
    for seed in seeds {
        tally.runs += 1;
        match signal_carries_data(seed) {
            Ok(bad) => tally.violations += bad,
            Err(Error::SignalTimeout { .. } | Error::BarrierTimeout { .. }) => tally.timeouts += 1,
            Err(e) => tally.other_errors.push(e.to_string()),
        }
    }
    tally
}
