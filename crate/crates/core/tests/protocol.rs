mod common;

use std::time::Duration;

use tilefabric::fabric::{Slot, World, WorldConfig};
use tilefabric::{launch_world, Error};

#[test]
fn signal_carries_data_over_seeded_interleavings() {
    let tally = common::run_harness(0..300);
    assert_eq!(tally.runs, 300);
    assert_eq!(tally.violations, 0, "{tally:?}");
    assert_eq!(tally.timeouts, 0, "{tally:?}");
    assert!(tally.other_errors.is_empty(), "{tally:?}");
}

#[test]
fn same_seed_same_result() {
    for seed in [3, 17, 1234] {
        assert_eq!(common::signal_carries_data(seed).unwrap(), 0);
        assert_eq!(common::signal_carries_data(seed).unwrap(), 0);
    }
}

#[test]
fn missing_producer_names_rank_slot_and_counts() {
    let cfg = WorldConfig::new(3).with_watchdog(Duration::from_millis(150));
    let world = World::new(cfg).unwrap();
    let flags = world.alloc_board("flags", 3, 1).unwrap();
    let err = world
        .run(|ctx| {
            if ctx.rank() != 1 {
                ctx.atomic_signal(&flags, 0, Slot::new(ctx.rank(), 0))?;
            }
            if ctx.rank() == 0 {
                for src in 0..3 {
                    ctx.wait_signal(&flags, Slot::new(src, 0), 1)?;
                }
            }
            Ok(())
        })
        .unwrap_err();
    match err {
        Error::SignalTimeout {
            rank,
            slot,
            expected,
            observed,
            ..
        } => {
            assert_eq!(rank, 0);
            assert_eq!(slot, Slot::new(1, 0));
            assert_eq!((expected, observed), (1, 0));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn one_rank_skipping_a_barrier_times_out() {
    let cfg = WorldConfig::new(4).with_watchdog(Duration::from_millis(150));
    let err = launch_world(cfg, |ctx| {
        ctx.barrier()?;
        if ctx.rank() != 2 {
            ctx.barrier()?;
        }
        Ok(())
    })
    .unwrap_err();
    match err {
        Error::BarrierTimeout {
            arrived, world_size, ..
        } => {
            assert_eq!(world_size, 4);
            assert_eq!(arrived, 3);
        }
        other => panic!("unexpected {other:?}"),
    }
}
