//! Distributed flash decode in four stages of de-synchronization.
//!
//! Every rank computes an online-softmax partial over its KV shard, all
//! partials are exchanged, and each rank folds them (ascending source rank)
//! into the final output. The variants differ only in how the exchange is
//! synchronized:
//!
//! | variant          | launches | barriers | exchange                          |
//! |------------------|----------|----------|-----------------------------------|
//! | `Bsp`            | 3        | 2        | bulk loads into a staging tensor  |
//! | `IndependentAg`  | 3        | 2        | push + signal, then wait for all  |
//! | `FineWaits`      | 3        | 1        | push + signal; combine waits per source |
//! | `Fused`          | 2        | 0        | attention task pushes; reduce task waits per source |
//!
//! Partials travel as `[m | l | o[0..d]]` per head in an inbox of shape
//! `W x H x (d + 2)`, one flag per source rank.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::fabric::{RankCtx, SignalBoard, Slot, SymmetricTensor, World, WorldConfig};
use crate::taxmeter::{self, charge_launch, TaskEvent, TaxReport};
use crate::tilemath::{attention_partial, combine_partials, finalize, AttnPartial, DecodeProblem, KvShard};

pub const PARTIAL_NAME: &str = "fd.partial";
pub const INBOX_NAME: &str = "fd.inbox";
pub const FLAGS_NAME: &str = "fd.flags";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FdVariant {
    Bsp,
    IndependentAg,
    FineWaits,
    Fused,
}

impl FdVariant {
    pub const ALL: [FdVariant; 4] = [
        FdVariant::Bsp,
        FdVariant::IndependentAg,
        FdVariant::FineWaits,
        FdVariant::Fused,
    ];
}

/// Order in which the waiting variants fold incoming partials.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum FoldOrder {
    /// Ascending source rank; outputs are identical across variants.
    #[default]
    Rank,
    /// Whichever partial is ready first. Outputs may differ in the last
    /// bits between runs.
    Arrival,
}

/// Number of `f32`s one head occupies on the wire.
pub fn wire_head_len(head_dim: usize) -> usize {
    head_dim + 2
}

pub fn serialize_partial(p: &AttnPartial) -> Vec<f32> {
    let d = p.head_dim;
    let mut out = Vec::with_capacity(p.heads * wire_head_len(d));
    for h in 0..p.heads {
        out.push(p.m[h]);
        out.push(p.l[h]);
        out.extend_from_slice(p.head_o(h));
    }
    out
}

pub fn deserialize_partial(heads: usize, head_dim: usize, wire: &[f32]) -> Result<AttnPartial> {
    let stride = wire_head_len(head_dim);
    if wire.len() != heads * stride {
        return Err(Error::Shape(format!(
            "wire partial has {} values, want {}",
            wire.len(),
            heads * stride
        )));
    }
    let mut p = AttnPartial::neutral(heads, head_dim);
    for (h, chunk) in wire.chunks_exact(stride).enumerate() {
        p.m[h] = chunk[0];
        p.l[h] = chunk[1];
        p.o[h * head_dim..(h + 1) * head_dim].copy_from_slice(&chunk[2..]);
    }
    Ok(p)
}

#[derive(Debug)]
pub struct FdRun {
    /// `heads x head_dim` output per rank.
    pub outputs: Vec<Vec<f32>>,
    pub events: Vec<TaskEvent>,
    pub report: TaxReport,
}

pub struct FdRunner {
    prob: DecodeProblem,
    shards: Vec<KvShard>,
    world: World,
    partial: SymmetricTensor,
    inbox: SymmetricTensor,
    flags: SignalBoard,
    fold: FoldOrder,
}

impl FdRunner {
    pub fn new(prob: DecodeProblem, cfg: WorldConfig) -> Result<Self> {
        if cfg.world_size != prob.world_size() {
            return Err(Error::Config(format!(
                "world size {} but problem is sharded {} ways",
                cfg.world_size,
                prob.world_size()
            )));
        }
        let w = prob.world_size();
        let row = wire_head_len(prob.head_dim());
        let world = World::new(cfg)?;
        let partial = world.alloc_staging(PARTIAL_NAME, &[prob.heads(), row])?;
        let inbox = world.alloc_staging(INBOX_NAME, &[w, prob.heads(), row])?;
        let flags = world.alloc_board(FLAGS_NAME, w, 1)?;
        let shards = (0..w).map(|r| prob.shard(r)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prob,
            shards,
            world,
            partial,
            inbox,
            flags,
            fold: FoldOrder::Rank,
        })
    }

    pub fn with_fold_order(mut self, fold: FoldOrder) -> Self {
        self.fold = fold;
        self
    }

    pub fn problem(&self) -> &DecodeProblem {
        &self.prob
    }

    pub fn config(&self) -> &WorldConfig {
        self.world.config()
    }

    /// Counters of `rank`'s flag board after the last run.
    pub fn flags(&self, rank: usize) -> Result<Vec<u64>> {
        self.flags.values(rank)
    }

    fn wire_len(&self) -> usize {
        self.prob.heads() * wire_head_len(self.prob.head_dim())
    }

    fn inbox_row(&self, src: usize) -> Range<usize> {
        let n = self.wire_len();
        src * n..(src + 1) * n
    }

    pub fn run(&self, variant: FdVariant) -> Result<FdRun> {
        self.partial.zero();
        self.inbox.zero();
        let run = self.world.run(|ctx| match variant {
            FdVariant::Bsp => self.bsp_rank(ctx),
            FdVariant::IndependentAg => self.independent_ag_rank(ctx),
            FdVariant::FineWaits => self.fine_waits_rank(ctx),
            FdVariant::Fused => self.fused_rank(ctx),
        })?;
        let report = taxmeter::report(&run.events, self.world.config())?;
        Ok(FdRun {
            outputs: run.results,
            events: run.events,
            report,
        })
    }

    /// Local attention stage shared by the three unfused variants: compute
    /// the partial and leave it in this rank's staging region.
    fn local_stage(&self, ctx: &RankCtx) -> Result<()> {
        charge_launch(ctx, "fd.local_attention");
        let me = ctx.rank();
        let part = ctx.skewed_compute("fd.attention", || attention_partial(&self.prob, &self.shards[me]))?;
        ctx.remote_store(&self.partial, me, 0..self.wire_len(), &serialize_partial(&part), None)
    }

    /// Pushes this rank's wire partial into every inbox and raises the
    /// matching flag after each store.
    fn push_partial(&self, ctx: &RankCtx, wire: &[f32]) -> Result<()> {
        let me = ctx.rank();
        let slot = Slot::new(me, 0);
        for dst in 0..ctx.world_size() {
            ctx.remote_store(&self.inbox, dst, self.inbox_row(me), wire, Some(slot))?;
            ctx.atomic_signal(&self.flags, dst, slot)?;
        }
        Ok(())
    }

    fn load_inbox(&self, ctx: &RankCtx, src: usize, slot: Option<Slot>) -> Result<AttnPartial> {
        let wire = ctx.remote_load(&self.inbox, ctx.rank(), self.inbox_row(src), slot)?;
        deserialize_partial(self.prob.heads(), self.prob.head_dim(), &wire)
    }

    /// Folds partials already resident in the local inbox.
    fn fold_resident(&self, ctx: &RankCtx, guarded: bool) -> Result<Vec<f32>> {
        let mut acc = AttnPartial::neutral(self.prob.heads(), self.prob.head_dim());
        for src in 0..ctx.world_size() {
            let slot = guarded.then_some(Slot::new(src, 0));
            acc = combine_partials(&acc, &self.load_inbox(ctx, src, slot)?)?;
        }
        finalize(&acc)
    }

    /// Folds partials as their flags come up.
    fn fold_as_ready(&self, ctx: &RankCtx) -> Result<Vec<f32>> {
        let mut acc = AttnPartial::neutral(self.prob.heads(), self.prob.head_dim());
        match self.fold {
            FoldOrder::Rank => {
                for src in 0..ctx.world_size() {
                    let slot = Slot::new(src, 0);
                    ctx.wait_signal(&self.flags, slot, 1)?;
                    acc = combine_partials(&acc, &self.load_inbox(ctx, src, Some(slot))?)?;
                }
            }
            FoldOrder::Arrival => {
                let mut pending: Vec<Slot> = (0..ctx.world_size()).map(|s| Slot::new(s, 0)).collect();
                while !pending.is_empty() {
                    let slot = ctx.wait_any_signal(&self.flags, &pending, 1)?;
                    pending.retain(|&s| s != slot);
                    acc = combine_partials(&acc, &self.load_inbox(ctx, slot.src, Some(slot))?)?;
                }
            }
        }
        finalize(&acc)
    }

    fn bsp_rank(&self, ctx: &RankCtx) -> Result<Vec<f32>> {
        let me = ctx.rank();
        self.local_stage(ctx)?;
        ctx.barrier()?;

        charge_launch(ctx, "fd.all_gather");
        for src in 0..ctx.world_size() {
            let wire = ctx.remote_load(&self.partial, src, 0..self.wire_len(), None)?;
            ctx.remote_store(&self.inbox, me, self.inbox_row(src), &wire, None)?;
        }
        ctx.barrier()?;

        charge_launch(ctx, "fd.combine");
        ctx.compute("fd.combine", || self.fold_resident(ctx, false))
    }

    fn independent_ag_rank(&self, ctx: &RankCtx) -> Result<Vec<f32>> {
        let me = ctx.rank();
        self.local_stage(ctx)?;
        ctx.barrier()?;

        charge_launch(ctx, "fd.all_gather");
        let wire = ctx.remote_load(&self.partial, me, 0..self.wire_len(), None)?;
        self.push_partial(ctx, &wire)?;
        for src in 0..ctx.world_size() {
            ctx.wait_signal(&self.flags, Slot::new(src, 0), 1)?;
        }
        ctx.barrier()?;

        charge_launch(ctx, "fd.combine");
        ctx.compute("fd.combine", || self.fold_resident(ctx, true))
    }

    fn fine_waits_rank(&self, ctx: &RankCtx) -> Result<Vec<f32>> {
        let me = ctx.rank();
        self.local_stage(ctx)?;
        ctx.barrier()?;

        charge_launch(ctx, "fd.all_gather");
        let wire = ctx.remote_load(&self.partial, me, 0..self.wire_len(), None)?;
        self.push_partial(ctx, &wire)?;

        charge_launch(ctx, "fd.combine");
        ctx.compute("fd.combine", || self.fold_as_ready(ctx))
    }

    fn fused_rank(&self, ctx: &RankCtx) -> Result<Vec<f32>> {
        let (_, out) = ctx.join_lanes(
            |ctx| {
                charge_launch(ctx, "fd.fused_attention_push");
                let me = ctx.rank();
                let part = ctx.skewed_compute("fd.attention", || attention_partial(&self.prob, &self.shards[me]))?;
                self.push_partial(ctx, &serialize_partial(&part))
            },
            |ctx| {
                charge_launch(ctx, "fd.global_reduce");
                ctx.compute("fd.reduce", || self.fold_as_ready(ctx))
            },
        )?;
        Ok(out)
    }
}

/// One-shot convenience wrapper around [`FdRunner`].
pub fn run_fd(prob: DecodeProblem, variant: FdVariant, cfg: WorldConfig) -> Result<FdRun> {
    FdRunner::new(prob, cfg)?.run(variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{max_rel_err, max_rel_err_f32, monolithic_attention};
    use crate::taxmeter::check_signal_guarded;
    use proptest::prelude::*;

    fn cfg(w: usize) -> WorldConfig {
        WorldConfig::new(w).with_launch_cost(std::time::Duration::ZERO)
    }

    #[test]
    fn single_rank_every_variant_matches_oracle() {
        let prob = DecodeProblem::random(2, 8, 16, 1, 3).unwrap();
        let expect = monolithic_attention(&prob);
        let runner = FdRunner::new(prob, cfg(1)).unwrap();
        for v in FdVariant::ALL {
            let run = runner.run(v).unwrap();
            assert!(max_rel_err(&run.outputs[0], &expect) <= 1e-6, "{v:?}");
        }
    }

    #[test]
    fn four_ranks_agree_and_match_oracle() {
        let prob = DecodeProblem::random(2, 8, 64, 4, 9).unwrap();
        let expect = monolithic_attention(&prob);
        let runner = FdRunner::new(prob, cfg(4)).unwrap();
        let runs: Vec<_> = FdVariant::ALL.iter().map(|&v| runner.run(v).unwrap()).collect();
        for run in &runs {
            for out in &run.outputs {
                assert_eq!(out, &run.outputs[0]);
                assert!(max_rel_err(out, &expect) <= 1e-5);
                assert!(max_rel_err_f32(out, &runs[0].outputs[0]) <= 1e-6);
            }
        }
    }

    #[test]
    fn structural_counts() {
        let prob = DecodeProblem::random(1, 4, 12, 3, 1).unwrap();
        let runner = FdRunner::new(prob, cfg(3)).unwrap();
        let expected = [(3, 2), (3, 2), (3, 1), (2, 0)];
        for (v, (launches, barriers)) in FdVariant::ALL.into_iter().zip(expected) {
            let run = runner.run(v).unwrap();
            for r in 0..3 {
                assert_eq!(TaxReport::launch_count_of(&run.events, r), launches, "{v:?}");
                assert_eq!(TaxReport::barrier_count(&run.events, r), barriers, "{v:?}");
            }
            if v != FdVariant::Bsp {
                check_signal_guarded(&run.events, INBOX_NAME, FLAGS_NAME).unwrap();
                for r in 0..3 {
                    assert_eq!(runner.flags(r).unwrap(), vec![1, 1, 1]);
                }
            }
        }
    }

    #[test]
    fn staged_bytes_shrink_when_fused() {
        let prob = DecodeProblem::random(2, 4, 8, 2, 1).unwrap();
        let runner = FdRunner::new(prob, cfg(2)).unwrap();
        let per = |v| runner.run(v).unwrap().report.per_rank[0].staged_bytes;
        let wire = 2 * 6 * 4;
        assert_eq!(per(FdVariant::Bsp), 3 * wire);
        assert_eq!(per(FdVariant::IndependentAg), 3 * wire);
        assert_eq!(per(FdVariant::FineWaits), 3 * wire);
        assert_eq!(per(FdVariant::Fused), 2 * wire);
    }

    #[test]
    fn arrival_order_stays_within_tolerance() {
        let prob = DecodeProblem::random(2, 16, 128, 4, 17).unwrap();
        let expect = monolithic_attention(&prob);
        let runner = FdRunner::new(prob, cfg(4)).unwrap().with_fold_order(FoldOrder::Arrival);
        for v in [FdVariant::FineWaits, FdVariant::Fused] {
            let run = runner.run(v).unwrap();
            check_signal_guarded(&run.events, INBOX_NAME, FLAGS_NAME).unwrap();
            for out in &run.outputs {
                assert!(max_rel_err(out, &expect) <= 1e-5);
            }
        }
    }

    #[test]
    fn wire_length_mismatch_rejected() {
        assert!(deserialize_partial(2, 3, &[0.0; 9]).is_err());
    }

    proptest! {
        #[test]
        fn wire_round_trip_is_exact(
            heads in 1usize..4,
            d in 1usize..6,
            seed in any::<u64>(),
        ) {
            let prob = DecodeProblem::random(heads, d, 4, 1, seed).unwrap();
            let p = attention_partial(&prob, &prob.shard(0).unwrap()).unwrap();
            let back = deserialize_partial(heads, d, &serialize_partial(&p)).unwrap();
            prop_assert_eq!(back, p);
            let n = AttnPartial::neutral(heads, d);
            prop_assert_eq!(deserialize_partial(heads, d, &serialize_partial(&n)).unwrap(), n);
        }
    }
}
