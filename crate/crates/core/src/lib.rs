//! Desk-scale runtime for fused communication/computation patterns.
//!
//! * [`fabric`]: W concurrent ranks sharing a symmetric heap, one-sided
//!   loads/stores, monotonic signal counters and a global barrier.
//! * [`tilemath`]: tiled GEMM accumulation and online-softmax decode
//!   attention kernels.
//! * [`ag_gemm`]: All-Gather + GEMM as a bulk-synchronous baseline, a pull
//!   kernel and a push/compute pair.
//! * [`flash_decode`]: four flash-decode variants from fully bulk-synchronous
//!   to fully fused.
//! * [`taxmeter`]: event log aggregation into launch, barrier, wait and
//!   staging costs.
//! * [`reference`]: brute-force oracles.

pub mod ag_gemm;
pub mod error;
pub mod fabric;
pub mod flash_decode;
pub mod reference;
pub mod taxmeter;
pub mod tilemath;

pub use error::{Error, Result};
pub use fabric::{launch_world, RankCtx, World, WorldConfig};
