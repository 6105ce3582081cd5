//! Sequential numeric kernels shared by the patterns.

mod attention;
mod matrix;

pub use attention::{attention_partial, combine_partials, finalize, AttnPartial, DecodeProblem, KvShard};
pub use matrix::{gemm_acc, tile_ranges, Matrix, TileSpec};
