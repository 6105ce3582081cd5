//! Symmetric heap: every tensor has one identically-shaped region per rank.
//!
//! Regions are stored as `AtomicU32` bit patterns so that concurrent plain
//! loads and stores from different ranks are well defined. They use relaxed
//! ordering; cross-rank visibility comes only from signal or barrier pairs.

use std::ops::Range;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// A rectangular sub-block of a tensor viewed as `rows x cols`, where `cols`
/// is the last dimension and `rows` the product of the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn new(row: usize, col: usize, rows: usize, cols: usize) -> Self {
        Self { row, col, rows, cols }
    }

    pub fn from_ranges(rows: Range<usize>, cols: Range<usize>) -> Self {
        Self::new(rows.start, cols.start, rows.len(), cols.len())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a symmetric tensor. Cloning is cheap.
#[derive(Clone)]
pub struct SymmetricTensor {
    inner: Arc<TensorInner>,
}

struct TensorInner {
    name: Arc<str>,
    shape: Vec<usize>,
    len: usize,
    staging: bool,
    regions: Vec<Box<[AtomicU32]>>,
}

impl std::fmt::Debug for SymmetricTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymmetricTensor")
            .field("name", &self.inner.name)
            .field("shape", &self.inner.shape)
            .field("staging", &self.inner.staging)
            .field("ranks", &self.inner.regions.len())
            .finish()
    }
}

impl SymmetricTensor {
    pub(crate) fn new(name: &str, shape: &[usize], world_size: usize, staging: bool) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!(
                "tensor `{name}` has empty shape {shape:?}"
            )));
        }
        let len = shape.iter().product();
        let regions = (0..world_size)
            .map(|_| (0..len).map(|_| AtomicU32::new(0)).collect())
            .collect();
        Ok(Self {
            inner: Arc::new(TensorInner {
                name: name.into(),
                shape: shape.to_vec(),
                len,
                staging,
                regions,
            }),
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub(crate) fn name_arc(&self) -> Arc<str> {
        self.inner.name.clone()
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    /// Elements per region.
    pub fn len(&self) -> usize {
        self.inner.len
    }

    pub fn is_empty(&self) -> bool {
        self.inner.len == 0
    }

    pub fn byte_len(&self) -> usize {
        self.inner.len * std::mem::size_of::<f32>()
    }

    /// Staging tensors hold intermediates materialized between tasks; bytes
    /// written into them count toward the staged-bytes metric.
    pub fn is_staging(&self) -> bool {
        self.inner.staging
    }

    pub fn world_size(&self) -> usize {
        self.inner.regions.len()
    }

    /// Last dimension.
    pub fn cols(&self) -> usize {
        *self.inner.shape.last().expect("non-empty shape")
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        self.inner.len / self.cols()
    }

    fn region(&self, rank: usize) -> Result<&[AtomicU32]> {
        self.inner
            .regions
            .get(rank)
            .map(|r| &r[..])
            .ok_or_else(|| Error::Bounds {
                name: self.name().to_string(),
                detail: format!("rank {rank} >= world size {}", self.world_size()),
            })
    }

    fn check_range(&self, range: &Range<usize>) -> Result<()> {
        if range.start > range.end || range.end > self.inner.len {
            return Err(Error::Bounds {
                name: self.name().to_string(),
                detail: format!("range {range:?} exceeds {} elements", self.inner.len),
            });
        }
        Ok(())
    }

    fn check_block(&self, block: &Block) -> Result<()> {
        if block.row + block.rows > self.rows() || block.col + block.cols > self.cols() {
            return Err(Error::Bounds {
                name: self.name().to_string(),
                detail: format!(
                    "block {block:?} exceeds {}x{} view",
                    self.rows(),
                    self.cols()
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn read_range(&self, rank: usize, range: Range<usize>) -> Result<Vec<f32>> {
        let region = self.region(rank)?;
        self.check_range(&range)?;
        Ok(region[range]
            .iter()
            .map(|x| f32::from_bits(x.load(Ordering::Relaxed)))
            .collect())
    }

    pub(crate) fn write_range(&self, rank: usize, range: Range<usize>, values: &[f32]) -> Result<()> {
        let region = self.region(rank)?;
        self.check_range(&range)?;
        if range.len() != values.len() {
            return Err(Error::Bounds {
                name: self.name().to_string(),
                detail: format!(
                    "range {range:?} holds {} elements but {} values given",
                    range.len(),
                    values.len()
                ),
            });
        }
        for (cell, v) in region[range].iter().zip(values) {
            cell.store(v.to_bits(), Ordering::Relaxed);
        }
        Ok(())
    }

    pub(crate) fn read_block(&self, rank: usize, block: Block) -> Result<Vec<f32>> {
        let region = self.region(rank)?;
        self.check_block(&block)?;
        let cols = self.cols();
        let mut out = Vec::with_capacity(block.len());
        for r in block.row..block.row + block.rows {
            let start = r * cols + block.col;
            out.extend(
                region[start..start + block.cols]
                    .iter()
                    .map(|x| f32::from_bits(x.load(Ordering::Relaxed))),
            );
        }
        Ok(out)
    }

    pub(crate) fn write_block(&self, rank: usize, block: Block, values: &[f32]) -> Result<()> {
        let region = self.region(rank)?;
        self.check_block(&block)?;
        if values.len() != block.len() {
            return Err(Error::Bounds {
                name: self.name().to_string(),
                detail: format!(
                    "block {block:?} holds {} elements but {} values given",
                    block.len(),
                    values.len()
                ),
            });
        }
        let cols = self.cols();
        for (i, row_vals) in values.chunks(block.cols).enumerate() {
            let start = (block.row + i) * cols + block.col;
            for (cell, v) in region[start..start + block.cols].iter().zip(row_vals) {
                cell.store(v.to_bits(), Ordering::Relaxed);
            }
        }
        Ok(())
    }

    /// Owner-side snapshot of a whole region. Only meaningful while no run is
    /// in flight.
    pub fn snapshot(&self, rank: usize) -> Result<Vec<f32>> {
        self.read_range(rank, 0..self.len())
    }

    /// Owner-side fill of a whole region before a run.
    pub fn fill(&self, rank: usize, values: &[f32]) -> Result<()> {
        self.write_range(rank, 0..self.len(), values)
    }

    pub fn zero(&self) {
        for region in &self.inner.regions {
            for cell in region.iter() {
                cell.store(0, Ordering::Relaxed);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_are_symmetric_and_zeroed() {
        let t = SymmetricTensor::new("t", &[4, 4], 2, false).unwrap();
        assert_eq!(t.len(), 16);
        for r in 0..2 {
            assert_eq!(t.snapshot(r).unwrap(), vec![0.0; 16]);
        }
    }

    #[test]
    fn empty_shapes_rejected() {
        assert!(SymmetricTensor::new("t", &[0], 2, false).is_err());
        assert!(SymmetricTensor::new("t", &[], 2, false).is_err());
    }

    #[test]
    fn block_round_trip_is_row_major() {
        let t = SymmetricTensor::new("t", &[3, 4], 1, false).unwrap();
        t.fill(0, &(0..12).map(|x| x as f32).collect::<Vec<_>>()).unwrap();
        let b = t.read_block(0, Block::new(1, 1, 2, 2)).unwrap();
        assert_eq!(b, vec![5.0, 6.0, 9.0, 10.0]);
        t.write_block(0, Block::new(0, 2, 2, 2), &[-1.0, -2.0, -3.0, -4.0])
            .unwrap();
        assert_eq!(t.read_range(0, 0..8).unwrap(), vec![0.0, 1.0, -1.0, -2.0, 4.0, 5.0, -3.0, -4.0]);
    }

    #[test]
    fn out_of_bounds_access_errors() {
        let t = SymmetricTensor::new("t", &[2, 2], 2, false).unwrap();
        assert!(matches!(t.read_range(0, 2..5), Err(Error::Bounds { .. })));
        assert!(matches!(t.read_range(2, 0..1), Err(Error::Bounds { .. })));
        assert!(matches!(t.read_block(0, Block::new(1, 1, 2, 1)), Err(Error::Bounds { .. })));
        assert!(t.write_range(0, 0..2, &[1.0]).is_err());
    }
}
