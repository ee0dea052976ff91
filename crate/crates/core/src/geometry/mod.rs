//! Block lattice, patch layout, tile scheduling and the block cache.

mod cache;
mod grid;
mod plan;

pub use cache::{Footprint, KvCacheStore};
pub use grid::{
    dependencies, partition, patchify, slot_source, unpatchify, BlockCoord, BlockGridSpec, KeySlot,
};
pub use plan::{plan_generation, plan_generation_with, Batch, GenerationPlan, Residency, Trajectory};

/// `n^2 M1 + (w + n) M2 + C`: working memory of one tile, the bounded block
/// cache, and everything else.
pub fn peak_memory_estimate(n: usize, w: usize, m1: usize, m2: usize, c: usize) -> usize {
    n * n * m1 + (w + n) * m2 + c
}
