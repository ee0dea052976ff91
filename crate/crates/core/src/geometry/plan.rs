//! Tile scheduling and cache liveness.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use super::cache::KvCacheStore;
use super::grid::{dependencies, BlockCoord};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    RowMajor,
    ColumnMajor,
}

/// One tile of blocks generated together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Tile blocks in raster order.
    pub blocks: Vec<BlockCoord>,
    /// Blocks from earlier batches whose cache this batch reads.
    pub dependencies: Vec<BlockCoord>,
    /// Blocks of this batch that later batches read, cached at batch end.
    pub store: Vec<BlockCoord>,
    /// Earlier cache entries whose last reader is this batch.
    pub evict: Vec<BlockCoord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationPlan {
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub trajectory: Trajectory,
    pub batches: Vec<Batch>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Residency {
    /// Cached blocks after each batch's evict + store step.
    pub per_batch: Vec<usize>,
    pub high_water: usize,
}

/// Plans `n x n` tiles, row-major over the tile grid unless the image is
/// wider than tall.
pub fn plan_generation(h: usize, w: usize, n: usize) -> Result<GenerationPlan> {
    plan_generation_with(h, w, n, None)
}

pub fn plan_generation_with(h: usize, w: usize, n: usize, trajectory: Option<Trajectory>) -> Result<GenerationPlan> {
    if n == 0 || h == 0 || w == 0 {
        return Err(invalid!("plan needs positive grid and tile size, got {h}x{w}, n={n}"));
    }
    let trajectory = trajectory.unwrap_or(if w > h {
        Trajectory::ColumnMajor
    } else {
        Trajectory::RowMajor
    });
    let (tiles_h, tiles_w) = (h.div_ceil(n), w.div_ceil(n));
    let tile_order: Vec<(usize, usize)> = match trajectory {
        Trajectory::RowMajor => (0..tiles_h).flat_map(|ti| (0..tiles_w).map(move |tj| (ti, tj))).collect(),
        Trajectory::ColumnMajor => (0..tiles_w).flat_map(|tj| (0..tiles_h).map(move |ti| (ti, tj))).collect(),
    };

    let mut batches: Vec<Batch> = tile_order
        .into_iter()
        .map(|(ti, tj)| {
            let blocks: Vec<BlockCoord> = (ti * n..((ti + 1) * n).min(h))
                .flat_map(|r| (tj * n..((tj + 1) * n).min(w)).map(move |c| BlockCoord::new(r, c)))
                .collect();
            let mut deps: Vec<BlockCoord> = blocks
                .iter()
                .flat_map(|&b| dependencies(b))
                .filter(|d| !blocks.contains(d))
                .collect();
            deps.sort();
            deps.dedup();
            Batch {
                blocks,
                dependencies: deps,
                store: Vec::new(),
                evict: Vec::new(),
            }
        })
        .collect();

    let mut last_reader: BTreeMap<BlockCoord, usize> = BTreeMap::new();
    for (k, b) in batches.iter().enumerate() {
        for &d in &b.dependencies {
            last_reader.insert(d, k);
        }
    }
    for k in 0..batches.len() {
        let store: Vec<BlockCoord> = batches[k]
            .blocks
            .iter()
            .copied()
            .filter(|b| last_reader.contains_key(b))
            .collect();
        batches[k].store = store;
    }
    for (&block, &k) in &last_reader {
        batches[k].evict.push(block);
    }
    for b in &mut batches {
        b.evict.sort();
    }

    Ok(GenerationPlan {
        h,
        w,
        n,
        trajectory,
        batches,
    })
}

impl GenerationPlan {
    pub fn num_blocks(&self) -> usize {
        self.h * self.w
    }

    /// Cache size bound along the scan direction: `w + n` row-major,
    /// `h + n` column-major.
    pub fn residency_bound(&self) -> usize {
        match self.trajectory {
            Trajectory::RowMajor => self.w + self.n,
            Trajectory::ColumnMajor => self.h + self.n,
        }
    }

    pub fn simulate_residency(&self) -> Residency {
        let mut live = 0usize;
        let mut per_batch = Vec::with_capacity(self.batches.len());
        for b in &self.batches {
            live -= b.evict.len();
            live += b.store.len();
            per_batch.push(live);
        }
        let high_water = per_batch.iter().copied().max().unwrap_or(0);
        Residency { per_batch, high_water }
    }

    /// Replays the plan against a cache store that enforces the get/evict
    /// contract; returns the store's high-water mark.
    pub fn replay(&self) -> Result<usize> {
        let mut store: KvCacheStore<()> = KvCacheStore::new();
        for b in &self.batches {
            for d in &b.dependencies {
                store.get(*d)?;
            }
            for e in &b.evict {
                store.evict(*e)?;
            }
            for s in &b.store {
                store.put(*s, ())?;
            }
        }
        Ok(store.high_water_blocks())
    }

    /// Checks partition, topological order and liveness invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![vec![false; self.w]; self.h];
        let mut generated_before = vec![vec![false; self.w]; self.h];
        for (k, b) in self.batches.iter().enumerate() {
            for c in &b.blocks {
                if c.row >= self.h || c.col >= self.w || seen[c.row][c.col] {
                    return Err(invalid!("batch {k}: block {c} out of grid or repeated"));
                }
                seen[c.row][c.col] = true;
            }
            for c in &b.blocks {
                for d in dependencies(*c) {
                    if !generated_before[d.row][d.col] && !b.blocks.contains(&d) {
                        return Err(invalid!("batch {k}: {c} depends on ungenerated {d}"));
                    }
                }
            }
            for c in &b.blocks {
                generated_before[c.row][c.col] = true;
            }
        }
        if seen.iter().flatten().any(|s| !s) {
            return Err(invalid!("plan does not cover every block"));
        }
        self.replay().map(|_| ())
    }

    /// Line-oriented schedule: one batch per line.
    pub fn report(&self) -> String {
        let res = self.simulate_residency();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# grid {}x{} tile {} trajectory {:?} batches {} bound {}",
            self.h,
            self.w,
            self.n,
            self.trajectory,
            self.batches.len(),
            self.residency_bound()
        );
        for (k, b) in self.batches.iter().enumerate() {
            let _ = write!(out, "batch {k} blocks=");
            join(&mut out, &b.blocks);
            let _ = write!(out, " deps={} evict=", b.dependencies.len());
            join(&mut out, &b.evict);
            let _ = writeln!(out, " cached={}", res.per_batch[k]);
        }
        out
    }
}

fn join(out: &mut String, coords: &[BlockCoord]) {
    if coords.is_empty() {
        out.push('-');
    }
    for (i, c) in coords.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        let _ = write!(out, "{c}");
    }
}
