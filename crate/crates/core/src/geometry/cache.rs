use alloc::collections::{BTreeMap, BTreeSet};

use super::grid::BlockCoord;
use crate::error::{Error, Result};

/// Byte footprint of a cache entry, for accounting.
pub trait Footprint {
    fn bytes(&self) -> usize;
}

impl Footprint for () {
    fn bytes(&self) -> usize {
        0
    }
}

/// Per-block cache with residency accounting. Reading an evicted entry is a
/// hard error: it means the schedule's liveness analysis is wrong.
#[derive(Debug, Clone)]
pub struct KvCacheStore<E> {
    entries: BTreeMap<BlockCoord, E>,
    evicted: BTreeSet<BlockCoord>,
    bytes: usize,
    high_water_blocks: usize,
    high_water_bytes: usize,
}

impl<E> Default for KvCacheStore<E> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            evicted: BTreeSet::new(),
            bytes: 0,
            high_water_blocks: 0,
            high_water_bytes: 0,
        }
    }
}

impl<E: Footprint> KvCacheStore<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, c: BlockCoord, entry: E) -> Result<()> {
        if self.entries.contains_key(&c) {
            return Err(Error::CacheOccupied(c));
        }
        self.bytes += entry.bytes();
        self.entries.insert(c, entry);
        self.evicted.remove(&c);
        self.high_water_blocks = self.high_water_blocks.max(self.entries.len());
        self.high_water_bytes = self.high_water_bytes.max(self.bytes);
        Ok(())
    }

    pub fn get(&self, c: BlockCoord) -> Result<&E> {
        match self.entries.get(&c) {
            Some(e) => Ok(e),
            None if self.evicted.contains(&c) => Err(Error::CacheEvicted(c)),
            None => Err(Error::CacheAbsent(c)),
        }
    }

    pub fn evict(&mut self, c: BlockCoord) -> Result<E> {
        match self.entries.remove(&c) {
            Some(e) => {
                self.bytes -= e.bytes();
                self.evicted.insert(c);
                Ok(e)
            }
            None if self.evicted.contains(&c) => Err(Error::CacheEvicted(c)),
            None => Err(Error::CacheAbsent(c)),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn high_water_blocks(&self) -> usize {
        self.high_water_blocks
    }

    pub fn high_water_bytes(&self) -> usize {
        self.high_water_bytes
    }
}
