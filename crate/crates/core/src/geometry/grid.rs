use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// Zero-based block position on the block lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct BlockCoord {
    pub row: usize,
    pub col: usize,
}

impl BlockCoord {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl core::fmt::Display for BlockCoord {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// The four key/value sources of a block, in concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySlot {
    SelfBlock = 0,
    UpperLeft = 1,
    Left = 2,
    Top = 3,
}

impl KeySlot {
    pub const ALL: [KeySlot; 4] = [KeySlot::SelfBlock, KeySlot::UpperLeft, KeySlot::Left, KeySlot::Top];
}

/// Source block feeding `slot` of `c`. Missing neighbours on the first row or
/// column are replaced by the clamped coordinate, which is exactly what
/// duplicating and prepending the first row and column produces.
pub fn slot_source(c: BlockCoord, slot: KeySlot) -> BlockCoord {
    let up = c.row.saturating_sub(1);
    let left = c.col.saturating_sub(1);
    match slot {
        KeySlot::SelfBlock => c,
        KeySlot::UpperLeft => BlockCoord::new(up, left),
        KeySlot::Left => BlockCoord::new(c.row, left),
        KeySlot::Top => BlockCoord::new(up, c.col),
    }
}

/// First-order dependencies of `c`: top, left and upper-left neighbours that
/// exist on the grid.
pub fn dependencies(c: BlockCoord) -> Vec<BlockCoord> {
    let mut deps = Vec::with_capacity(3);
    if c.row > 0 {
        deps.push(BlockCoord::new(c.row - 1, c.col));
    }
    if c.col > 0 {
        deps.push(BlockCoord::new(c.row, c.col - 1));
    }
    if c.row > 0 && c.col > 0 {
        deps.push(BlockCoord::new(c.row - 1, c.col - 1));
    }
    deps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockGridSpec {
    pub block_size: usize,
    pub patch_size: usize,
    pub h: usize,
    pub w: usize,
}

pub fn partition(height: usize, width: usize, block_size: usize, patch_size: usize) -> Result<BlockGridSpec> {
    if block_size == 0 || patch_size == 0 || height == 0 || width == 0 {
        return Err(Error::Indivisible(alloc::format!(
            "zero extent in {height}x{width} / block {block_size} / patch {patch_size}"
        )));
    }
    if !block_size.is_multiple_of(patch_size) {
        return Err(Error::Indivisible(alloc::format!(
            "block {block_size} by patch {patch_size}"
        )));
    }
    if !height.is_multiple_of(block_size) || !width.is_multiple_of(block_size) {
        return Err(Error::Indivisible(alloc::format!(
            "image {height}x{width} by block {block_size}"
        )));
    }
    Ok(BlockGridSpec {
        block_size,
        patch_size,
        h: height / block_size,
        w: width / block_size,
    })
}

impl BlockGridSpec {
    pub fn patches_per_side(&self) -> usize {
        self.block_size / self.patch_size
    }

    pub fn tokens_per_block(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn height(&self) -> usize {
        self.h * self.block_size
    }

    pub fn width(&self) -> usize {
        self.w * self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, c: BlockCoord) -> bool {
        c.row < self.h && c.col < self.w
    }

    /// Row-major block index.
    pub fn index(&self, c: BlockCoord) -> usize {
        c.row * self.w + c.col
    }

    pub fn coords(&self) -> impl Iterator<Item = BlockCoord> + '_ {
        (0..self.h).flat_map(move |r| (0..self.w).map(move |c| BlockCoord::new(r, c)))
    }

    /// Absolute patch-grid (x, y) of every token in block `c`, raster order.
    pub fn token_positions(&self, c: BlockCoord, offset: (usize, usize)) -> Vec<(usize, usize)> {
        let s = self.patches_per_side();
        let mut out = Vec::with_capacity(s * s);
        for py in 0..s {
            for px in 0..s {
                out.push((offset.0 + c.col * s + px, offset.1 + c.row * s + py));
            }
        }
        out
    }

    /// Copies block `c` out of an `[H, W, C]` buffer as a `B x B x C` raster.
    pub fn extract_block<T: Copy>(&self, image: &[T], channels: usize, c: BlockCoord) -> Vec<T> {
        let b = self.block_size;
        let width = self.width();
        let mut out = Vec::with_capacity(b * b * channels);
        for y in 0..b {
            let start = ((c.row * b + y) * width + c.col * b) * channels;
            out.extend_from_slice(&image[start..start + b * channels]);
        }
        out
    }

    pub fn insert_block<T: Copy>(&self, image: &mut [T], channels: usize, c: BlockCoord, block: &[T]) {
        let b = self.block_size;
        let width = self.width();
        for y in 0..b {
            let start = ((c.row * b + y) * width + c.col * b) * channels;
            image[start..start + b * channels].copy_from_slice(&block[y * b * channels..(y + 1) * b * channels]);
        }
    }
}

/// Splits a `side x side x channels` raster into `(side/p)^2` tokens of
/// length `p*p*channels`, patches in raster order, each patch raster-flattened.
pub fn patchify<T: Copy>(block: &[T], side: usize, channels: usize, p: usize) -> Result<Vec<T>> {
    if p == 0 || !side.is_multiple_of(p) || block.len() != side * side * channels {
        return Err(shape_err!(
            "patchify: {} values for side {side}, channels {channels}, patch {p}",
            block.len()
        ));
    }
    let s = side / p;
    let mut out = Vec::with_capacity(block.len());
    for py in 0..s {
        for px in 0..s {
            for y in 0..p {
                let start = ((py * p + y) * side + px * p) * channels;
                out.extend_from_slice(&block[start..start + p * channels]);
            }
        }
    }
    Ok(out)
}

pub fn unpatchify<T: Copy + Default>(tokens: &[T], side: usize, channels: usize, p: usize) -> Result<Vec<T>> {
    if p == 0 || !side.is_multiple_of(p) || tokens.len() != side * side * channels {
        return Err(shape_err!(
            "unpatchify: {} values for side {side}, channels {channels}, patch {p}",
            tokens.len()
        ));
    }
    let s = side / p;
    let mut out = alloc::vec![T::default(); tokens.len()];
    let tok_len = p * p * channels;
    for py in 0..s {
        for px in 0..s {
            let tok = &tokens[(py * s + px) * tok_len..(py * s + px + 1) * tok_len];
            for y in 0..p {
                let start = ((py * p + y) * side + px * p) * channels;
                out[start..start + p * channels].copy_from_slice(&tok[y * p * channels..(y + 1) * p * channels]);
            }
        }
    }
    Ok(out)
}
