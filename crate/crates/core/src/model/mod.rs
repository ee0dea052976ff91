//! Diffusion transformer with unidirectional block attention. Two forward
//! paths share every kernel: a whole-image path (used for training, with a
//! tape for the hand-written backward pass) and a streamed path that walks a
//! [`GenerationPlan`] while keeping only live blocks' key/value state.

pub mod attention;
pub mod cond;
mod config;
pub mod layer;
pub mod params;
pub mod rope;

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

pub use config::ModelConfig;
pub use params::{AttnParams, LayerParams, ModelParams};
pub use rope::RopeTable;

use self::attention::Heads;
use self::cond::{cond_backward, cond_forward, CondTape};
use self::layer::{
    attn_backward, attn_forward, cross_backward, cross_forward, ffn_backward, ffn_forward, final_backward,
    final_forward, kv_backward, kv_forward, AttnTape, CrossTape, Ctx, FfnTape, FinalTape, KvEntry, NormTape,
};
use crate::error::{shape_err, Result};
use crate::geometry::{
    partition, patchify, slot_source, unpatchify, BlockCoord, BlockGridSpec, Footprint, GenerationPlan, KeySlot,
    KvCacheStore,
};
use crate::tensor::ops::{linear, linear_backward};
use crate::{Scalar, Tensor};

/// One denoiser evaluation's inputs, all `[H, W, 3]` in model range.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a, T> {
    /// Noisy image, already multiplied by `c_in(sigma)`.
    pub noisy: &'a Tensor<T>,
    /// Bicubic-upsampled low-resolution condition.
    pub lr_up: &'a Tensor<T>,
    pub c_noise: T,
    pub semantic: &'a [T],
    /// Patch-grid position of the top-left token.
    pub offset: (usize, usize),
}

/// Cached state of one block: one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache<T> {
    pub layers: Vec<KvEntry<T>>,
}

impl<T: Scalar> Footprint for BlockCache<T> {
    fn bytes(&self) -> usize {
        self.layers.iter().map(Footprint::bytes).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamStats {
    pub high_water_blocks: usize,
    pub high_water_bytes: usize,
    /// Cached blocks after each batch.
    pub residency: Vec<usize>,
    /// Largest tile-local working set (hidden states and layer entries).
    pub peak_tile_bytes: usize,
}

/// Which forward path evaluates the network.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Full,
    Streamed(&'a GenerationPlan),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FullStats {
    /// Peak bytes of whole-image hidden state held during the forward pass.
    pub resident_bytes: usize,
}

struct Prepared<T> {
    spec: BlockGridSpec,
    rope: RopeTable<T>,
    cond: CondTape<T>,
    mods: Vec<Vec<T>>,
    final_mod: Vec<T>,
}

struct LayerTape<T> {
    kv: Vec<KvEntry<T>>,
    kv_norm: Vec<NormTape<T>>,
    attn: Vec<AttnTape<T>>,
    cross: Vec<CrossTape<T>>,
    ffn: Vec<FfnTape<T>>,
}

/// Activations of a whole-image forward pass, consumed by [`Model::backward`].
pub struct Tape<T> {
    prep: Prepared<T>,
    patches: Vec<Vec<T>>,
    lr_patches: Vec<Vec<T>>,
    layers: Vec<LayerTape<T>>,
    finals: Vec<FinalTape<T>>,
    outputs: Vec<Vec<Vec<T>>>,
}

impl<T> Tape<T> {
    /// Hidden state of block `index` (raster order) after layer `layer`.
    pub fn layer_output(&self, layer: usize, index: usize) -> &[T] {
        &self.outputs[layer][index]
    }

    /// Raw attention logits of one block at one layer, `[heads, t, 4t]`.
    pub fn attn_logits(&self, layer: usize, index: usize, hs: Heads) -> Vec<T>
    where
        T: Scalar,
    {
        self.layers[layer].attn[index].logits(hs)
    }
}

/// Blocks of the clipped 3x3 neighbourhood of `c`, raster order.
pub fn lr_neighborhood(spec: &BlockGridSpec, c: BlockCoord) -> Vec<BlockCoord> {
    let rows = c.row.saturating_sub(1)..=(c.row + 1).min(spec.h - 1);
    let cols = c.col.saturating_sub(1)..=(c.col + 1).min(spec.w - 1);
    rows.flat_map(|r| cols.clone().map(move |col| BlockCoord::new(r, col))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        params.validate(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: ModelParams::init(&cfg, seed)?,
            cfg,
        })
    }

    /// Every parameter random, including gates; for oracle tests.
    pub fn random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: ModelParams::random(&cfg, seed)?,
            cfg,
        })
    }

    pub fn heads(&self) -> Heads {
        Heads {
            heads: self.cfg.heads,
            head_dim: self.cfg.head_dim,
        }
    }

    pub fn grid(&self, input: &ModelInput<'_, T>) -> Result<BlockGridSpec> {
        let s = input.noisy.shape();
        if s.len() != 3 || s[2] != 3 || input.lr_up.shape() != s {
            return Err(shape_err!(
                "model inputs must both be [H, W, 3]; got {:?} and {:?}",
                s,
                input.lr_up.shape()
            ));
        }
        partition(s[0], s[1], self.cfg.block_size, self.cfg.patch_size)
    }

    fn ctx<'a>(&self, rope: &'a RopeTable<T>) -> Ctx<'a, T> {
        Ctx {
            hs: self.heads(),
            tokens: self.cfg.tokens_per_block(),
            eps: T::of(self.cfg.layernorm_eps),
            rope,
        }
    }

    fn prepare(&self, input: &ModelInput<'_, T>) -> Result<Prepared<T>> {
        let spec = self.grid(input)?;
        let s = spec.patches_per_side();
        let max_pos = (input.offset.0 + spec.w * s).max(input.offset.1 + spec.h * s);
        let rope = RopeTable::new(self.cfg.head_dim, self.cfg.rope_base, max_pos)?;
        let cond = cond_forward(&self.params, input.c_noise, input.semantic)?;
        let d = self.cfg.hidden;
        let mods = self
            .params
            .layers
            .iter()
            .map(|lp| {
                let mut m = vec![T::zero(); 6 * d];
                linear(&cond.act, 1, &lp.modulation, &mut m);
                m
            })
            .collect();
        let mut final_mod = vec![T::zero(); 2 * d];
        linear(&cond.act, 1, &self.params.final_modulation, &mut final_mod);
        Ok(Prepared {
            spec,
            rope,
            cond,
            mods,
            final_mod,
        })
    }

    /// Six-channel patches of block `c` and their embedding.
    fn embed(&self, spec: &BlockGridSpec, input: &ModelInput<'_, T>, c: BlockCoord) -> Result<(Vec<T>, Vec<T>)> {
        let noisy = spec.extract_block(input.noisy.data(), 3, c);
        let lr = spec.extract_block(input.lr_up.data(), 3, c);
        let mut six = Vec::with_capacity(noisy.len() * 2);
        for (a, b) in noisy.chunks(3).zip(lr.chunks(3)) {
            six.extend_from_slice(a);
            six.extend_from_slice(b);
        }
        let patches = patchify(&six, spec.block_size, 6, spec.patch_size)?;
        let t = spec.tokens_per_block();
        let mut x = vec![T::zero(); t * self.cfg.hidden];
        linear(&patches, t, &self.params.patch_embed, &mut x);
        Ok((patches, x))
    }

    fn lr_tokens(&self, spec: &BlockGridSpec, input: &ModelInput<'_, T>, c: BlockCoord) -> Result<(Vec<T>, Vec<T>)> {
        let lr = spec.extract_block(input.lr_up.data(), 3, c);
        let patches = patchify(&lr, spec.block_size, 3, spec.patch_size)?;
        let t = spec.tokens_per_block();
        let mut x = vec![T::zero(); t * self.cfg.hidden];
        linear(&patches, t, &self.params.lr_embed, &mut x);
        Ok((patches, x))
    }

    fn write_block(&self, spec: &BlockGridSpec, out: &mut [T], c: BlockCoord, y: &[T]) -> Result<()> {
        let px = unpatchify(y, spec.block_size, 3, spec.patch_size)?;
        spec.insert_block(out, 3, c, &px);
        Ok(())
    }

    /// Runs either path; streamed runs also return their cache statistics.
    pub fn forward(&self, input: &ModelInput<'_, T>, mode: ForwardMode<'_>) -> Result<(Tensor<T>, Option<StreamStats>)> {
        match mode {
            ForwardMode::Full => Ok((self.forward_full(input)?, None)),
            ForwardMode::Streamed(plan) => self.forward_streamed(input, plan).map(|(o, s)| (o, Some(s))),
        }
    }

    /// Whole-image forward pass (denoiser raw output, `[H, W, 3]`).
    pub fn forward_full(&self, input: &ModelInput<'_, T>) -> Result<Tensor<T>> {
        self.run_full(input, false).map(|(out, _, _)| out)
    }

    pub fn forward_full_with_stats(&self, input: &ModelInput<'_, T>) -> Result<(Tensor<T>, FullStats)> {
        self.run_full(input, false).map(|(out, _, s)| (out, s))
    }

    pub fn forward_full_with_tape(&self, input: &ModelInput<'_, T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.run_full(input, true).map(|(out, tape, _)| (out, tape.expect("tape requested")))
    }

    fn run_full(&self, input: &ModelInput<'_, T>, keep: bool) -> Result<(Tensor<T>, Option<Tape<T>>, FullStats)> {
        let prep = self.prepare(input)?;
        let spec = prep.spec;
        let ctx = self.ctx(&prep.rope);
        let coords: Vec<BlockCoord> = spec.coords().collect();
        let offset = input.offset;
        let pos: Vec<Vec<(usize, usize)>> = coords.iter().map(|&c| spec.token_positions(c, offset)).collect();

        let mut patches = Vec::with_capacity(coords.len());
        let mut xs = Vec::with_capacity(coords.len());
        for &c in &coords {
            let (p, x) = self.embed(&spec, input, c)?;
            patches.push(p);
            xs.push(x);
        }
        let mut lr_patches = Vec::with_capacity(coords.len());
        let mut lr_tok = Vec::with_capacity(coords.len());
        for &c in &coords {
            let (p, x) = self.lr_tokens(&spec, input, c)?;
            lr_patches.push(p);
            lr_tok.push(x);
        }

        let mut stats = FullStats::default();
        let mut layers = Vec::new();
        let mut outputs = Vec::new();
        for (l, lp) in self.params.layers.iter().enumerate() {
            let m = &prep.mods[l];
            let (kv, kv_norm): (Vec<_>, Vec<_>) = xs.iter().map(|x| kv_forward(lp, m, x, ctx)).unzip();
            let mut next = Vec::with_capacity(coords.len());
            let mut lt = LayerTape {
                kv: Vec::new(),
                kv_norm: Vec::new(),
                attn: Vec::new(),
                cross: Vec::new(),
                ffn: Vec::new(),
            };
            for (bi, &c) in coords.iter().enumerate() {
                let src = KeySlot::ALL.map(|s| spec.index(slot_source(c, s)));
                let (x2, at) = attn_forward(
                    lp,
                    &self.params.rel_pos,
                    m,
                    &xs[bi],
                    src.map(|i| &kv[i]),
                    &pos[bi],
                    src.map(|i| pos[i].as_slice()),
                    ctx,
                )?;
                let x3 = if l == 0 {
                    let nb: Vec<usize> = lr_neighborhood(&spec, c).iter().map(|&n| spec.index(n)).collect();
                    let lr: Vec<T> = nb.iter().flat_map(|&i| lr_tok[i].iter().copied()).collect();
                    let lr_pos: Vec<(usize, usize)> = nb.iter().flat_map(|&i| pos[i].iter().copied()).collect();
                    let (x3, ct) = cross_forward(&self.params.lr_cross, &x2, &lr, &pos[bi], &lr_pos, ctx)?;
                    if keep {
                        lt.cross.push(ct);
                    }
                    x3
                } else {
                    x2
                };
                let (x4, ft) = ffn_forward(lp, m, &x3, ctx);
                if keep {
                    lt.attn.push(at);
                    lt.ffn.push(ft);
                }
                next.push(x4);
            }
            let scalars: usize = xs.iter().chain(&next).map(Vec::len).sum::<usize>()
                + kv.iter().map(|e| e.h.len() + e.v.len()).sum::<usize>();
            stats.resident_bytes = stats.resident_bytes.max(scalars * T::BYTES);
            if keep {
                lt.kv = kv;
                lt.kv_norm = kv_norm;
                layers.push(lt);
                outputs.push(next.clone());
            }
            xs = next;
        }

        let mut out = vec![T::zero(); spec.height() * spec.width() * 3];
        let mut finals = Vec::new();
        for (bi, &c) in coords.iter().enumerate() {
            let (y, ft) = final_forward(&self.params, &prep.final_mod, &xs[bi], ctx);
            self.write_block(&spec, &mut out, c, &y)?;
            if keep {
                finals.push(ft);
            }
        }
        let out = Tensor::new(&[spec.height(), spec.width(), 3], out)?;
        out.check_finite("model forward")?;
        let tape = keep.then_some(Tape {
            prep,
            patches,
            lr_patches,
            layers,
            finals,
            outputs,
        });
        Ok((out, tape, stats))
    }

    /// Streamed forward along `plan`, holding only live blocks' layer entries.
    pub fn forward_streamed(&self, input: &ModelInput<'_, T>, plan: &GenerationPlan) -> Result<(Tensor<T>, StreamStats)> {
        let prep = self.prepare(input)?;
        let spec = prep.spec;
        if plan.h != spec.h || plan.w != spec.w {
            return Err(shape_err!("plan is {}x{} blocks, image is {}x{}", plan.h, plan.w, spec.h, spec.w));
        }
        let ctx = self.ctx(&prep.rope);
        let offset = input.offset;
        let mut cache: KvCacheStore<BlockCache<T>> = KvCacheStore::new();
        let mut stats = StreamStats::default();
        let mut out = vec![T::zero(); spec.height() * spec.width() * 3];

        for batch in &plan.batches {
            let mut blocks = batch.blocks.clone();
            blocks.sort();
            let mut pos: BTreeMap<BlockCoord, Vec<(usize, usize)>> = BTreeMap::new();
            let mut xs: BTreeMap<BlockCoord, Vec<T>> = BTreeMap::new();
            let mut lr_tok: BTreeMap<BlockCoord, Vec<T>> = BTreeMap::new();
            for &c in &blocks {
                xs.insert(c, self.embed(&spec, input, c)?.1);
                for s in KeySlot::ALL {
                    let src = slot_source(c, s);
                    pos.entry(src).or_insert_with(|| spec.token_positions(src, offset));
                }
                for n in lr_neighborhood(&spec, c) {
                    pos.entry(n).or_insert_with(|| spec.token_positions(n, offset));
                    if let alloc::collections::btree_map::Entry::Vacant(e) = lr_tok.entry(n) {
                        e.insert(self.lr_tokens(&spec, input, n)?.1);
                    }
                }
            }
            let mut tile_kv: BTreeMap<BlockCoord, Vec<KvEntry<T>>> = BTreeMap::new();
            let mut tile_peak = 0usize;
            for (l, lp) in self.params.layers.iter().enumerate() {
                let m = &prep.mods[l];
                let cur: BTreeMap<BlockCoord, KvEntry<T>> =
                    xs.iter().map(|(&c, x)| (c, kv_forward(lp, m, x, ctx).0)).collect();
                let mut next = BTreeMap::new();
                for &c in &blocks {
                    let mut sources = Vec::with_capacity(4);
                    for s in KeySlot::ALL {
                        let src = slot_source(c, s);
                        let e = match cur.get(&src) {
                            Some(e) => e,
                            None => &cache.get(src)?.layers[l],
                        };
                        sources.push(e);
                    }
                    let srcs = [sources[0], sources[1], sources[2], sources[3]];
                    let src_pos = KeySlot::ALL.map(|s| pos[&slot_source(c, s)].as_slice());
                    let (x2, _) = attn_forward(lp, &self.params.rel_pos, m, &xs[&c], srcs, &pos[&c], src_pos, ctx)?;
                    let x3 = if l == 0 {
                        let nb = lr_neighborhood(&spec, c);
                        let lr: Vec<T> = nb.iter().flat_map(|n| lr_tok[n].iter().copied()).collect();
                        let lr_pos: Vec<(usize, usize)> = nb.iter().flat_map(|n| pos[n].iter().copied()).collect();
                        cross_forward(&self.params.lr_cross, &x2, &lr, &pos[&c], &lr_pos, ctx)?.0
                    } else {
                        x2
                    };
                    next.insert(c, ffn_forward(lp, m, &x3, ctx).0);
                }
                let scalars: usize = xs.values().chain(next.values()).map(Vec::len).sum::<usize>()
                    + cur.values().map(|e| e.h.len() + e.v.len()).sum::<usize>();
                tile_peak = tile_peak.max(scalars * T::BYTES);
                for (c, e) in cur {
                    tile_kv.entry(c).or_default().push(e);
                }
                xs = next;
            }
            stats.peak_tile_bytes = stats.peak_tile_bytes.max(tile_peak);
            for &c in &blocks {
                let (y, _) = final_forward(&self.params, &prep.final_mod, &xs[&c], ctx);
                self.write_block(&spec, &mut out, c, &y)?;
            }
            for &c in &batch.evict {
                cache.evict(c)?;
            }
            for &c in &batch.store {
                let layers = tile_kv.remove(&c).ok_or_else(|| shape_err!("stored block {c} not in its batch"))?;
                cache.put(c, BlockCache { layers })?;
            }
            stats.residency.push(cache.len());
        }
        stats.high_water_blocks = cache.high_water_blocks();
        stats.high_water_bytes = cache.high_water_bytes();
        let out = Tensor::new(&[spec.height(), spec.width(), 3], out)?;
        out.check_finite("streamed forward")?;
        Ok((out, stats))
    }

    /// Gradient of `sum(d_out * output)` wrt every parameter.
    pub fn backward(&self, tape: &Tape<T>, d_out: &Tensor<T>) -> Result<ModelParams<T>> {
        let prep = &tape.prep;
        let spec = prep.spec;
        if d_out.shape() != [spec.height(), spec.width(), 3] {
            return Err(shape_err!("output gradient shape {:?}", d_out.shape()));
        }
        let ctx = self.ctx(&prep.rope);
        let p = &self.params;
        let mut g = p.zeros_like();
        let d = self.cfg.hidden;
        let t = self.cfg.tokens_per_block();
        let coords: Vec<BlockCoord> = spec.coords().collect();
        let nblocks = coords.len();

        let mut dfm = vec![T::zero(); 2 * d];
        let mut dx: Vec<Vec<T>> = Vec::with_capacity(nblocks);
        for (bi, &c) in coords.iter().enumerate() {
            let dy_px = spec.extract_block(d_out.data(), 3, c);
            let dy = patchify(&dy_px, spec.block_size, 3, spec.patch_size)?;
            dx.push(final_backward(p, &mut g, &prep.final_mod, &mut dfm, &tape.finals[bi], &dy, ctx));
        }

        let mut dmods: Vec<Vec<T>> = vec![vec![T::zero(); 6 * d]; self.cfg.layers];
        let mut dlr: Vec<Vec<T>> = vec![vec![T::zero(); t * d]; nblocks];
        for l in (0..self.cfg.layers).rev() {
            let lt = &tape.layers[l];
            let lp = &p.layers[l];
            let m = &prep.mods[l];
            let ModelParams {
                layers: gl,
                rel_pos: grel,
                lr_cross: gcross,
                ..
            } = &mut g;
            let glp = &mut gl[l];
            let dm = &mut dmods[l];
            for bi in 0..nblocks {
                dx[bi] = ffn_backward(lp, glp, m, dm, &lt.ffn[bi], &dx[bi], ctx);
            }
            if l == 0 {
                for (bi, &c) in coords.iter().enumerate() {
                    let (dx2, dl) = cross_backward(&p.lr_cross, gcross, &lt.cross[bi], &dx[bi], ctx)?;
                    dx[bi] = dx2;
                    for (k, n) in lr_neighborhood(&spec, c).into_iter().enumerate() {
                        let dst = &mut dlr[spec.index(n)];
                        for (a, &b) in dst.iter_mut().zip(&dl[k * t * d..(k + 1) * t * d]) {
                            *a = *a + b;
                        }
                    }
                }
            }
            let mut dh: Vec<Vec<T>> = vec![vec![T::zero(); t * d]; nblocks];
            let mut dv: Vec<Vec<T>> = vec![vec![T::zero(); t * d]; nblocks];
            for (bi, &c) in coords.iter().enumerate() {
                let ag = attn_backward(lp, glp, grel, m, dm, &lt.kv[bi].h, &lt.attn[bi], &dx[bi], ctx)?;
                add_into(&mut dh[bi], &ag.dh_query);
                for (s, slot) in KeySlot::ALL.into_iter().enumerate() {
                    let src = spec.index(slot_source(c, slot));
                    add_into(&mut dh[src], &ag.dh_key[s]);
                    add_into(&mut dv[src], &ag.dv[s]);
                }
                dx[bi] = ag.dx;
            }
            for bi in 0..nblocks {
                let dhb = core::mem::take(&mut dh[bi]);
                kv_backward(lp, glp, m, dm, &lt.kv[bi], &lt.kv_norm[bi], dhb, &dv[bi], &mut dx[bi], ctx);
            }
        }

        for bi in 0..nblocks {
            linear_backward(&tape.patches[bi], t, &p.patch_embed, &dx[bi], &mut g.patch_embed, None);
            linear_backward(&tape.lr_patches[bi], t, &p.lr_embed, &dlr[bi], &mut g.lr_embed, None);
        }

        let mut dact = vec![T::zero(); d];
        for l in 0..self.cfg.layers {
            linear_backward(
                &prep.cond.act,
                1,
                &p.layers[l].modulation,
                &dmods[l],
                &mut g.layers[l].modulation,
                Some(&mut dact),
            );
        }
        linear_backward(&prep.cond.act, 1, &p.final_modulation, &dfm, &mut g.final_modulation, Some(&mut dact));
        cond_backward(p, &prep.cond, &dact, &mut g);
        Ok(g)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}
