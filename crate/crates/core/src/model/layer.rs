//! Per-block transformer kernels. The whole-image and streamed paths call
//! exactly these functions with identical inputs, which is what makes the two
//! paths agree bit for bit.

use alloc::vec;
use alloc::vec::Vec;

use super::attention::{mha_backward, mha_forward, mha_logits, Heads, MhaTape};
use super::params::{AttnParams, LayerParams, ModelParams};
use super::rope::RopeTable;
use crate::error::Result;
use crate::geometry::Footprint;
use crate::tensor::ops::{gelu, gelu_grad, layernorm_backward, layernorm_rows, linear, linear_backward};
use crate::{Scalar, Tensor};

/// Layer-local view shared by all kernels.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T> {
    pub hs: Heads,
    pub tokens: usize,
    pub eps: T,
    pub rope: &'a RopeTable<T>,
}

impl<T> Ctx<'_, T> {
    pub fn d(&self) -> usize {
        self.hs.dim()
    }
}

/// What a block leaves behind for its dependents at one layer: the
/// modulated, normalized hidden state (keys are projected from it per
/// consumer slot) and its value projection.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry<T> {
    pub h: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Footprint for KvEntry<T> {
    fn bytes(&self) -> usize {
        (self.h.len() + self.v.len()) * T::BYTES
    }
}

#[derive(Debug, Clone)]
pub struct NormTape<T> {
    pub a: Vec<T>,
    pub rstd: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct AttnTape<T> {
    key_in: Vec<T>,
    mha: MhaTape<T>,
    o: Vec<T>,
}

impl<T: Scalar> AttnTape<T> {
    pub fn logits(&self, hs: Heads) -> Vec<T> {
        mha_logits(&self.mha, hs)
    }
}

#[derive(Debug, Clone)]
pub struct CrossTape<T> {
    norm: NormTape<T>,
    lr: Vec<T>,
    mha: MhaTape<T>,
}

#[derive(Debug, Clone)]
pub struct FfnTape<T> {
    norm: NormTape<T>,
    h: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    f: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct FinalTape<T> {
    norm: NormTape<T>,
    h: Vec<T>,
}

pub(crate) fn shift_scale_gate<T>(m: &[T], d: usize, which: usize) -> (&[T], &[T], &[T]) {
    let base = which * 3 * d;
    (&m[base..base + d], &m[base + d..base + 2 * d], &m[base + 2 * d..base + 3 * d])
}

fn norm<T: Scalar>(x: &[T], d: usize, eps: T) -> NormTape<T> {
    let mut a = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); x.len() / d];
    layernorm_rows(x, d, eps, &mut a, &mut rstd);
    NormTape { a, rstd }
}

fn modulate<T: Scalar>(a: &[T], shift: &[T], scale: &[T]) -> Vec<T> {
    let d = shift.len();
    let mut h = Vec::with_capacity(a.len());
    for row in a.chunks(d) {
        for ((&v, &s), &b) in row.iter().zip(scale).zip(shift) {
            h.push(v * (T::one() + s) + b);
        }
    }
    h
}

/// Backward of `h = LN(x) * (1 + scale) + shift`; accumulates into `dx`,
/// `dshift`, `dscale`.
fn modulate_backward<T: Scalar>(
    dh: &[T],
    tape: &NormTape<T>,
    scale: &[T],
    dshift: &mut [T],
    dscale: &mut [T],
    dx: &mut [T],
) {
    let d = scale.len();
    let mut da = vec![T::zero(); dh.len()];
    for ((dr, ar), dar) in dh.chunks(d).zip(tape.a.chunks(d)).zip(da.chunks_mut(d)) {
        for c in 0..d {
            dshift[c] = dshift[c] + dr[c];
            dscale[c] = dscale[c] + dr[c] * ar[c];
            dar[c] = dr[c] * (T::one() + scale[c]);
        }
    }
    layernorm_backward(&da, &tape.a, &tape.rstd, d, dx);
}

fn gated_residual<T: Scalar>(x: &[T], gate: Option<&[T]>, y: &[T]) -> Vec<T> {
    match gate {
        Some(g) => {
            let d = g.len();
            x.chunks(d)
                .zip(y.chunks(d))
                .flat_map(|(xr, yr)| xr.iter().zip(yr).zip(g).map(|((&a, &b), &gv)| a + gv * b))
                .collect()
        }
        None => x.iter().zip(y).map(|(&a, &b)| a + b).collect(),
    }
}

/// Accumulates `dgate += sum_rows(dy * y)` and returns `dy * gate`.
fn gate_backward<T: Scalar>(dy: &[T], y: &[T], gate: &[T], dgate: &mut [T]) -> Vec<T> {
    let d = gate.len();
    let mut out = Vec::with_capacity(dy.len());
    for (dr, yr) in dy.chunks(d).zip(y.chunks(d)) {
        for c in 0..d {
            dgate[c] = dgate[c] + dr[c] * yr[c];
            out.push(dr[c] * gate[c]);
        }
    }
    out
}

pub fn kv_forward<T: Scalar>(lp: &LayerParams<T>, m: &[T], x: &[T], ctx: Ctx<'_, T>) -> (KvEntry<T>, NormTape<T>) {
    let d = ctx.d();
    let (shift, scale, _) = shift_scale_gate(m, d, 0);
    let tape = norm(x, d, ctx.eps);
    let h = modulate(&tape.a, shift, scale);
    let mut v = vec![T::zero(); x.len()];
    linear(&h, ctx.tokens, &lp.attn.v, &mut v);
    (KvEntry { h, v }, tape)
}

/// UniBA attention for one block. `sources[s]` is the layer entry of the
/// block feeding key slot `s` (self, upper-left, left, top); `source_pos[s]`
/// its token positions.
pub fn attn_forward<T: Scalar>(
    lp: &LayerParams<T>,
    rel_pos: &[Tensor<T>; 4],
    m: &[T],
    x: &[T],
    sources: [&KvEntry<T>; 4],
    q_pos: &[(usize, usize)],
    source_pos: [&[(usize, usize)]; 4],
    ctx: Ctx<'_, T>,
) -> Result<(Vec<T>, AttnTape<T>)> {
    let d = ctx.d();
    let t = ctx.tokens;
    let (_, _, gate) = shift_scale_gate(m, d, 0);
    let a = &lp.attn;
    let mut q = vec![T::zero(); t * d];
    linear(&sources[0].h, t, &a.q, &mut q);

    let mut key_in = Vec::with_capacity(4 * t * d);
    let mut vcat = Vec::with_capacity(4 * t * d);
    let mut kpos = Vec::with_capacity(4 * t);
    for s in 0..4 {
        let p = rel_pos[s].data();
        for row in sources[s].h.chunks(d) {
            key_in.extend(row.iter().zip(p).map(|(&hv, &pv)| hv + pv));
        }
        vcat.extend_from_slice(&sources[s].v);
        kpos.extend_from_slice(source_pos[s]);
    }
    let mut k = vec![T::zero(); 4 * t * d];
    linear(&key_in, 4 * t, &a.k, &mut k);
    let mha = mha_forward(ctx.hs, &q, &k, &vcat, &a.q_norm, &a.k_norm, ctx.rope, q_pos, &kpos)?;
    let mut o = vec![T::zero(); t * d];
    linear(&mha.out, t, &a.o, &mut o);
    let x2 = gated_residual(x, Some(gate), &o);
    Ok((x2, AttnTape { key_in, mha, o }))
}

/// Cross attention from a block to the low-resolution tokens of its
/// (clipped) 3x3 neighbourhood.
pub fn cross_forward<T: Scalar>(
    ap: &AttnParams<T>,
    x: &[T],
    lr: &[T],
    q_pos: &[(usize, usize)],
    lr_pos: &[(usize, usize)],
    ctx: Ctx<'_, T>,
) -> Result<(Vec<T>, CrossTape<T>)> {
    let d = ctx.d();
    let t = ctx.tokens;
    let m = lr_pos.len();
    let n = norm(x, d, ctx.eps);
    let mut q = vec![T::zero(); t * d];
    linear(&n.a, t, &ap.q, &mut q);
    let mut k = vec![T::zero(); m * d];
    linear(lr, m, &ap.k, &mut k);
    let mut v = vec![T::zero(); m * d];
    linear(lr, m, &ap.v, &mut v);
    let mha = mha_forward(ctx.hs, &q, &k, &v, &ap.q_norm, &ap.k_norm, ctx.rope, q_pos, lr_pos)?;
    let mut o = vec![T::zero(); t * d];
    linear(&mha.out, t, &ap.o, &mut o);
    let x3 = gated_residual(x, None, &o);
    Ok((
        x3,
        CrossTape {
            norm: n,
            lr: lr.to_vec(),
            mha,
        },
    ))
}

pub fn ffn_forward<T: Scalar>(lp: &LayerParams<T>, m: &[T], x: &[T], ctx: Ctx<'_, T>) -> (Vec<T>, FfnTape<T>) {
    let d = ctx.d();
    let t = ctx.tokens;
    let f_dim = lp.ffn_in.d_out();
    let (shift, scale, gate) = shift_scale_gate(m, d, 1);
    let n = norm(x, d, ctx.eps);
    let h = modulate(&n.a, shift, scale);
    let mut u = vec![T::zero(); t * f_dim];
    linear(&h, t, &lp.ffn_in, &mut u);
    let g: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
    let mut f = vec![T::zero(); t * d];
    linear(&g, t, &lp.ffn_out, &mut f);
    let x4 = gated_residual(x, Some(gate), &f);
    (x4, FfnTape { norm: n, h, u, g, f })
}

pub fn final_forward<T: Scalar>(p: &ModelParams<T>, fm: &[T], x: &[T], ctx: Ctx<'_, T>) -> (Vec<T>, FinalTape<T>) {
    let d = ctx.d();
    let n = norm(x, d, ctx.eps);
    let h = modulate(&n.a, &fm[..d], &fm[d..2 * d]);
    let mut y = vec![T::zero(); ctx.tokens * p.final_proj.d_out()];
    linear(&h, ctx.tokens, &p.final_proj, &mut y);
    (y, FinalTape { norm: n, h })
}

pub fn final_backward<T: Scalar>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    fm: &[T],
    dfm: &mut [T],
    tape: &FinalTape<T>,
    dy: &[T],
    ctx: Ctx<'_, T>,
) -> Vec<T> {
    let d = ctx.d();
    let mut dh = vec![T::zero(); ctx.tokens * d];
    linear_backward(&tape.h, ctx.tokens, &p.final_proj, dy, &mut g.final_proj, Some(&mut dh));
    let mut dx = vec![T::zero(); ctx.tokens * d];
    let (dshift, dscale) = dfm.split_at_mut(d);
    modulate_backward(&dh, &tape.norm, &fm[d..2 * d], dshift, &mut dscale[..d], &mut dx);
    dx
}

/// Returns `dx3` given `dx4`; accumulates parameter and modulation grads.
pub fn ffn_backward<T: Scalar>(
    lp: &LayerParams<T>,
    glp: &mut LayerParams<T>,
    m: &[T],
    dm: &mut [T],
    tape: &FfnTape<T>,
    dx4: &[T],
    ctx: Ctx<'_, T>,
) -> Vec<T> {
    let d = ctx.d();
    let t = ctx.tokens;
    let f_dim = lp.ffn_in.d_out();
    let (_, scale, gate) = shift_scale_gate(m, d, 1);
    let df = gate_backward(dx4, &tape.f, gate, &mut dm[5 * d..6 * d]);
    let mut dg = vec![T::zero(); t * f_dim];
    linear_backward(&tape.g, t, &lp.ffn_out, &df, &mut glp.ffn_out, Some(&mut dg));
    let du: Vec<T> = dg.iter().zip(&tape.u).map(|(&a, &u)| a * gelu_grad(u)).collect();
    let mut dh = vec![T::zero(); t * d];
    linear_backward(&tape.h, t, &lp.ffn_in, &du, &mut glp.ffn_in, Some(&mut dh));
    let mut dx = dx4.to_vec();
    let (dshift, rest) = dm[3 * d..5 * d].split_at_mut(d);
    modulate_backward(&dh, &tape.norm, scale, dshift, rest, &mut dx);
    dx
}

/// Returns `(dx, dlr)`.
pub fn cross_backward<T: Scalar>(
    ap: &AttnParams<T>,
    gap: &mut AttnParams<T>,
    tape: &CrossTape<T>,
    dx3: &[T],
    ctx: Ctx<'_, T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let d = ctx.d();
    let t = ctx.tokens;
    let m = tape.mha.tk;
    let mut dctx = vec![T::zero(); t * d];
    linear_backward(&tape.mha.out, t, &ap.o, dx3, &mut gap.o, Some(&mut dctx));
    let g = mha_backward(ctx.hs, &tape.mha, &dctx, &ap.q_norm, &ap.k_norm, &mut gap.q_norm, &mut gap.k_norm, ctx.rope)?;
    let mut dlr = vec![T::zero(); m * d];
    linear_backward(&tape.lr, m, &ap.k, &g.dk, &mut gap.k, Some(&mut dlr));
    linear_backward(&tape.lr, m, &ap.v, &g.dv, &mut gap.v, Some(&mut dlr));
    let mut da = vec![T::zero(); t * d];
    linear_backward(&tape.norm.a, t, &ap.q, &g.dq, &mut gap.q, Some(&mut da));
    let mut dx = dx3.to_vec();
    layernorm_backward(&da, &tape.norm.a, &tape.norm.rstd, d, &mut dx);
    Ok((dx, dlr))
}

/// Gradients flowing out of one block's attention sublayer.
pub struct AttnGrads<T> {
    /// Residual path gradient wrt the block input.
    pub dx: Vec<T>,
    /// Gradient wrt the block's own modulated state via the query path.
    pub dh_query: Vec<T>,
    /// Per key slot: gradient wrt the source block's modulated state (key
    /// path) and its value projection.
    pub dh_key: [Vec<T>; 4],
    pub dv: [Vec<T>; 4],
}

pub fn attn_backward<T: Scalar>(
    lp: &LayerParams<T>,
    glp: &mut LayerParams<T>,
    grel: &mut [Tensor<T>; 4],
    m: &[T],
    dm: &mut [T],
    own_h: &[T],
    tape: &AttnTape<T>,
    dx2: &[T],
    ctx: Ctx<'_, T>,
) -> Result<AttnGrads<T>> {
    let d = ctx.d();
    let t = ctx.tokens;
    let (_, _, gate) = shift_scale_gate(m, d, 0);
    let a = &lp.attn;
    let ga = &mut glp.attn;
    let dout = gate_backward(dx2, &tape.o, gate, &mut dm[2 * d..3 * d]);
    let mut dctx = vec![T::zero(); t * d];
    linear_backward(&tape.mha.out, t, &a.o, &dout, &mut ga.o, Some(&mut dctx));
    let g = mha_backward(ctx.hs, &tape.mha, &dctx, &a.q_norm, &a.k_norm, &mut ga.q_norm, &mut ga.k_norm, ctx.rope)?;
    let mut dh_query = vec![T::zero(); t * d];
    linear_backward(own_h, t, &a.q, &g.dq, &mut ga.q, Some(&mut dh_query));
    let mut dkey_in = vec![T::zero(); 4 * t * d];
    linear_backward(&tape.key_in, 4 * t, &a.k, &g.dk, &mut ga.k, Some(&mut dkey_in));
    let slot = |v: &[T], s: usize| v[s * t * d..(s + 1) * t * d].to_vec();
    for s in 0..4 {
        let gp = grel[s].data_mut();
        for row in dkey_in[s * t * d..(s + 1) * t * d].chunks(d) {
            for (p, &v) in gp.iter_mut().zip(row) {
                *p = *p + v;
            }
        }
    }
    Ok(AttnGrads {
        dx: dx2.to_vec(),
        dh_query,
        dh_key: [0, 1, 2, 3].map(|s| slot(&dkey_in, s)),
        dv: [0, 1, 2, 3].map(|s| slot(&g.dv, s)),
    })
}

/// Pulls accumulated `dh` (modulated state) and `dv` (value projection) of a
/// block back to its layer input; accumulates into `dx`.
pub fn kv_backward<T: Scalar>(
    lp: &LayerParams<T>,
    glp: &mut LayerParams<T>,
    m: &[T],
    dm: &mut [T],
    entry: &KvEntry<T>,
    tape: &NormTape<T>,
    mut dh: Vec<T>,
    dv: &[T],
    dx: &mut [T],
    ctx: Ctx<'_, T>,
) {
    let d = ctx.d();
    let (_, scale, _) = shift_scale_gate(m, d, 0);
    linear_backward(&entry.h, ctx.tokens, &lp.attn.v, dv, &mut glp.attn.v, Some(&mut dh));
    let (dshift, rest) = dm[..2 * d].split_at_mut(d);
    modulate_backward(&dh, tape, scale, dshift, rest, dx);
}
