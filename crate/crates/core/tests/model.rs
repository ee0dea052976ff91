use tiledit_core::geometry::{plan_generation, BlockCoord, KeySlot};
use tiledit_core::model::attention::{mha_forward, Heads};
use tiledit_core::model::layer::{attn_forward, cross_forward, kv_forward, Ctx};
use tiledit_core::model::{lr_neighborhood, Model, ModelConfig, ModelInput, RopeTable};
use tiledit_core::rng::{normal, rng};
use tiledit_core::tensor::ops::linear;
use tiledit_core::{Scalar, Tensor};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        block_size: 8,
        ..ModelConfig::toy()
    }
}

struct Inputs<T> {
    noisy: Tensor<T>,
    lr: Tensor<T>,
    sem: Vec<T>,
}

impl<T: Scalar> Inputs<T> {
    fn new(cfg: &ModelConfig, h: usize, w: usize, seed: u64) -> Self {
        let (hh, ww) = (h * cfg.block_size, w * cfg.block_size);
        let mut r = rng(seed);
        let noisy = Tensor::from_fn(&[hh, ww, 3], |_| normal::<T>(&mut r));
        let lr = Tensor::from_fn(&[hh, ww, 3], |_| normal::<T>(&mut r) * T::of(0.5));
        let sem = (0..cfg.semantic_dim).map(|_| normal::<T>(&mut r)).collect();
        Self { noisy, lr, sem }
    }

    fn input(&self, offset: (usize, usize)) -> ModelInput<'_, T> {
        ModelInput {
            noisy: &self.noisy,
            lr_up: &self.lr,
            c_noise: T::of(0.2),
            semantic: &self.sem,
            offset,
        }
    }
}

#[test]
fn streamed_equals_full_f64() {
    let cfg = small_cfg();
    let model = Model::<f64>::random(cfg, 1).unwrap();
    for (h, w) in [(1, 1), (2, 3), (3, 2), (4, 4)] {
        let inp = Inputs::<f64>::new(&cfg, h, w, 10 + h as u64 * 7 + w as u64);
        let full = model.forward_full(&inp.input((3, 5))).unwrap();
        for n in [1, 2, h.max(w)] {
            let plan = plan_generation(h, w, n).unwrap();
            let (streamed, stats) = model.forward_streamed(&inp.input((3, 5)), &plan).unwrap();
            let dev = full.max_abs_diff(&streamed).unwrap();
            assert!(dev <= 1e-10, "{h}x{w} n={n}: {dev}");
            if n >= h.max(w) {
                assert_eq!(full, streamed, "single tile must match bitwise");
            }
            assert!(stats.high_water_blocks <= plan.residency_bound());
        }
    }
}

#[test]
fn streamed_equals_full_f32() {
    let cfg = small_cfg();
    let model = Model::<f32>::random(cfg, 2).unwrap();
    let inp = Inputs::<f32>::new(&cfg, 4, 4, 3);
    let full = model.forward_full(&inp.input((0, 0))).unwrap();
    for n in [1, 2] {
        let plan = plan_generation(4, 4, n).unwrap();
        let (streamed, _) = model.forward_streamed(&inp.input((0, 0)), &plan).unwrap();
        let dev = full.max_abs_diff(&streamed).unwrap();
        assert!(dev <= 1e-5, "n={n}: {dev}");
    }
}

#[test]
fn output_shape_matches_input() {
    let cfg = small_cfg();
    let model = Model::<f32>::init(cfg, 0).unwrap();
    let inp = Inputs::<f32>::new(&cfg, 2, 3, 0);
    let out = model.forward_full(&inp.input((0, 0))).unwrap();
    assert_eq!(out.shape(), inp.noisy.shape());
    let bad = Tensor::<f32>::zeros(&[8, 12, 3]);
    let mut i = inp.input((0, 0));
    i.lr_up = &bad;
    assert!(model.forward_full(&i).is_err());
}

/// Blocks whose outputs may depend on `x` after `layers` UniBA layers.
fn reach(h: usize, w: usize, x: BlockCoord, layers: usize) -> Vec<Vec<bool>> {
    let mut r = vec![vec![false; w]; h];
    r[x.row][x.col] = true;
    for _ in 0..layers {
        let prev = r.clone();
        for i in 0..h {
            for j in 0..w {
                let c = BlockCoord::new(i, j);
                if KeySlot::ALL.iter().any(|&s| {
                    let s = tiledit_core::geometry::slot_source(c, s);
                    prev[s.row][s.col]
                }) {
                    r[i][j] = true;
                }
            }
        }
    }
    r
}

fn block_slice(t: &Tensor<f64>, cfg: &ModelConfig, c: BlockCoord) -> Vec<f64> {
    let w = t.shape()[1];
    let b = cfg.block_size;
    let mut out = Vec::new();
    for y in 0..b {
        let start = ((c.row * b + y) * w + c.col * b) * 3;
        out.extend_from_slice(&t.data()[start..start + b * 3]);
    }
    out
}

#[test]
fn causality_follows_dependency_dag() {
    let cfg = ModelConfig {
        layers: 2,
        ..small_cfg()
    };
    let model = Model::<f64>::random(cfg, 4).unwrap();
    let (h, w) = (4, 4);
    let base = Inputs::<f64>::new(&cfg, h, w, 5);
    let out = model.forward_full(&base.input((0, 0))).unwrap();
    for x in [BlockCoord::new(1, 2), BlockCoord::new(3, 3), BlockCoord::new(0, 0)] {
        let mut pert = Inputs::<f64>::new(&cfg, h, w, 5);
        let wpx = w * cfg.block_size;
        for y in 0..cfg.block_size {
            for xx in 0..cfg.block_size {
                for ch in 0..3 {
                    let i = ((x.row * cfg.block_size + y) * wpx + x.col * cfg.block_size + xx) * 3 + ch;
                    pert.noisy.data_mut()[i] = 0.0;
                }
            }
        }
        let po = model.forward_full(&pert.input((0, 0))).unwrap();
        let plan = plan_generation(h, w, 1).unwrap();
        let (ps, _) = model.forward_streamed(&pert.input((0, 0)), &plan).unwrap();
        let r = reach(h, w, x, cfg.layers);
        for i in 0..h {
            for j in 0..w {
                let c = BlockCoord::new(i, j);
                let same = block_slice(&out, &cfg, c) == block_slice(&po, &cfg, c);
                if !r[i][j] {
                    assert!(same, "block {c} changed by perturbing {x}");
                    assert_eq!(block_slice(&out, &cfg, c), block_slice(&ps, &cfg, c));
                }
            }
        }
        assert_ne!(block_slice(&out, &cfg, x), block_slice(&po, &cfg, x));
    }
}

#[test]
fn influence_travels_one_ring_per_layer() {
    let cfg = small_cfg();
    let model = Model::<f64>::random(cfg, 6).unwrap();
    let a = Inputs::<f64>::new(&cfg, 3, 3, 7);
    let mut b = Inputs::<f64>::new(&cfg, 3, 3, 7);
    b.noisy.data_mut()[0] += 1.0; // pixel in block (0,0)
    let (_, ta) = model.forward_full_with_tape(&a.input((0, 0))).unwrap();
    let (_, tb) = model.forward_full_with_tape(&b.input((0, 0))).unwrap();
    let target = 8; // block (2,2)
    assert_eq!(ta.layer_output(0, target), tb.layer_output(0, target));
    assert_ne!(ta.layer_output(1, target), tb.layer_output(1, target));
    assert_ne!(ta.layer_output(0, 4), tb.layer_output(0, 4));
}

#[test]
fn lr_cross_attention_is_local() {
    let cfg = small_cfg();
    let model = Model::<f64>::random(cfg, 8).unwrap();
    let a = Inputs::<f64>::new(&cfg, 4, 4, 9);
    let mut b = Inputs::<f64>::new(&cfg, 4, 4, 9);
    let wpx = 4 * cfg.block_size;
    let corner = ((3 * cfg.block_size) * wpx + 3 * cfg.block_size) * 3;
    b.lr.data_mut()[corner] += 1.0; // pixel in block (3,3)
    let (_, ta) = model.forward_full_with_tape(&a.input((0, 0))).unwrap();
    let (_, tb) = model.forward_full_with_tape(&b.input((0, 0))).unwrap();
    for idx in 0..16 {
        let c = BlockCoord::new(idx / 4, idx % 4);
        let near = c.row >= 2 && c.col >= 2;
        let same = ta.layer_output(0, idx) == tb.layer_output(0, idx);
        assert_eq!(same, !near, "block {c}");
    }
    let spec = tiledit_core::geometry::partition(32, 32, 8, 4).unwrap();
    assert_eq!(lr_neighborhood(&spec, BlockCoord::new(0, 0)).len(), 4);
    assert_eq!(lr_neighborhood(&spec, BlockCoord::new(1, 2)).len(), 9);
    assert_eq!(lr_neighborhood(&spec, BlockCoord::new(3, 1)).len(), 6);
}

#[test]
fn zero_lr_tokens_leave_residual() {
    let cfg = small_cfg();
    let model = Model::<f64>::init(cfg, 3).unwrap();
    let rope = RopeTable::new(cfg.head_dim, cfg.rope_base, 8).unwrap();
    let t = cfg.tokens_per_block();
    let ctx = Ctx {
        hs: model.heads(),
        tokens: t,
        eps: cfg.layernorm_eps,
        rope: &rope,
    };
    let mut r = rng(1);
    let x: Vec<f64> = (0..t * cfg.hidden).map(|_| normal(&mut r)).collect();
    let pos: Vec<(usize, usize)> = (0..t).map(|i| (i % 2, i / 2)).collect();
    let lr = vec![0.0; 4 * t * cfg.hidden];
    let lr_pos: Vec<(usize, usize)> = (0..4 * t).map(|i| (i % 4, i / 4 % 4)).collect();
    let (x3, _) = cross_forward(&model.params.lr_cross, &x, &lr, &pos, &lr_pos, ctx).unwrap();
    assert_eq!(x3, x);
}

#[test]
fn equal_slot_embeddings_reduce_to_plain_attention() {
    let cfg = small_cfg();
    let mut model = Model::<f64>::random(cfg, 11).unwrap();
    let p = model.params.rel_pos[2].clone();
    for s in 0..4 {
        model.params.rel_pos[s] = p.clone();
    }
    let t = cfg.tokens_per_block();
    let d = cfg.hidden;
    let rope = RopeTable::new(cfg.head_dim, cfg.rope_base, 8).unwrap();
    let ctx = Ctx {
        hs: model.heads(),
        tokens: t,
        eps: cfg.layernorm_eps,
        rope: &rope,
    };
    let mut r = rng(2);
    let x: Vec<f64> = (0..t * d).map(|_| normal(&mut r)).collect();
    let m: Vec<f64> = (0..6 * d).map(|_| 0.3 * normal::<f64>(&mut r)).collect();
    let pos: Vec<(usize, usize)> = (0..t).map(|i| (i % 2, i / 2)).collect();
    let lp = &model.params.layers[0];
    let (e, _) = kv_forward(lp, &m, &x, ctx);
    let (x2, _) = attn_forward(lp, &model.params.rel_pos, &m, &x, [&e; 4], &pos, [pos.as_slice(); 4], ctx).unwrap();

    // single-copy oracle
    let a = &lp.attn;
    let mut q = vec![0.0; t * d];
    linear(&e.h, t, &a.q, &mut q);
    let kin: Vec<f64> = e.h.chunks(d).flat_map(|row| row.iter().zip(p.data()).map(|(h, p)| h + p)).collect();
    let mut k = vec![0.0; t * d];
    linear(&kin, t, &a.k, &mut k);
    let hs = Heads {
        heads: cfg.heads,
        head_dim: cfg.head_dim,
    };
    let tape = mha_forward(hs, &q, &k, &e.v, &a.q_norm, &a.k_norm, &rope, &pos, &pos).unwrap();
    let mut o = vec![0.0; t * d];
    linear(&tape.out, t, &a.o, &mut o);
    let gate = &m[2 * d..3 * d];
    for (i, (&got, &xi)) in x2.iter().zip(&x).enumerate() {
        let want = xi + gate[i % d] * o[i];
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn semantic_conditioning_reaches_every_layer() {
    let cfg = small_cfg();
    let model = Model::<f64>::random(cfg, 12).unwrap();
    let a = Inputs::<f64>::new(&cfg, 2, 2, 13);
    let mut b = Inputs::<f64>::new(&cfg, 2, 2, 13);
    b.sem[0] += 0.5;
    let (_, ta) = model.forward_full_with_tape(&a.input((0, 0))).unwrap();
    let (_, tb) = model.forward_full_with_tape(&b.input((0, 0))).unwrap();
    for l in 0..cfg.layers {
        assert_ne!(ta.layer_output(l, 0), tb.layer_output(l, 0), "layer {l}");
    }
}

#[test]
fn rope_offset_shift_leaves_logits_invariant() {
    let cfg = small_cfg();
    let model = Model::<f32>::random(cfg, 14).unwrap();
    let inp = Inputs::<f32>::new(&cfg, 2, 2, 15);
    let (oa, ta) = model.forward_full_with_tape(&inp.input((0, 0))).unwrap();
    let (ob, tb) = model.forward_full_with_tape(&inp.input((37, 101))).unwrap();
    for l in 0..cfg.layers {
        for bi in 0..4 {
            let la = ta.attn_logits(l, bi, model.heads());
            let lb = tb.attn_logits(l, bi, model.heads());
            let dev = la.iter().zip(&lb).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(dev <= 1e-5, "layer {l} block {bi}: {dev}");
        }
    }
    assert!(oa.max_abs_diff(&ob).unwrap() <= 1e-4);
}

#[test]
fn unit_gain_logits_are_bounded() {
    let cfg = small_cfg();
    let mut model = Model::<f64>::random(cfg, 16).unwrap();
    for l in &mut model.params.layers {
        l.attn.q_norm.gain.fill(1.0);
        l.attn.k_norm.gain.fill(1.0);
        l.attn.q_norm.shift.fill(0.0);
        l.attn.k_norm.shift.fill(0.0);
    }
    let inp = Inputs::<f64>::new(&cfg, 2, 2, 17);
    let (_, tape) = model.forward_full_with_tape(&inp.input((0, 0))).unwrap();
    let bound = (cfg.head_dim as f64).sqrt() + 1e-4;
    for l in 0..cfg.layers {
        assert!(tape.attn_logits(l, 3, model.heads()).iter().all(|v| v.abs() <= bound));
    }
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = ModelConfig {
        layers: 2,
        ..small_cfg()
    };
    let model = Model::<f64>::random(cfg, 20).unwrap();
    let inp = Inputs::<f64>::new(&cfg, 2, 2, 21);
    let mut r = rng(22);
    let wt = Tensor::from_fn(inp.noisy.shape(), |_| normal::<f64>(&mut r));
    let loss = |m: &Model<f64>| -> f64 {
        let out = m.forward_full(&inp.input((1, 2))).unwrap();
        out.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum()
    };
    let (_, tape) = model.forward_full_with_tape(&inp.input((1, 2))).unwrap();
    let grads = model.backward(&tape, &wt).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let named = grads.tensors();
    for (ti, (name, g)) in named.iter().enumerate() {
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.sort_by(|&a, &b| g.data()[b].abs().partial_cmp(&g.data()[a].abs()).unwrap());
        assert!(g.data()[idx[0]].abs() > 0.0, "{name} receives no gradient");
        for &i in idx.iter().take(2) {
            let mut mp = model.clone();
            let mut mm = model.clone();
            mp.params.tensors_mut()[ti].1.data_mut()[i] += h;
            mm.params.tensors_mut()[ti].1.data_mut()[i] -= h;
            let numeric = (loss(&mp) - loss(&mm)) / (2.0 * h);
            let analytic = g.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            worst = worst.max(rel);
            assert!(rel <= 1e-4, "{name}[{i}]: analytic {analytic} numeric {numeric} rel {rel}");
        }
    }
    assert!(worst <= 1e-4);
}
