use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::error::{shape_err, Result};
use crate::rng::derive_seed;
use crate::tensor::{seeded_init, InitScheme, LayerNormParams, LinearParams};
use crate::{Scalar, Tensor};

/// Multi-head attention with per-head query/key layernorm.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<T> {
    pub q: LinearParams<T>,
    pub k: LinearParams<T>,
    pub v: LinearParams<T>,
    pub o: LinearParams<T>,
    pub q_norm: LayerNormParams<T>,
    pub k_norm: LayerNormParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// Conditioning -> (shift, scale, gate) for attention and FFN.
    pub modulation: LinearParams<T>,
    pub attn: AttnParams<T>,
    pub ffn_in: LinearParams<T>,
    pub ffn_out: LinearParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub patch_embed: LinearParams<T>,
    pub lr_embed: LinearParams<T>,
    pub time_in: LinearParams<T>,
    pub time_out: LinearParams<T>,
    pub semantic_proj: LinearParams<T>,
    /// Key-path embeddings for the self, upper-left, left and top slots.
    pub rel_pos: [Tensor<T>; 4],
    pub layers: Vec<LayerParams<T>>,
    /// Cross attention to the nearby low-resolution blocks (first layer).
    pub lr_cross: AttnParams<T>,
    pub final_modulation: LinearParams<T>,
    pub final_proj: LinearParams<T>,
}

macro_rules! walk {
    ($s:expr, $out:ident, $iter:ident, $($r:tt)+) => {{
        macro_rules_linear!($out, "patch_embed", $($r)+ $s.patch_embed);
        macro_rules_linear!($out, "lr_embed", $($r)+ $s.lr_embed);
        macro_rules_linear!($out, "time_in", $($r)+ $s.time_in);
        macro_rules_linear!($out, "time_out", $($r)+ $s.time_out);
        macro_rules_linear!($out, "semantic_proj", $($r)+ $s.semantic_proj);
        for (i, p) in $s.rel_pos.$iter().enumerate() {
            $out.push((format!("rel_pos.{}", i + 1), p));
        }
        for (i, l) in $s.layers.$iter().enumerate() {
            macro_rules_linear!($out, format!("layers.{i}.modulation"), $($r)+ l.modulation);
            macro_rules_attn!($out, format!("layers.{i}.attn"), $($r)+ l.attn);
            macro_rules_linear!($out, format!("layers.{i}.ffn_in"), $($r)+ l.ffn_in);
            macro_rules_linear!($out, format!("layers.{i}.ffn_out"), $($r)+ l.ffn_out);
        }
        macro_rules_attn!($out, "lr_cross", $($r)+ $s.lr_cross);
        macro_rules_linear!($out, "final_modulation", $($r)+ $s.final_modulation);
        macro_rules_linear!($out, "final_proj", $($r)+ $s.final_proj);
    }};
}

macro_rules! macro_rules_linear {
    ($out:ident, $name:expr, & mut $l:expr) => {{
        let l = &mut $l;
        $out.push((format!("{}.weight", $name), &mut l.weight));
        $out.push((format!("{}.bias", $name), &mut l.bias));
    }};
    ($out:ident, $name:expr, & $l:expr) => {{
        let l = &$l;
        $out.push((format!("{}.weight", $name), &l.weight));
        $out.push((format!("{}.bias", $name), &l.bias));
    }};
}

macro_rules! macro_rules_attn {
    ($out:ident, $name:expr, & mut $a:expr) => {{
        let a = &mut $a;
        let n = $name;
        macro_rules_linear!($out, format!("{n}.q"), &mut a.q);
        macro_rules_linear!($out, format!("{n}.k"), &mut a.k);
        macro_rules_linear!($out, format!("{n}.v"), &mut a.v);
        macro_rules_linear!($out, format!("{n}.o"), &mut a.o);
        $out.push((format!("{n}.q_norm.gain"), &mut a.q_norm.gain));
        $out.push((format!("{n}.q_norm.shift"), &mut a.q_norm.shift));
        $out.push((format!("{n}.k_norm.gain"), &mut a.k_norm.gain));
        $out.push((format!("{n}.k_norm.shift"), &mut a.k_norm.shift));
    }};
    ($out:ident, $name:expr, & $a:expr) => {{
        let a = &$a;
        let n = $name;
        macro_rules_linear!($out, format!("{n}.q"), &a.q);
        macro_rules_linear!($out, format!("{n}.k"), &a.k);
        macro_rules_linear!($out, format!("{n}.v"), &a.v);
        macro_rules_linear!($out, format!("{n}.o"), &a.o);
        $out.push((format!("{n}.q_norm.gain"), &a.q_norm.gain));
        $out.push((format!("{n}.q_norm.shift"), &a.q_norm.shift));
        $out.push((format!("{n}.k_norm.gain"), &a.k_norm.gain));
        $out.push((format!("{n}.k_norm.shift"), &a.k_norm.shift));
    }};
}

struct Seeds {
    master: u64,
    next: u64,
}

impl Seeds {
    fn next(&mut self) -> u64 {
        self.next += 1;
        derive_seed(self.master, self.next)
    }
}

impl<T: Scalar> AttnParams<T> {
    fn init(d: usize, head_dim: usize, eps: T, seeds: &mut Seeds) -> Self {
        Self {
            q: LinearParams::init(d, d, seeds.next()),
            k: LinearParams::init(d, d, seeds.next()),
            v: LinearParams::init(d, d, seeds.next()),
            o: LinearParams::init(d, d, seeds.next()),
            q_norm: LayerNormParams::new(head_dim, eps),
            k_norm: LayerNormParams::new(head_dim, eps),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Training initialization: scaled-normal projections, zero biases, zero
    /// modulation outputs (every residual branch starts gated off).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut seeds = Seeds { master: seed, next: 0 };
        let d = cfg.hidden;
        let eps = T::of(cfg.layernorm_eps);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                modulation: LinearParams::zeros(d, 6 * d),
                attn: AttnParams::init(d, cfg.head_dim, eps, &mut seeds),
                ffn_in: LinearParams::init(d, cfg.ffn_dim, seeds.next()),
                ffn_out: LinearParams::init(cfg.ffn_dim, d, seeds.next()),
            })
            .collect();
        let mut rel = || seeded_init(&[d], seeds_next(&mut seeds), InitScheme::Normal(0.02));
        let rel_pos = [rel(), rel(), rel(), rel()];
        Ok(Self {
            patch_embed: LinearParams::init(cfg.patch_in(), d, seeds.next()),
            lr_embed: LinearParams::init(cfg.patch_size * cfg.patch_size * 3, d, seeds.next()),
            time_in: LinearParams::init(d, d, seeds.next()),
            time_out: LinearParams::init(d, d, seeds.next()),
            semantic_proj: LinearParams::init(cfg.semantic_dim, d, seeds.next()),
            rel_pos,
            layers,
            lr_cross: AttnParams::init(d, cfg.head_dim, eps, &mut seeds),
            final_modulation: LinearParams::zeros(d, 2 * d),
            final_proj: LinearParams::init(d, cfg.patch_out(), seeds.next()),
        })
    }

    /// Every tensor (including modulation, biases and norm affines) drawn at
    /// random. Used to exercise all paths in oracle tests.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::init(cfg, seed)?;
        for (k, (name, t)) in p.tensors_mut().into_iter().enumerate() {
            let s = derive_seed(seed ^ 0x5EED, k as u64);
            let fan_in = if t.shape().len() == 2 { t.shape()[0] } else { 16 };
            let std = 1.0 / libm::sqrt(fan_in as f64);
            let noise: Tensor<T> = seeded_init(t.shape(), s, InitScheme::Normal(std));
            if name.ends_with(".gain") {
                let base = Tensor::filled(t.shape(), T::one());
                let scaled = noise.map(|v| v * T::of(0.5));
                *t = base;
                t.add_assign(&scaled).expect("same shape");
            } else if name.starts_with("rel_pos") || name.ends_with(".bias") || name.ends_with(".shift") {
                *t = noise.map(|v| v * T::of(0.5));
            } else {
                *t = noise;
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        walk!(self, out, iter, &);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        walk!(self, out, iter_mut, &mut);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Shapes implied by the config, in walk order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let p = Self::init(cfg, 0)?;
        Ok(p.tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect())
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::expected_shapes(cfg)?;
        let have = self.tensors();
        if want.len() != have.len() {
            return Err(shape_err!("expected {} tensors, found {}", want.len(), have.len()));
        }
        for ((wn, ws), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || ws.as_slice() != ht.shape() {
                return Err(shape_err!("{hn}: shape {:?}, expected {wn} {:?}", ht.shape(), ws));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let lin = |l: &LinearParams<T>| LinearParams {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let ln = |l: &LayerNormParams<T>| LayerNormParams {
            gain: l.gain.cast(),
            shift: l.shift.cast(),
            epsilon: U::of(l.epsilon.f64()),
        };
        let attn = |a: &AttnParams<T>| AttnParams {
            q: lin(&a.q),
            k: lin(&a.k),
            v: lin(&a.v),
            o: lin(&a.o),
            q_norm: ln(&a.q_norm),
            k_norm: ln(&a.k_norm),
        };
        ModelParams {
            patch_embed: lin(&self.patch_embed),
            lr_embed: lin(&self.lr_embed),
            time_in: lin(&self.time_in),
            time_out: lin(&self.time_out),
            semantic_proj: lin(&self.semantic_proj),
            rel_pos: [0, 1, 2, 3].map(|i| self.rel_pos[i].cast()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    modulation: lin(&l.modulation),
                    attn: attn(&l.attn),
                    ffn_in: lin(&l.ffn_in),
                    ffn_out: lin(&l.ffn_out),
                })
                .collect(),
            lr_cross: attn(&self.lr_cross),
            final_modulation: lin(&self.final_modulation),
            final_proj: lin(&self.final_proj),
        }
    }
}

fn seeds_next(s: &mut Seeds) -> u64 {
    s.next()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_gated() {
        let cfg = ModelConfig::toy();
        let a = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.modulation.weight.data().iter().all(|v| *v == 0.0)));
        a.validate(&cfg).unwrap();
    }

    #[test]
    fn names_unique_and_ordered() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let mut q = p.clone();
        let names_mut: Vec<String> = q.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&String::from("layers.3.attn.k_norm.gain")));
        assert!(names.contains(&String::from("rel_pos.4")));
    }

    #[test]
    fn validate_rejects_other_config() {
        let p = ModelParams::<f32>::init(&ModelConfig::toy(), 0).unwrap();
        let mut other = ModelConfig::toy();
        other.layers = 2;
        assert!(p.validate(&other).is_err());
    }
}
