//! Seeded procedural textures: hard-edged checkerboards, stripes, rectangles
//! and discs in a few flat colors.

use rand::Rng as _;
use tiledit_core::imaging::Image;
use tiledit_core::rng::{derive_seed, rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Checker,
    Stripes,
    Rectangles,
    Discs,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [TextureKind::Checker, TextureKind::Stripes, TextureKind::Rectangles, TextureKind::Discs];
}

fn color(r: &mut Rng) -> [f64; 3] {
    [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()]
}

/// `lo..hi`, or the upper half of `0..hi` when `hi <= lo` (small images).
fn span(lo: f64, hi: f64) -> core::ops::Range<f64> {
    if hi > lo {
        lo..hi
    } else {
        hi / 2.0..hi
    }
}

/// A `size x size` texture fully determined by `seed`; `size >= 1`.
pub fn texture(seed: u64, size: usize) -> Image {
    let mut r = rng(seed);
    let kind = TextureKind::ALL[r.random_range(0..TextureKind::ALL.len())];
    texture_of_kind(kind, &mut r, size)
}

pub fn texture_of_kind(kind: TextureKind, r: &mut Rng, size: usize) -> Image {
    let a = color(r);
    let b = color(r);
    let s = size as f64;
    let paint = |f: &dyn Fn(f64, f64) -> [f64; 3]| {
        Image::from_fn(size, size, |y, x, c| f(y as f64 + 0.5, x as f64 + 0.5)[c]).expect("positive size")
    };
    match kind {
        TextureKind::Checker => {
            let period = r.random_range(span(8.0, s / 2.0));
            let (oy, ox) = (r.random_range(0.0..period), r.random_range(0.0..period));
            paint(&|y, x| {
                let k = ((y + oy) / period).floor() as i64 + ((x + ox) / period).floor() as i64;
                if k.rem_euclid(2) == 0 { a } else { b }
            })
        }
        TextureKind::Stripes => {
            let period = r.random_range(span(10.0, s / 2.0));
            let theta = r.random_range(0.0..core::f64::consts::PI);
            let duty = r.random_range(0.3..0.7);
            let phase = r.random_range(0.0..period);
            let (sn, cs) = theta.sin_cos();
            paint(&|y, x| {
                let t = ((x * cs + y * sn + phase) / period).rem_euclid(1.0);
                if t < duty { a } else { b }
            })
        }
        TextureKind::Rectangles => {
            let count = r.random_range(3..9);
            let rects: Vec<_> = (0..count)
                .map(|_| {
                    let h = r.random_range(span(8.0, s * 0.6));
                    let w = r.random_range(span(8.0, s * 0.6));
                    let top = r.random_range(-h / 2.0..s - h / 2.0);
                    let left = r.random_range(-w / 2.0..s - w / 2.0);
                    (top, left, h, w, color(r))
                })
                .collect();
            paint(&|y, x| {
                rects
                    .iter()
                    .rev()
                    .find(|&&(t, l, h, w, _)| y >= t && y < t + h && x >= l && x < l + w)
                    .map_or(a, |q| q.4)
            })
        }
        TextureKind::Discs => {
            let count = r.random_range(3..8);
            let discs: Vec<_> = (0..count)
                .map(|_| {
                    let rad = r.random_range(span(5.0, s * 0.3));
                    (r.random_range(0.0..s), r.random_range(0.0..s), rad, color(r))
                })
                .collect();
            paint(&|y, x| {
                discs
                    .iter()
                    .rev()
                    .find(|&&(cy, cx, rad, _)| (y - cy).powi(2) + (x - cx).powi(2) < rad * rad)
                    .map_or(a, |d| d.3)
            })
        }
    }
}

/// `count` textures from independent child seeds of `master`.
pub fn texture_set(master: u64, count: usize, size: usize) -> Vec<Image> {
    (0..count).map(|i| texture(derive_seed(master, i as u64), size)).collect()
}
