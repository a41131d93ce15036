//! Procedural image corpus in the class-folder layout.
//!
//! Each class has its own palette, shape family and texture so that a
//! class-disjoint split tests generalization to unseen content.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disc,
    Square,
    Ring,
    Stripe,
}

#[derive(Debug, Clone)]
struct ClassStyle {
    palette: [[f64; 3]; 3],
    shape: ShapeKind,
    texture_freq: f64,
    shapes: usize,
}

impl ClassStyle {
    fn sample(rng: &mut ChaCha8Rng, class: usize) -> Self {
        let mut palette = [[0.0; 3]; 3];
        for c in &mut palette {
            for v in c.iter_mut() {
                *v = rng.random_range(20.0..235.0);
            }
        }
        let shape = match class % 4 {
            0 => ShapeKind::Disc,
            1 => ShapeKind::Square,
            2 => ShapeKind::Ring,
            _ => ShapeKind::Stripe,
        };
        ClassStyle {
            palette,
            shape,
            texture_freq: rng.random_range(0.05..0.6),
            shapes: rng.random_range(1..5),
        }
    }
}

struct Placed {
    cx: f64,
    cy: f64,
    r: f64,
    angle: f64,
    color: [f64; 3],
}

fn inside(kind: ShapeKind, s: &Placed, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - s.cx, y - s.cy);
    let (c, sn) = (s.angle.cos(), s.angle.sin());
    let (u, v) = (c * dx + sn * dy, -sn * dx + c * dy);
    match kind {
        ShapeKind::Disc => u * u + v * v <= s.r * s.r,
        ShapeKind::Square => u.abs() <= s.r && v.abs() <= s.r,
        ShapeKind::Ring => {
            let d = (u * u + v * v).sqrt();
            d <= s.r && d >= 0.6 * s.r
        }
        ShapeKind::Stripe => v.abs() <= 0.3 * s.r,
    }
}

/// Renders one image of `style` at `size`x`size`.
fn render(style: &ClassStyle, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let sz = size as f64;
    let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3]| c.map(|v| v + rng.random_range(-25.0..25.0));
    let bg_a = jitter(rng, style.palette[0]);
    let bg_b = jitter(rng, style.palette[1]);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = rng.random_range(0.0..std::f64::consts::PI);
    let placed: Vec<Placed> = (0..style.shapes)
        .map(|_| Placed {
            cx: rng.random_range(0.0..sz),
            cy: rng.random_range(0.0..sz),
            r: rng.random_range(0.12..0.35) * sz,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            color: jitter(rng, style.palette[2]),
        })
        .collect();
    let noise = Normal::new(0.0, 6.0).expect("valid deviation");
    let freq = style.texture_freq * 32.0 / sz;

    RgbImage::from_fn(size as u32, size as u32, |px, py| {
        let mut acc = [0.0; 3];
        // 2x2 supersampling for anti-aliased edges.
        for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let (x, y) = (px as f64 + ox, py as f64 + oy);
            let t = 0.5 + 0.5 * ((x * dir.cos() + y * dir.sin()) * freq + phase).sin();
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = bg_a[k] * (1.0 - t) + bg_b[k] * t;
            }
            for s in &placed {
                if inside(style.shape, s, x, y) {
                    c = s.color;
                }
            }
            for k in 0..3 {
                acc[k] += c[k] / 4.0;
            }
        }
        Rgb(acc.map(|v| (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8))
    })
}

/// Writes `classes` folders of `per_class` PNGs under `root`.
pub fn generate_corpus(root: &Path, classes: usize, per_class: usize, size: usize, seed: u64) -> Result<()> {
    if classes < 2 || per_class == 0 || size == 0 {
        return Err(invalid("corpus needs at least two classes, one image per class and a positive size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in 0..classes {
        let style = ClassStyle::sample(&mut rng, class);
        let dir = root.join(format!("class_{class:03}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let img = render(&style, size, &mut rng);
            let path = dir.join(format!("{i:05}.png"));
            img.save(&path).map_err(|e| Error::Dataset {
                path: path.clone(),
                message: format!("cannot write image: {e}"),
            })?;
        }
    }
    Ok(())
}
