//! Procedural toy images: flat-colored shapes with antialiased edges over a
//! smooth background. Used for smoke training where no real dataset exists.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::{quantize_u8, save_png, Image, ImageError};

const SUPERSAMPLE: usize = 4;

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    HalfPlane { ny: f64, nx: f64, d: f64 },
    Ring { cy: f64, cx: f64, r0: f64, r1: f64 },
    Stripes { ny: f64, nx: f64, period: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Self {
        let s = h.min(w);
        match rng.gen_range(0..5) {
            0 => Shape::Disc {
                cy: rng.gen_range(0.0..h),
                cx: rng.gen_range(0.0..w),
                r: rng.gen_range(0.05..0.3) * s,
            },
            1 => {
                let (y, x) = (rng.gen_range(0.0..h), rng.gen_range(0.0..w));
                let (dy, dx) = (rng.gen_range(0.1..0.5) * h, rng.gen_range(0.1..0.5) * w);
                Shape::Rect {
                    y0: y,
                    x0: x,
                    y1: y + dy,
                    x1: x + dx,
                }
            }
            2 => {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                Shape::HalfPlane {
                    ny: a.sin(),
                    nx: a.cos(),
                    d: rng.gen_range(0.2..0.8) * s,
                }
            }
            3 => {
                let r0 = rng.gen_range(0.08..0.25) * s;
                Shape::Ring {
                    cy: rng.gen_range(0.0..h),
                    cx: rng.gen_range(0.0..w),
                    r0,
                    r1: r0 + rng.gen_range(0.03..0.1) * s,
                }
            }
            _ => {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                Shape::Stripes {
                    ny: a.sin(),
                    nx: a.cos(),
                    period: rng.gen_range(6.0..16.0),
                }
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::HalfPlane { ny, nx, d } => ny * y + nx * x > d,
            Shape::Ring { cy, cx, r0, r1 } => {
                let q = (y - cy).powi(2) + (x - cx).powi(2);
                q >= r0 * r0 && q <= r1 * r1
            }
            Shape::Stripes { ny, nx, period } => ((ny * y + nx * x) / period).rem_euclid(1.0) < 0.5,
        }
    }
}

/// A deterministic `h × w` RGB toy image for `seed`.
pub fn toy_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let tilt: [f64; 3] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let n_shapes = rng.gen_range(4..9);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n_shapes)
        .map(|_| (Shape::random(&mut rng, hf, wf), [rng.gen(), rng.gen(), rng.gen()]))
        .collect();

    let mut px = vec![0.0; h * w * 3];
    let ss = SUPERSAMPLE as f64;
    for i in 0..h {
        for j in 0..w {
            let mut acc = [0.0; 3];
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let y = i as f64 + (a as f64 + 0.5) / ss;
                    let x = j as f64 + (b as f64 + 0.5) / ss;
                    let t = (y / hf + x / wf) * 0.5;
                    let mut c = [0.0; 3];
                    for k in 0..3 {
                        c[k] = (base[k] + tilt[k] * (t - 0.5)).clamp(0.0, 1.0);
                    }
                    // later shapes paint over earlier ones
                    for (s, col) in &shapes {
                        if s.contains(y, x) {
                            c = *col;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for k in 0..3 {
                px[(i * w + j) * 3 + k] = acc[k] / n;
            }
        }
    }
    Image::new(h, w, 3, px).expect("toy geometry")
}

/// Toy images for seeds `first_seed..first_seed + count`, quantized to 8 bits
/// exactly as a PNG round trip would, named like [`write_toy_dataset`] files.
pub fn toy_set(first_seed: u64, count: usize, size: usize) -> Vec<(String, Image)> {
    (0..count)
        .map(|k| {
            let img = toy_image(first_seed.wrapping_add(k as u64), size, size);
            let px = img.pixels().iter().map(|&v| quantize_u8(v) as f64 / 255.0).collect();
            (format!("toy_{k:03}.png"), Image::new(size, size, 3, px).expect("toy geometry"))
        })
        .collect()
}

/// Writes `count` toy PNGs named `toy_000.png`, ... into `dir`; loading them
/// gives `toy_set(seed · 1000003, count, size)`.
pub fn write_toy_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<(), ImageError> {
    std::fs::create_dir_all(dir).map_err(|source| ImageError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for k in 0..count {
        let img = toy_image(seed.wrapping_mul(1_000_003).wrapping_add(k as u64), size, size);
        save_png(&img, dir.join(format!("toy_{k:03}.png")))?;
    }
    Ok(())
}
