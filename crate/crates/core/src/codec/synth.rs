//! Procedural images with the statistics that matter for the codec: smooth
//! shading, object edges, texture and sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::pyramid::Image;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinearly interpolated lattice noise with period `cell` pixels.
struct ValueNoise {
    cell: f64,
    cols: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(w: usize, h: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let cols = (w as f64 / cell) as usize + 2;
        let rows = (h as f64 / cell) as usize + 2;
        ValueNoise {
            cell,
            cols,
            grid: (0..cols * rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx as usize, gy as usize);
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        // smoothstep weights hide the lattice
        let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
        let g = |c: usize, r: usize| self.grid[r * self.cols + c];
        lerp(
            lerp(g(ix, iy), g(ix + 1, iy), sx),
            lerp(g(ix, iy + 1), g(ix + 1, iy + 1), sx),
            sy,
        )
    }
}

enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // correlated channels, like most real scenes
    let base: f64 = rng.gen_range(20.0..235.0);
    std::array::from_fn(|_| (base + rng.gen_range(-50.0..50.0)).clamp(0.0, 255.0))
}

/// One `w × h` synthetic photograph, fully determined by `seed`.
pub fn natural_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (w as f64, h as f64);
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let span = (wf * dx.abs() + hf * dy.abs()).max(1.0);
    let texture = ValueNoise::new(w, h, rng.gen_range(4.0..16.0), &mut rng);
    let tex_amp = rng.gen_range(0.0..25.0);
    let shade = ValueNoise::new(w, h, rng.gen_range(16.0..48.0), &mut rng);
    let shapes: Vec<(Shape, [f64; 3], f64)> = (0..rng.gen_range(0..6))
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                Shape::Disc {
                    cx: rng.gen_range(0.0..wf),
                    cy: rng.gen_range(0.0..hf),
                    r: rng.gen_range(2.0..(wf.max(hf) / 3.0).max(3.0)),
                }
            } else {
                let (x, y) = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
                Shape::Rect {
                    x0: x,
                    y0: y,
                    x1: x + rng.gen_range(2.0..wf.max(3.0)),
                    y1: y + rng.gen_range(2.0..hf.max(3.0)),
                }
            };
            (shape, color(&mut rng), rng.gen_range(0.0..0.6))
        })
        .collect();
    let noise = Normal::new(0.0, rng.gen_range(0.5..4.0)).unwrap();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = ((xf * dx + yf * dy) / span + 0.5).clamp(0.0, 1.0);
            let mut px: [f64; 3] = std::array::from_fn(|c| lerp(c0[c], c1[c], t));
            for (shape, col, grad) in &shapes {
                if shape.contains(xf, yf) {
                    let g = 1.0 - grad * (yf / hf);
                    px = std::array::from_fn(|c| col[c] * g);
                }
            }
            let tex = tex_amp * texture.at(xf, yf);
            let light = 1.0 + 0.15 * shade.at(xf, yf);
            for v in px {
                let s = v * light + tex + noise.sample(&mut rng);
                data.push(s.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(w, h, data).expect("dimensions are positive")
}

/// Uniformly random subpixels.
pub fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).expect("dimensions are positive")
}

/// `n` natural images of one size, seeds `seed..seed + n`.
pub fn natural_corpus(n: usize, w: usize, h: usize, seed: u64) -> Vec<Image> {
    (0..n as u64)
        .map(|i| natural_image(w, h, seed.wrapping_add(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = natural_image(32, 24, 5);
        assert_eq!(a, natural_image(32, 24, 5));
        assert_ne!(a, natural_image(32, 24, 6));
        assert_eq!((a.width(), a.height()), (32, 24));
        assert_eq!(random_image(3, 2, 1).data().len(), 18);
    }

    #[test]
    fn neighbours_are_correlated() {
        // mean absolute horizontal difference far below that of noise (≈85)
        let img = natural_image(64, 64, 11);
        let mut diff = 0.0;
        for r in 0..64 {
            for c in 1..64 {
                diff += (img.get(r, c, 1) as f64 - img.get(r, c - 1, 1) as f64).abs();
            }
        }
        assert!(diff / (64.0 * 63.0) < 20.0);
    }
}
