//! Procedural RGB-D scenes: a small room (back wall and receding floor) with
//! a few textured objects in front of it. Used to make the bundled fixtures
//! and test inputs when no real RGB-D data is at hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A clean image and its depth map, normalized so 0 is nearest and 1 farthest.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor,
    pub depth: Tensor,
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Disc,
}

struct Object {
    shape: Shape,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    depth: f64,
    color: [f64; 3],
    stripes: f64,
}

fn random_color(rng: &mut ChaCha8Rng, saturated: bool) -> [f64; 3] {
    let mut c = [0.0f64; 3];
    for v in &mut c {
        *v = if saturated {
            rng.random_range(0.05..1.0)
        } else {
            rng.random_range(0.45..0.9)
        };
    }
    if saturated {
        // Push one channel up and another down so objects carry real hue.
        let hi = rng.random_range(0..3);
        let lo = (hi + rng.random_range(1..3)) % 3;
        c[hi] = c[hi].max(0.8);
        c[lo] = c[lo].min(0.25);
    }
    c
}

/// Generates a `height × width` scene from `seed`.
pub fn generate(seed: u64, height: usize, width: usize) -> Result<Scene> {
    if height < 2 || width < 2 {
        return Err(Error::Config(format!(
            "scene must be at least 2x2, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(0.35..0.6);
    let wall = random_color(&mut rng, false);
    let floor = random_color(&mut rng, false);
    let wall_freq = rng.random_range(2.0..6.0);
    let checker = rng.random_range(4.0..10.0);
    let count = rng.random_range(3..=6);
    let mut objects: Vec<Object> = (0..count)
        .map(|_| Object {
            shape: if rng.random_bool(0.5) { Shape::Rect } else { Shape::Disc },
            cy: rng.random_range(0.2..0.9),
            cx: rng.random_range(0.1..0.9),
            ry: rng.random_range(0.08..0.25),
            rx: rng.random_range(0.08..0.25),
            depth: rng.random_range(0.05..0.75),
            color: random_color(&mut rng, true),
            stripes: if rng.random_bool(0.4) { rng.random_range(3.0..9.0) } else { 0.0 },
        })
        .collect();
    // Far objects first so nearer ones overwrite them.
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut image = Tensor::zeros(height, width, 3);
    let mut depth = Tensor::zeros(height, width, 1);
    let noise_seed = rng.random::<u64>();
    for y in 0..height {
        for x in 0..width {
            let v = y as f64 / (height - 1) as f64;
            let u = x as f64 / (width - 1) as f64;
            let (mut color, mut d) = if v < horizon {
                let shade = 0.85 + 0.15 * (u * wall_freq * std::f64::consts::PI).sin();
                (wall.map(|c| c * shade), 1.0)
            } else {
                // Floor recedes from the bottom edge (near) to the horizon (far).
                let t = (v - horizon) / (1.0 - horizon);
                let cell = ((u * checker).floor() + (t.sqrt() * checker).floor()) as i64;
                let shade = if cell % 2 == 0 { 1.0 } else { 0.7 };
                (floor.map(|c| c * shade * (0.75 + 0.25 * t)), 1.0 - 0.95 * t)
            };
            for o in &objects {
                let dy = (v - o.cy) / o.ry;
                let dx = (u - o.cx) / o.rx;
                let inside = match o.shape {
                    Shape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    Shape::Disc => dy * dy + dx * dx <= 1.0,
                };
                if inside && o.depth < d {
                    let light = 1.0 - 0.35 * (dy + 1.0) / 2.0;
                    let band = if o.stripes > 0.0 && (u * o.stripes * 4.0).floor() as i64 % 2 == 0 {
                        0.8
                    } else {
                        1.0
                    };
                    color = o.color.map(|c| c * light * band);
                    d = o.depth + 0.05 * (dx * dx + dy * dy).min(1.0);
                }
            }
            // Fixed-pattern grain so flat regions are not perfectly flat.
            let mut h = noise_seed ^ ((y as u64) << 32 | x as u64);
            h = (h ^ (h >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
            h ^= h >> 33;
            let grain = ((h >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.04;
            for (c, value) in color.iter().enumerate() {
                image.set(y, x, c, (value + grain).clamp(0.0, 1.0));
            }
            depth.set(y, x, 0, d.clamp(0.0, 1.0));
        }
    }
    Ok(Scene { image, depth })
}

/// Squeezes every channel into `[center − span/2, center + span/2]`.
pub fn low_contrast(image: &Tensor, center: f64, span: f64) -> Result<Tensor> {
    if !(span > 0.0 && center - span / 2.0 >= 0.0 && center + span / 2.0 <= 1.0) {
        return Err(Error::Domain(format!(
            "range {center} ± {} leaves [0, 1]",
            span / 2.0
        )));
    }
    Ok(image.map(|v| center - span / 2.0 + span * v.clamp(0.0, 1.0)))
}
