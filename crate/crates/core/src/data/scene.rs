//! Procedural RGB-D scenes whose classes need both modalities to separate.
//!
//! Classes 1 and 2 share a colour and differ only in depth; classes 3 and 4
//! share a depth band and differ only in colour. Further classes get their
//! own colour and band.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            num_classes: 5,
            min_shapes: 3,
            max_shapes: 6,
            noise_sigma: 0.05,
        }
    }
}

pub const BACKGROUND_COLOR: [f32; 3] = [0.5, 0.5, 0.5];
pub const BACKGROUND_DEPTH: f32 = 1.0;

const EXTRA_COLORS: [[f32; 3]; 4] = [
    [0.9, 0.8, 0.1],
    [0.6, 0.1, 0.7],
    [0.1, 0.8, 0.8],
    [0.9, 0.5, 0.1],
];

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 3 || self.num_classes > 9 {
            return Err(Error::Config(format!(
                "scene num_classes must be in 3..=9, got {}",
                self.num_classes
            )));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("scene size must be at least 4x4".into()));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes exceeds max_shapes".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Render colour of a shape class (class 0 is the background).
    pub fn class_color(&self, class: usize) -> [f32; 3] {
        match class {
            0 => BACKGROUND_COLOR,
            1 | 2 => [0.85, 0.2, 0.2],
            3 => [0.2, 0.75, 0.2],
            4 => [0.2, 0.3, 0.9],
            k => EXTRA_COLORS[(k - 5) % EXTRA_COLORS.len()],
        }
    }

    /// Depth band `[lo, hi]` of a shape class.
    pub fn depth_band(&self, class: usize) -> (f32, f32) {
        match class {
            0 => (BACKGROUND_DEPTH, BACKGROUND_DEPTH),
            1 => (0.2, 0.4),
            2 => (0.6, 0.8),
            3 | 4 => (0.45, 0.55),
            k => {
                let lo = 0.05 + 0.03 * (k - 5) as f32;
                (lo, lo + 0.1)
            }
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| match c {
                0 => "background".to_string(),
                c => format!("shape{c}"),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Circle { cy: f32, cx: f32, r: f32 },
}

impl Geometry {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Geometry::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Geometry::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub class: usize,
    pub depth: f32,
    pub geometry: Geometry,
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// The shapes of scene `index`, before rendering.
pub fn sample_shapes(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<Shape> {
    let (h, w) = (spec.height as f32, spec.width as f32);
    let n = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    (0..n)
        .map(|_| {
            let class = rng.gen_range(1..spec.num_classes);
            let (lo, hi) = spec.depth_band(class);
            let depth = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let geometry = if rng.gen_bool(0.5) {
                let sh = rng.gen_range(h / 8.0..h / 3.0);
                let sw = rng.gen_range(w / 8.0..w / 3.0);
                let y0 = rng.gen_range(-sh / 2.0..h - sh / 2.0);
                let x0 = rng.gen_range(-sw / 2.0..w - sw / 2.0);
                Geometry::Rect {
                    y0,
                    x0,
                    y1: y0 + sh,
                    x1: x0 + sw,
                }
            } else {
                let r = rng.gen_range(h.min(w) / 16.0..h.min(w) / 6.0);
                Geometry::Circle {
                    cy: rng.gen_range(0.0..h),
                    cx: rng.gen_range(0.0..w),
                    r,
                }
            };
            Shape {
                class,
                depth,
                geometry,
            }
        })
        .collect()
}

/// Paint shapes far to near, then add Gaussian noise (if `noise` is given)
/// to colour and depth and clamp to `[0, 1]`.
pub fn render(spec: &SceneSpec, shapes: &[Shape], noise: Option<&mut ChaCha8Rng>) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let mut label = vec![0u8; h * w];
    let mut depth = vec![BACKGROUND_DEPTH; h * w];
    let mut order: Vec<&Shape> = shapes.iter().collect();
    order.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for s in order {
        for y in 0..h {
            for x in 0..w {
                if s.geometry.contains(y as f32 + 0.5, x as f32 + 0.5) {
                    label[y * w + x] = s.class as u8;
                    depth[y * w + x] = s.depth;
                }
            }
        }
    }
    let mut rgb = vec![0f32; 3 * h * w];
    for (p, &l) in label.iter().enumerate() {
        let c = spec.class_color(l as usize);
        for k in 0..3 {
            rgb[k * h * w + p] = c[k];
        }
    }
    if let Some(rng) = noise {
        if spec.noise_sigma > 0.0 {
            let n = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
            for v in rgb.iter_mut().chain(depth.iter_mut()) {
                *v = (*v + n.sample(rng) as f32).clamp(0.0, 1.0);
            }
        }
    }
    Sample {
        height: h,
        width: w,
        rgb,
        depth,
        label: Some(label),
    }
}

/// Scene `index` of the benchmark generated from `seed`. A pure function of
/// its arguments.
pub fn generate_scene(spec: &SceneSpec, seed: u64, index: u64) -> Sample {
    let mut rng = scene_rng(seed, index);
    let shapes = sample_shapes(spec, &mut rng);
    render(spec, &shapes, Some(&mut rng))
}

/// The shapes `generate_scene` would place, without rendering.
pub fn scene_shapes(spec: &SceneSpec, seed: u64, index: u64) -> Vec<Shape> {
    sample_shapes(spec, &mut scene_rng(seed, index))
}
