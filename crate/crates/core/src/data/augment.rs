//! Random rescale and crop, applied identically to every map of a sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::losses::IGNORE;
use crate::numerics::{resize_bilinear, NdArray};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            min_scale: 0.5,
            max_scale: 2.0,
        }
    }
}

fn resize_planes(data: &[f32], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let x = NdArray::from_vec([planes, h, w], data.to_vec()).expect("sample planes");
    resize_bilinear(&x, oh, ow).expect("positive size").into_data()
}

/// Nearest-neighbour resize of a label map (pixel-centre convention).
pub fn resize_labels(label: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = (((oy as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for ox in 0..ow {
            let sx = (((ox as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out.push(label[sy * w + sx]);
        }
    }
    out
}

/// Bilinear resize of both images and nearest resize of the label map.
pub fn resize_sample(s: &Sample, oh: usize, ow: usize) -> Sample {
    if (oh, ow) == (s.height, s.width) {
        return s.clone();
    }
    Sample {
        height: oh,
        width: ow,
        rgb: resize_planes(&s.rgb, 3, s.height, s.width, oh, ow),
        depth: resize_planes(&s.depth, 1, s.height, s.width, oh, ow),
        label: s.label.as_ref().map(|l| resize_labels(l, s.height, s.width, oh, ow)),
    }
}

/// Cut a `ch x cw` window at `(y0, x0)`; pixels outside the sample read 0
/// in the images and the ignore value in the labels.
pub fn crop(s: &Sample, y0: usize, x0: usize, ch: usize, cw: usize) -> Sample {
    let (h, w) = (s.height, s.width);
    let plane = |data: &[f32], planes: usize| {
        let mut out = vec![0f32; planes * ch * cw];
        for p in 0..planes {
            for y in 0..ch {
                let sy = y0 + y;
                if sy >= h {
                    break;
                }
                for x in 0..cw {
                    let sx = x0 + x;
                    if sx >= w {
                        break;
                    }
                    out[(p * ch + y) * cw + x] = data[(p * h + sy) * w + sx];
                }
            }
        }
        out
    };
    let label = s.label.as_ref().map(|l| {
        let mut out = vec![IGNORE; ch * cw];
        for y in 0..ch.min(h.saturating_sub(y0)) {
            for x in 0..cw.min(w.saturating_sub(x0)) {
                out[y * cw + x] = l[(y0 + y) * w + x0 + x];
            }
        }
        out
    });
    Sample {
        height: ch,
        width: cw,
        rgb: plane(&s.rgb, 3),
        depth: plane(&s.depth, 1),
        label,
    }
}

fn scaled_size(factor: f64, out_h: usize, out_w: usize) -> (usize, usize) {
    let side = |n: usize| ((n as f64 * factor).round() as usize).max(1);
    (side(out_h), side(out_w))
}

/// Rescale by `factor` relative to the model size, then crop a model-sized
/// window at `(y0, x0)` of the rescaled sample.
pub fn augment_with(s: &Sample, factor: f64, y0: usize, x0: usize, out_h: usize, out_w: usize) -> Sample {
    let (sh, sw) = scaled_size(factor, out_h, out_w);
    let scaled = resize_sample(s, sh, sw);
    crop(&scaled, y0, x0, out_h, out_w)
}

/// Random rescale in `[min_scale, max_scale]` and random crop to the model
/// size. Windows larger than the rescaled sample are padded bottom-right.
pub fn augment(s: &Sample, cfg: &AugmentConfig, out_h: usize, out_w: usize, rng: &mut impl Rng) -> Sample {
    if !cfg.enabled {
        return resize_sample(s, out_h, out_w);
    }
    let factor = if cfg.max_scale > cfg.min_scale {
        rng.gen_range(cfg.min_scale..=cfg.max_scale)
    } else {
        cfg.min_scale
    };
    let (sh, sw) = scaled_size(factor, out_h, out_w);
    let y0 = rng.gen_range(0..=sh.saturating_sub(out_h));
    let x0 = rng.gen_range(0..=sw.saturating_sub(out_w));
    augment_with(s, factor, y0, x0, out_h, out_w)
}
