use rand::Rng;

use super::AugmentationSpec;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const CROP_ATTEMPTS: usize = 10;

/// Crop window in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Area-and-aspect crop sampling with rejection; falls back to a centred
/// crop clamped to the aspect range after ten failed draws.
pub(crate) fn sample_crop(h: usize, w: usize, spec: &AugmentationSpec, rng: &mut impl Rng) -> Crop {
    let area = (h * w) as f64;
    let (s_lo, s_hi) = spec.crop_scale;
    let (r_lo, r_hi) = (spec.aspect_ratio.0.ln(), spec.aspect_ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * uniform(rng, s_lo, s_hi);
        let ratio = uniform(rng, r_lo, r_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return Crop {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < spec.aspect_ratio.0 {
        ((w as f64 / spec.aspect_ratio.0).round() as usize, w)
    } else if in_ratio > spec.aspect_ratio.1 {
        (h, (h as f64 * spec.aspect_ratio.1).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    Crop {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Bilinear resample of `crop` back to `out_h × out_w` with corner-aligned
/// sampling and clamp-to-edge.
pub(crate) fn crop_resize(
    img: &[f64],
    (c, h, w): (usize, usize, usize),
    crop: Crop,
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    let map = |o: usize, out: usize, len: usize, start: usize| -> (usize, usize, f64) {
        let pos = if out > 1 {
            o as f64 * (len - 1) as f64 / (out - 1) as f64
        } else {
            (len - 1) as f64 / 2.0
        };
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (start + i0, start + i1, pos - i0 as f64)
    };
    let _ = h;
    let mut out = vec![0.0; c * out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = map(y, out_h, crop.height, crop.top);
        for x in 0..out_w {
            let (x0, x1, fx) = map(x, out_w, crop.width, crop.left);
            for ch in 0..c {
                let px = |yy: usize, xx: usize| img[(ch * h + yy) * w + xx];
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                out[(ch * out_h + y) * out_w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn flip_horizontal(img: &mut [f64], (c, h, w): (usize, usize, usize)) {
    for ch in 0..c {
        for y in 0..h {
            img[(ch * h + y) * w..(ch * h + y + 1) * w].reverse();
        }
    }
}

fn luma(img: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let plane = h * w;
    if c == 3 {
        (0..plane)
            .map(|i| 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i])
            .collect()
    } else {
        (0..plane)
            .map(|i| (0..c).map(|ch| img[ch * plane + i]).sum::<f64>() / c as f64)
            .collect()
    }
}

fn grayscale(img: &mut [f64], dims: (usize, usize, usize)) {
    let gray = luma(img, dims);
    let plane = dims.1 * dims.2;
    for ch in 0..dims.0 {
        img[ch * plane..(ch + 1) * plane].copy_from_slice(&gray);
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation, then hue; factors drawn per call.
fn color_jitter(img: &mut [f64], dims: (usize, usize, usize), spec: &AugmentationSpec, rng: &mut impl Rng) {
    let [b, c, s, hue] = spec.jitter;
    let factor = |rng: &mut _, k: f64| uniform(rng, (1.0 - k).max(0.0), 1.0 + k);

    let fb = factor(rng, b);
    img.iter_mut().for_each(|v| *v *= fb);

    let fc = factor(rng, c);
    let gray = luma(img, dims);
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    img.iter_mut().for_each(|v| *v = (*v - mean) * fc + mean);

    let fs = factor(rng, s);
    let shift = uniform(rng, -hue, hue);
    if dims.0 != 3 {
        return;
    }
    let gray = luma(img, dims);
    let plane = dims.1 * dims.2;
    for i in 0..plane {
        for ch in 0..3 {
            let v = &mut img[ch * plane + i];
            *v = (*v - gray[i]) * fs + gray[i];
        }
    }
    if shift != 0.0 {
        for i in 0..plane {
            let (h, sat, val) = rgb_to_hsv(img[i], img[plane + i], img[2 * plane + i]);
            let (r, g, b) = hsv_to_rgb(h + shift, sat, val);
            img[i] = r;
            img[plane + i] = g;
            img[2 * plane + i] = b;
        }
    }
}

/// Crop-resize → flip → (jitter | grayscale), clamped to the input range.
pub fn augment_image(img: &Tensor, spec: &AugmentationSpec, rng: &mut impl Rng) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: "augment_image expects [C, H, W]".into(),
        });
    };
    if h < 4 || w < 4 {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: "images must be at least 4x4".into(),
        });
    }
    let dims = (c, h, w);
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));

    let crop = sample_crop(h, w, spec, rng);
    let mut out = crop_resize(img.data(), dims, crop, (h, w));
    if rng.random_bool(spec.flip_prob) {
        flip_horizontal(&mut out, dims);
    }
    if spec.jitter_enabled {
        let [jitter_w, gray_w] = spec.jitter_vs_gray_odds;
        if rng.random_bool(jitter_w / (jitter_w + gray_w)) {
            color_jitter(&mut out, dims, spec, rng);
        } else {
            grayscale(&mut out, dims);
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    Tensor::new([c, h, w], out)
}
