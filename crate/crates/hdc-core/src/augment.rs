//! Multi-level input noise: weak geometric augmentation (teacher and
//! supervised inputs), strong intensity augmentation (unsupervised student
//! inputs), and feature-level F-noise for the noisy decoder.
//!
//! Images here are single-channel `H x W` grids in `[0, 1]`; replication
//! to three channels happens at batch assembly. Geometric transforms are
//! applied identically to image and mask (index remapping, so labels are
//! preserved exactly). Strong augmentation is intensity-only: the teacher
//! sees the weak view and the student the strong view of the *same*
//! geometry, which keeps the pixel consistency loss aligned without any
//! inverse warping.

use crate::error::Result;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Grayscale image with its spatial dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), h * w);
        Image { h, w, pixels }
    }

    pub fn constant(h: usize, w: usize, v: f32) -> Self {
        Image { h, w, pixels: vec![v; h * w] }
    }
}

/// Integer class mask aligned with an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub classes: Vec<u8>,
}

/// Record of the draws behind one augmentation, for reproducibility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub rot_quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
    pub transpose: bool,
    /// Strong-level intensity draws; all zero/false for weak specs.
    pub strength: f64,
    pub jitter_scale: f64,
    pub jitter_shift: f64,
    pub auto_contrast: bool,
    pub noise_std: f64,
}

impl AugmentSpec {
    fn weak(rot: u8, flip_h: bool, flip_v: bool, transpose: bool) -> Self {
        AugmentSpec {
            rot_quarter_turns: rot,
            flip_h,
            flip_v,
            transpose,
            strength: 0.0,
            jitter_scale: 1.0,
            jitter_shift: 0.0,
            auto_contrast: false,
            noise_std: 0.0,
        }
    }
}

fn remap<T: Copy>(src: &[T], h: usize, w: usize, spec: &AugmentSpec) -> (usize, usize, Vec<T>) {
    // Rotation first, then flips, then transpose. All are permutations of
    // pixel indices, so foreground counts are preserved exactly.
    let (mut ch, mut cw) = (h, w);
    let mut cur: Vec<T> = src.to_vec();
    for _ in 0..spec.rot_quarter_turns % 4 {
        // 90 degrees clockwise: out[y][x] = in[h-1-x][y]
        let (oh, ow) = (cw, ch);
        let mut next = cur.clone();
        for y in 0..oh {
            for x in 0..ow {
                next[y * ow + x] = cur[(ch - 1 - x) * cw + y];
            }
        }
        cur = next;
        ch = oh;
        cw = ow;
    }
    if spec.flip_h {
        for y in 0..ch {
            cur[y * cw..(y + 1) * cw].reverse();
        }
    }
    if spec.flip_v {
        for y in 0..ch / 2 {
            for x in 0..cw {
                cur.swap(y * cw + x, (ch - 1 - y) * cw + x);
            }
        }
    }
    if spec.transpose {
        let mut next = cur.clone();
        for y in 0..cw {
            for x in 0..ch {
                next[y * ch + x] = cur[x * cw + y];
            }
        }
        cur = next;
        std::mem::swap(&mut ch, &mut cw);
    }
    (ch, cw, cur)
}

/// Weak augmentation: a random draw of flips, quarter-turn rotation, and
/// transposition, applied identically to image and mask.
pub fn weak_augment(
    image: &Image,
    mask: Option<&Mask>,
    rng: &mut SeededRng,
) -> (Image, Option<Mask>, AugmentSpec) {
    let spec = AugmentSpec::weak(rng.below(4) as u8, rng.coin(), rng.coin(), rng.coin());
    let (out_img, out_mask) = apply_geometric(image, mask, &spec);
    (out_img, out_mask, spec)
}

/// Apply a fixed geometric spec (used by `weak_augment` and by tests that
/// need specific draws).
pub fn apply_geometric(image: &Image, mask: Option<&Mask>, spec: &AugmentSpec) -> (Image, Option<Mask>) {
    let (h, w, px) = remap(&image.pixels, image.h, image.w, spec);
    let out_img = Image { h, w, pixels: px };
    let out_mask = mask.map(|m| {
        let (mh, mw, classes) = remap(&m.classes, m.h, m.w, spec);
        Mask { h: mh, w: mw, classes }
    });
    (out_img, out_mask)
}

/// Strong augmentation: intensity-only transforms whose magnitudes all
/// scale with a per-image distortion strength `s ~ U[0,1]`. No pixels
/// move, so teacher and student predictions stay aligned.
pub fn strong_augment(image: &Image, rng: &mut SeededRng) -> (Image, AugmentSpec) {
    strong_augment_capped(image, 1.0, rng)
}

/// Strong augmentation with the random strength capped: `s ~ U[0, cap]`.
pub fn strong_augment_capped(image: &Image, cap: f64, rng: &mut SeededRng) -> (Image, AugmentSpec) {
    let s = cap.clamp(0.0, 1.0) * rng.uniform();
    strong_augment_with_strength(image, s, rng)
}

/// Strong augmentation at a fixed strength (exposed for tests).
pub fn strong_augment_with_strength(image: &Image, s: f64, rng: &mut SeededRng) -> (Image, AugmentSpec) {
    let scale = rng.uniform_in(1.0 - 0.4 * s, 1.0 + 0.4 * s);
    let shift = rng.uniform_in(-0.2 * s, 0.2 * s);
    let auto = rng.coin();
    let noise_std = 0.1 * s;

    let mut out = image.clone();
    // jitter: v <- scale*v + shift
    for v in &mut out.pixels {
        *v = (*v as f64 * scale + shift) as f32;
    }
    // auto-contrast, blended by s so zero strength is the identity
    if auto && s > 0.0 {
        let rescaled = auto_contrast(&out);
        for (v, r) in out.pixels.iter_mut().zip(&rescaled.pixels) {
            *v = (*v as f64 + s * (*r as f64 - *v as f64)) as f32;
        }
    }
    // additive gaussian noise
    if noise_std > 0.0 {
        for v in &mut out.pixels {
            *v = (*v as f64 + noise_std * rng.normal()) as f32;
        }
    }
    for v in &mut out.pixels {
        *v = v.clamp(0.0, 1.0);
    }
    let spec = AugmentSpec {
        rot_quarter_turns: 0,
        flip_h: false,
        flip_v: false,
        transpose: false,
        strength: s,
        jitter_scale: scale,
        jitter_shift: shift,
        auto_contrast: auto,
        noise_std,
    };
    (out, spec)
}

/// Linear rescale so min -> 0 and max -> 1 (identity for flat images).
pub fn auto_contrast(image: &Image) -> Image {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in &image.pixels {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return image.clone();
    }
    let inv = 1.0 / (hi - lo);
    Image {
        h: image.h,
        w: image.w,
        pixels: image.pixels.iter().map(|&v| (v - lo) * inv).collect(),
    }
}

/// Multiplicative uniform feature noise: returns `1 + N` with
/// `N ~ U(-gamma, gamma)` elementwise, to be multiplied onto encoder
/// features as a gradient-stopped constant.
pub fn f_noise_factors<T: Real>(shape: &[usize], gamma: f64, rng: &mut SeededRng) -> Result<Tensor<T>> {
    if gamma < 0.0 {
        return Err(crate::error::HdcError::contract(format!("f-noise gamma must be >= 0, got {gamma}")));
    }
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(1.0 + rng.uniform_in(-gamma, gamma))).collect();
    Tensor::new(shape.to_vec(), data)
}
