use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FrameImage;
use crate::error::Result;
use crate::seed;

/// Contrastive view augmentation: random resized crop, horizontal flip,
/// colour jitter, random greyscale, optional blur. Defaults are scaled down
/// from the usual ImageNet recipe to suit 16×16 frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image.
    pub crop_scale: (f32, f32),
    pub crop_ratio: (f32, f32),
    pub flip_prob: f32,
    pub jitter_prob: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale_prob: f32,
    pub blur_prob: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            crop_ratio: (0.75, 1.333),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            blur_prob: 0.2,
        }
    }
}

/// Two independently augmented views of `image`; identical for identical
/// `(image, seed)`.
pub fn augment_pair(image: &FrameImage, seed: u64, cfg: &AugmentConfig) -> Result<(FrameImage, FrameImage)> {
    let mut rng = seed::rng(seed, "augment-pair");
    let a = augment_view(image, &mut rng, cfg)?;
    let b = augment_view(image, &mut rng, cfg)?;
    Ok((a, b))
}

pub fn augment_view(image: &FrameImage, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Result<FrameImage> {
    let (h, w) = (image.h, image.w);
    let mut px = resized_crop(image, rng, cfg);
    if rng.gen::<f32>() < cfg.flip_prob {
        for y in 0..h {
            for x in 0..w / 2 {
                for ch in 0..3 {
                    px.swap((y * w + x) * 3 + ch, (y * w + (w - 1 - x)) * 3 + ch);
                }
            }
        }
    }
    if rng.gen::<f32>() < cfg.jitter_prob {
        let b = 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness);
        let c = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast);
        let s = 1.0 + rng.gen_range(-cfg.saturation..=cfg.saturation);
        px.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
        let mean = px.chunks(3).map(luma).sum::<f32>() / (h * w) as f32;
        px.iter_mut().for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
        for p in px.chunks_mut(3) {
            let g = luma(p);
            p.iter_mut().for_each(|v| *v = ((*v - g) * s + g).clamp(0.0, 1.0));
        }
    }
    if rng.gen::<f32>() < cfg.grayscale_prob {
        for p in px.chunks_mut(3) {
            let g = luma(p);
            p.iter_mut().for_each(|v| *v = g);
        }
    }
    if rng.gen::<f32>() < cfg.blur_prob {
        let sigma: f32 = rng.gen_range(0.1..1.0);
        px = blur3(&px, h, w, sigma);
    }
    FrameImage::new(h, w, px, image.source.clone())
}

fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn resized_crop(image: &FrameImage, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Vec<f32> {
    let (h, w) = (image.h as f32, image.w as f32);
    let area: f32 = rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
    let log_ratio = rng.gen_range(cfg.crop_ratio.0.ln()..=cfg.crop_ratio.1.ln());
    let ratio = log_ratio.exp();
    let cw = ((area * ratio).sqrt() * w).clamp(1.0, w);
    let ch = ((area / ratio).sqrt() * h).clamp(1.0, h);
    let x0 = rng.gen_range(0.0..=(w - cw));
    let y0 = rng.gen_range(0.0..=(h - ch));
    let mut out = vec![0.0; image.pixels.len()];
    for y in 0..image.h {
        let sy = (y0 + (y as f32 + 0.5) * ch / h - 0.5).clamp(0.0, h - 1.0);
        let (y_lo, fy) = (sy.floor() as usize, sy.fract());
        let y_hi = (y_lo + 1).min(image.h - 1);
        for x in 0..image.w {
            let sx = (x0 + (x as f32 + 0.5) * cw / w - 0.5).clamp(0.0, w - 1.0);
            let (x_lo, fx) = (sx.floor() as usize, sx.fract());
            let x_hi = (x_lo + 1).min(image.w - 1);
            for c in 0..3 {
                let top = image.at(y_lo, x_lo, c) * (1.0 - fx) + image.at(y_lo, x_hi, c) * fx;
                let bot = image.at(y_hi, x_lo, c) * (1.0 - fx) + image.at(y_hi, x_hi, c) * fx;
                out[(y * image.w + x) * 3 + c] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn blur3(px: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let k1 = (-1.0 / (2.0 * sigma * sigma)).exp();
    let kernel = [k1, 1.0, k1];
    let norm: f32 = kernel.iter().sum();
    let pass = |src: &[f32], horizontal: bool| {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (t, &kv) in kernel.iter().enumerate() {
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + t as isize - 1).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + t as isize - 1).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += kv * src[(yy * w + xx) * 3 + c];
                    }
                    dst[(y * w + x) * 3 + c] = (acc / norm).clamp(0.0, 1.0);
                }
            }
        }
        dst
    };
    pass(&pass(px, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_corpus, SynthConfig};

    fn frame() -> FrameImage {
        let (m, s) = generate_synthetic_corpus(&SynthConfig { n_clips: 1, ..SynthConfig::default() }).unwrap();
        s.clip_frames(&m.clips[0].clip_id).unwrap()[0].clone()
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let f = frame();
        let cfg = AugmentConfig::default();
        let (a1, b1) = augment_pair(&f, 42, &cfg).unwrap();
        let (a2, b2) = augment_pair(&f, 42, &cfg).unwrap();
        assert_eq!((&a1, &b1), (&a2, &b2));
        for v in [&a1, &b1] {
            assert_eq!((v.h, v.w, v.pixels.len()), (f.h, f.w, f.h * f.w * 3));
        }
    }

    #[test]
    fn views_differ_on_average() {
        let f = frame();
        let cfg = AugmentConfig::default();
        let mean: f32 = (0..100u64).map(|s| {
            let (a, b) = augment_pair(&f, s, &cfg).unwrap();
            a.mean_abs_diff(&b)
        }).sum::<f32>() / 100.0;
        assert!(mean > 0.0);
    }
}
