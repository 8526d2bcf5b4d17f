use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{build_manifest, ClipManifest, ManifestParams, NarrationRecord};
use super::{FrameImage, FrameRef};
use crate::error::{Error, Result};
use crate::render::{class_appearance, prop_appearance, Canvas};
use crate::seed;

/// Whether the class shape moves during a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    /// Temporally coherent clips: the shape travels left to right while
    /// approaching a static prop.
    #[default]
    Clips,
    /// Same scenes frozen at one instant; frame order carries no signal.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_clips: usize,
    pub n_classes: usize,
    pub fps: u32,
    pub duration_s: f64,
    pub downsample_factor: u32,
    pub image_hw: (usize, usize),
    pub motion: Motion,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 0, n_clips: 200, n_classes: 8, fps: 30, duration_s: 1.0, downsample_factor: 10, image_hw: (16, 16), motion: Motion::Clips }
    }
}

/// Decoded frames keyed by clip id; each vector is aligned with the clip's
/// `raw_frame_indices`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameStore {
    pub h: usize,
    pub w: usize,
    frames: BTreeMap<String, Vec<FrameImage>>,
}

impl FrameStore {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, frames: BTreeMap::new() }
    }

    pub fn insert_clip(&mut self, clip_id: String, frames: Vec<FrameImage>) {
        self.frames.insert(clip_id, frames);
    }

    pub fn clip_frames(&self, clip_id: &str) -> Result<&[FrameImage]> {
        self.frames
            .get(clip_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Sampling { clip_id: clip_id.to_string(), detail: "no frames in store".into() })
    }

    pub fn frame(&self, r: &FrameRef) -> Result<&FrameImage> {
        self.clip_frames(&r.clip_id)?
            .iter()
            .find(|f| f.source.frame_index == r.frame_index)
            .ok_or_else(|| Error::Sampling { clip_id: r.clip_id.clone(), detail: format!("frame {} missing", r.frame_index) })
    }

    pub fn num_clips(&self) -> usize {
        self.frames.len()
    }

    /// Write `manifest.json` plus `frames/<clip_id>/<frame_index>.png`.
    pub fn save(&self, dir: &Path, manifest: &ClipManifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        manifest.save(&dir.join("manifest.json"))?;
        for (clip_id, frames) in &self.frames {
            let cdir = dir.join("frames").join(clip_id);
            std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
            for f in frames {
                let bytes: Vec<u8> = f.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
                let img = RgbImage::from_raw(f.w as u32, f.h as u32, bytes).expect("buffer size");
                img.save(cdir.join(format!("{:06}.png", f.source.frame_index)))?;
            }
        }
        Ok(())
    }

    /// Load a corpus directory written by [`FrameStore::save`].
    pub fn load(dir: &Path) -> Result<(ClipManifest, FrameStore)> {
        let manifest = ClipManifest::load(&dir.join("manifest.json"))?;
        let mut store = FrameStore::new(0, 0);
        for clip in &manifest.clips {
            let cdir = dir.join("frames").join(&clip.clip_id);
            let mut frames = Vec::with_capacity(clip.raw_frame_indices.len());
            for &fi in &clip.raw_frame_indices {
                let path = cdir.join(format!("{fi:06}.png"));
                let img = image::open(&path)?.to_rgb8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                if store.h == 0 {
                    store.h = h;
                    store.w = w;
                } else if (h, w) != (store.h, store.w) {
                    return Err(Error::shape(format!("{}x{}", store.h, store.w), format!("{h}x{w} in {}", path.display())));
                }
                let pixels = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
                frames.push(FrameImage::new(h, w, pixels, FrameRef { clip_id: clip.clip_id.clone(), frame_index: fi })?);
            }
            store.insert_clip(clip.clip_id.clone(), frames);
        }
        Ok((manifest, store))
    }
}

/// Render a labelled clip corpus. Clip `i` shows the shape of class
/// `i mod n_classes` gliding rightwards (strictly increasing x) towards a
/// grey prop, so the class is visible in every frame and the temporal order
/// is visible in the shape position.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<(ClipManifest, FrameStore)> {
    let (h, w) = cfg.image_hw;
    if h == 0 || w == 0 {
        return Err(Error::invalid("image size must be non-zero"));
    }
    if cfg.n_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {}", cfg.n_classes)));
    }
    if cfg.n_clips == 0 {
        return Err(Error::invalid("need at least one clip"));
    }
    let params = ManifestParams { fps: cfg.fps, clip_duration_s: cfg.duration_s, downsample_factor: cfg.downsample_factor };
    let narrations: Vec<NarrationRecord> = (0..cfg.n_clips)
        .map(|i| NarrationRecord { video_id: format!("synth{i:05}"), timestamp_s: 0.0, text: String::new() })
        .collect();
    let durations = narrations.iter().map(|n| (n.video_id.clone(), cfg.duration_s)).collect();
    let mut manifest = build_manifest(&narrations, &durations, params)?;

    let mut store = FrameStore::new(h, w);
    for (i, clip) in manifest.clips.iter_mut().enumerate() {
        let class = i % cfg.n_classes;
        clip.label_hint = Some(class as u32);
        let mut rng = seed::rng(cfg.seed, &format!("synth-clip-{i}"));
        let bg_level: f32 = rng.gen_range(0.05..0.25);
        let bg = [
            bg_level + rng.gen_range(-0.04..0.04f32),
            bg_level + rng.gen_range(-0.04..0.04f32),
            bg_level + rng.gen_range(-0.04..0.04f32),
        ];
        let x0: f32 = rng.gen_range(0.17..0.27);
        let travel: f32 = rng.gen_range(0.36..0.42);
        let y0: f32 = rng.gen_range(0.22..0.78);
        let dy: f32 = rng.gen_range(-0.12..0.12);
        let bow: f32 = rng.gen_range(-0.05..0.05);
        let frozen_at: f32 = rng.gen_range(0.0..1.0);
        let app = class_appearance(class);
        let prop = prop_appearance();
        let path = |u: f32| (x0 + travel * u, (y0 + dy * u + bow * (std::f32::consts::PI * u).sin()).clamp(0.17, 0.83));
        let (ex, ey) = path(1.0);
        let n = clip.raw_frame_indices.len();
        let mut frames = Vec::with_capacity(n);
        for (t, &fi) in clip.raw_frame_indices.iter().enumerate() {
            let u = match cfg.motion {
                Motion::Clips if n > 1 => t as f32 / (n - 1) as f32,
                Motion::Clips => 0.0,
                Motion::Static => frozen_at,
            };
            let (x, y) = path(u);
            let mut canvas = Canvas::new(h, w, bg);
            canvas.draw(&prop, ex + 0.26, ey);
            canvas.draw(&app, x, y);
            let source = FrameRef { clip_id: clip.clip_id.clone(), frame_index: fi };
            frames.push(FrameImage::new(h, w, canvas.quantized(), source)?);
        }
        store.insert_clip(clip.clip_id.clone(), frames);
    }
    Ok((manifest, store))
}

/// Horizontal centroid (in pixels) of the shape painted in `color`.
///
/// Each pixel is decomposed as a blend of the background (per-channel
/// median) and `color`; pixels that are not such a blend (the prop) carry
/// no weight.
pub fn shape_centroid_x(f: &FrameImage, color: [f32; 3]) -> f64 {
    let median = |ch: usize| {
        let mut v: Vec<f32> = (0..f.h * f.w).map(|i| f.pixels[i * 3 + ch]).collect();
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    };
    let bg = [median(0), median(1), median(2)];
    let dir = [color[0] - bg[0], color[1] - bg[1], color[2] - bg[2]];
    let dd: f32 = dir.iter().map(|d| d * d).sum();
    let (mut sx, mut m) = (0.0f64, 0.0f64);
    for y in 0..f.h {
        for x in 0..f.w {
            let p = [f.at(y, x, 0) - bg[0], f.at(y, x, 1) - bg[1], f.at(y, x, 2) - bg[2]];
            let alpha = (p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2]) / dd;
            let resid: f32 = (0..3).map(|ch| (p[ch] - alpha * dir[ch]).powi(2)).sum::<f32>().sqrt();
            if resid < 0.03 {
                let a = alpha.clamp(0.0, 1.0) as f64;
                sx += a * x as f64;
                m += a;
            }
        }
    }
    sx / m.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, n_clips: usize) -> SynthConfig {
        SynthConfig { seed, n_clips, n_classes: 2, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_under_seed() {
        let (m1, s1) = generate_synthetic_corpus(&small(7, 4)).unwrap();
        let (m2, s2) = generate_synthetic_corpus(&small(7, 4)).unwrap();
        assert_eq!(m1.clips.len(), 4);
        assert!(m1.clips.iter().all(|c| matches!(c.label_hint, Some(0 | 1))));
        assert_eq!(m1.to_canonical_json().unwrap(), m2.to_canonical_json().unwrap());
        assert_eq!(s1, s2);
    }

    #[test]
    fn seeds_change_frames() {
        let (_, a) = generate_synthetic_corpus(&small(1, 3)).unwrap();
        let (m, b) = generate_synthetic_corpus(&small(2, 3)).unwrap();
        let differs = m.clips.iter().any(|c| a.clip_frames(&c.clip_id).unwrap() != b.clip_frames(&c.clip_id).unwrap());
        assert!(differs);
    }

    #[test]
    fn retained_frames_move_monotonically() {
        let (m, s) = generate_synthetic_corpus(&small(3, 1)).unwrap();
        let clip = &m.clips[0];
        assert_eq!(clip.retained_frame_indices.len(), 3);
        let color = class_appearance(clip.label_hint.unwrap() as usize).color;
        let xs: Vec<f64> = clip.retained_frame_indices.iter().map(|&fi| shape_centroid_x(s.frame(&FrameRef { clip_id: clip.clip_id.clone(), frame_index: fi }).unwrap(), color)).collect();
        assert!(xs.windows(2).all(|w| w[1] > w[0]), "{xs:?}");
    }

    #[test]
    fn every_clip_is_strictly_ordered_by_centroid() {
        let (m, s) = generate_synthetic_corpus(&SynthConfig { seed: 11, n_clips: 40, ..SynthConfig::default() }).unwrap();
        for clip in &m.clips {
            let color = class_appearance(clip.label_hint.unwrap() as usize).color;
            let xs: Vec<f64> = s.clip_frames(&clip.clip_id).unwrap().iter().map(|f| shape_centroid_x(f, color)).collect();
            assert!(xs.windows(2).all(|w| w[1] > w[0]), "{}: {xs:?}", clip.clip_id);
        }
    }

    #[test]
    fn static_variant_has_identical_frames_within_a_clip() {
        let cfg = SynthConfig { motion: Motion::Static, ..small(5, 2) };
        let (m, s) = generate_synthetic_corpus(&cfg).unwrap();
        let frames = s.clip_frames(&m.clips[0].clip_id).unwrap();
        assert!(frames.iter().all(|f| f.pixels == frames[0].pixels));
    }

    #[test]
    fn zero_size_images_are_rejected() {
        let cfg = SynthConfig { image_hw: (0, 16), ..small(1, 1) };
        assert!(generate_synthetic_corpus(&cfg).is_err());
        assert!(generate_synthetic_corpus(&SynthConfig { n_classes: 1, ..small(1, 1) }).is_err());
    }

    #[test]
    fn store_round_trips_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let (m, s) = generate_synthetic_corpus(&small(9, 2)).unwrap();
        s.save(dir.path(), &m).unwrap();
        let (m2, s2) = FrameStore::load(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(s, s2);
    }
}
