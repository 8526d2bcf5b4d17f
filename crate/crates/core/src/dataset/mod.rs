//! Clip manifests, the synthetic clip corpus, frame sampling, and
//! augmentation.

mod augment;
mod manifest;
mod sampling;
mod synth;

pub use augment::{augment_pair, augment_view, AugmentConfig};
pub use manifest::{build_manifest, load_annotations, AnnotationFile, ClipEntry, ClipManifest, ManifestParams, NarrationRecord, VideoMeta, MANIFEST_VERSION};
pub use sampling::{sample_clip_frames, uniform_positions};
pub use synth::{shape_centroid_x, generate_synthetic_corpus, FrameStore, Motion, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies a raw frame: the clip and the frame's index in its source video.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub clip_id: String,
    pub frame_index: u32,
}

/// An `H×W×3` image (row-major HWC) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
    pub source: FrameRef,
}

impl FrameImage {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>, source: FrameRef) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if pixels.len() != h * w * 3 {
            return Err(Error::shape(format!("{h}x{w}x3 = {} values", h * w * 3), pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { h, w, pixels, source })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.pixels[(y * self.w + x) * 3 + ch]
    }

    /// Mean absolute per-pixel difference.
    pub fn mean_abs_diff(&self, other: &FrameImage) -> f32 {
        let n = self.pixels.len().max(1) as f32;
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).sum::<f32>() / n
    }
}
