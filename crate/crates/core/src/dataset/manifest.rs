use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::canon::canonical_json;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarrationRecord {
    pub video_id: String,
    pub timestamp_s: f64,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub video_id: String,
    pub duration_s: f64,
}

/// External narration file: video durations plus timestamped narrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    #[serde(default)]
    pub videos: Vec<VideoMeta>,
    pub narrations: Vec<NarrationRecord>,
}

pub fn load_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestParams {
    pub fps: u32,
    pub clip_duration_s: f64,
    pub downsample_factor: u32,
}

impl Default for ManifestParams {
    fn default() -> Self {
        Self { fps: 30, clip_duration_s: 1.0, downsample_factor: 10 }
    }
}

impl ManifestParams {
    pub fn raw_frames_per_clip(&self) -> usize {
        (self.fps as f64 * self.clip_duration_s + 1e-9).floor() as usize
    }

    pub fn retained_frames_per_clip(&self) -> usize {
        self.raw_frames_per_clip() / self.downsample_factor as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub clip_id: String,
    pub video_id: String,
    pub raw_frame_indices: Vec<u32>,
    pub retained_frame_indices: Vec<u32>,
    pub label_hint: Option<u32>,
}

impl ClipEntry {
    /// Position of `frame_index` within `raw_frame_indices`.
    pub fn raw_position(&self, frame_index: u32) -> Option<usize> {
        self.raw_frame_indices.binary_search(&frame_index).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub version: u32,
    pub fps: u32,
    pub clip_duration_s: f64,
    pub downsample_factor: u32,
    pub clips: Vec<ClipEntry>,
    /// Narrations dropped because their clip would run past the video end.
    #[serde(default)]
    pub skipped_out_of_bounds: usize,
}

impl ClipManifest {
    pub fn empty(params: ManifestParams) -> Self {
        Self {
            version: MANIFEST_VERSION,
            fps: params.fps,
            clip_duration_s: params.clip_duration_s,
            downsample_factor: params.downsample_factor,
            clips: Vec::new(),
            skipped_out_of_bounds: 0,
        }
    }

    pub fn params(&self) -> ManifestParams {
        ManifestParams { fps: self.fps, clip_duration_s: self.clip_duration_s, downsample_factor: self.downsample_factor }
    }

    pub fn total_retained_frames(&self) -> usize {
        self.clips.iter().map(|c| c.retained_frame_indices.len()).sum()
    }

    pub fn clip(&self, clip_id: &str) -> Option<&ClipEntry> {
        self.clips.iter().find(|c| c.clip_id == clip_id)
    }

    /// Split clips into `(kept, held_out)`, holding out every `k`-th clip.
    pub fn split_every(&self, k: usize) -> (ClipManifest, ClipManifest) {
        let mut kept = ClipManifest { clips: Vec::new(), ..self.clone() };
        let mut held = kept.clone();
        for (i, c) in self.clips.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                held.clips.push(c.clone());
            } else {
                kept.clips.push(c.clone());
            }
        }
        (kept, held)
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ClipManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!("manifest version {} (expected {MANIFEST_VERSION})", m.version)));
        }
        Ok(m)
    }
}

/// Cut one clip of `clip_duration_s` per narration, starting at the
/// narration timestamp, then keep every `downsample_factor`-th raw frame
/// starting from the first.
///
/// `durations` maps video ids to their length in seconds; clips running past
/// a known video end are skipped and counted in `skipped_out_of_bounds`.
pub fn build_manifest(narrations: &[NarrationRecord], durations: &BTreeMap<String, f64>, params: ManifestParams) -> Result<ClipManifest> {
    if params.fps == 0 {
        return Err(Error::invalid("fps must be positive"));
    }
    if params.downsample_factor == 0 {
        return Err(Error::invalid("downsample factor must be positive"));
    }
    if !(params.clip_duration_s > 0.0) {
        return Err(Error::invalid("clip duration must be positive"));
    }
    let n_raw = params.raw_frames_per_clip();
    if n_raw == 0 {
        return Err(Error::invalid("clip duration is shorter than one frame"));
    }
    let mut last_ts: BTreeMap<&str, f64> = BTreeMap::new();
    let mut ordinal: BTreeMap<&str, usize> = BTreeMap::new();
    let mut manifest = ClipManifest::empty(params);
    for n in narrations {
        if !(n.timestamp_s >= 0.0) {
            return Err(Error::invalid(format!("narration in {} has negative timestamp {}", n.video_id, n.timestamp_s)));
        }
        if let Some(&prev) = last_ts.get(n.video_id.as_str()) {
            if n.timestamp_s < prev {
                return Err(Error::invalid(format!("narrations for {} are not timestamp-sorted ({} after {prev})", n.video_id, n.timestamp_s)));
            }
        }
        last_ts.insert(&n.video_id, n.timestamp_s);
        let k = ordinal.entry(&n.video_id).or_insert(0);
        let clip_id = format!("{}-n{:05}", n.video_id, *k);
        *k += 1;

        if let Some(&dur) = durations.get(&n.video_id) {
            if n.timestamp_s + params.clip_duration_s > dur + 1e-9 {
                manifest.skipped_out_of_bounds += 1;
                continue;
            }
        }
        let start = (n.timestamp_s * params.fps as f64).round() as u32;
        let raw: Vec<u32> = (0..n_raw as u32).map(|i| start + i).collect();
        let retained = raw.iter().step_by(params.downsample_factor as usize).take(params.retained_frames_per_clip()).copied().collect();
        manifest.clips.push(ClipEntry {
            clip_id,
            video_id: n.video_id.clone(),
            raw_frame_indices: raw,
            retained_frame_indices: retained,
            label_hint: None,
        });
    }
    if manifest.skipped_out_of_bounds > 0 {
        warn!("skipped {} narrations whose clips exceed the video end", manifest.skipped_out_of_bounds);
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn narrations(n: usize) -> Vec<NarrationRecord> {
        (0..n).map(|i| NarrationRecord { video_id: format!("v{}", i % 3), timestamp_s: (i / 3) as f64 * 2.0, text: String::new() }).collect()
    }

    #[test]
    fn ten_narrations_give_thirty_retained_frames() {
        let m = build_manifest(&narrations(10), &BTreeMap::new(), ManifestParams::default()).unwrap();
        assert_eq!(m.clips.len(), 10);
        for c in &m.clips {
            assert_eq!(c.raw_frame_indices.len(), 30);
            assert_eq!(c.retained_frame_indices.len(), 3);
            assert_eq!(c.retained_frame_indices, vec![c.raw_frame_indices[0], c.raw_frame_indices[10], c.raw_frame_indices[20]]);
        }
        assert_eq!(m.total_retained_frames(), 30);
    }

    #[test]
    fn empty_input_gives_empty_manifest() {
        let m = build_manifest(&[], &BTreeMap::new(), ManifestParams::default()).unwrap();
        assert!(m.clips.is_empty());
        assert_eq!(m.total_retained_frames(), 0);
    }

    #[test]
    fn egocentric_corpus_scale() {
        let p = ManifestParams::default();
        assert_eq!(503_000 * p.retained_frames_per_clip(), 1_509_000);
    }

    #[test]
    fn out_of_bounds_narrations_are_skipped_and_counted() {
        let ns = vec![
            NarrationRecord { video_id: "a".into(), timestamp_s: 0.5, text: "pick cup".into() },
            NarrationRecord { video_id: "a".into(), timestamp_s: 9.5, text: "put cup".into() },
        ];
        let durations = [("a".to_string(), 10.0)].into_iter().collect();
        let m = build_manifest(&ns, &durations, ManifestParams::default()).unwrap();
        assert_eq!(m.clips.len(), 1);
        assert_eq!(m.skipped_out_of_bounds, 1);
        assert_eq!(m.clips[0].raw_frame_indices[0], 15);
    }

    #[test]
    fn unsorted_narrations_are_rejected() {
        let ns = vec![
            NarrationRecord { video_id: "a".into(), timestamp_s: 3.0, text: String::new() },
            NarrationRecord { video_id: "a".into(), timestamp_s: 1.0, text: String::new() },
        ];
        assert!(build_manifest(&ns, &BTreeMap::new(), ManifestParams::default()).is_err());
    }

    #[test]
    fn serialization_is_byte_stable_with_sorted_keys() {
        let m = build_manifest(&narrations(4), &BTreeMap::new(), ManifestParams::default()).unwrap();
        let a = m.to_canonical_json().unwrap();
        let b = build_manifest(&narrations(4), &BTreeMap::new(), ManifestParams::default()).unwrap().to_canonical_json().unwrap();
        assert_eq!(a, b);
        let keys = ["\"clip_duration_s\"", "\"clips\"", "\"downsample_factor\"", "\"fps\"", "\"skipped_out_of_bounds\"", "\"version\""];
        let pos: Vec<usize> = keys.iter().map(|k| a.rfind(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{a}");
        let back: ClipManifest = serde_json::from_str(&a).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn retained_count_is_floor(fps in 1u32..120, dur_tenths in 1u32..40, factor in 1u32..16, n in 0usize..6) {
            let dur = dur_tenths as f64 / 10.0;
            let p = ManifestParams { fps, clip_duration_s: dur, downsample_factor: factor };
            prop_assume!(p.raw_frames_per_clip() > 0);
            let m = build_manifest(&narrations(n), &BTreeMap::new(), p).unwrap();
            let expected = ((fps as f64 * dur + 1e-9).floor() as usize) / factor as usize;
            for c in &m.clips {
                prop_assert_eq!(c.retained_frame_indices.len(), expected);
                prop_assert!(c.raw_frame_indices.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(c.retained_frame_indices.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(c.retained_frame_indices.iter().all(|r| c.raw_frame_indices.contains(r)));
            }
            prop_assert_eq!(m.total_retained_frames(), m.clips.len() * expected);
        }
    }
}
