use super::manifest::ClipEntry;
use super::synth::FrameStore;
use super::FrameImage;
use crate::error::{Error, Result};

/// Positions `k * floor((len - 1) / (n - 1))` for `k in 0..n`: an even
/// integer stride anchored at the first frame.
pub fn uniform_positions(len: usize, n: usize) -> Vec<usize> {
    if n <= 1 {
        return vec![0; n.min(len)];
    }
    let stride = (len - 1) / (n - 1);
    (0..n).map(|k| k * stride).collect()
}

/// `n` frames of `clip` at an even stride over its raw frames, in temporal
/// order.
pub fn sample_clip_frames(store: &FrameStore, clip: &ClipEntry, n: usize) -> Result<Vec<FrameImage>> {
    let available = clip.raw_frame_indices.len();
    if n == 0 || n > available {
        return Err(Error::Sampling { clip_id: clip.clip_id.clone(), detail: format!("requested {n} frames but the clip has {available}") });
    }
    let frames = store.clip_frames(&clip.clip_id)?;
    if frames.len() != available {
        return Err(Error::Sampling { clip_id: clip.clip_id.clone(), detail: format!("store holds {} of {available} frames", frames.len()) });
    }
    Ok(uniform_positions(available, n).into_iter().map(|p| frames[p].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_corpus, SynthConfig};

    #[test]
    fn stride_positions() {
        assert_eq!(uniform_positions(30, 5), vec![0, 7, 14, 21, 28]);
        assert_eq!(uniform_positions(30, 1), vec![0]);
        assert_eq!(uniform_positions(30, 30), (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn sampling_follows_raw_frames() {
        let (m, s) = generate_synthetic_corpus(&SynthConfig { n_clips: 1, ..SynthConfig::default() }).unwrap();
        let clip = &m.clips[0];
        let frames = sample_clip_frames(&s, clip, 5).unwrap();
        let idx: Vec<u32> = frames.iter().map(|f| f.source.frame_index).collect();
        assert_eq!(idx, vec![0, 7, 14, 21, 28]);
        let first = sample_clip_frames(&s, clip, 1).unwrap();
        assert_eq!(first[0].source.frame_index, clip.raw_frame_indices[0]);
        let all = sample_clip_frames(&s, clip, 30).unwrap();
        assert_eq!(all.iter().map(|f| f.source.frame_index).collect::<Vec<_>>(), clip.raw_frame_indices);
    }

    #[test]
    fn too_many_frames_names_the_clip() {
        let (m, s) = generate_synthetic_corpus(&SynthConfig { n_clips: 1, ..SynthConfig::default() }).unwrap();
        let err = sample_clip_frames(&s, &m.clips[0], 31).unwrap_err().to_string();
        assert!(err.contains(&m.clips[0].clip_id), "{err}");
    }
}
