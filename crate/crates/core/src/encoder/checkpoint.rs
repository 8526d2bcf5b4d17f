//! Binary checkpoint container.
//!
//! ```text
//! b"VPCK" | schema_version: u32 LE | header_len: u32 LE | header (canonical JSON)
//!        | parameter payload (little-endian, header order) | SHA-256(payload)
//! ```
//!
//! The header carries `{schema_version, stage, config, provenance,
//! fingerprint, dtype, rng_state, code_version, params: [{name, shape}]}`.
//! `fingerprint` is the content hash of `{config, stage, provenance}`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EncoderConfig;
use crate::canon::{canonical_json, fingerprint};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VPCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Scratch,
    Contrastive,
    Supervised,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Scratch => "scratch",
            Stage::Contrastive => "contrastive",
            Stage::Supervised => "supervised",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamSet<T>,
    pub config: EncoderConfig,
    pub stage: Stage,
    /// Chain of stage descriptors (seeds, config hashes) that produced the
    /// parameters.
    pub provenance: String,
    pub fingerprint: String,
    pub rng_state: u64,
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    config: &'a EncoderConfig,
    stage: Stage,
    provenance: &'a str,
}

fn compute_fingerprint(config: &EncoderConfig, stage: Stage, provenance: &str) -> Result<String> {
    fingerprint(&FingerprintInput { config, stage, provenance })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(params: ParamSet<T>, config: EncoderConfig, stage: Stage, provenance: String, rng_state: u64) -> Result<Self> {
        let fingerprint = compute_fingerprint(&config, stage, &provenance)?;
        Ok(Self { params, config, stage, provenance, fingerprint, rng_state })
    }

    /// Successor checkpoint at `stage` with new parameters. Stages only move
    /// forward: scratch → contrastive → supervised. Skipping the contrastive
    /// stage requires `allow_skip` (an ablation).
    pub fn advance(&self, stage: Stage, params: ParamSet<T>, step: &str, allow_skip: bool) -> Result<Self> {
        let ok = matches!(
            (self.stage, stage),
            (Stage::Scratch, Stage::Contrastive) | (Stage::Contrastive, Stage::Supervised)
        ) || (allow_skip && self.stage == Stage::Scratch && stage == Stage::Supervised);
        if !ok {
            return Err(Error::Stage { from: self.stage.to_string(), to: stage.to_string() });
        }
        self.params.check_aligned(&params)?;
        Checkpoint::new(params, self.config, stage, format!("{} > {step}", self.provenance), self.rng_state)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    stage: Stage,
    config: EncoderConfig,
    provenance: String,
    fingerprint: String,
    dtype: DType,
    rng_state: u64,
    code_version: String,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let header = Header {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        stage: ckpt.stage,
        config: ckpt.config,
        provenance: ckpt.provenance.clone(),
        fingerprint: ckpt.fingerprint.clone(),
        dtype: T::DTYPE,
        rng_state: ckpt.rng_state,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        params: ckpt.params.iter().map(|(k, v)| ParamEntry { name: k.clone(), shape: v.shape().to_vec() }).collect(),
    };
    let hjson = canonical_json(&header)?;
    let mut payload = Vec::with_capacity(ckpt.params.num_scalars() * T::DTYPE.size());
    for (_, t) in ckpt.params.iter() {
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let mut out = Vec::with_capacity(12 + hjson.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(hjson.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic or truncated header)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_SCHEMA_VERSION {
        return Err(bad(format!("unsupported schema version {version} (supported: {CHECKPOINT_SCHEMA_VERSION})")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(bad(format!("truncated header: need {hlen} bytes, have {}", body.len())));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("unreadable header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(bad(format!("stored as {:?}, requested {:?}", header.dtype, T::DTYPE)));
    }
    let expected_fp = compute_fingerprint(&header.config, header.stage, &header.provenance)?;
    if expected_fp != header.fingerprint {
        return Err(bad(format!("fingerprint mismatch: header says {}, config+stage hash to {expected_fp}", header.fingerprint)));
    }
    let n_scalars: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let payload_len = n_scalars * T::DTYPE.size();
    let rest = &body[hlen..];
    if rest.len() != payload_len + 32 {
        return Err(bad(format!(
            "payload is {} bytes, expected {} (fingerprint {})",
            rest.len(),
            payload_len + 32,
            header.fingerprint
        )));
    }
    let (payload, digest) = rest.split_at(payload_len);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(bad(format!("payload checksum mismatch for fingerprint {}", header.fingerprint)));
    }
    let mut params = ParamSet::new();
    let sz = T::DTYPE.size();
    let mut off = 0;
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let data = (0..n).map(|i| T::read_le(&payload[off + i * sz..off + (i + 1) * sz])).collect();
        off += n * sz;
        params.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    Ok(Checkpoint {
        params,
        config: header.config,
        stage: header.stage,
        provenance: header.provenance,
        fingerprint: header.fingerprint,
        rng_state: header.rng_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = init_encoder::<f32>(EncoderConfig::default(), 5).unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&ck, &path).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let ck64 = init_encoder::<f64>(EncoderConfig::default(), 5).unwrap();
        save_checkpoint(&ck64, &path).unwrap();
        assert_eq!(load_checkpoint::<f64>(&path).unwrap(), ck64);
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ck = init_encoder::<f32>(EncoderConfig::default(), 5).unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&ck, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 11, 40, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(load_checkpoint::<f32>(&path).is_err(), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 40;
        flipped[last] ^= 0xff;
        std::fs::write(&path, &flipped).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains(&ck.fingerprint), "{err}");

        // Same-length edit inside the header so only the fingerprint check trips.
        let mut edited = bytes.clone();
        let at = bytes.windows(6).position(|w| w == b"init:5").unwrap();
        edited[at + 5] = b'7';
        std::fs::write(&path, edited).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("fingerprint mismatch"), "{err}");
    }

    #[test]
    fn stages_only_move_forward() {
        let ck = init_encoder::<f32>(EncoderConfig::default(), 5).unwrap();
        let p = ck.params.clone();
        assert!(ck.advance(Stage::Supervised, p.clone(), "x", false).is_err());
        let sup = ck.advance(Stage::Supervised, p.clone(), "x", true).unwrap();
        assert!(sup.advance(Stage::Contrastive, p.clone(), "y", false).is_err());
        let con = ck.advance(Stage::Contrastive, p.clone(), "moco", false).unwrap();
        assert_ne!(con.fingerprint, ck.fingerprint);
        let sup = con.advance(Stage::Supervised, p, "joint", false).unwrap();
        assert_eq!(sup.stage, Stage::Supervised);
        assert!(sup.provenance.starts_with("init:5 > moco > joint"));
    }
}
