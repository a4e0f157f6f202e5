//! Checkpoint directory: `manifest.json` plus `params.bin`.
//!
//! ```text
//! params.bin
//! offset  size  field
//! 0       4     magic "MSCK"
//! 4       4     u32 version (= 1)
//! 8       8·P   f64 parameters in declared block order
//! ```
//!
//! Little-endian throughout. The manifest lists block names and shapes so a
//! reader can check the layout before touching the binary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "stainalign-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderConfig,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub rankme: Option<f64>,
    /// `(epoch, rankme)` for every evaluated epoch so far.
    pub rankme_history: Vec<(usize, f64)>,
    pub blocks: Vec<BlockInfo>,
    /// Free-form run metadata (training config, seed, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: EncoderParams,
}

impl Checkpoint {
    pub fn new(encoder: EncoderConfig, params: EncoderParams) -> Self {
        let blocks = params
            .block_names()
            .into_iter()
            .zip(params.blocks())
            .map(|(name, b)| BlockInfo { name, shape: [b.rows(), b.cols()] })
            .collect();
        Self {
            manifest: CheckpointManifest {
                format: MANIFEST_FORMAT.to_string(),
                version: CHECKPOINT_VERSION,
                encoder,
                step: 0,
                epoch: 0,
                rankme: None,
                rankme_history: Vec::new(),
                blocks,
                extra: serde_json::Value::Null,
            },
            params,
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    ckpt.params.check_shapes(&ckpt.manifest.encoder)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let flat = ckpt.params.to_flat();
    let mut bytes = Vec::with_capacity(8 + 8 * flat.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(MANIFEST_FILE);
    let mut text =
        serde_json::to_string_pretty(&ckpt.manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path,
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut params = EncoderParams::init(&manifest.encoder, &mut Rng::new(0))?;
    let expected: Vec<BlockInfo> = Checkpoint::new(manifest.encoder.clone(), params.clone())
        .manifest
        .blocks;
    if expected != manifest.blocks {
        return Err(Error::dims(
            "checkpoint blocks",
            format!("{} blocks implied by encoder config", expected.len()),
            format!("{} blocks listed in {}", manifest.blocks.len(), path.display()),
        ));
    }

    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path, expected: "MSCK" });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { path, found: version, expected: CHECKPOINT_VERSION });
    }
    let n = params.num_params();
    let want = 8 + 8 * n;
    if bytes.len() != want {
        return Err(Error::Truncated { path, expected: want, found: bytes.len() });
    }
    let flat: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    params.set_flat(&flat)?;
    Ok(Checkpoint { manifest, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d_patch: 6,
            d_se: 2,
            d_hidden: 5,
            d_attn: 3,
            n_heads: 2,
            post_hidden: 7,
            d_out: 4,
            n_stains: 3,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let params = EncoderParams::init(&cfg(), &mut Rng::new(9)).unwrap();
        let mut ckpt = Checkpoint::new(cfg(), params);
        ckpt.manifest.step = 42;
        ckpt.manifest.epoch = 3;
        ckpt.manifest.rankme = Some(3.25);
        ckpt.manifest.rankme_history = vec![(3, 3.25)];
        ckpt.manifest.extra = serde_json::json!({"seed": 7});
        save_checkpoint(&ckpt, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn params_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let params = EncoderParams::init(&cfg(), &mut Rng::new(1)).unwrap();
        let first = params.stain_encodings[(0, 0)];
        let n = params.num_params();
        save_checkpoint(&Checkpoint::new(cfg(), params), dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(PARAMS_FILE)).unwrap();
        assert_eq!(&bytes[..4], b"MSCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 8 + 8 * n);
        assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), first);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let params = EncoderParams::init(&cfg(), &mut Rng::new(1)).unwrap();
        save_checkpoint(&Checkpoint::new(cfg(), params), dir.path()).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let good = fs::read(&path).unwrap();

        fs::write(&path, &good[..good.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Truncated { .. })));

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::BadMagic { .. })));

        let mut bad = good;
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn mismatched_params_refuse_to_save() {
        let dir = tempfile::tempdir().unwrap();
        let params = EncoderParams::init(&cfg(), &mut Rng::new(1)).unwrap();
        let other = EncoderConfig { d_out: 9, ..cfg() };
        let ckpt = Checkpoint { manifest: Checkpoint::new(other, params.clone()).manifest, params };
        assert!(save_checkpoint(&ckpt, dir.path()).is_err());
    }
}
