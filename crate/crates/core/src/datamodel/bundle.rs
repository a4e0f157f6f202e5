//! On-disk embedding bundle.
//!
//! A bundle is a directory with a `manifest.json` and one binary file per
//! bag, named `<case_id>.<stain>.bin`:
//!
//! ```text
//! offset  size   field
//! 0       4      magic "MSEB"
//! 4       4      u32 version (= 1)
//! 8       4      u32 N (patches)
//! 12      4      u32 d (embedding width)
//! 16      4·N·d  f32 values, row-major
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f32`, so a
//! dataset round-trips bit-exactly when its values are `f32`-representable
//! (the synthetic generator guarantees this).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, MultistainCase, PatchEmbeddingBag, Provenance, StainId, Survival};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const BUNDLE_MAGIC: &[u8; 4] = b"MSEB";
pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "stainalign-embedding-bundle";
const HEADER_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    d: usize,
    stains: Vec<StainId>,
    cases: Vec<CaseEntry>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct CaseEntry {
    case_id: String,
    stains: Vec<String>,
    #[serde(default)]
    labels: BTreeMap<String, usize>,
    #[serde(default)]
    survival: Option<Survival>,
}

/// Header fields of one bag file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BagFileHeader {
    pub version: u32,
    pub n: u32,
    pub d: u32,
}

fn bag_file_name(case_id: &str, stain: &str) -> String {
    format!("{case_id}.{stain}.bin")
}

pub fn save_bundle(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.cases.len());
    for case in &dataset.cases {
        if case.case_id.contains(['/', '\\']) || case.case_id.is_empty() {
            return Err(Error::InvalidDataset(format!(
                "case id {:?} is not usable as a file name",
                case.case_id
            )));
        }
        let mut stains = Vec::new();
        for bag in case.bags() {
            let path = dir.join(bag_file_name(&case.case_id, &bag.stain.name));
            write_bag(&path, &bag.embeddings)?;
            stains.push(bag.stain.name.clone());
        }
        entries.push(CaseEntry {
            case_id: case.case_id.clone(),
            stains,
            labels: case.labels.clone(),
            survival: case.survival,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: BUNDLE_VERSION,
        d: dataset.d,
        stains: dataset.stains.clone(),
        cases: entries,
        provenance: dataset.provenance.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_bundle(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::VersionMismatch {
            path,
            found: manifest.version,
            expected: BUNDLE_VERSION,
        });
    }
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for entry in manifest.cases {
        let mut anchor = None;
        let mut others = Vec::new();
        for name in &entry.stains {
            let stain = manifest
                .stains
                .iter()
                .find(|s| &s.name == name)
                .cloned()
                .ok_or_else(|| Error::UnknownStain(name.clone()))?;
            let bag_path = dir.join(bag_file_name(&entry.case_id, name));
            let embeddings = read_bag(&bag_path, manifest.d)?;
            let bag = PatchEmbeddingBag::new(stain, embeddings)?;
            if bag.stain.is_anchor() {
                anchor = Some(bag);
            } else {
                others.push(bag);
            }
        }
        let anchor = anchor.ok_or_else(|| {
            Error::InvalidDataset(format!("case {} has no anchor bag", entry.case_id))
        })?;
        cases.push(MultistainCase {
            case_id: entry.case_id,
            anchor,
            others,
            labels: entry.labels,
            survival: entry.survival,
        });
    }
    Dataset::new(manifest.d, manifest.stains, cases, manifest.provenance)
}

fn write_bag(path: &Path, m: &Matrix) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &x in m.as_slice() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Parses and checks the 16-byte header of a bag file.
pub fn read_bag_header(path: &Path, bytes: &[u8]) -> Result<BagFileHeader> {
    if bytes.len() < 4 || &bytes[..4] != BUNDLE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "MSEB",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let header = BagFileHeader {
        version: u32_at(bytes, 4),
        n: u32_at(bytes, 8),
        d: u32_at(bytes, 12),
    };
    if header.version != BUNDLE_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: header.version,
            expected: BUNDLE_VERSION,
        });
    }
    Ok(header)
}

fn read_bag(path: &Path, expected_d: usize) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = read_bag_header(path, &bytes)?;
    let (n, d) = (header.n as usize, header.d as usize);
    if d != expected_d {
        return Err(Error::InconsistentDim {
            path: path.to_path_buf(),
            expected: expected_d,
            found: d,
        });
    }
    let expected = HEADER_LEN + 4 * n * d;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::new(n, d, data)
}
