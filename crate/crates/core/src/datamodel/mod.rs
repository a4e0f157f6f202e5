//! Cases, bags and datasets.
//!
//! A [`Dataset`] holds multistain cases that share one patch-embedding width
//! `d` and one stain table. Stain index 0 is always the anchor (H&E) stain.

mod bundle;
mod sampling;
mod synth;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use bundle::{load_bundle, save_bundle, BagFileHeader, BUNDLE_MAGIC, BUNDLE_VERSION, MANIFEST_FILE};
pub use sampling::{sample_indices, sample_patches};
pub use synth::{synth_generate, SyntheticConfig, DEFAULT_STAIN_NAMES};

/// Name of the classification task written by the synthetic generator.
pub const CLASS_TASK: &str = "class";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StainId {
    pub name: String,
    pub index: usize,
}

impl StainId {
    pub fn new(name: impl Into<String>, index: usize) -> Self {
        Self {
            name: name.into(),
            index,
        }
    }

    pub fn is_anchor(&self) -> bool {
        self.index == 0
    }
}

/// One stain's patch embeddings for one case, `N × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbeddingBag {
    pub stain: StainId,
    pub embeddings: Matrix,
}

impl PatchEmbeddingBag {
    pub fn new(stain: StainId, embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(Error::EmptyBag);
        }
        embeddings.ensure_finite(&format!("bag for stain {}", stain.name))?;
        Ok(Self { stain, embeddings })
    }

    pub fn n_patches(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Survival {
    pub time: f64,
    pub event: bool,
}

/// An anchor bag plus one or more bags of other stains from the same case.
#[derive(Clone, Debug, PartialEq)]
pub struct MultistainCase {
    pub case_id: String,
    pub anchor: PatchEmbeddingBag,
    pub others: Vec<PatchEmbeddingBag>,
    pub labels: BTreeMap<String, usize>,
    pub survival: Option<Survival>,
}

impl MultistainCase {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidDataset(format!("case {}: {msg}", self.case_id)));
        if !self.anchor.stain.is_anchor() {
            return bad(format!("anchor bag has stain index {}", self.anchor.stain.index));
        }
        let mut seen = HashSet::from([0usize]);
        for b in &self.others {
            if !seen.insert(b.stain.index) {
                return bad(format!("duplicate stain {}", b.stain.name));
            }
        }
        if let Some(s) = self.survival {
            if !(s.time > 0.0) || !s.time.is_finite() {
                return bad(format!("survival time must be positive, got {}", s.time));
            }
        }
        Ok(())
    }

    /// The bag for a stain index, anchor included.
    pub fn bag(&self, stain_index: usize) -> Option<&PatchEmbeddingBag> {
        if stain_index == 0 {
            Some(&self.anchor)
        } else {
            self.others.iter().find(|b| b.stain.index == stain_index)
        }
    }

    pub fn bags(&self) -> impl Iterator<Item = &PatchEmbeddingBag> {
        std::iter::once(&self.anchor).chain(self.others.iter())
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub rng: String,
    pub seed: Option<u64>,
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub stains: Vec<StainId>,
    pub cases: Vec<MultistainCase>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        d: usize,
        stains: Vec<StainId>,
        cases: Vec<MultistainCase>,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = Self {
            d,
            stains,
            cases,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut indices = HashSet::new();
        for s in &self.stains {
            if !indices.insert(s.index) {
                return Err(Error::InvalidDataset(format!("duplicate stain index {}", s.index)));
            }
        }
        if !self.stains.iter().any(|s| s.index == 0) {
            return Err(Error::InvalidDataset("stain table has no anchor (index 0)".into()));
        }
        let mut ids = HashSet::new();
        for case in &self.cases {
            case.validate()?;
            if !ids.insert(case.case_id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate case id {}", case.case_id)));
            }
            for bag in case.bags() {
                if !self.stains.contains(&bag.stain) {
                    return Err(Error::UnknownStain(bag.stain.name.clone()));
                }
                if bag.dim() != self.d {
                    return Err(Error::dims(
                        "dataset",
                        format!("d={}", self.d),
                        format!("case {} stain {} has d={}", case.case_id, bag.stain.name, bag.dim()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Largest stain index in the table (the `K` of the dataset).
    pub fn max_stain_index(&self) -> usize {
        self.stains.iter().map(|s| s.index).max().unwrap_or(0)
    }

    pub fn stain_by_name(&self, name: &str) -> Option<&StainId> {
        self.stains.iter().find(|s| s.name == name)
    }
}

/// Column-wise arithmetic mean of a bag's patch embeddings.
pub fn mean_pool(bag: &PatchEmbeddingBag) -> Result<Vec<f64>> {
    let n = bag.n_patches();
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    let mut sums = bag.embeddings.sum_rows();
    for x in &mut sums {
        *x /= n as f64;
    }
    Ok(sums)
}
