//! Dataset manifests: which NDR files make up each domain and the shift that
//! produced it. Paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use fmuda_core::rng::derive_seed;
use fmuda_core::DomainDataset;
use serde::{Deserialize, Serialize};

use crate::config::ShiftSection;
use crate::error::{self, Error, Result, Tag};
use crate::ndr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub id: String,
    pub images: Vec<String>,
    #[serde(default)]
    pub masks: Vec<String>,
    #[serde(default)]
    pub shift: Option<ShiftSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub num_classes: usize,
    pub channels: usize,
    pub dims: Vec<usize>,
    #[serde(rename = "domain")]
    pub domains: Vec<DomainEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&error::read_text(path)?).map_err(|e| Error::Config { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        error::write(path, toml::to_string(self).expect("manifest serialises"))
    }

    pub fn domain(&self, id: &str) -> Option<&DomainEntry> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn domain_ids(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.id.as_str()).collect()
    }
}

/// Seed of domain `k`'s noise and bias field.
pub fn shift_seed(data_seed: u64, k: usize) -> u64 {
    derive_seed(data_seed, "shift", k as u64)
}

/// A manifest plus its directory; counts every mask file it opens.
#[derive(Debug)]
pub struct DataRoot {
    pub dir: PathBuf,
    pub manifest: Manifest,
    mask_files_read: Mutex<BTreeMap<String, usize>>,
}

impl DataRoot {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        Ok(Self {
            dir: manifest_path.parent().map(Path::to_path_buf).unwrap_or_default(),
            manifest,
            mask_files_read: Mutex::new(BTreeMap::new()),
        })
    }

    /// Loads a domain; mask files are opened only when `with_masks` is set.
    pub fn load_domain(&self, id: &str, with_masks: bool) -> Result<DomainDataset> {
        let entry =
            self.manifest.domain(id).ok_or_else(|| Error::invalid("synthdata", format!("manifest has no domain `{id}`")))?;
        let images = entry.images.iter().map(|p| ndr::read_raster(&self.dir.join(p))).collect::<Result<Vec<_>>>()?;
        let masks = if with_masks {
            if entry.masks.is_empty() {
                return Err(Error::invalid("synthdata", format!("domain `{id}` lists no masks")));
            }
            let ms = entry.masks.iter().map(|p| ndr::read_mask(&self.dir.join(p))).collect::<Result<Vec<_>>>()?;
            *self.mask_files_read.lock().expect("counter lock").entry(id.to_string()).or_default() += ms.len();
            Some(ms)
        } else {
            None
        };
        let ds = DomainDataset::new(id, images, masks, self.manifest.num_classes).tag("synthdata")?;
        let k = self.manifest.domains.iter().position(|d| d.id == id).expect("found above");
        Ok(match entry.shift {
            Some(s) => ds.with_shift(s.shift(shift_seed(self.manifest.seed, k))),
            None => ds,
        })
    }

    /// Mask files opened so far for domain `id`.
    pub fn mask_files_read(&self, id: &str) -> usize {
        self.mask_files_read.lock().expect("counter lock").get(id).copied().unwrap_or(0)
    }
}
