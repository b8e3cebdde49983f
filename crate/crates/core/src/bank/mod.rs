//! The per-domain parameter bank: ordered snapshots, a camera-to-domain
//! registry for inference-time selection, forward transfer of the previous
//! domain's state, and on-disk persistence.

pub mod container;
pub mod snapshot;
pub mod storage;
pub mod weights;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ArchId, BackboneGraph};
use crate::error::{Error, Result};

pub use snapshot::{deserialize, serialize, snapshot_capture, DomainSnapshot, SNAPSHOT_MAGIC};
pub use storage::{
    storage_report, storage_report_for_bank, ClassifierDims, ExemplarPolicy, StorageReport,
    StorageRow, MIB,
};
pub use weights::{NamedArray, WeightSet, WEIGHTS_MAGIC};

/// How a caller asks for a snapshot: by camera (the inference-time path),
/// by explicit domain ordinal, by dataset name, or just the latest.
#[derive(Debug, Clone, Copy)]
pub enum SnapshotQuery<'a> {
    Camera(&'a str),
    Domain(u32),
    Dataset(&'a str),
    Latest,
}

pub struct Bank {
    arch: ArchId,
    snapshots: Vec<DomainSnapshot>,
    camera_to_domain: BTreeMap<String, u32>,
    dataset_to_domain: BTreeMap<String, u32>,
}

impl Bank {
    pub fn new(arch: ArchId) -> Self {
        Bank {
            arch,
            snapshots: Vec::new(),
            camera_to_domain: BTreeMap::new(),
            dataset_to_domain: BTreeMap::new(),
        }
    }

    pub fn arch(&self) -> ArchId {
        self.arch
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[DomainSnapshot] {
        &self.snapshots
    }

    /// Ingest a captured snapshot. Ordinals are 1-based and assigned here;
    /// cameras must not already belong to another domain.
    pub fn insert(&mut self, mut snap: DomainSnapshot, dataset_name: &str) -> Result<u32> {
        if snap.arch != self.arch {
            return Err(Error::SnapshotMismatch(format!(
                "snapshot arch {} vs bank arch {}",
                snap.arch, self.arch
            )));
        }
        if self.snapshots.iter().any(|s| s.domain_id == snap.domain_id) {
            return Err(Error::DuplicateDomain(snap.domain_id));
        }
        for cam in &snap.camera_ids {
            if let Some(&domain) = self.camera_to_domain.get(cam) {
                return Err(Error::CameraCollision {
                    camera: cam.clone(),
                    domain,
                });
            }
        }
        let ordinal = self.snapshots.len() as u32 + 1;
        snap.ordinal = ordinal;
        for cam in &snap.camera_ids {
            self.camera_to_domain.insert(cam.clone(), ordinal);
        }
        self.dataset_to_domain.insert(dataset_name.to_string(), ordinal);
        self.snapshots.push(snap);
        Ok(ordinal)
    }

    pub fn snapshot(&self, ordinal: u32) -> Result<&DomainSnapshot> {
        if ordinal == 0 || ordinal as usize > self.snapshots.len() {
            return Err(Error::UnknownDomain(ordinal));
        }
        Ok(&self.snapshots[ordinal as usize - 1])
    }

    pub fn latest(&self) -> Result<&DomainSnapshot> {
        self.snapshots.last().ok_or(Error::EmptyBank)
    }

    /// Camera and dataset lookups fall back to the latest snapshot when the
    /// query is unknown (the unseen-domain protocol); explicit ordinals do
    /// not fall back.
    pub fn select_snapshot(&self, query: SnapshotQuery<'_>) -> Result<&DomainSnapshot> {
        if self.snapshots.is_empty() {
            return Err(Error::EmptyBank);
        }
        match query {
            SnapshotQuery::Domain(ordinal) => self.snapshot(ordinal),
            SnapshotQuery::Camera(cam) => match self.camera_to_domain.get(cam) {
                Some(&ordinal) => self.snapshot(ordinal),
                None => self.latest(),
            },
            SnapshotQuery::Dataset(name) => match self.dataset_to_domain.get(name) {
                Some(&ordinal) => self.snapshot(ordinal),
                None => self.latest(),
            },
            SnapshotQuery::Latest => self.latest(),
        }
    }

    pub fn domain_of_dataset(&self, name: &str) -> Option<u32> {
        self.dataset_to_domain.get(name).copied()
    }

    /// Initialize a graph's tunable state for the next domain: the previous
    /// domain's snapshot when one exists, otherwise the as-built BN values
    /// and identity adaption kernels.
    pub fn forward_transfer_init(&self, graph: &mut BackboneGraph) -> Result<()> {
        if graph.arch() != self.arch {
            return Err(Error::SnapshotMismatch(format!(
                "graph arch {} vs bank arch {}",
                graph.arch(),
                self.arch
            )));
        }
        match self.snapshots.last() {
            Some(snap) => graph.apply_snapshot(snap),
            None => {
                graph.reset_adaptation();
                Ok(())
            }
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = BankManifest {
            arch: self.arch.as_str().to_string(),
            domains: Vec::new(),
        };
        for snap in &self.snapshots {
            let file = format!("snapshot_{:03}.dasa", snap.ordinal);
            snapshot::save(snap, &dir.join(&file))?;
            let dataset = self
                .dataset_to_domain
                .iter()
                .find(|(_, &v)| v == snap.ordinal)
                .map(|(k, _)| k.clone())
                .unwrap_or_default();
            manifest.domains.push(BankManifestEntry {
                ordinal: snap.ordinal,
                domain_id: snap.domain_id.clone(),
                dataset,
                cameras: snap.camera_ids.iter().cloned().collect(),
                file,
            });
        }
        let path = dir.join("bank.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Other(format!("manifest encode: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("bank.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BankManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Other(format!("manifest decode: {e}")))?;
        let arch: ArchId = manifest.arch.parse()?;
        let mut bank = Bank::new(arch);
        let mut entries = manifest.domains;
        entries.sort_by_key(|e| e.ordinal);
        for entry in entries {
            let snap = snapshot::load(&dir.join(&entry.file))?;
            bank.insert(snap, &entry.dataset)?;
        }
        Ok(bank)
    }
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    arch: String,
    domains: Vec<BankManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct BankManifestEntry {
    ordinal: u32,
    domain_id: String,
    dataset: String,
    cameras: Vec<String>,
    file: String,
}
