//! Domain snapshots: the per-domain tunable state (all BN layers including
//! the neck, plus the adaption kernels) captured after training a domain,
//! and their binary container format.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array3};

use crate::backbone::{ArchId, BackboneGraph};
use crate::bank::container::{ByteReader, ByteWriter};
use crate::bn::BnLayerState;
use crate::error::{Error, Result};
use crate::sa::SaKernel;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"DASA";

/// Everything that distinguishes one domain from another on top of the
/// frozen backbone. `bn_states` is ordered like the layer enumeration with
/// the neck last; `sa_kernels` pairs each kernel with its conv layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSnapshot {
    pub domain_id: String,
    pub ordinal: u32,
    pub arch: ArchId,
    pub bn_states: Vec<BnLayerState>,
    pub sa_kernels: Vec<(usize, SaKernel<f32>)>,
    pub camera_ids: BTreeSet<String>,
}

impl DomainSnapshot {
    /// Bytes of the f32 payload: 4 vectors per BN layer plus all adaption
    /// kernel values, at 4 bytes per value.
    pub fn payload_bytes(&self) -> u64 {
        let bn: usize = self.bn_states.iter().map(|s| 4 * s.channels).sum();
        let sa: usize = self.sa_kernels.iter().map(|(_, k)| k.param_count()).sum();
        (bn + sa) as u64 * 4
    }

    pub fn bn_value_count(&self) -> u64 {
        self.bn_states.iter().map(|s| 4 * s.channels as u64).sum()
    }

    pub fn sa_value_count(&self) -> u64 {
        self.sa_kernels
            .iter()
            .map(|(_, k)| k.param_count() as u64)
            .sum()
    }
}

/// Deep-copy the graph's live adaptation state. Later training never touches
/// the returned snapshot.
pub fn snapshot_capture(
    graph: &BackboneGraph,
    domain_id: &str,
    ordinal: u32,
    camera_ids: &BTreeSet<String>,
) -> DomainSnapshot {
    let mut bn_states: Vec<BnLayerState> = graph.bn_states().to_vec();
    bn_states.push(graph.neck_state().clone());
    let sa_kernels = graph
        .sa_entries()
        .into_iter()
        .map(|(spec_index, k)| (spec_index, k.clone()))
        .collect();
    DomainSnapshot {
        domain_id: domain_id.to_string(),
        ordinal,
        arch: graph.arch(),
        bn_states,
        sa_kernels,
        camera_ids: camera_ids.clone(),
    }
}

/// Container layout: magic, version, arch id, domain id, ordinal, camera
/// set, per-BN-layer (eps, momentum), entry table, f32 payload, CRC-32 over
/// every preceding byte.
pub fn serialize(snapshot: &DomainSnapshot) -> Vec<u8> {
    let mut w = ByteWriter::new(SNAPSHOT_MAGIC);
    w.str(snapshot.arch.as_str());
    w.str(&snapshot.domain_id);
    w.u32(snapshot.ordinal);
    w.u32(snapshot.camera_ids.len() as u32);
    for cam in &snapshot.camera_ids {
        w.str(cam);
    }
    w.u32(snapshot.bn_states.len() as u32);
    for state in &snapshot.bn_states {
        w.f32(state.eps);
        w.f32(state.momentum);
    }
    w.u32(snapshot.sa_kernels.len() as u32);

    struct Entry<'a> {
        name: String,
        shape: Vec<usize>,
        data: Vec<&'a [f32]>,
    }
    let mut entries: Vec<Entry> = Vec::new();
    for (j, state) in snapshot.bn_states.iter().enumerate() {
        for (param, values) in [
            ("running_mean", &state.running_mean),
            ("running_var", &state.running_var),
            ("gamma", &state.gamma),
            ("beta", &state.beta),
        ] {
            entries.push(Entry {
                name: format!("bn{j}.{param}"),
                shape: vec![state.channels],
                data: vec![values.as_slice().expect("contiguous")],
            });
        }
    }
    for (spec_index, kernel) in &snapshot.sa_kernels {
        entries.push(Entry {
            name: format!("sa{spec_index}.weight"),
            shape: vec![kernel.channels, kernel.kernel_size, kernel.kernel_size],
            data: vec![kernel.weights.as_slice().expect("contiguous")],
        });
    }

    w.u32(entries.len() as u32);
    let mut offset = 0u64;
    for e in &entries {
        w.str(&e.name);
        w.u8(0); // f32 little-endian
        w.u32(e.shape.len() as u32);
        for &d in &e.shape {
            w.u64(d as u64);
        }
        w.u64(offset);
        let len: usize = e.data.iter().map(|d| d.len()).sum();
        w.u64(len as u64);
        offset += len as u64 * 4;
    }
    w.u64(offset);
    for e in &entries {
        for d in &e.data {
            w.f32_slice(d);
        }
    }
    w.finish()
}

pub fn deserialize(bytes: &[u8]) -> Result<DomainSnapshot> {
    let mut r = ByteReader::open(bytes, SNAPSHOT_MAGIC)?;
    let arch: ArchId = r.str("arch_id")?.parse()?;
    let domain_id = r.str("domain_id")?;
    let ordinal = r.u32("ordinal")?;
    let n_cameras = r.u32("camera count")? as usize;
    let mut camera_ids = BTreeSet::new();
    for _ in 0..n_cameras {
        camera_ids.insert(r.str("camera id")?);
    }
    let n_bn = r.u32("bn count")? as usize;
    let mut eps_momentum = Vec::with_capacity(n_bn);
    for _ in 0..n_bn {
        let eps = r.f32("eps")?;
        let momentum = r.f32("momentum")?;
        eps_momentum.push((eps, momentum));
    }
    let n_sa = r.u32("sa count")? as usize;
    let n_entries = r.u32("entry count")? as usize;
    if n_entries != 4 * n_bn + n_sa {
        return Err(Error::MalformedContainer("entry count"));
    }

    let mut headers = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name = r.str("entry name")?;
        if r.u8("dtype")? != 0 {
            return Err(Error::MalformedContainer("dtype"));
        }
        let ndim = r.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(Error::MalformedContainer("ndim"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dim")? as usize);
        }
        let offset = r.u64("offset")?;
        let len = r.u64("entry length")?;
        if shape.iter().product::<usize>() as u64 != len {
            return Err(Error::MalformedContainer("entry shape"));
        }
        headers.push((name, shape, offset, len));
    }
    let payload_bytes = r.u64("payload length")?;
    let mut cursor = 0u64;
    let mut arrays: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(n_entries);
    for (name, shape, offset, len) in headers {
        if offset != cursor || offset + len * 4 > payload_bytes {
            return Err(Error::MalformedContainer("entry offset"));
        }
        cursor += len * 4;
        let data = r.f32_vec(len as usize, "entry payload")?;
        arrays.push((name, shape, data));
    }
    r.finish()?;

    let mut bn_states = Vec::with_capacity(n_bn);
    for j in 0..n_bn {
        let base = 4 * j;
        let grab = |k: usize, param: &str| -> Result<Array1<f32>> {
            let (name, shape, data) = &arrays[base + k];
            if name != &format!("bn{j}.{param}") || shape.len() != 1 {
                return Err(Error::MalformedContainer("bn entry order"));
            }
            Ok(Array1::from_vec(data.clone()))
        };
        let running_mean = grab(0, "running_mean")?;
        let running_var = grab(1, "running_var")?;
        let gamma = grab(2, "gamma")?;
        let beta = grab(3, "beta")?;
        let channels = running_mean.len();
        if [running_var.len(), gamma.len(), beta.len()]
            .iter()
            .any(|&l| l != channels)
        {
            return Err(Error::MalformedContainer("bn vector lengths"));
        }
        let (eps, momentum) = eps_momentum[j];
        bn_states.push(BnLayerState {
            channels,
            running_mean,
            running_var,
            gamma,
            beta,
            eps,
            momentum,
        });
    }
    let mut sa_kernels = Vec::with_capacity(n_sa);
    for (name, shape, data) in arrays.into_iter().skip(4 * n_bn) {
        let spec_index: usize = name
            .strip_prefix("sa")
            .and_then(|s| s.strip_suffix(".weight"))
            .and_then(|s| s.parse().ok())
            .ok_or(Error::MalformedContainer("sa entry name"))?;
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::MalformedContainer("sa entry shape"));
        }
        let weights = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
            .map_err(|_| Error::MalformedContainer("sa entry shape"))?;
        sa_kernels.push((spec_index, SaKernel::from_weights(weights)?));
    }

    Ok(DomainSnapshot {
        domain_id,
        ordinal,
        arch,
        bn_states,
        sa_kernels,
        camera_ids,
    })
}

pub fn save(snapshot: &DomainSnapshot, path: &Path) -> Result<()> {
    std::fs::write(path, serialize(snapshot)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DomainSnapshot> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize(&bytes)
}
