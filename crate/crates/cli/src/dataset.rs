//! Single-file ensemble container.
//!
//! Layout: the 8 magic bytes `SDEORDER`, a little-endian `u64` manifest
//! length, the JSON manifest, then the payload of `f64` values (little
//! endian, trajectory-major, time-major, dimension-minor). The manifest
//! carries a SHA-256 digest of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdeorder::simulator::{Ensemble, EnsembleKind, PermutationRecord};
use sdeorder::Mat;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"SDEORDER";
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    /// Row-major `d × d`.
    pub a: Vec<f64>,
    pub h: Vec<f64>,
}

impl TrueParams {
    pub fn from_mats(a: &Mat, h: &Mat) -> Self {
        let rows = |m: &Mat| m.transpose().as_slice().to_vec();
        Self { a: rows(a), h: rows(h) }
    }

    pub fn a(&self, d: usize) -> Mat {
        Mat::from_row_slice(d, d, &self.a)
    }

    pub fn h(&self, d: usize) -> Mat {
        Mat::from_row_slice(d, d, &self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub n_traj: usize,
    pub n_steps: usize,
    pub dim: usize,
    pub dt: f64,
    pub kind: EnsembleKind,
    /// `perms[j][k]`: true time index of the state stored at slot `k`.
    pub permutation: Option<PermutationRecord>,
    pub seed: Option<u64>,
    pub provenance: Option<String>,
    pub sigma_eps: Option<f64>,
    pub truth: Option<TrueParams>,
    pub payload_len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metadata {
    pub permutation: Option<PermutationRecord>,
    pub seed: Option<u64>,
    pub provenance: Option<String>,
    pub sigma_eps: Option<f64>,
    pub truth: Option<TrueParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ensemble: Ensemble,
    pub meta: Metadata,
}

pub fn encode(e: &Ensemble, meta: &Metadata) -> CliResult<Vec<u8>> {
    let payload: Vec<u8> = e.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION.to_string(),
        n_traj: e.n_traj,
        n_steps: e.n_steps,
        dim: e.dim,
        dt: e.dt,
        kind: e.kind,
        permutation: meta.permutation.clone(),
        seed: meta.seed,
        provenance: meta.provenance.clone(),
        sigma_eps: meta.sigma_eps,
        truth: meta.truth.clone(),
        payload_len: payload.len() as u64,
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    let m = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + m.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(&m);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> CliResult<Dataset> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CliError::Malformed("missing container header".into()));
    }
    let m_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let m_end = 16usize.checked_add(m_len).filter(|&e| e <= bytes.len()).ok_or_else(|| CliError::Malformed("manifest truncated".into()))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[16..m_end])?;
    let version = value.get("format_version").and_then(|v| v.as_str()).unwrap_or("");
    if version != FORMAT_VERSION {
        return Err(CliError::VersionMismatch { found: version.to_string(), expected: FORMAT_VERSION.to_string() });
    }
    let manifest: Manifest = serde_json::from_value(value)?;
    let payload = &bytes[m_end..];
    if payload.len() as u64 != manifest.payload_len || hex::encode(Sha256::digest(payload)) != manifest.sha256 {
        return Err(CliError::ChecksumMismatch);
    }
    let expected = manifest.n_traj * manifest.n_steps * manifest.dim * 8;
    if payload.len() != expected {
        return Err(CliError::Validation(vec![format!(
            "payload holds {} values but manifest declares {}×{}×{}",
            payload.len() / 8,
            manifest.n_traj,
            manifest.n_steps,
            manifest.dim
        )]));
    }
    let data: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let ensemble = Ensemble::from_data(manifest.n_traj, manifest.n_steps, manifest.dim, manifest.dt, manifest.kind, data)
        .map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    if let Some(p) = &manifest.permutation {
        let ok = p.validate().is_ok()
            && p.n_steps() == manifest.n_steps
            && match p.mode {
                sdeorder::simulator::PermutationMode::Shared => p.perms.len() == 1,
                sdeorder::simulator::PermutationMode::PerTrajectory => p.perms.len() == manifest.n_traj,
            };
        if !ok {
            return Err(CliError::Validation(vec!["permutation does not match the ensemble shape".into()]));
        }
    }
    if let Some(t) = &manifest.truth {
        let dd = manifest.dim * manifest.dim;
        if t.a.len() != dd || t.h.len() != dd {
            return Err(CliError::Validation(vec!["true parameters do not match the dimension".into()]));
        }
    }
    Ok(Dataset {
        ensemble,
        meta: Metadata {
            permutation: manifest.permutation,
            seed: manifest.seed,
            provenance: manifest.provenance,
            sigma_eps: manifest.sigma_eps,
            truth: manifest.truth,
        },
    })
}

pub fn save_ensemble(path: &Path, e: &Ensemble, meta: &Metadata) -> CliResult<()> {
    fs::write(path, encode(e, meta)?)?;
    Ok(())
}

pub fn load_ensemble(path: &Path) -> CliResult<Dataset> {
    decode(&fs::read(path)?)
}
