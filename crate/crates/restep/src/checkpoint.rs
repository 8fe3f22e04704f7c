//! Bit-exact checkpoint serialization.
//!
//! A checkpoint is a directory holding `manifest.json` (format version,
//! model spec, dtype, ordered tensor table with byte offsets, SHA-256 of the
//! blob, provenance, seed) and `weights.bin` (little-endian IEEE-754 values
//! concatenated in manifest order, row-major). Two saves of the same
//! parameters produce byte-identical files; nothing time-dependent is
//! stored. The same container also carries episode dumps, which have no
//! model spec.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use restep_core::model::{EntryMeta, ParamEntry};
use restep_core::{Episode, ModelSpec, ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const WEIGHTS_FILE: &str = "weights.bin";

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadManifest(String),
    VersionMismatch { found: u32 },
    ChecksumMismatch,
    TruncatedBlob { expected: u64, actual: u64 },
    SpecMismatch(String),
    NoParameters,
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::BadManifest(msg) => write!(f, "bad manifest: {msg}"),
            CheckpointError::VersionMismatch { found } => {
                write!(f, "manifest format version {found}, expected {FORMAT_VERSION}")
            }
            CheckpointError::ChecksumMismatch => write!(f, "weights blob fails its checksum"),
            CheckpointError::TruncatedBlob { expected, actual } => {
                write!(f, "weights blob is {actual} bytes, manifest expects {expected}")
            }
            CheckpointError::SpecMismatch(msg) => write!(f, "spec mismatch: {msg}"),
            CheckpointError::NoParameters => write!(f, "no parameters"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

// ── Manifest ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Model spec for parameter checkpoints; absent for episode dumps.
    pub spec: Option<ModelSpec>,
    pub dtype: Dtype,
    pub tensors: Vec<TensorRecord>,
    /// Hex SHA-256 of `weights.bin`.
    pub sha256: String,
    pub provenance: String,
    pub seed: u64,
}

/// Save-side metadata.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub dtype: Dtype,
    pub provenance: String,
    pub seed: u64,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta { dtype: Dtype::F64, provenance: String::new(), seed: 0 }
    }
}

// ── Blob encoding ───────────────────────────────────────────────────────

fn encode(values: &[f64], dtype: Dtype, out: &mut Vec<u8>) {
    match dtype {
        Dtype::F32 => {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk size")) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk size")))
            .collect(),
    }
}

fn write_container(
    dir: &Path,
    spec: Option<&ModelSpec>,
    tensors: &[(String, &Tensor)],
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    if tensors.is_empty() {
        return Err(CheckpointError::NoParameters);
    }
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(tensors.len());
    for (name, tensor) in tensors {
        records.push(TensorRecord {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
        });
        encode(tensor.data(), meta.dtype, &mut blob);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: spec.cloned(),
        dtype: meta.dtype,
        tensors: records,
        sha256: hex(&Sha256::digest(&blob)),
        provenance: meta.provenance.clone(),
        seed: meta.seed,
    };
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json.as_bytes())?;
    fs::write(dir.join(WEIGHTS_FILE), &blob)?;
    Ok(())
}

fn read_container(dir: &Path) -> Result<(Manifest, Vec<u8>), CheckpointError> {
    let json = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| CheckpointError::BadManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: manifest.format_version });
    }
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let expected: u64 = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() as u64 * manifest.dtype.size())
        .sum();
    if blob.len() as u64 != expected {
        return Err(CheckpointError::TruncatedBlob { expected, actual: blob.len() as u64 });
    }
    if hex(&Sha256::digest(&blob)) != manifest.sha256 {
        return Err(CheckpointError::ChecksumMismatch);
    }
    Ok((manifest, blob))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

// ── Parameter checkpoints ───────────────────────────────────────────────

/// Write `manifest.json` + `weights.bin` for a parameter set.
pub fn save_checkpoint(
    dir: &Path,
    spec: &ModelSpec,
    params: &ParamSet,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    params.matches_spec(spec).map_err(|e| CheckpointError::SpecMismatch(e.to_string()))?;
    if params.is_empty() {
        return Err(CheckpointError::NoParameters);
    }
    let tensors: Vec<(String, &Tensor)> =
        params.entries().iter().map(|e| (e.name.clone(), &e.tensor)).collect();
    write_container(dir, Some(spec), &tensors, meta)
}

/// Load a parameter checkpoint, validating version, blob length, checksum,
/// and agreement between the manifest's tensor table and the spec's
/// canonical layout.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelSpec, ParamSet), CheckpointError> {
    let (manifest, blob) = read_container(dir)?;
    let spec = manifest
        .spec
        .clone()
        .ok_or_else(|| CheckpointError::SpecMismatch("manifest carries no model spec".into()))?;
    let layout: Vec<EntryMeta> =
        spec.param_layout().map_err(|e| CheckpointError::SpecMismatch(e.to_string()))?;
    if layout.len() != manifest.tensors.len() {
        return Err(CheckpointError::SpecMismatch(format!(
            "spec expects {} tensors, manifest lists {}",
            layout.len(),
            manifest.tensors.len()
        )));
    }
    let mut entries = Vec::with_capacity(layout.len());
    for (meta_entry, record) in layout.into_iter().zip(&manifest.tensors) {
        if meta_entry.name != record.name || meta_entry.shape != record.shape {
            return Err(CheckpointError::SpecMismatch(format!(
                "manifest tensor {:?} {:?} does not match canonical {:?} {:?}",
                record.name, record.shape, meta_entry.name, meta_entry.shape
            )));
        }
        let count: usize = record.shape.iter().product();
        let start = record.offset as usize;
        let end = start + count * manifest.dtype.size() as usize;
        let values = decode(&blob[start..end], manifest.dtype);
        entries.push(ParamEntry {
            name: meta_entry.name,
            layer_index: meta_entry.layer_index,
            tensor: Tensor::from_vec(meta_entry.shape, values)
                .map_err(|e| CheckpointError::SpecMismatch(e.to_string()))?,
            is_bn: meta_entry.is_bn,
        });
    }
    let params =
        ParamSet::new(entries).map_err(|e| CheckpointError::SpecMismatch(e.to_string()))?;
    Ok((spec, params))
}

// ── Episode dumps ───────────────────────────────────────────────────────

/// Dump episodes in the checkpoint container (no model spec). Labels and
/// task seeds are stored as value tensors; keep the default f64 dtype if the
/// dump must reproduce episodes bit-exactly.
pub fn save_episodes(
    dir: &Path,
    episodes: &[Episode],
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    if episodes.is_empty() {
        return Err(CheckpointError::NoParameters);
    }
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        let labels = |ys: &[usize]| {
            Tensor::from_vec(vec![ys.len()], ys.iter().map(|&y| y as f64).collect())
                .expect("label tensor")
        };
        owned.push((format!("ep{i:04}.support_x"), ep.support_x.clone()));
        owned.push((format!("ep{i:04}.support_y"), labels(&ep.support_y)));
        owned.push((format!("ep{i:04}.query_x"), ep.query_x.clone()));
        owned.push((format!("ep{i:04}.query_y"), labels(&ep.query_y)));
        owned.push((
            format!("ep{i:04}.task_seed"),
            Tensor::scalar(ep.task_seed as f64),
        ));
    }
    let tensors: Vec<(String, &Tensor)> =
        owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_container(dir, None, &tensors, meta)
}

/// Read an episode dump back.
pub fn load_episodes(dir: &Path) -> Result<Vec<Episode>, CheckpointError> {
    let (manifest, blob) = read_container(dir)?;
    let fetch = |record: &TensorRecord| -> Tensor {
        let count: usize = record.shape.iter().product();
        let start = record.offset as usize;
        let end = start + count * manifest.dtype.size() as usize;
        Tensor::from_vec(record.shape.clone(), decode(&blob[start..end], manifest.dtype))
            .expect("tensor from manifest shape")
    };
    let mut episodes = Vec::new();
    let mut i = 0usize;
    while i + 5 <= manifest.tensors.len() {
        let group = &manifest.tensors[i..i + 5];
        let prefix = group[0]
            .name
            .split_once('.')
            .map(|(p, _)| p.to_string())
            .ok_or_else(|| CheckpointError::BadManifest("unexpected tensor name".into()))?;
        for (record, suffix) in
            group.iter().zip(["support_x", "support_y", "query_x", "query_y", "task_seed"])
        {
            if record.name != format!("{prefix}.{suffix}") {
                return Err(CheckpointError::BadManifest(format!(
                    "episode group starting at {:?} is incomplete",
                    group[0].name
                )));
            }
        }
        let support_x = fetch(&group[0]);
        let support_y: Vec<usize> = fetch(&group[1]).data().iter().map(|&v| v as usize).collect();
        let query_x = fetch(&group[2]);
        let query_y: Vec<usize> = fetch(&group[3]).data().iter().map(|&v| v as usize).collect();
        let task_seed = fetch(&group[4]).data()[0] as u64;
        let n_way = support_y.iter().copied().max().unwrap_or(0) + 1;
        let k_shot = support_y.len() / n_way;
        episodes.push(Episode {
            n_way,
            k_shot,
            support_x,
            support_y,
            query_x,
            query_y,
            task_seed,
        });
        i += 5;
    }
    if i != manifest.tensors.len() {
        return Err(CheckpointError::BadManifest("trailing tensors after episode groups".into()));
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use restep_core::{sample_episode, DomainParams};
    use tempfile::tempdir;

    #[test]
    fn roundtrip_is_bit_identical_f64() {
        let dir = tempdir().unwrap();
        let spec = ModelSpec::conv_default(5);
        let params = spec.init_params(3).unwrap();
        let meta = CheckpointMeta { provenance: "test".into(), seed: 3, ..Default::default() };
        save_checkpoint(dir.path(), &spec, &params, &meta).unwrap();
        let (spec2, params2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(params, params2);
    }

    #[test]
    fn two_saves_are_byte_identical() {
        let a = tempdir().unwrap();
        let b = tempdir().unwrap();
        let spec = ModelSpec::mlp_default(4);
        let params = spec.init_params(9).unwrap();
        let meta = CheckpointMeta::default();
        save_checkpoint(a.path(), &spec, &params, &meta).unwrap();
        save_checkpoint(b.path(), &spec, &params, &meta).unwrap();
        for file in [MANIFEST_FILE, WEIGHTS_FILE] {
            assert_eq!(
                fs::read(a.path().join(file)).unwrap(),
                fs::read(b.path().join(file)).unwrap(),
                "{file} differs between identical saves"
            );
        }
    }

    #[test]
    fn f32_roundtrip_stabilizes_after_one_save() {
        let a = tempdir().unwrap();
        let b = tempdir().unwrap();
        let spec = ModelSpec::mlp_default(3);
        let params = spec.init_params(1).unwrap();
        let meta = CheckpointMeta { dtype: Dtype::F32, ..Default::default() };
        save_checkpoint(a.path(), &spec, &params, &meta).unwrap();
        let (_, once) = load_checkpoint(a.path()).unwrap();
        save_checkpoint(b.path(), &spec, &once, &meta).unwrap();
        assert_eq!(
            fs::read(a.path().join(WEIGHTS_FILE)).unwrap(),
            fs::read(b.path().join(WEIGHTS_FILE)).unwrap()
        );
        let (_, twice) = load_checkpoint(b.path()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn blob_size_is_element_count_times_dtype_size() {
        // Three tensors of 4, 2, and 6 f32 elements: 12 * 4 = 48 bytes.
        let dir = tempdir().unwrap();
        use restep_core::model::ParamEntry;
        let entries = vec![
            ParamEntry {
                name: "fc0.weight".into(),
                layer_index: 0,
                tensor: Tensor::from_vec(vec![2, 2], vec![1.0; 4]).unwrap(),
                is_bn: false,
            },
            ParamEntry {
                name: "fc0.bias".into(),
                layer_index: 0,
                tensor: Tensor::from_vec(vec![2], vec![0.5; 2]).unwrap(),
                is_bn: false,
            },
            ParamEntry {
                name: "fc1.weight".into(),
                layer_index: 1,
                tensor: Tensor::from_vec(vec![3, 2], vec![2.0; 6]).unwrap(),
                is_bn: false,
            },
        ];
        let params = ParamSet::new(entries).unwrap();
        let tensors: Vec<(String, &Tensor)> =
            params.entries().iter().map(|e| (e.name.clone(), &e.tensor)).collect();
        let meta = CheckpointMeta { dtype: Dtype::F32, ..Default::default() };
        write_container(dir.path(), None, &tensors, &meta).unwrap();
        let blob = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        assert_eq!(blob.len(), 48);
    }

    #[test]
    fn distinct_errors_for_each_corruption() {
        let dir = tempdir().unwrap();
        let spec = ModelSpec::mlp_default(3);
        let params = spec.init_params(0).unwrap();
        save_checkpoint(dir.path(), &spec, &params, &CheckpointMeta::default()).unwrap();

        // Truncated blob.
        let blob = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(CheckpointError::TruncatedBlob { .. })
        ));

        // Corrupted byte (same length): checksum.
        let mut corrupt = blob.clone();
        corrupt[0] ^= 0xFF;
        fs::write(dir.path().join(WEIGHTS_FILE), &corrupt).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::ChecksumMismatch)));
        fs::write(dir.path().join(WEIGHTS_FILE), &blob).unwrap();

        // Version bump.
        let json = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            json.replace("\"format_version\": 1", "\"format_version\": 2"),
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(CheckpointError::VersionMismatch { found: 2 })
        ));
    }

    #[test]
    fn empty_parameters_error() {
        let dir = tempdir().unwrap();
        let err = save_episodes(dir.path(), &[], &CheckpointMeta::default()).unwrap_err();
        assert!(matches!(err, CheckpointError::NoParameters));
        assert_eq!(err.to_string(), "no parameters");
    }

    #[test]
    fn episode_dump_roundtrip() {
        let dir = tempdir().unwrap();
        let domain = DomainParams::base();
        let eps: Vec<Episode> =
            (0..3).map(|s| sample_episode(&domain, 4, 2, 3, s)).collect();
        save_episodes(dir.path(), &eps, &CheckpointMeta::default()).unwrap();
        let loaded = load_episodes(dir.path()).unwrap();
        assert_eq!(eps, loaded);
    }
}
