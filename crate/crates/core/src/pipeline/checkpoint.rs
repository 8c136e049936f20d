//! Named-tensor checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u64 header length, a JSON header
//! listing run metadata and (name, shape, offset, len) for every tensor,
//! then raw little-endian f32 payloads. Writes go to a temp file in the
//! same directory and are renamed into place.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Tensor};

use super::PipelineError;

const MAGIC: &[u8; 8] = b"COGENCK1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: u32,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Optimizer timestep, so bias correction survives a resume.
    pub opt_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: metadata plus a flat store of prefixed tensors
/// (`policy.`, `connector.`, `decoder.`, `teacher.`, `opt.` ...).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: ParamStore::new(),
        }
    }

    /// Copy a whole store in under `prefix.`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.tensors.insert(&format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Pull a store back out, validating the presence and shape of every
    /// tensor the live architecture expects.
    pub fn extract_store(
        &self,
        prefix: &str,
        template: &ParamStore<f32>,
    ) -> Result<ParamStore<f32>, PipelineError> {
        let mut out = ParamStore::new();
        for (name, t) in template.iter() {
            let full = format!("{prefix}.{name}");
            if !self.tensors.contains(&full) {
                return Err(PipelineError::MissingTensor(full));
            }
            let got = self.tensors.get(&full);
            if got.shape != t.shape {
                return Err(PipelineError::ShapeMismatch {
                    name: full,
                    got: got.shape.clone(),
                    expected: t.shape.clone(),
                });
            }
            out.insert(name, got.clone());
        }
        Ok(out)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in ckpt.tensors.iter() {
        let offset = payload.len() as u64;
        for &v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape.clone(),
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        meta: CheckpointMeta {
            version: CKPT_VERSION,
            ..ckpt.meta.clone()
        },
        tensors: entries,
    };
    let hjson = serde_json::to_vec(&header)
        .map_err(|e| PipelineError::CorruptCheckpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + hjson.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&hjson);
    bytes.extend_from_slice(&payload);

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(PipelineError::CorruptCheckpoint(format!(
            "{}: bad magic or truncated preamble",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(PipelineError::CorruptCheckpoint(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| PipelineError::CorruptCheckpoint(e.to_string()))?;
    if header.meta.version != CKPT_VERSION {
        return Err(PipelineError::VersionMismatch {
            got: header.meta.version,
            expected: CKPT_VERSION,
        });
    }
    let payload = &bytes[16 + hlen..];
    let mut tensors = ParamStore::new();
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(PipelineError::CorruptCheckpoint(format!(
                "tensor `{}` has unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let end = e.offset.checked_add(e.len).filter(|&x| x as usize <= payload.len());
        let numel: usize = e.shape.iter().product();
        if end.is_none() || e.len as usize != numel * 4 {
            return Err(PipelineError::CorruptCheckpoint(format!(
                "tensor `{}` payload out of bounds",
                e.name
            )));
        }
        let raw = &payload[e.offset as usize..(e.offset + e.len) as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(
            &e.name,
            Tensor {
                shape: e.shape.clone(),
                data,
            },
        );
    }
    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sample_ckpt() -> Checkpoint {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::randn(vec![3, 4], 1.0, &mut rng));
        store.insert("b", Tensor::randn(vec![7], 0.5, &mut rng));
        let mut c = Checkpoint::new(CheckpointMeta {
            version: CKPT_VERSION,
            stage: 2,
            step: 42,
            seed: 7,
            config_hash: "abc".into(),
            opt_step: 42,
        });
        c.insert_store("policy", &store);
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let c = sample_ckpt();
        save_checkpoint(&c, &path).unwrap();
        let d = load_checkpoint(&path).unwrap();
        assert_eq!(d.meta.step, 42);
        assert_eq!(d.meta.config_hash, "abc");
        assert!(c.tensors.diff_names(&d.tensors).is_empty());
    }

    #[test]
    fn truncated_file_rejected_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&sample_ckpt(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [4usize, 12, 20, bytes.len() - 3] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(
                load_checkpoint(&path),
                Err(PipelineError::CorruptCheckpoint(_))
            ));
        }
    }

    #[test]
    fn garbage_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&20u64.to_le_bytes());
        bytes.extend_from_slice(&[0xffu8; 64]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(PipelineError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let c = sample_ckpt();
        let mut template = ParamStore::new();
        template.insert("a.w", Tensor::<f32>::zeros(vec![3, 5]));
        let err = c.extract_store("policy", &template).unwrap_err();
        match err {
            PipelineError::ShapeMismatch { name, .. } => assert_eq!(name, "policy.a.w"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_tensor_reported() {
        let c = sample_ckpt();
        let mut template = ParamStore::new();
        template.insert("zz", Tensor::<f32>::zeros(vec![1]));
        assert!(matches!(
            c.extract_store("policy", &template),
            Err(PipelineError::MissingTensor(_))
        ));
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&sample_ckpt(), &path).unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["x.ckpt".to_string()]);
    }
}
