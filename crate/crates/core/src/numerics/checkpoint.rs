//! Named-tensor checkpoint files.
//!
//! Layout (little endian): `u32` tensor count, then per tensor a `u16` name
//! length, the UTF-8 name, a `u8` rank, `rank` × `u32` dims and the `f32`
//! data. All bytes after the last tensor are a UTF-8 JSON footer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use super::param::Module;
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{file}: i/o error: {source}")]
    Io {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor name is not UTF-8 at byte {0}")]
    BadName(usize),
    #[error("tensor name longer than {} bytes: {0}", u16::MAX)]
    NameTooLong(String),
    #[error("checkpoint footer: {0}")]
    Footer(String),
    #[error("checkpoint is missing tensor {0}")]
    Missing(String),
    #[error("unexpected tensor {0} in checkpoint")]
    Unexpected(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub footer: Vec<u8>,
}

impl Checkpoint {
    pub fn from_module<M: Module<f32>, F: Serialize>(model: &M, footer: &F) -> Result<Self, CheckpointError> {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(name, p)| (name, p.value.clone()))
            .collect();
        Ok(Self {
            tensors,
            footer: serde_json::to_vec(footer).map_err(|e| CheckpointError::Footer(e.to_string()))?,
        })
    }

    pub fn footer_as<F: DeserializeOwned>(&self) -> Result<F, CheckpointError> {
        serde_json::from_slice(&self.footer).map_err(|e| CheckpointError::Footer(e.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy tensors into `model`; names and shapes must match exactly.
    pub fn load_into<M: Module<f32>>(&self, model: &mut M) -> Result<(), CheckpointError> {
        let mut err = None;
        let mut used = 0;
        model.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.get(&name) {
                None => err = Some(CheckpointError::Missing(name)),
                Some(t) if t.shape() != p.value.shape() => {
                    err = Some(CheckpointError::Shape {
                        name,
                        expected: p.value.shape().to_vec(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(t) => {
                    p.value = t.clone();
                    used += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != self.tensors.len() {
            let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
            let extra = self
                .tensors
                .iter()
                .find(|(n, _)| !names.contains(n))
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(CheckpointError::Unexpected(extra));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| CheckpointError::NameTooLong(name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.footer);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::BadName(at))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or(CheckpointError::Truncated(r.pos))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data).expect("length matches shape")));
        }
        Ok(Self {
            tensors,
            footer: bytes[r.pos..].to_vec(),
        })
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.encode()?;
        write_atomic(path, &bytes).map_err(|source| CheckpointError::Io {
            file: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            file: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
