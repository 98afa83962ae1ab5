//! Exact maximum-inner-product search over precomputed video embeddings.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::numerics::{Checkpoint, CheckpointError, Tensor, TensorError};
use crate::retriever::{encode_video, similarity_score, QueryEmbeddings, RetrieverParams, VideoEmbeddings, VideoFeatures};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index is empty")]
    Empty,
    #[error("top-k needs k >= 1")]
    ZeroK,
    #[error("embedding dimension mismatch: index has {index}, got {found}")]
    Dimension { index: usize, found: usize },
    #[error("corpus feature dims do not match the retriever: {0}")]
    CorpusDims(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("malformed index file: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    pub dim: usize,
    pub video_ids: Vec<String>,
    pub entries: Vec<VideoEmbeddings<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdTable {
    dim: usize,
    video_ids: Vec<String>,
}

/// Encode every corpus video with the retriever's video encoder.
pub fn build_index(corpus: &Corpus, params: &RetrieverParams<f32>) -> Result<VectorIndex, IndexError> {
    let (d_img, d_sub) = (
        params.video.image_proj.d_in(),
        params.video.subtitle_proj.d_in(),
    );
    if corpus.dims.d_img != d_img || corpus.dims.d_sub != d_sub {
        return Err(IndexError::CorpusDims(format!(
            "corpus ({}, {}) vs retriever ({d_img}, {d_sub})",
            corpus.dims.d_img, corpus.dims.d_sub
        )));
    }
    let mut entries = Vec::with_capacity(corpus.videos.len());
    for v in &corpus.videos {
        entries.push(encode_video(&VideoFeatures::from_video(v), params)?);
    }
    Ok(VectorIndex {
        dim: params.d_model(),
        video_ids: corpus.videos.iter().map(|v| v.video_id.clone()).collect(),
        entries,
    })
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, IndexError> {
        let mut tensors = Vec::with_capacity(3 * self.len());
        for (i, e) in self.entries.iter().enumerate() {
            tensors.push((format!("video.{i}.image"), e.image_reps.clone()));
            tensors.push((format!("video.{i}.subtitle"), e.subtitle_reps.clone()));
            let mask = e.subtitle_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            tensors.push((format!("video.{i}.subtitle_mask"), Tensor::vector(mask)));
        }
        let footer = IdTable {
            dim: self.dim,
            video_ids: self.video_ids.clone(),
        };
        Ok(Checkpoint {
            tensors,
            footer: serde_json::to_vec(&footer).map_err(|e| IndexError::Malformed(e.to_string()))?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, IndexError> {
        let table: IdTable = ckpt.footer_as()?;
        if ckpt.tensors.len() != 3 * table.video_ids.len() {
            return Err(IndexError::Malformed(format!(
                "{} tensors for {} videos",
                ckpt.tensors.len(),
                table.video_ids.len()
            )));
        }
        let mut entries = Vec::with_capacity(table.video_ids.len());
        for (i, chunk) in ckpt.tensors.chunks(3).enumerate() {
            let expect = [
                format!("video.{i}.image"),
                format!("video.{i}.subtitle"),
                format!("video.{i}.subtitle_mask"),
            ];
            for (want, (name, _)) in expect.iter().zip(chunk) {
                if want != name {
                    return Err(IndexError::Malformed(format!("expected tensor {want}, found {name}")));
                }
            }
            let (img, sub, mask) = (&chunk[0].1, &chunk[1].1, &chunk[2].1);
            if img.cols() != table.dim || sub.cols() != table.dim {
                return Err(IndexError::Dimension {
                    index: table.dim,
                    found: img.cols(),
                });
            }
            if img.rows() != sub.rows() || mask.len() != img.rows() {
                return Err(IndexError::Malformed(format!("video {i}: inconsistent frame counts")));
            }
            entries.push(VideoEmbeddings {
                image_reps: img.clone(),
                subtitle_reps: sub.clone(),
                subtitle_mask: mask.data().iter().map(|&m| m != 0.0).collect(),
            });
        }
        Ok(Self {
            dim: table.dim,
            video_ids: table.video_ids,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One retrieved video.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieved {
    /// Position of the video in the index.
    pub entry: usize,
    pub video_id: String,
    pub score: f64,
}

/// Total order used for ranking: higher score first, then ascending id.
pub fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exhaustive top-`k` by similarity; returns `min(k, |V|)` videos.
pub fn top_k_mips(query: &QueryEmbeddings<f32>, index: &VectorIndex, k: usize) -> Result<Vec<Retrieved>, IndexError> {
    if index.is_empty() {
        return Err(IndexError::Empty);
    }
    if k == 0 {
        return Err(IndexError::ZeroK);
    }
    for v in [&query.q_image, &query.q_subtitle] {
        if v.len() != index.dim {
            return Err(IndexError::Dimension {
                index: index.dim,
                found: v.len(),
            });
        }
    }
    let mut all: Vec<Retrieved> = index
        .entries
        .iter()
        .enumerate()
        .map(|(entry, e)| Retrieved {
            entry,
            video_id: index.video_ids[entry].clone(),
            score: similarity_score(query, e),
        })
        .collect();
    all.sort_by(|a, b| rank_order((a.score, &a.video_id), (b.score, &b.video_id)));
    all.truncate(k);
    Ok(all)
}
