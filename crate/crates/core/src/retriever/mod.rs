//! Late-fusion video retriever: independent video and query encoders, a
//! max-pooled inner-product similarity and InfoNCE training with in-batch
//! negatives.

mod encoder;

use std::collections::HashSet;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Query};
use crate::numerics::optim::{AdamW, AdamWConfig};
use crate::numerics::param::join;
use crate::numerics::{kernels, Init, Module, Param, Real, Tape, Tensor, TensorError, Var};

pub use encoder::{modular_pool, query_words, ModelConfig, QueryEncoder, VideoEncoder, VideoFeatures, EMBED_STD};

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("query {0} has no ground-truth video")]
    NoGroundTruth(String),
    #[error("query {query}: unknown video {video}")]
    UnknownVideo { query: String, video: String },
    #[error("non-finite loss at epoch {epoch} step {step}: {source}")]
    NonFinite {
        epoch: usize,
        step: usize,
        #[source]
        source: TensorError,
    },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Retriever weights. `image_pool` and `subtitle_pool` are the `d×1`
/// modular-pooling score projections.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrieverParams<T> {
    pub video: VideoEncoder<T>,
    pub query: QueryEncoder<T>,
    pub image_pool: Param<T>,
    pub subtitle_pool: Param<T>,
}

impl<T: Real> RetrieverParams<T> {
    pub fn new(seed: u64, cfg: &ModelConfig, d_img: usize, d_sub: usize, d_word: usize) -> Result<Self, TensorError> {
        let mut init = Init::new(seed);
        let d = cfg.d_model;
        Ok(Self {
            video: VideoEncoder::new(&mut init, cfg, d_img, d_sub)?,
            query: QueryEncoder::new(&mut init, cfg, d_word)?,
            image_pool: init.fan_in(&[d, 1], d),
            subtitle_pool: init.fan_in(&[d, 1], d),
        })
    }

    pub fn d_model(&self) -> usize {
        self.image_pool.value.rows()
    }

    /// `(q_I, q_s)`, each `1×d`.
    pub fn query_forward<'t>(
        &self,
        tape: &'t Tape<T>,
        words: &Tensor<T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
        let w = self.query.forward(tape, words)?;
        Ok((
            modular_pool(tape, w, &self.image_pool)?,
            modular_pool(tape, w, &self.subtitle_pool)?,
        ))
    }

    /// Query-by-video similarity matrix (`queries × videos`) on the tape.
    pub fn score_matrix<'t>(
        &self,
        tape: &'t Tape<T>,
        queries: &[&Tensor<T>],
        videos: &[&VideoFeatures<T>],
    ) -> Result<Var<'t, T>, TensorError> {
        let mut qi = Vec::with_capacity(queries.len());
        let mut qs = Vec::with_capacity(queries.len());
        for words in queries {
            let (a, b) = self.query_forward(tape, words)?;
            qi.push(a);
            qs.push(b);
        }
        let q_image = Var::concat(&qi, 0)?;
        let q_sub = Var::concat(&qs, 0)?;
        let mut imgs = Vec::with_capacity(videos.len());
        let mut subs = Vec::new();
        let mut img_segments = Vec::with_capacity(videos.len());
        let mut sub_segments = Vec::with_capacity(videos.len());
        let (mut img_off, mut sub_off) = (0, 0);
        for v in videos {
            let (img, sub) = self.video.forward(tape, v)?;
            let n = v.n_frames();
            imgs.push(img);
            img_segments.push((img_off, n));
            img_off += n;
            let valid: Vec<usize> = (0..n).filter(|&j| v.has_subtitle[j]).collect();
            if !valid.is_empty() {
                subs.push(sub.index_select(&valid)?);
            }
            sub_segments.push((sub_off, valid.len()));
            sub_off += valid.len();
        }
        let image_max = q_image.matmul_nt(Var::concat(&imgs, 0)?)?.segment_max_cols(&img_segments)?;
        if subs.is_empty() {
            return Ok(image_max);
        }
        let sub_max = q_sub.matmul_nt(Var::concat(&subs, 0)?)?.segment_max_cols(&sub_segments)?;
        let half = T::lit(0.5);
        let wi: Vec<T> = sub_segments.iter().map(|&(_, n)| if n > 0 { half } else { T::one() }).collect();
        let ws: Vec<T> = sub_segments.iter().map(|&(_, n)| if n > 0 { half } else { T::zero() }).collect();
        image_max
            .mul_row(tape.leaf(Tensor::vector(wi)))?
            .add(sub_max.mul_row(tape.leaf(Tensor::vector(ws)))?)
    }
}

impl<T: Real> Module<T> for RetrieverParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.video.visit(&join(prefix, "video"), f);
        self.query.visit(&join(prefix, "query"), f);
        f(join(prefix, "image_pool"), &self.image_pool);
        f(join(prefix, "subtitle_pool"), &self.subtitle_pool);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.video.visit_mut(&join(prefix, "video"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        f(join(prefix, "image_pool"), &mut self.image_pool);
        f(join(prefix, "subtitle_pool"), &mut self.subtitle_pool);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbeddings<T> {
    pub image_reps: Tensor<T>,
    pub subtitle_reps: Tensor<T>,
    pub subtitle_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbeddings<T> {
    pub q_image: Vec<T>,
    pub q_subtitle: Vec<T>,
}

pub fn encode_video<T: Real>(video: &VideoFeatures<T>, params: &RetrieverParams<T>) -> Result<VideoEmbeddings<T>, TensorError> {
    let tape = Tape::new();
    let (img, sub) = params.video.forward(&tape, video)?;
    Ok(VideoEmbeddings {
        image_reps: img.value(),
        subtitle_reps: sub.value(),
        subtitle_mask: video.has_subtitle.clone(),
    })
}

pub fn encode_query_modular<T: Real>(words: &Tensor<T>, params: &RetrieverParams<T>) -> Result<QueryEmbeddings<T>, TensorError> {
    let tape = Tape::new();
    let (qi, qs) = params.query_forward(&tape, words)?;
    Ok(QueryEmbeddings {
        q_image: qi.value().into_data(),
        q_subtitle: qs.value().into_data(),
    })
}

fn dot64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

/// `(max_j q_I·I_j + max_j q_s·s_j) / 2`; subtitle rows with a false mask
/// are skipped, and a video without any subtitle scores by images alone.
pub fn similarity_score<T: Real>(qe: &QueryEmbeddings<T>, ve: &VideoEmbeddings<T>) -> f64 {
    let n = ve.subtitle_mask.len();
    let img = (0..n)
        .map(|j| dot64(&qe.q_image, ve.image_reps.row(j)))
        .fold(f64::NEG_INFINITY, f64::max);
    let sub = (0..n)
        .filter(|&j| ve.subtitle_mask[j])
        .map(|j| dot64(&qe.q_subtitle, ve.subtitle_reps.row(j)))
        .fold(f64::NEG_INFINITY, f64::max);
    if sub == f64::NEG_INFINITY {
        img
    } else {
        (img + sub) / 2.0
    }
}

/// `score_matrix[z][i]` scores video `z` against query `i`; the diagonal
/// holds positives. Returns `(L^v, L^q)`: `L^v` normalizes each query's
/// column over videos, `L^q` each video's row over queries.
pub fn infonce_losses(score_matrix: &Tensor<f64>) -> Result<(f64, f64), RetrieverError> {
    let b = score_matrix.rows();
    if score_matrix.rank() != 2 || b == 0 {
        return Err(RetrieverError::EmptyBatch);
    }
    if score_matrix.cols() != b {
        return Err(TensorError::Shape {
            op: "infonce",
            lhs: score_matrix.shape().to_vec(),
            rhs: vec![b, b],
        }
        .into());
    }
    let mut lv = 0.0;
    let mut lq = 0.0;
    for i in 0..b {
        let column: Vec<f64> = (0..b).map(|z| score_matrix.at(z, i)).collect();
        lv += kernels::cross_entropy_from_logits(&column, i)?;
        lq += kernels::cross_entropy_from_logits(score_matrix.row(i), i)?;
    }
    Ok((lv / b as f64, lq / b as f64))
}

/// Tape version of [`infonce_losses`] for a `queries × videos` matrix.
pub fn infonce_tape<'t, T: Real>(scores: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
    let b = scores.shape()[0];
    let targets: Vec<usize> = (0..b).collect();
    let lv = scores.cross_entropy(&targets)?;
    let lq = scores.transpose()?.cross_entropy(&targets)?;
    Ok((lv, lq))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

/// Split shuffled `(query, video)` pairs into batches with distinct videos;
/// a pair whose video is already in the current batch waits for the next.
fn batches_with_distinct_videos(pairs: &[(usize, usize)], batch_size: usize) -> Vec<Vec<(usize, usize)>> {
    let mut pending: Vec<(usize, usize)> = pairs.to_vec();
    let mut out = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen = HashSet::new();
        let mut rest = Vec::new();
        for p in pending {
            if batch.len() < batch_size && seen.insert(p.1) {
                batch.push(p);
            } else {
                rest.push(p);
            }
        }
        out.push(batch);
        pending = rest;
    }
    out
}

/// Train a retriever on `queries` (each must carry a ground-truth video).
pub fn train_retriever(
    corpus: &Corpus,
    queries: &[Query],
    model_cfg: &ModelConfig,
    cfg: &RetrieverTrainConfig,
    seed: u64,
) -> Result<(RetrieverParams<f32>, Vec<EpochLog>), RetrieverError> {
    if cfg.batch_size == 0 {
        return Err(RetrieverError::Config("batch_size must be at least 1".into()));
    }
    let mut params = RetrieverParams::new(seed, model_cfg, corpus.dims.d_img, corpus.dims.d_sub, corpus.dims.d_word)?;
    let features: Vec<VideoFeatures<f32>> = corpus.videos.iter().map(VideoFeatures::from_video).collect();
    let mut pairs = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let gt = q
            .ground_truth
            .as_ref()
            .ok_or_else(|| RetrieverError::NoGroundTruth(q.query_id.clone()))?;
        let vi = corpus.video_index(&gt.video_id).ok_or_else(|| RetrieverError::UnknownVideo {
            query: q.query_id.clone(),
            video: gt.video_id.clone(),
        })?;
        pairs.push((qi, vi));
    }
    if pairs.is_empty() {
        return Err(RetrieverError::EmptyBatch);
    }
    let words: Vec<Tensor<f32>> = queries.iter().map(query_words).collect();
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed_0001));
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        let batches = batches_with_distinct_videos(&pairs, cfg.batch_size);
        for (step, batch) in batches.iter().enumerate() {
            opt.set_progress(epoch * batches.len() + step, cfg.epochs * batches.len());
            let tape = Tape::new();
            let q: Vec<&Tensor<f32>> = batch.iter().map(|&(qi, _)| &words[qi]).collect();
            let v: Vec<&VideoFeatures<f32>> = batch.iter().map(|&(_, vi)| &features[vi]).collect();
            let scores = params.score_matrix(&tape, &q, &v)?;
            let (lv, lq) = infonce_tape(scores)?;
            let loss = lv.add(lq)?;
            tape.check_finite()
                .map_err(|source| RetrieverError::NonFinite { epoch, step, source })?;
            total += loss.item() as f64;
            let grads = tape.backward(loss)?;
            opt.step(&mut params, &[&grads], 1);
            if !params.all_finite() {
                return Err(RetrieverError::NonFinite {
                    epoch,
                    step,
                    source: TensorError::NonFinite { op: "adamw", node: 0 },
                });
            }
        }
        let mean_loss = total / batches.len() as f64;
        info!("retriever epoch {epoch}: loss {mean_loss:.4}");
        log.push(EpochLog {
            epoch,
            steps: batches.len(),
            mean_loss,
        });
    }
    Ok((params, log))
}
