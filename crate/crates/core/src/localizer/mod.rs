//! Early-fusion moment localizer with query-conditioned clue weighting and
//! Shared-Norm training over a positive video and sampled hard negatives.

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Query, Span};
use crate::numerics::nn::{Conv1d, Linear, TransformerLayer};
use crate::numerics::optim::{AdamW, AdamWConfig, GradBuffer};
use crate::numerics::param::join;
use crate::numerics::{kernels, Init, Module, Param, Real, Tape, Tensor, TensorError, Var};
use crate::retriever::{
    modular_pool, query_words, ModelConfig, QueryEncoder, VideoEncoder, VideoFeatures, EMBED_STD,
};

/// Guard for normalizing an all-zero importance vector.
pub const MCM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LocalizerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("ground-truth frame {index} outside video of {len} frames")]
    GroundTruth { index: usize, len: usize },
    #[error("query {0} has no ground-truth moment")]
    NoGroundTruth(String),
    #[error("query {query}: unknown video {video}")]
    UnknownVideo { query: String, video: String },
    #[error("rank list count {found} does not match query count {expected}")]
    RankLists { expected: usize, found: usize },
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizerArch {
    #[serde(default = "default_mmt_layers")]
    pub mmt_layers: usize,
    /// Kernel widths of the two stacked convolutions in each head.
    #[serde(default = "default_conv_widths")]
    pub conv_widths: [usize; 2],
}

fn default_mmt_layers() -> usize {
    3
}

fn default_conv_widths() -> [usize; 2] {
    [3, 3]
}

impl Default for LocalizerArch {
    fn default() -> Self {
        Self {
            mmt_layers: default_mmt_layers(),
            conv_widths: default_conv_widths(),
        }
    }
}

/// Two same-length convolutions with a GELU between them, `d → d → 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvHead<T> {
    pub hidden: Conv1d<T>,
    pub output: Conv1d<T>,
}

impl<T: Real> ConvHead<T> {
    fn new(init: &mut Init, d: usize, widths: [usize; 2]) -> Result<Self, TensorError> {
        Ok(Self {
            hidden: Conv1d::new(init, widths[0], d, d)?,
            output: Conv1d::new(init, widths[1], d, 1)?,
        })
    }

    /// Per-frame logits as an `n×1` column.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.output.forward(tape, self.hidden.forward(tape, x)?.gelu()?)
    }
}

impl<T: Real> Module<T> for ConvHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizerParams<T> {
    pub video: VideoEncoder<T>,
    pub query: QueryEncoder<T>,
    /// `W̄_I` and `W̄_s`, each `d×d`.
    pub mcm_image: Param<T>,
    pub mcm_subtitle: Param<T>,
    /// Modular-pooling projections for `q̄_I` and `q̄_s`, each `d×1`.
    pub pool_image: Param<T>,
    pub pool_subtitle: Param<T>,
    pub fusion: Linear<T>,
    /// Row 0: fused frame tokens, row 1: query tokens.
    pub modality: Param<T>,
    pub positions: Param<T>,
    pub mmt: Vec<TransformerLayer<T>>,
    pub start_head: ConvHead<T>,
    pub end_head: ConvHead<T>,
}

impl<T: Real> LocalizerParams<T> {
    pub fn new(
        seed: u64,
        cfg: &ModelConfig,
        arch: &LocalizerArch,
        d_img: usize,
        d_sub: usize,
        d_word: usize,
    ) -> Result<Self, TensorError> {
        let mut init = Init::new(seed);
        let d = cfg.d_model;
        let video = VideoEncoder::new(&mut init, cfg, d_img, d_sub)?;
        let query = QueryEncoder::new(&mut init, cfg, d_word)?;
        let mcm_image = init.fan_in(&[d, d], d);
        let mcm_subtitle = init.fan_in(&[d, d], d);
        let pool_image = init.fan_in(&[d, 1], d);
        let pool_subtitle = init.fan_in(&[d, 1], d);
        let fusion = Linear::new(&mut init, 2 * d, d);
        let modality = init.normal(&[2, d], EMBED_STD);
        let positions = init.normal(&[cfg.max_len, d], EMBED_STD);
        let mut mmt = Vec::with_capacity(arch.mmt_layers);
        for _ in 0..arch.mmt_layers {
            mmt.push(TransformerLayer::new(&mut init, d, cfg.n_heads, cfg.d_ff())?);
        }
        Ok(Self {
            video,
            query,
            mcm_image,
            mcm_subtitle,
            pool_image,
            pool_subtitle,
            fusion,
            modality,
            positions,
            mmt,
            start_head: ConvHead::new(&mut init, d, arch.conv_widths)?,
            end_head: ConvHead::new(&mut init, d, arch.conv_widths)?,
        })
    }

    /// Encode the query once: contextual words plus `q̄_I`, `q̄_s`.
    pub fn encode_query<'t>(&self, tape: &'t Tape<T>, words: &Tensor<T>) -> Result<EncodedQuery<'t, T>, TensorError> {
        let words = self.query.forward(tape, words)?;
        Ok(EncodedQuery {
            words,
            image: modular_pool(tape, words, &self.pool_image)?,
            subtitle: modular_pool(tape, words, &self.pool_subtitle)?,
        })
    }

    /// Start and end logits (`n×1` each) of one video for an encoded query.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        video: &VideoFeatures<T>,
        query: &EncodedQuery<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
        let n = video.n_frames();
        let n_words = query.words.shape()[0];
        let max = self.positions.value.rows();
        if n + n_words > max {
            return Err(TensorError::Config(format!(
                "sequence of length {} exceeds positional table of {max}",
                n + n_words
            )));
        }
        let (img, sub) = self.video.forward(tape, video)?;
        let img_hat = mcm_tape(tape, img, &self.mcm_image, query.image)?;
        let sub_hat = mcm_tape(tape, sub, &self.mcm_subtitle, query.subtitle)?;
        let fused = self.fusion.forward(tape, Var::concat(&[img_hat, sub_hat], 1)?)?;
        let modality = tape.param(&self.modality);
        let pos = tape.param(&self.positions);
        let frames = fused
            .add_row(modality.narrow(0, 0, 1)?)?
            .add(pos.narrow(0, 0, n)?)?;
        let words = query
            .words
            .add_row(modality.narrow(0, 1, 1)?)?
            .add(pos.narrow(0, n, n_words)?)?;
        let mut x = Var::concat(&[frames, words], 0)?;
        for layer in &self.mmt {
            x = layer.forward(tape, x, None)?;
        }
        let frame_states = x.narrow(0, 0, n)?;
        Ok((
            self.start_head.forward(tape, frame_states)?,
            self.end_head.forward(tape, frame_states)?,
        ))
    }
}

impl<T: Real> Module<T> for LocalizerParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.video.visit(&join(prefix, "video"), f);
        self.query.visit(&join(prefix, "query"), f);
        f(join(prefix, "mcm_image"), &self.mcm_image);
        f(join(prefix, "mcm_subtitle"), &self.mcm_subtitle);
        f(join(prefix, "pool_image"), &self.pool_image);
        f(join(prefix, "pool_subtitle"), &self.pool_subtitle);
        self.fusion.visit(&join(prefix, "fusion"), f);
        f(join(prefix, "modality"), &self.modality);
        f(join(prefix, "positions"), &self.positions);
        for (i, layer) in self.mmt.iter().enumerate() {
            layer.visit(&join(prefix, &format!("mmt.{i}")), f);
        }
        self.start_head.visit(&join(prefix, "start_head"), f);
        self.end_head.visit(&join(prefix, "end_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.video.visit_mut(&join(prefix, "video"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        f(join(prefix, "mcm_image"), &mut self.mcm_image);
        f(join(prefix, "mcm_subtitle"), &mut self.mcm_subtitle);
        f(join(prefix, "pool_image"), &mut self.pool_image);
        f(join(prefix, "pool_subtitle"), &mut self.pool_subtitle);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        f(join(prefix, "modality"), &mut self.modality);
        f(join(prefix, "positions"), &mut self.positions);
        for (i, layer) in self.mmt.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("mmt.{i}")), f);
        }
        self.start_head.visit_mut(&join(prefix, "start_head"), f);
        self.end_head.visit_mut(&join(prefix, "end_head"), f);
    }
}

#[derive(Clone, Copy)]
pub struct EncodedQuery<'t, T: Real> {
    pub words: Var<'t, T>,
    pub image: Var<'t, T>,
    pub subtitle: Var<'t, T>,
}

/// `ĉ_j = l2norm((W̄ c̄_j) ⊙ q̄) ⊙ c̄_j` for every row `c̄_j` of `reps`.
pub fn mcm_tape<'t, T: Real>(
    tape: &'t Tape<T>,
    reps: Var<'t, T>,
    weight: &Param<T>,
    query: Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let importance = reps
        .matmul_nt(tape.param(weight))?
        .mul_row(query)?
        .l2_normalize(1, T::lit(MCM_EPS))?;
    importance.mul(reps)
}

/// Value-level MCM weighting of `reps` (`n×d`) given `W̄` and `q̄`.
pub fn mcm_importance_and_weight<T: Real>(
    reps: &Tensor<T>,
    weight: &Tensor<T>,
    query: &[T],
) -> Result<Tensor<T>, TensorError> {
    let tape = Tape::new();
    let w = Param::new(weight.clone());
    let q = tape.leaf(Tensor::new(&[1, query.len()], query.to_vec())?);
    Ok(mcm_tape(&tape, tape.leaf(reps.clone()), &w, q)?.value())
}

/// `FC([Î; ŝ])` for a single frame.
pub fn fuse_frame<T: Real>(image: &[T], subtitle: &[T], fusion: &Linear<T>) -> Result<Vec<T>, TensorError> {
    let tape = Tape::new();
    let mut row = image.to_vec();
    row.extend_from_slice(subtitle);
    let x = tape.leaf(Tensor::new(&[1, row.len()], row)?);
    Ok(fusion.forward(&tape, x)?.value().into_data())
}

/// Start and end logits of one video. Entries past the true length (when
/// padded) hold negative infinity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLogits {
    pub video_id: String,
    pub st_logits: Vec<f64>,
    pub ed_logits: Vec<f64>,
}

impl FrameLogits {
    pub fn n_frames(&self) -> usize {
        self.st_logits.iter().filter(|x| x.is_finite()).count()
    }

    /// Pad to `len` entries with the negative-infinity sentinel.
    pub fn padded(&self, len: usize) -> Self {
        let pad = |v: &Vec<f64>| {
            let mut v = v.clone();
            v.resize(len.max(v.len()), f64::NEG_INFINITY);
            v
        };
        Self {
            video_id: self.video_id.clone(),
            st_logits: pad(&self.st_logits),
            ed_logits: pad(&self.ed_logits),
        }
    }
}

/// Localize `query` in each of `videos`, encoding the query once.
pub fn localize_videos<T: Real>(
    params: &LocalizerParams<T>,
    words: &Tensor<T>,
    videos: &[(&str, &VideoFeatures<T>)],
) -> Result<Vec<FrameLogits>, TensorError> {
    let tape = Tape::new();
    let q = params.encode_query(&tape, words)?;
    let mut out = Vec::with_capacity(videos.len());
    for (id, v) in videos {
        let (st, ed) = params.forward(&tape, v, &q)?;
        let col = |x: Var<'_, T>| x.value().data().iter().map(|v| v.as_f64()).collect();
        out.push(FrameLogits {
            video_id: id.to_string(),
            st_logits: col(st),
            ed_logits: col(ed),
        });
    }
    tape.check_finite()?;
    Ok(out)
}

pub fn localizer_forward<T: Real>(
    video_id: &str,
    video: &VideoFeatures<T>,
    words: &Tensor<T>,
    params: &LocalizerParams<T>,
) -> Result<FrameLogits, TensorError> {
    Ok(localize_videos(params, words, &[(video_id, video)])?.remove(0))
}

/// Shared-Norm losses `(L^st, L^ed)`: cross-entropy of the ground-truth
/// start (end) frame against the frames of the positive and all negatives
/// pooled into one softmax. Negative-infinity padding receives no mass.
pub fn shared_norm_losses(
    positive: &FrameLogits,
    gt: Span,
    negatives: &[FrameLogits],
) -> Result<(f64, f64), LocalizerError> {
    let n = positive.st_logits.len();
    for index in [gt.st, gt.ed] {
        if index >= n || !positive.st_logits[index].is_finite() {
            return Err(LocalizerError::GroundTruth { index, len: n });
        }
    }
    let pooled = |pick: fn(&FrameLogits) -> &Vec<f64>| -> Vec<f64> {
        std::iter::once(positive)
            .chain(negatives)
            .flat_map(|f| pick(f).iter().copied())
            .collect()
    };
    let st = kernels::cross_entropy_from_logits(&pooled(|f| &f.st_logits), gt.st)?;
    let ed = kernels::cross_entropy_from_logits(&pooled(|f| &f.ed_logits), gt.ed)?;
    Ok((st, ed))
}

/// Tape form of the Shared-Norm loss `L^st + L^ed` from per-video logit
/// columns; the positive comes first.
pub fn shared_norm_loss_tape<'t, T: Real>(
    videos: &[(Var<'t, T>, Var<'t, T>)],
    gt: Span,
) -> Result<Var<'t, T>, TensorError> {
    let row = |cols: Vec<Var<'t, T>>| -> Result<Var<'t, T>, TensorError> {
        let stacked = Var::concat(&cols, 0)?;
        let len = stacked.shape()[0];
        stacked.reshape(&[1, len])
    };
    let st = row(videos.iter().map(|v| v.0).collect())?.cross_entropy(&[gt.st])?;
    let ed = row(videos.iter().map(|v| v.1).collect())?.cross_entropy(&[gt.ed])?;
    st.add(ed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizerTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard negatives per query.
    pub n_negatives: usize,
    /// Negatives are drawn from this many top-ranked retrieved videos.
    #[serde(default = "default_negative_pool")]
    pub negative_pool: usize,
    pub optimizer: AdamWConfig,
}

fn default_negative_pool() -> usize {
    100
}

impl Default for LocalizerTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            n_negatives: 4,
            negative_pool: default_negative_pool(),
            optimizer: AdamWConfig::default(),
        }
    }
}

pub use crate::retriever::EpochLog;

/// Sample `n` negatives from `ranked` (video indices, best first) limited to
/// the first `pool` entries, excluding `positive`. Without replacement when
/// enough candidates exist, otherwise with replacement. Returns the sample
/// and whether replacement was needed.
pub fn sample_negatives(
    rng: &mut ChaCha8Rng,
    ranked: &[usize],
    positive: usize,
    n: usize,
    pool: usize,
) -> (Vec<usize>, bool) {
    let candidates: Vec<usize> = ranked.iter().take(pool).copied().filter(|&v| v != positive).collect();
    if candidates.is_empty() || n == 0 {
        return (Vec::new(), n > 0);
    }
    if candidates.len() >= n {
        let picks = index::sample(rng, candidates.len(), n);
        (picks.into_iter().map(|i| candidates[i]).collect(), false)
    } else {
        ((0..n).map(|_| candidates[rng.gen_range(0..candidates.len())]).collect(), true)
    }
}

/// Train the localizer. `rank_lists[i]` holds the retriever's ranking of
/// video indices for `queries[i]`, best first.
pub fn train_localizer(
    corpus: &Corpus,
    queries: &[Query],
    rank_lists: &[Vec<usize>],
    model_cfg: &ModelConfig,
    arch: &LocalizerArch,
    cfg: &LocalizerTrainConfig,
    seed: u64,
) -> Result<(LocalizerParams<f32>, Vec<EpochLog>), LocalizerError> {
    if cfg.batch_size == 0 {
        return Err(LocalizerError::Config("batch_size must be at least 1".into()));
    }
    if rank_lists.len() != queries.len() {
        return Err(LocalizerError::RankLists {
            expected: queries.len(),
            found: rank_lists.len(),
        });
    }
    let mut params = LocalizerParams::new(
        seed,
        model_cfg,
        arch,
        corpus.dims.d_img,
        corpus.dims.d_sub,
        corpus.dims.d_word,
    )?;
    let features: Vec<VideoFeatures<f32>> = corpus.videos.iter().map(VideoFeatures::from_video).collect();
    let mut examples = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let gt = q
            .ground_truth
            .as_ref()
            .ok_or_else(|| LocalizerError::NoGroundTruth(q.query_id.clone()))?;
        let vi = corpus.video_index(&gt.video_id).ok_or_else(|| LocalizerError::UnknownVideo {
            query: q.query_id.clone(),
            video: gt.video_id.clone(),
        })?;
        let len = features[vi].n_frames();
        if gt.ed_frame >= len || gt.st_frame > gt.ed_frame {
            return Err(LocalizerError::GroundTruth {
                index: gt.ed_frame,
                len,
            });
        }
        examples.push((qi, vi, gt.span()));
    }
    let words: Vec<Tensor<f32>> = queries.iter().map(query_words).collect();
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed_0002));
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut warned = false;
    for epoch in 0..cfg.epochs {
        examples.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        let n_batches = examples.len().div_ceil(cfg.batch_size);
        for (step, batch) in examples.chunks(cfg.batch_size).enumerate() {
            opt.set_progress(epoch * n_batches + step, cfg.epochs * n_batches);
            let mut buffer = GradBuffer::new(&params);
            for &(qi, vi, span) in batch {
                let (negatives, replaced) =
                    sample_negatives(&mut rng, &rank_lists[qi], vi, cfg.n_negatives, cfg.negative_pool);
                if replaced && !warned {
                    warn!(
                        "query {}: fewer than {} candidate negatives, sampling with replacement",
                        queries[qi].query_id, cfg.n_negatives
                    );
                    warned = true;
                }
                let tape = Tape::new();
                let q = params.encode_query(&tape, &words[qi])?;
                let mut cols = Vec::with_capacity(1 + negatives.len());
                for v in std::iter::once(vi).chain(negatives) {
                    cols.push(params.forward(&tape, &features[v], &q)?);
                }
                let loss = shared_norm_loss_tape(&cols, span)?;
                tape.check_finite()
                    .map_err(|source| LocalizerError::NonFinite { epoch, step, source })?;
                total += loss.item() as f64;
                buffer.add(&params, &tape.backward(loss)?);
            }
            opt.apply(&mut params, buffer, batch.len());
            if !params.all_finite() {
                return Err(LocalizerError::NonFinite {
                    epoch,
                    step,
                    source: TensorError::NonFinite { op: "adamw", node: 0 },
                });
            }
            steps += 1;
        }
        let mean_loss = total / examples.len().max(1) as f64;
        info!("localizer epoch {epoch}: loss {mean_loss:.4}");
        log.push(EpochLog {
            epoch,
            steps,
            mean_loss,
        });
    }
    Ok((params, log))
}
