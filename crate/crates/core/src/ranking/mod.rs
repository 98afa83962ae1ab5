//! Ranking moments pooled across the top retrieved videos.
//!
//! Two scoring modes are supported. `shared_norm_additive` scores a span
//! `(j, k)` of retrieved video `i` as `S^R_i + l^st_j + l^ed_k`, using raw
//! logits; since retrieval and localization softmaxes share one denominator
//! per query, this orders candidates exactly like the product of the
//! retrieval probability and the pooled start/end probabilities.
//! `baseline_exp` scores `exp(α S^R_i) · P_st(j) · P_ed(k)` with start/end
//! probabilities normalized within each video; it is ranked in the log
//! domain to stay finite for large `α`.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{temporal_iou, Span};
use crate::index::{top_k_mips, IndexError, Retrieved, VectorIndex};
use crate::localizer::{localize_videos, FrameLogits, LocalizerParams};
use crate::numerics::{kernels, Tensor, TensorError};
use crate::retriever::{encode_query_modular, RetrieverParams, VideoFeatures};

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("empty score list")]
    Empty,
    #[error("every frame position is masked")]
    AllMasked,
    #[error("invalid inference config: {0}")]
    Config(String),
    #[error("query {query}: {source}")]
    Query {
        query: String,
        #[source]
        source: Box<RankingError>,
    },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown video {0}")]
    UnknownVideo(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    SharedNormAdditive,
    BaselineExp,
}

impl ScoringMode {
    pub const ALL: [ScoringMode; 2] = [ScoringMode::SharedNormAdditive, ScoringMode::BaselineExp];

    pub fn name(self) -> &'static str {
        match self {
            ScoringMode::SharedNormAdditive => "shared_norm_additive",
            ScoringMode::BaselineExp => "baseline_exp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub top_k: usize,
    pub max_moment_len: usize,
    pub min_moment_len: usize,
    pub nms_iou: f64,
    pub n_results: usize,
    pub scoring_mode: ScoringMode,
    pub baseline_alpha: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            max_moment_len: 24,
            min_moment_len: 1,
            nms_iou: 0.7,
            n_results: 100,
            scoring_mode: ScoringMode::SharedNormAdditive,
            baseline_alpha: 20.0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), RankingError> {
        let fail = |m: String| Err(RankingError::Config(m));
        if self.top_k == 0 {
            return fail("top_k must be at least 1".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return fail(format!("nms_iou {} must lie in (0, 1)", self.nms_iou));
        }
        if self.min_moment_len == 0 || self.min_moment_len > self.max_moment_len {
            return fail("need 1 <= min_moment_len <= max_moment_len".into());
        }
        if self.n_results == 0 {
            return fail("n_results must be at least 1".into());
        }
        if !self.baseline_alpha.is_finite() {
            return fail("baseline_alpha must be finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateMoment {
    pub video_id: String,
    /// 1-based rank of the source video among the retrieved videos.
    pub video_rank: usize,
    pub st_frame: usize,
    pub ed_frame: usize,
    pub retrieval_score: f64,
    pub st_logit: f64,
    pub ed_logit: f64,
    pub final_score: f64,
}

impl CandidateMoment {
    pub fn span(&self) -> Span {
        Span::new(self.st_frame, self.ed_frame)
    }
}

/// Softmax over the top-K retrieval scores.
pub fn retrieval_probability_topk(scores: &[f64]) -> Result<Vec<f64>, RankingError> {
    if scores.is_empty() {
        return Err(RankingError::Empty);
    }
    Ok(kernels::softmax(&Tensor::vector(scores.to_vec()), 0)?.into_data())
}

fn pooled_softmax(per_video: &[&[f64]]) -> Result<Vec<Vec<f64>>, RankingError> {
    let max = per_video
        .iter()
        .flat_map(|v| v.iter().copied())
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(RankingError::AllMasked);
    }
    let exps: Vec<Vec<f64>> = per_video
        .iter()
        .map(|v| v.iter().map(|&x| if x.is_finite() { (x - max).exp() } else { 0.0 }).collect())
        .collect();
    let z: f64 = exps.iter().flatten().sum();
    Ok(exps.into_iter().map(|v| v.into_iter().map(|e| e / z).collect()).collect())
}

/// Start and end probabilities normalized jointly over every frame of every
/// video; non-finite (padding) logits receive zero.
#[allow(clippy::type_complexity)]
pub fn shared_norm_inference(logits: &[FrameLogits]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), RankingError> {
    if logits.is_empty() {
        return Err(RankingError::Empty);
    }
    let st: Vec<&[f64]> = logits.iter().map(|f| f.st_logits.as_slice()).collect();
    let ed: Vec<&[f64]> = logits.iter().map(|f| f.ed_logits.as_slice()).collect();
    Ok((pooled_softmax(&st)?, pooled_softmax(&ed)?))
}

/// Start and end probabilities normalized within one video.
pub fn single_video_probabilities(logits: &FrameLogits) -> Result<(Vec<f64>, Vec<f64>), RankingError> {
    let (mut st, mut ed) = shared_norm_inference(std::slice::from_ref(logits))?;
    Ok((st.remove(0), ed.remove(0)))
}

pub fn score_candidate_additive(retrieval_score: f64, st_logit: f64, ed_logit: f64) -> f64 {
    retrieval_score + st_logit + ed_logit
}

pub fn score_candidate_baseline(retrieval_score: f64, st_prob: f64, ed_prob: f64, alpha: f64) -> f64 {
    (alpha * retrieval_score).exp() * st_prob * ed_prob
}

/// Natural log of [`score_candidate_baseline`], computed from log-probabilities.
pub fn log_score_candidate_baseline(retrieval_score: f64, st_log_prob: f64, ed_log_prob: f64, alpha: f64) -> f64 {
    alpha * retrieval_score + st_log_prob + ed_log_prob
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = kernels::log_sum_exp(v);
    v.iter().map(|&x| x - lse).collect()
}

/// All spans `(j, k)` with `j ≤ k < n_frames` and length within the config bounds.
pub fn enumerate_spans(n_frames: usize, cfg: &InferenceConfig) -> Vec<Span> {
    let mut out = Vec::new();
    for st in 0..n_frames {
        for len in cfg.min_moment_len..=cfg.max_moment_len {
            let ed = st + len - 1;
            if ed >= n_frames {
                break;
            }
            out.push(Span::new(st, ed));
        }
    }
    out
}

/// Score every span of one retrieved video under `mode`.
pub fn score_video_candidates(
    video_rank: usize,
    retrieval_score: f64,
    logits: &FrameLogits,
    mode: ScoringMode,
    cfg: &InferenceConfig,
) -> Vec<CandidateMoment> {
    let n = logits.n_frames();
    let (st_lp, ed_lp) = match mode {
        ScoringMode::BaselineExp => (
            log_softmax(&logits.st_logits[..n]),
            log_softmax(&logits.ed_logits[..n]),
        ),
        ScoringMode::SharedNormAdditive => (Vec::new(), Vec::new()),
    };
    enumerate_spans(n, cfg)
        .into_iter()
        .map(|s| {
            let (l_st, l_ed) = (logits.st_logits[s.st], logits.ed_logits[s.ed]);
            let final_score = match mode {
                ScoringMode::SharedNormAdditive => score_candidate_additive(retrieval_score, l_st, l_ed),
                ScoringMode::BaselineExp => {
                    log_score_candidate_baseline(retrieval_score, st_lp[s.st], ed_lp[s.ed], cfg.baseline_alpha)
                }
            };
            CandidateMoment {
                video_id: logits.video_id.clone(),
                video_rank,
                st_frame: s.st,
                ed_frame: s.ed,
                retrieval_score,
                st_logit: l_st,
                ed_logit: l_ed,
                final_score,
            }
        })
        .collect()
}

/// Descending score, then ascending `(video_rank, st, ed)`.
pub fn candidate_order(a: &CandidateMoment, b: &CandidateMoment) -> Ordering {
    b.final_score
        .total_cmp(&a.final_score)
        .then(a.video_rank.cmp(&b.video_rank))
        .then(a.st_frame.cmp(&b.st_frame))
        .then(a.ed_frame.cmp(&b.ed_frame))
}

/// Sort candidates, greedily drop any whose IoU with a kept candidate of the
/// same video exceeds `nms_iou`, and stop after `n_results`.
pub fn enumerate_and_nms(mut candidates: Vec<CandidateMoment>, cfg: &InferenceConfig) -> Vec<CandidateMoment> {
    candidates.sort_by(candidate_order);
    let mut kept: Vec<CandidateMoment> = Vec::new();
    let mut by_video: HashMap<String, Vec<Span>> = HashMap::new();
    for c in candidates {
        if kept.len() == cfg.n_results {
            break;
        }
        let spans = by_video.entry(c.video_id.clone()).or_default();
        let suppressed = spans
            .iter()
            .any(|&s| temporal_iou(s, c.span()).expect("spans are ordered") > cfg.nms_iou);
        if !suppressed {
            spans.push(c.span());
            kept.push(c);
        }
    }
    kept
}

/// Rank moments from precomputed logits of retrieved videos (best first),
/// using only the first `k` of them.
pub fn rank_from_logits(
    retrieved: &[Retrieved],
    logits: &[FrameLogits],
    k: usize,
    mode: ScoringMode,
    cfg: &InferenceConfig,
) -> Vec<CandidateMoment> {
    let mut candidates = Vec::new();
    for (rank, (r, l)) in retrieved.iter().zip(logits).take(k).enumerate() {
        candidates.extend(score_video_candidates(rank + 1, r.score, l, mode, cfg));
    }
    enumerate_and_nms(candidates, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub query_id: String,
    pub retrieved: Vec<Retrieved>,
    pub logits: Vec<FrameLogits>,
    pub moments: Vec<CandidateMoment>,
}

/// Retrieve the top-`k` videos and localize the query in each of them.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_and_localize(
    query_id: &str,
    words: &Tensor<f32>,
    index: &VectorIndex,
    features: &HashMap<String, VideoFeatures<f32>>,
    retriever: &RetrieverParams<f32>,
    localizer: &LocalizerParams<f32>,
    k: usize,
) -> Result<(Vec<Retrieved>, Vec<FrameLogits>), RankingError> {
    let wrap = |e: RankingError| RankingError::Query {
        query: query_id.to_string(),
        source: Box::new(e),
    };
    let qe = encode_query_modular(words, retriever).map_err(|e| wrap(e.into()))?;
    let retrieved = top_k_mips(&qe, index, k).map_err(|e| wrap(e.into()))?;
    let mut videos = Vec::with_capacity(retrieved.len());
    for r in &retrieved {
        let f = features
            .get(&r.video_id)
            .ok_or_else(|| wrap(RankingError::UnknownVideo(r.video_id.clone())))?;
        videos.push((r.video_id.as_str(), f));
    }
    let logits = localize_videos(localizer, words, &videos).map_err(|e| wrap(e.into()))?;
    Ok((retrieved, logits))
}

/// Retrieve the top-K videos, localize the query in each and rank all
/// candidate moments under `cfg.scoring_mode`.
pub fn rank_moments(
    query_id: &str,
    words: &Tensor<f32>,
    index: &VectorIndex,
    features: &HashMap<String, VideoFeatures<f32>>,
    retriever: &RetrieverParams<f32>,
    localizer: &LocalizerParams<f32>,
    cfg: &InferenceConfig,
) -> Result<RankedResult, RankingError> {
    cfg.validate().map_err(|e| RankingError::Query {
        query: query_id.to_string(),
        source: Box::new(e),
    })?;
    let (retrieved, logits) = retrieve_and_localize(query_id, words, index, features, retriever, localizer, cfg.top_k)?;
    let moments = rank_from_logits(&retrieved, &logits, cfg.top_k, cfg.scoring_mode, cfg);
    Ok(RankedResult {
        query_id: query_id.to_string(),
        retrieved,
        logits,
        moments,
    })
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub query_id: String,
    pub rank: usize,
    pub video_id: String,
    pub st_frame: usize,
    pub ed_frame: usize,
    pub score: f64,
    pub video_rank: usize,
}

pub fn prediction_records(query_id: &str, moments: &[CandidateMoment]) -> Vec<PredictionRecord> {
    moments
        .iter()
        .enumerate()
        .map(|(i, m)| PredictionRecord {
            query_id: query_id.to_string(),
            rank: i + 1,
            video_id: m.video_id.clone(),
            st_frame: m.st_frame,
            ed_frame: m.ed_frame,
            score: m.final_score,
            video_rank: m.video_rank,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(video: &str, rank: usize, st: usize, ed: usize, score: f64) -> CandidateMoment {
        CandidateMoment {
            video_id: video.into(),
            video_rank: rank,
            st_frame: st,
            ed_frame: ed,
            retrieval_score: 0.0,
            st_logit: 0.0,
            ed_logit: 0.0,
            final_score: score,
        }
    }

    #[test]
    fn retrieval_probabilities() {
        assert_eq!(retrieval_probability_topk(&[0.3]).unwrap(), vec![1.0]);
        let p = retrieval_probability_topk(&[2.0; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = retrieval_probability_topk(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15 && (p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!(matches!(retrieval_probability_topk(&[]), Err(RankingError::Empty)));
    }

    #[test]
    fn shared_norm_uniform_and_single_video() {
        let f = |id: &str| FrameLogits {
            video_id: id.into(),
            st_logits: vec![0.0, 0.0],
            ed_logits: vec![0.0, 0.0],
        };
        let (st, ed) = shared_norm_inference(&[f("a"), f("b")]).unwrap();
        assert!(st.iter().chain(&ed).flatten().all(|&p| p == 0.25));
        let one = FrameLogits {
            video_id: "a".into(),
            st_logits: vec![1.0, -2.0, 0.5],
            ed_logits: vec![0.0, 3.0, 1.0],
        };
        let (st, _) = shared_norm_inference(std::slice::from_ref(&one)).unwrap();
        let direct = kernels::softmax(&Tensor::vector(one.st_logits.clone()), 0).unwrap();
        assert_eq!(st[0], direct.data());
        let masked = FrameLogits {
            video_id: "m".into(),
            st_logits: vec![f64::NEG_INFINITY],
            ed_logits: vec![f64::NEG_INFINITY],
        };
        assert!(matches!(shared_norm_inference(&[masked]), Err(RankingError::AllMasked)));
    }

    #[test]
    fn scoring_examples() {
        assert!((score_candidate_additive(0.5, 1.2, -0.3) - 1.4).abs() < 1e-15);
        assert_eq!(score_candidate_baseline(3.0, 0.4, 0.5, 0.0), 0.2);
        assert_eq!(score_candidate_baseline(0.0, 0.4, 0.5, 7.0), 0.2);
        assert!((score_candidate_baseline(1.0, 0.4, 0.5, 1.0) - 0.543_656_365_691_809).abs() < 1e-12);
        let log = log_score_candidate_baseline(1.0, 0.4f64.ln(), 0.5f64.ln(), 1.0);
        assert!((log.exp() - score_candidate_baseline(1.0, 0.4, 0.5, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn span_enumeration_respects_bounds() {
        let cfg = InferenceConfig {
            min_moment_len: 2,
            max_moment_len: 3,
            ..InferenceConfig::default()
        };
        let spans = enumerate_spans(4, &cfg);
        let expect = [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)].map(|(a, b)| Span::new(a, b));
        assert_eq!(spans, expect);
    }

    #[test]
    fn nms_examples() {
        let cfg = InferenceConfig::default();
        let one = vec![cand("a", 1, 2, 4, 0.1)];
        assert_eq!(enumerate_and_nms(one.clone(), &cfg), one);
        let kept = enumerate_and_nms(vec![cand("a", 1, 2, 4, 1.0), cand("a", 1, 2, 4, 2.0)], &cfg);
        assert_eq!(kept, vec![cand("a", 1, 2, 4, 2.0)]);
        // Same span in different videos never suppresses.
        let kept = enumerate_and_nms(vec![cand("a", 1, 2, 4, 1.0), cand("b", 2, 2, 4, 2.0)], &cfg);
        assert_eq!(kept.len(), 2);
        // Ties resolve by video rank, then start, then end.
        let kept = enumerate_and_nms(
            vec![cand("b", 2, 0, 0, 1.0), cand("a", 1, 5, 5, 1.0), cand("a", 1, 3, 3, 1.0)],
            &cfg,
        );
        let order: Vec<_> = kept.iter().map(|c| (c.video_rank, c.st_frame)).collect();
        assert_eq!(order, [(1, 3), (1, 5), (2, 0)]);
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::default().validate().is_ok());
        for bad in [
            InferenceConfig { top_k: 0, ..Default::default() },
            InferenceConfig { nms_iou: 1.0, ..Default::default() },
            InferenceConfig { min_moment_len: 5, max_moment_len: 4, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
