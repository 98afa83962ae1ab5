// Independent oracles and the measurement suites shared by the topic tests
// and the acceptance runner. Nothing here calls the library kernels it checks.
#![allow(dead_code)]

use minute::corpus::Span;
use minute::index::{top_k_mips, VectorIndex};
use minute::localizer::{shared_norm_loss_tape, shared_norm_losses, FrameLogits, LocalizerArch, LocalizerParams};
use minute::numerics::nn::{Conv1d, LayerNorm, Linear, MultiHeadAttention, TransformerLayer};
use minute::numerics::{grad_check, grad_check_module, Init, Tape, Tensor, Var};
use minute::ranking::{
    enumerate_and_nms, score_video_candidates, shared_norm_inference, CandidateMoment, InferenceConfig, ScoringMode,
};
use minute::retriever::{infonce_tape, ModelConfig, QueryEmbeddings, RetrieverParams, VideoEmbeddings, VideoFeatures};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- kernel oracles ----

pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.at(i, t) * b.at(t, j);
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// `x` is `L×d_in`, `k` is `w×d_in×d_out`; zero padding keeps length `L`.
pub fn naive_conv1d(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64]) -> Tensor<f64> {
    let (len, d_in) = (x.rows(), x.cols());
    let (w, d_out) = (k.shape()[0], k.shape()[2]);
    let half = (w / 2) as isize;
    let mut out = vec![0.0; len * d_out];
    for t in 0..len {
        for o in 0..d_out {
            let mut s = bias[o];
            for tap in 0..w {
                let src = t as isize + tap as isize - half;
                if src < 0 || src >= len as isize {
                    continue;
                }
                for i in 0..d_in {
                    s += x.at(src as usize, i) * k.data()[(tap * d_in + i) * d_out + o];
                }
            }
            out[t * d_out + o] = s;
        }
    }
    Tensor::new(&[len, d_out], out).unwrap()
}

pub fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn affine(x: &Tensor<f64>, l: &Linear<f64>) -> Tensor<f64> {
    let mut y = naive_matmul(x, &l.weight.value);
    let n = y.cols();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += l.bias.value.data()[i % n];
    }
    y
}

/// `softmax(QKᵀ/√d_h)V` per head, concatenated and projected, written out
/// directly from the parameter values.
pub fn naive_attention(
    mha: &MultiHeadAttention<f64>,
    queries: &Tensor<f64>,
    keys: &Tensor<f64>,
    values: &Tensor<f64>,
    key_valid: Option<&[bool]>,
) -> Tensor<f64> {
    let q = affine(queries, &mha.query);
    let k = affine(keys, &mha.key);
    let v = affine(values, &mha.value);
    let d = q.cols();
    let dh = d / mha.n_heads;
    let (lq, lk) = (q.rows(), k.rows());
    let mut merged = vec![0.0; lq * d];
    for h in 0..mha.n_heads {
        for i in 0..lq {
            let mut scores = Vec::new();
            let mut cols = Vec::new();
            for j in 0..lk {
                if key_valid.is_some_and(|m| !m[j]) {
                    continue;
                }
                let mut s = 0.0;
                for c in 0..dh {
                    s += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                }
                scores.push(s / (dh as f64).sqrt());
                cols.push(j);
            }
            let w = naive_softmax(&scores);
            for c in 0..dh {
                merged[i * d + h * dh + c] = cols.iter().zip(&w).map(|(&j, &a)| a * v.at(j, h * dh + c)).sum();
            }
        }
    }
    affine(&Tensor::new(&[lq, d], merged).unwrap(), &mha.output)
}

// ---- ranking oracles ----

pub fn span_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = (a.1.min(b.1) + 1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

fn better(a: &CandidateMoment, b: &CandidateMoment) -> bool {
    if a.final_score != b.final_score {
        return a.final_score > b.final_score;
    }
    (a.video_rank, a.st_frame, a.ed_frame) < (b.video_rank, b.st_frame, b.ed_frame)
}

/// Quadratic greedy suppression: repeatedly take the best survivor and
/// strike every same-video candidate overlapping it above the threshold.
pub fn greedy_nms_oracle(candidates: &[CandidateMoment], nms_iou: f64, n_results: usize) -> Vec<CandidateMoment> {
    let mut alive = vec![true; candidates.len()];
    let mut out = Vec::new();
    while out.len() < n_results {
        let mut best: Option<usize> = None;
        for i in 0..candidates.len() {
            if alive[i] && best.map_or(true, |b| better(&candidates[i], &candidates[b])) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        let kept = &candidates[b];
        for i in 0..candidates.len() {
            let c = &candidates[i];
            if alive[i]
                && c.video_id == kept.video_id
                && span_iou((c.st_frame, c.ed_frame), (kept.st_frame, kept.ed_frame)) > nms_iou
            {
                alive[i] = false;
            }
        }
        out.push(kept.clone());
    }
    out
}

/// Concatenate every video's logits, softmax once, split back.
pub fn flatten_softmax_oracle(logits: &[FrameLogits]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let split = |pick: fn(&FrameLogits) -> &Vec<f64>| {
        let flat: Vec<f64> = logits.iter().flat_map(|f| pick(f).iter().copied()).collect();
        let finite: Vec<f64> = flat.iter().copied().filter(|x| x.is_finite()).collect();
        let probs = naive_softmax(&finite);
        let mut it = probs.into_iter();
        let mut out = Vec::new();
        for f in logits {
            out.push(pick(f).iter().map(|x| if x.is_finite() { it.next().unwrap() } else { 0.0 }).collect());
        }
        out
    };
    (split(|f| &f.st_logits), split(|f| &f.ed_logits))
}

pub fn random_logits(rng: &mut ChaCha8Rng, k: usize, max_frames: usize, scale: f64) -> Vec<FrameLogits> {
    (0..k)
        .map(|i| {
            let n = rng.gen_range(1..=max_frames);
            FrameLogits {
                video_id: format!("v{i}"),
                st_logits: (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
                ed_logits: (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
            }
        })
        .collect()
}

pub fn random_candidates(rng: &mut ChaCha8Rng, n: usize, n_videos: usize, n_frames: usize) -> Vec<CandidateMoment> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(0..n_videos);
            let st = rng.gen_range(0..n_frames);
            let ed = rng.gen_range(st..n_frames);
            // Coarse scores so that ties actually occur and exercise the tie-break.
            let score = rng.gen_range(0..12) as f64 * 0.5;
            CandidateMoment {
                video_id: format!("v{v}"),
                video_rank: v + 1,
                st_frame: st,
                ed_frame: ed,
                retrieval_score: 0.0,
                st_logit: 0.0,
                ed_logit: 0.0,
                final_score: score,
            }
        })
        .collect()
}

pub struct RankingInstance {
    pub retrieval: Vec<f64>,
    pub logits: Vec<FrameLogits>,
}

pub fn random_ranking_instance(rng: &mut ChaCha8Rng, max_videos: usize, max_frames: usize) -> RankingInstance {
    let k = rng.gen_range(1..=max_videos);
    RankingInstance {
        retrieval: (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        logits: random_logits(rng, k, max_frames, 3.0),
    }
}

/// Joint probability of every `(video, st, ed)` candidate written as the
/// product of three separately normalized softmaxes.
pub fn eq12_probabilities(inst: &RankingInstance, cfg: &InferenceConfig) -> Vec<((usize, usize, usize), f64)> {
    let z_r: f64 = inst.retrieval.iter().map(|s| s.exp()).sum();
    let z_st: f64 = inst.logits.iter().flat_map(|f| f.st_logits.iter()).map(|l| l.exp()).sum();
    let z_ed: f64 = inst.logits.iter().flat_map(|f| f.ed_logits.iter()).map(|l| l.exp()).sum();
    let mut out = Vec::new();
    for (v, f) in inst.logits.iter().enumerate() {
        let n = f.st_logits.len();
        for st in 0..n {
            for ed in st..n {
                let len = ed - st + 1;
                if len < cfg.min_moment_len || len > cfg.max_moment_len {
                    continue;
                }
                let p = (inst.retrieval[v].exp() / z_r) * (f.st_logits[st].exp() / z_st) * (f.ed_logits[ed].exp() / z_ed);
                out.push(((v + 1, st, ed), p));
            }
        }
    }
    out
}

pub fn all_candidates(inst: &RankingInstance, mode: ScoringMode, cfg: &InferenceConfig) -> Vec<CandidateMoment> {
    inst.logits
        .iter()
        .zip(&inst.retrieval)
        .enumerate()
        .flat_map(|(i, (l, &s))| score_video_candidates(i + 1, s, l, mode, cfg))
        .collect()
}

/// Compare the additive ordering with the direct probability ordering over
/// `n` random instances whose probabilities are separated by a relative gap.
/// Returns `(instances checked, instances with any order mismatch)`.
pub fn ranking_equivalence(n: usize, seed: u64) -> (usize, usize) {
    let mut rng = rng(seed);
    let cfg = InferenceConfig {
        max_moment_len: 4,
        ..InferenceConfig::default()
    };
    let (mut checked, mut mismatches) = (0, 0);
    while checked < n {
        let inst = random_ranking_instance(&mut rng, 5, 8);
        let mut probs = eq12_probabilities(&inst, &cfg);
        probs.sort_by(|a, b| b.1.total_cmp(&a.1));
        if probs.windows(2).any(|w| w[0].1 - w[1].1 <= 1e-9 * w[0].1) {
            continue;
        }
        let mut additive = all_candidates(&inst, ScoringMode::SharedNormAdditive, &cfg);
        additive.sort_by(minute::ranking::candidate_order);
        let a: Vec<(usize, usize, usize)> = additive.iter().map(|c| (c.video_rank, c.st_frame, c.ed_frame)).collect();
        let b: Vec<(usize, usize, usize)> = probs.iter().map(|p| p.0).collect();
        checked += 1;
        if a != b {
            mismatches += 1;
        }
    }
    (checked, mismatches)
}

pub struct NormInvariants {
    pub instances: usize,
    pub max_global_shift_delta: f64,
    pub min_per_video_shift_delta: f64,
    pub max_prob_sum_error: f64,
}

/// Shared-Norm loss under global and per-video logit shifts, and the mass of
/// Shared-Norm inference probabilities, on random instances.
pub fn normalization_invariants(n: usize, seed: u64) -> NormInvariants {
    let mut rng = rng(seed);
    let mut out = NormInvariants {
        instances: n,
        max_global_shift_delta: 0.0,
        min_per_video_shift_delta: f64::INFINITY,
        max_prob_sum_error: 0.0,
    };
    let shift = |f: &FrameLogits, c: f64| FrameLogits {
        video_id: f.video_id.clone(),
        st_logits: f.st_logits.iter().map(|x| x + c).collect(),
        ed_logits: f.ed_logits.iter().map(|x| x + c).collect(),
    };
    for _ in 0..n {
        let k = rng.gen_range(2..=6);
        let videos = random_logits(&mut rng, k, 12, 4.0);
        let pos = &videos[0];
        let n0 = pos.st_logits.len();
        let st = rng.gen_range(0..n0);
        let gt = Span::new(st, rng.gen_range(st..n0));
        let loss = |p: &FrameLogits, negs: &[FrameLogits]| {
            let (a, b) = shared_norm_losses(p, gt, negs).unwrap();
            a + b
        };
        let base = loss(pos, &videos[1..]);
        let c = rng.gen_range(-5.0..5.0);
        let shifted: Vec<FrameLogits> = videos.iter().map(|f| shift(f, c)).collect();
        out.max_global_shift_delta = out.max_global_shift_delta.max((loss(&shifted[0], &shifted[1..]) - base).abs());
        let mut one = videos.clone();
        let which = rng.gen_range(0..one.len());
        let c = rng.gen_range(0.5..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        one[which] = shift(&one[which], c);
        out.min_per_video_shift_delta = out.min_per_video_shift_delta.min((loss(&one[0], &one[1..]) - base).abs());
        let (ps, pe) = shared_norm_inference(&videos).unwrap();
        for p in [ps, pe] {
            let total: f64 = p.iter().flatten().sum();
            out.max_prob_sum_error = out.max_prob_sum_error.max((total - 1.0).abs());
        }
    }
    out
}

pub fn nms_matches_oracle(instances: usize, seed: u64) -> (usize, usize) {
    let mut rng = rng(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let n = rng.gen_range(1..60);
        let cands = random_candidates(&mut rng, n, 4, 16);
        let cfg = InferenceConfig {
            nms_iou: [0.3, 0.5, 0.7][rng.gen_range(0..3)],
            n_results: rng.gen_range(1..40),
            ..InferenceConfig::default()
        };
        let got = enumerate_and_nms(cands.clone(), &cfg);
        if got != greedy_nms_oracle(&cands, cfg.nms_iou, cfg.n_results) {
            mismatches += 1;
        }
    }
    (instances, mismatches)
}

// ---- gradient suite ----

#[derive(Debug)]
pub struct GradResult {
    pub name: &'static str,
    pub composite: bool,
    pub error: f64,
}

const EPS: f64 = 1e-5;

/// Reduce an op's output to a scalar with fixed random weights, so that
/// outputs like softmax rows (which sum to a constant) still carry gradient.
fn weighted_sum<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, minute::numerics::TensorError> {
    let w = rand_tensor(&mut rng(seed), &y.shape(), 1.0);
    y.mul(y.tape().leaf(w))?.sum()
}

fn op_check(name: &'static str, shape: &[usize], seed: u64, f: impl for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>, minute::numerics::TensorError>) -> GradResult {
    let x = rand_tensor(&mut rng(seed), shape, 1.0);
    let error = grad_check(|v| weighted_sum(f(v)?, seed + 1000), &x, EPS).unwrap();
    GradResult {
        name,
        composite: false,
        error,
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        ff_mult: 2,
        max_len: 16,
    }
}

pub fn random_video(rng: &mut ChaCha8Rng, n: usize, d_img: usize, d_sub: usize) -> VideoFeatures<f64> {
    let mut has_subtitle: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    has_subtitle[0] = true;
    let mut subtitle = rand_tensor(rng, &[n, d_sub], 1.0);
    for (j, &h) in has_subtitle.iter().enumerate() {
        if !h {
            subtitle.data_mut()[j * d_sub..(j + 1) * d_sub].fill(0.0);
        }
    }
    VideoFeatures {
        image: rand_tensor(rng, &[n, d_img], 1.0),
        subtitle,
        has_subtitle,
    }
}

pub fn grad_suite() -> Vec<GradResult> {
    let mut out = Vec::new();
    let mut r = rng(42);
    let other = rand_tensor(&mut r, &[4, 3], 1.0);
    let square = rand_tensor(&mut r, &[3, 5], 1.0);
    let row = rand_tensor(&mut r, &[3], 1.0);
    let kernels = rand_tensor(&mut r, &[3, 3, 2], 1.0);
    let cbias = rand_tensor(&mut r, &[2], 1.0);
    let gamma = rand_tensor(&mut r, &[3], 1.0);
    let beta = rand_tensor(&mut r, &[3], 1.0);

    out.push(op_check("matmul (left)", &[4, 3], 1, |x| x.matmul(x.tape().leaf(square.clone()))));
    out.push(op_check("matmul (right)", &[3, 5], 2, |x| x.tape().leaf(other.clone()).matmul(x)));
    out.push(op_check("matmul_nt", &[4, 3], 3, |x| x.matmul_nt(x.tape().leaf(other.clone()))));
    out.push(op_check("transpose", &[4, 3], 4, |x| x.transpose()));
    out.push(op_check("add", &[4, 3], 5, |x| x.add(x.tape().leaf(other.clone()))));
    out.push(op_check("sub", &[4, 3], 6, |x| x.tape().leaf(other.clone()).sub(x)));
    out.push(op_check("mul", &[4, 3], 7, |x| x.mul(x)));
    out.push(op_check("add_row", &[4, 3], 8, |x| x.add_row(x.tape().leaf(row.clone()))));
    out.push(op_check("add_row (bias)", &[3], 9, |b| b.tape().leaf(other.clone()).add_row(b)));
    out.push(op_check("mul_row", &[4, 3], 10, |x| x.mul_row(x.tape().leaf(row.clone()))));
    out.push(op_check("mul_row (row)", &[3], 11, |b| b.tape().leaf(other.clone()).mul_row(b)));
    out.push(op_check("scale", &[4, 3], 12, |x| x.scale(-1.7)));
    out.push(op_check("gelu", &[4, 3], 13, |x| x.gelu()));
    out.push(op_check("softmax axis 1", &[4, 3], 14, |x| x.softmax(1)));
    out.push(op_check("softmax axis 0", &[4, 3], 15, |x| x.softmax(0)));
    out.push(op_check("masked_softmax", &[4, 3], 16, |x| x.masked_softmax(&[true, false, true])));
    out.push(op_check("l2_normalize", &[4, 3], 17, |x| x.l2_normalize(1, 1e-12)));
    out.push(op_check("layer_norm", &[4, 3], 18, |x| {
        let t = x.tape();
        x.layer_norm(t.leaf(gamma.clone()), t.leaf(beta.clone()), 1e-5)
    }));
    out.push(op_check("layer_norm (gamma)", &[3], 19, |g| {
        let t = g.tape();
        t.leaf(other.clone()).layer_norm(g, t.leaf(beta.clone()), 1e-5)
    }));
    out.push(op_check("layer_norm (beta)", &[3], 20, |b| {
        let t = b.tape();
        t.leaf(other.clone()).layer_norm(t.leaf(gamma.clone()), b, 1e-5)
    }));
    out.push(op_check("concat axis 0", &[4, 3], 21, |x| Var::concat(&[x, x.tape().leaf(other.clone())], 0)));
    out.push(op_check("concat axis 1", &[4, 3], 22, |x| Var::concat(&[x.tape().leaf(other.clone()), x], 1)));
    out.push(op_check("narrow", &[4, 3], 23, |x| x.narrow(0, 1, 2)));
    out.push(op_check("index_select", &[4, 3], 24, |x| x.index_select(&[2, 0, 2, 3])));
    out.push(op_check("max_axis", &[4, 3], 25, |x| x.max_axis(1)));
    out.push(op_check("segment_max_cols", &[3, 7], 26, |x| x.segment_max_cols(&[(0, 3), (3, 0), (3, 4)])));
    out.push(op_check("sum", &[4, 3], 27, |x| x.sum()));
    out.push(op_check("mean", &[4, 3], 28, |x| x.mean()));
    out.push(op_check("reshape", &[4, 3], 29, |x| x.reshape(&[2, 6])));
    out.push(op_check("conv1d (input)", &[5, 3], 30, |x| {
        let t = x.tape();
        x.conv1d_same(t.leaf(kernels.clone()), t.leaf(cbias.clone()))
    }));
    out.push(op_check("conv1d (kernels)", &[3, 3, 2], 31, |k| {
        let t = k.tape();
        t.leaf(rand_tensor(&mut rng(77), &[5, 3], 1.0)).conv1d_same(k, t.leaf(cbias.clone()))
    }));
    out.push(op_check("conv1d (bias)", &[2], 32, |b| {
        let t = b.tape();
        t.leaf(rand_tensor(&mut rng(78), &[5, 3], 1.0)).conv1d_same(t.leaf(kernels.clone()), b)
    }));
    out.push(op_check("cross_entropy", &[4, 3], 33, |x| x.cross_entropy(&[0, 2, 1, 2])));

    out.extend(module_checks());
    out.extend(composite_checks());
    out
}

fn module_check<M: minute::numerics::Module<f64>>(
    name: &'static str,
    composite: bool,
    model: &mut M,
    loss: impl for<'t> Fn(&M, &'t Tape<f64>) -> Result<Var<'t, f64>, minute::numerics::TensorError>,
    max_coords: Option<usize>,
) -> GradResult {
    GradResult {
        name,
        composite,
        error: grad_check_module(model, loss, EPS, max_coords).unwrap(),
    }
}

fn module_checks() -> Vec<GradResult> {
    let mut init = Init::new(5);
    let x = rand_tensor(&mut rng(6), &[4, 8], 1.0);
    let mask = [true, false, true, true];
    let mut out = Vec::new();
    let mut lin: Linear<f64> = Linear::new(&mut init, 8, 3);
    out.push(module_check("linear", false, &mut lin, |m, t| weighted_sum(m.forward(t, t.leaf(x.clone()))?, 60), None));
    let mut norm: LayerNorm<f64> = LayerNorm::new(&mut init, 8);
    out.push(module_check("layer_norm module", false, &mut norm, |m, t| weighted_sum(m.forward(t, t.leaf(x.clone()))?, 61), None));
    let mut conv: Conv1d<f64> = Conv1d::new(&mut init, 3, 8, 2).unwrap();
    out.push(module_check("conv1d module", false, &mut conv, |m, t| weighted_sum(m.forward(t, t.leaf(x.clone()))?, 62), None));
    let mut mha: MultiHeadAttention<f64> = MultiHeadAttention::new(&mut init, 8, 2).unwrap();
    out.push(module_check(
        "multi-head attention (masked)",
        false,
        &mut mha,
        |m, t| {
            let v = t.leaf(x.clone());
            weighted_sum(m.forward(t, v, v, v, Some(&mask))?, 63)
        },
        None,
    ));
    let mut layer: TransformerLayer<f64> = TransformerLayer::new(&mut init, 8, 2, 16).unwrap();
    out.push(module_check(
        "transformer layer",
        false,
        &mut layer,
        |m, t| weighted_sum(m.forward(t, t.leaf(x.clone()), None)?, 64),
        None,
    ));
    let table = init.normal::<f64>(&[6, 8], 1.0);
    let mut emb = Linear {
        weight: table,
        bias: init.zeros(&[8]),
    };
    out.push(module_check(
        "embedding lookup",
        false,
        &mut emb,
        |m, t| weighted_sum(t.param(&m.weight).index_select(&[4, 1, 4])?, 65),
        None,
    ));
    out
}

fn composite_checks() -> Vec<GradResult> {
    let cfg = tiny_model();
    let (d_img, d_sub, d_word) = (5, 4, 6);
    let mut r = rng(9);
    let videos: Vec<VideoFeatures<f64>> = (0..3).map(|i| random_video(&mut r, 3 + i, d_img, d_sub)).collect();
    let words: Vec<Tensor<f64>> = (0..3).map(|i| rand_tensor(&mut r, &[2 + i, d_word], 1.0)).collect();
    let mut out = Vec::new();

    let mut retriever = RetrieverParams::<f64>::new(3, &cfg, d_img, d_sub, d_word).unwrap();
    out.push(module_check(
        "retriever InfoNCE loss",
        true,
        &mut retriever,
        |m, t| {
            let q: Vec<&Tensor<f64>> = words.iter().collect();
            let v: Vec<&VideoFeatures<f64>> = videos.iter().collect();
            let (lv, lq) = infonce_tape(m.score_matrix(t, &q, &v)?)?;
            lv.add(lq)
        },
        None,
    ));

    let arch = LocalizerArch {
        mmt_layers: 2,
        conv_widths: [3, 3],
    };
    let mut localizer = LocalizerParams::<f64>::new(4, &cfg, &arch, d_img, d_sub, d_word).unwrap();
    out.push(module_check(
        "localizer Shared-Norm loss",
        true,
        &mut localizer,
        |m, t| {
            let q = m.encode_query(t, &words[0])?;
            let cols = videos.iter().map(|v| m.forward(t, v, &q)).collect::<Result<Vec<_>, _>>()?;
            shared_norm_loss_tape(&cols, Span::new(1, 2))
        },
        None,
    ));
    out
}

// ---- evaluation fixture ----

use minute::corpus::Moment;
use minute::evaluation::{GroundTruth, Predictions, RankLists, Task};
use minute::ranking::PredictionRecord;

fn moment(v: &str, st: usize, ed: usize) -> Moment {
    Moment {
        video_id: v.into(),
        st_frame: st,
        ed_frame: ed,
    }
}

/// Ten queries; `q5` has no predictions at all.
pub fn recall_fixture() -> (Predictions, GroundTruth) {
    let gt: GroundTruth = [
        ("q0", "v0", 2, 5),
        ("q1", "v1", 0, 3),
        ("q2", "v2", 4, 7),
        ("q3", "v3", 0, 9),
        ("q4", "v4", 5, 5),
        ("q5", "v5", 2, 3),
        ("q6", "v6", 1, 4),
        ("q7", "v7", 0, 1),
        ("q8", "v8", 3, 6),
        ("q9", "v9", 0, 4),
    ]
    .into_iter()
    .map(|(q, v, s, e)| (q.to_string(), moment(v, s, e)))
    .collect();
    let lists: &[(&str, &[(&str, usize, usize)])] = &[
        ("q0", &[("v0", 2, 5), ("v1", 0, 1)]),
        ("q1", &[("v1", 0, 2), ("v1", 5, 8)]),
        ("q2", &[("v9", 4, 7), ("v2", 4, 7)]),
        ("q3", &[("v3", 0, 4), ("v4", 0, 9), ("v3", 0, 7)]),
        ("q4", &[("v4", 4, 5), ("v4", 5, 9)]),
        ("q6", &[("v6", 5, 8), ("v6", 2, 4)]),
        ("q7", &[("v0", 0, 1), ("v1", 0, 1), ("v7", 0, 2)]),
        ("q8", &[("v8", 3, 6)]),
        ("q9", &[("v2", 0, 4), ("v9", 1, 4)]),
    ];
    let mut preds = Predictions::new();
    for (q, list) in lists {
        let recs = list
            .iter()
            .enumerate()
            .map(|(i, &(v, st, ed))| PredictionRecord {
                query_id: q.to_string(),
                rank: i + 1,
                video_id: v.into(),
                st_frame: st,
                ed_frame: ed,
                score: -(i as f64),
                video_rank: 1,
            })
            .collect();
        preds.insert(q.to_string(), recs);
    }
    (preds, gt)
}

/// Hand count per `(task, K, IoU, strict)`. Per-query IoUs of the listed
/// predictions: q0 1.0 | q1 0.75 | q2 wrong video, then 1.0 | q3 0.5, wrong
/// video, 0.8 | q4 0.5, 0.2 | q5 none | q6 0.0, 0.75 | q7 wrong, wrong, 0.667
/// | q8 1.0 | q9 wrong video, then 0.8.
pub const RECALL_FIXTURE_EXPECTED: &[(Task, usize, f64, bool, f64)] = &[
    (Task::Vcmr, 1, 0.7, false, 30.0),
    (Task::Vcmr, 1, 0.5, false, 50.0),
    (Task::Vcmr, 1, 0.5, true, 30.0),
    (Task::Vcmr, 2, 0.7, false, 60.0),
    (Task::Vcmr, 5, 0.5, false, 90.0),
    (Task::Vcmr, 5, 0.7, false, 70.0),
    (Task::Svmr, 1, 0.5, false, 80.0),
    (Task::Svmr, 1, 0.7, false, 50.0),
    (Task::Svmr, 2, 0.7, false, 70.0),
];

/// Retrieved video lists for the same ten queries.
pub fn rank_list_fixture() -> RankLists {
    [
        ("q0", vec!["v0", "v1", "v2"]),
        ("q1", vec!["v3", "v1"]),
        ("q2", vec!["v9", "v8", "v7", "v2"]),
        ("q3", vec!["v3"]),
        ("q4", vec!["v0", "v1", "v2", "v3", "v5"]),
        ("q5", vec!["v5"]),
        ("q6", vec![]),
        ("q7", vec!["v1", "v7"]),
        ("q8", vec!["v0", "v8"]),
    ]
    .into_iter()
    .map(|(q, l)| (q.to_string(), l.into_iter().map(String::from).collect()))
    .collect()
}

/// Brute-force membership: is the gt video among the first `k` entries?
pub fn vr_oracle(lists: &RankLists, gt: &GroundTruth, k: usize) -> f64 {
    let mut hits = 0;
    for (q, m) in gt {
        if let Some(l) = lists.get(q) {
            if l.iter().take(k).any(|v| *v == m.video_id) {
                hits += 1;
            }
        }
    }
    100.0 * hits as f64 / gt.len() as f64
}

pub fn random_index(r: &mut ChaCha8Rng, n: usize, dim: usize) -> VectorIndex {
    let entries = (0..n)
        .map(|_| {
            let frames = r.gen_range(1..8);
            VideoEmbeddings {
                image_reps: rand_tensor(r, &[frames, dim], 1.0).cast::<f32>(),
                subtitle_reps: rand_tensor(r, &[frames, dim], 1.0).cast::<f32>(),
                subtitle_mask: (0..frames).map(|_| r.gen_bool(0.7)).collect(),
            }
        })
        .collect();
    VectorIndex {
        dim,
        video_ids: (0..n).map(|i| format!("video_{i:04}")).collect(),
        entries,
    }
}

pub fn random_query(r: &mut ChaCha8Rng, dim: usize) -> QueryEmbeddings<f32> {
    QueryEmbeddings {
        q_image: (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
        q_subtitle: (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
    }
}

/// Brute force: score every video from raw rows, sort by score then id.
pub fn brute_force_top_k(q: &QueryEmbeddings<f32>, index: &VectorIndex, k: usize) -> Vec<(String, f64)> {
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
    let mut all: Vec<(String, f64)> = index
        .entries
        .iter()
        .zip(&index.video_ids)
        .map(|(e, id)| {
            let frames = e.subtitle_mask.len();
            let mut best_img = f64::NEG_INFINITY;
            let mut best_sub = f64::NEG_INFINITY;
            for j in 0..frames {
                best_img = best_img.max(dot(&q.q_image, e.image_reps.row(j)));
                if e.subtitle_mask[j] {
                    best_sub = best_sub.max(dot(&q.q_subtitle, e.subtitle_reps.row(j)));
                }
            }
            let s = if best_sub.is_finite() { 0.5 * (best_img + best_sub) } else { best_img };
            (id.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Compare `top_k_mips` against [`brute_force_top_k`] for `queries` random
/// queries over `n_videos` videos at several K. Returns (checks, mismatches).
pub fn top_k_matches_oracle(n_videos: usize, queries: usize, seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let index = random_index(&mut r, n_videos, 16);
    let (mut checks, mut mismatches) = (0, 0);
    for _ in 0..queries {
        let q = random_query(&mut r, 16);
        for k in [1, 10, 100, n_videos] {
            let got = top_k_mips(&q, &index, k).unwrap();
            let want = brute_force_top_k(&q, &index, k);
            checks += 1;
            let same = got.len() == want.len()
                && got.iter().zip(&want).all(|(g, (id, s))| {
                    &g.video_id == id && index.video_ids[g.entry] == g.video_id && (g.score - s).abs() < 1e-10
                });
            mismatches += !same as usize;
        }
    }
    (checks, mismatches)
}
