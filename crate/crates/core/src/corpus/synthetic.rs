//! Synthetic corpora with planted ground-truth moments.
//!
//! Every frame shows one visual concept and (usually) one dialogue concept.
//! Frames are grouped into scenes that share both concepts. A query names the
//! visual and dialogue concept of one scene, and that (visual, dialogue) pair
//! occurs in exactly one scene of the whole corpus, so the planted moment is
//! the only place where both concepts co-occur.
//!
//! Distractor videos contain the query's visual concept in one scene and its
//! dialogue concept in another. A model that scores the two modalities
//! independently cannot tell them from the target video; one that checks
//! co-occurrence within a frame can. Apart from designated distractors, no
//! other video holds both concepts anywhere.
//!
//! Feature vectors are noisy orthonormal projections of shared latent concept
//! vectors, so word features are linearly related to the frame features of
//! the concept they name.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, FeatureDims, Moment, Query, Video};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_videos: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub frame_duration_s: f64,
    pub d_img: usize,
    pub d_sub: usize,
    pub d_word: usize,
    /// Dimension of each concept pool's latent space. Word features hold
    /// visual, dialogue and filler words in three orthogonal blocks, so
    /// `3 · latent_dim` may not exceed `d_word`.
    pub latent_dim: usize,
    /// Concepts per modality.
    pub n_concepts: usize,
    pub n_filler_words: usize,
    /// Per-coordinate Gaussian noise on unit-variance features.
    pub noise_std: f64,
    pub min_scene_len: usize,
    pub max_scene_len: usize,
    pub missing_subtitle_prob: f64,
    pub train_queries_per_video: usize,
    pub eval_queries_per_video: usize,
    pub min_query_words: usize,
    pub max_query_words: usize,
    /// Fraction of eval queries that receive designated distractor videos.
    pub distractor_fraction: f64,
    pub distractors_per_query: usize,
    /// Also give train queries distractors.
    pub train_distractors: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_videos: 200,
            min_frames: 20,
            max_frames: 20,
            frame_duration_s: 1.5,
            d_img: 32,
            d_sub: 32,
            d_word: 32,
            latent_dim: 6,
            n_concepts: 96,
            n_filler_words: 8,
            noise_std: 0.1,
            min_scene_len: 2,
            max_scene_len: 4,
            missing_subtitle_prob: 0.1,
            train_queries_per_video: 3,
            eval_queries_per_video: 1,
            min_query_words: 2,
            max_query_words: 5,
            distractor_fraction: 0.06,
            distractors_per_query: 5,
            train_distractors: false,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.n_videos == 0 {
            return fail("n_videos must be at least 1");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return fail("need 1 <= min_frames <= max_frames");
        }
        if self.min_scene_len == 0 || self.min_scene_len > self.max_scene_len {
            return fail("need 1 <= min_scene_len <= max_scene_len");
        }
        if self.latent_dim == 0
            || self.latent_dim > self.d_img
            || self.latent_dim > self.d_sub
            || 3 * self.latent_dim > self.d_word
        {
            return fail("latent_dim must be in 1..=min(d_img, d_sub, d_word / 3)");
        }
        if self.n_concepts < 3 {
            return fail("n_concepts must be at least 3");
        }
        if self.min_query_words < 2 || self.min_query_words > self.max_query_words {
            return fail("need 2 <= min_query_words <= max_query_words");
        }
        if self.max_query_words > 2 && self.n_filler_words == 0 {
            return fail("queries longer than two words need filler words");
        }
        if !(self.noise_std >= 0.0) || !(self.frame_duration_s > 0.0) {
            return fail("noise_std must be >= 0 and frame_duration_s > 0");
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction)
            || !(0.0..=1.0).contains(&self.missing_subtitle_prob)
        {
            return fail("probabilities must lie in [0, 1]");
        }
        if self.train_queries_per_video + self.eval_queries_per_video == 0 {
            return fail("at least one query per video is required");
        }
        Ok(())
    }
}

/// Generator-side labels kept for oracles and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    /// Visual concept per frame, per video.
    pub image_concepts: Vec<Vec<usize>>,
    /// Dialogue concept per frame (`None` when the frame has no subtitle).
    pub subtitle_concepts: Vec<Vec<Option<usize>>>,
    /// Query id to (visual concept, dialogue concept).
    pub query_concepts: BTreeMap<String, (usize, usize)>,
    /// Noise-free image feature of each visual concept (`n_concepts × d_img`).
    pub image_table: Tensor<f32>,
    /// Noise-free subtitle feature of each dialogue concept.
    pub subtitle_table: Tensor<f32>,
    /// Noise-free word features: visual concepts, then dialogue concepts, then fillers.
    pub word_table: Tensor<f32>,
    /// (query id, video id) pairs deliberately built as hard distractors.
    pub distractors: Vec<(String, String)>,
    /// Accidental co-occurrences the generator could not remove.
    pub unresolved_conflicts: usize,
}

pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub truth: SyntheticTruth,
}

#[derive(Clone, Debug)]
struct Scene {
    start: usize,
    len: usize,
    img: usize,
    sub: Option<usize>,
    planted: bool,
    locked: bool,
}

struct Layout {
    videos: Vec<Vec<Scene>>,
    pairs: HashMap<(usize, usize), usize>,
}

impl Layout {
    fn pair_free(&self, img: usize, sub: Option<usize>) -> bool {
        match sub {
            None => true,
            Some(s) => self.pairs.get(&(img, s)).copied().unwrap_or(0) == 0,
        }
    }

    fn set(&mut self, v: usize, s: usize, img: usize, sub: Option<usize>) {
        let scene = &mut self.videos[v][s];
        if let Some(old) = scene.sub {
            let c = self.pairs.get_mut(&(scene.img, old)).expect("tracked pair");
            *c -= 1;
        }
        scene.img = img;
        scene.sub = sub;
        if let Some(new) = sub {
            *self.pairs.entry((img, new)).or_insert(0) += 1;
        }
    }

    fn has_img(&self, v: usize, c: usize) -> bool {
        self.videos[v].iter().any(|s| s.img == c)
    }

    fn has_sub(&self, v: usize, c: usize) -> bool {
        self.videos[v].iter().any(|s| s.sub == Some(c))
    }
}

struct Planted {
    video: usize,
    scene: usize,
    split: &'static str,
}

/// Generate a corpus as a pure function of `(cfg, seed)`.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_c = cfg.n_concepts;

    let mut layout = Layout {
        videos: Vec::with_capacity(cfg.n_videos),
        pairs: HashMap::new(),
    };
    for v in 0..cfg.n_videos {
        let n = rng.gen_range(cfg.min_frames..=cfg.max_frames);
        layout.videos.push(Vec::new());
        let mut pos = 0;
        while pos < n {
            let remaining = n - pos;
            let mut len = rng.gen_range(cfg.min_scene_len..=cfg.max_scene_len).min(remaining);
            if remaining > len && remaining - len < cfg.min_scene_len {
                len = remaining;
            }
            let prev = layout.videos[v].last().map(|s: &Scene| (s.img, s.sub));
            let mut choice = None;
            for _ in 0..64 {
                let img = rng.gen_range(0..n_c);
                let sub = if rng.gen_bool(cfg.missing_subtitle_prob) {
                    None
                } else {
                    Some(rng.gen_range(0..n_c))
                };
                let clashes = prev.is_some_and(|(pi, ps)| pi == img || (sub.is_some() && ps == sub));
                if !clashes && layout.pair_free(img, sub) {
                    choice = Some((img, sub));
                    break;
                }
            }
            let (img, sub) = choice.unwrap_or((rng.gen_range(0..n_c), None));
            layout.videos[v].push(Scene {
                start: pos,
                len,
                img,
                sub: None,
                planted: false,
                locked: false,
            });
            let s = layout.videos[v].len() - 1;
            layout.set(v, s, img, sub);
            pos += len;
        }
    }

    // Plant query moments.
    let per_video = cfg.train_queries_per_video + cfg.eval_queries_per_video;
    let mut planted = Vec::new();
    for v in 0..cfg.n_videos {
        let mut order: Vec<usize> = (0..layout.videos[v].len()).collect();
        order.shuffle(&mut rng);
        for (k, &s) in order.iter().take(per_video).enumerate() {
            if layout.videos[v][s].sub.is_none() {
                let img = layout.videos[v][s].img;
                let fresh = (0..n_c)
                    .map(|_| rng.gen_range(0..n_c))
                    .find(|&c| layout.pair_free(img, Some(c)));
                match fresh {
                    Some(c) => layout.set(v, s, img, Some(c)),
                    None => continue,
                }
            }
            layout.videos[v][s].planted = true;
            let split = if k < cfg.train_queries_per_video { "train" } else { "eval" };
            planted.push(Planted { video: v, scene: s, split });
        }
    }
    let concepts = |layout: &Layout, p: &Planted| {
        let s = &layout.videos[p.video][p.scene];
        (s.img, s.sub.expect("planted scenes have subtitles"))
    };

    // Remove accidental co-occurrences of a query's two concepts.
    for _pass in 0..100 {
        let mut changed = false;
        for p in &planted {
            let (a, b) = concepts(&layout, p);
            for w in 0..cfg.n_videos {
                if w != p.video
                    && layout.has_img(w, a)
                    && layout.has_sub(w, b)
                    && recolor(&mut layout, &mut rng, &planted, w, a, b, n_c)
                {
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Designated distractors: one scene shows the visual concept, another
    // speaks the dialogue concept. Edits that would create a co-occurrence
    // for any other query are rolled back.
    let mut designated: HashSet<(usize, usize)> = HashSet::new();
    for (qi, p) in planted.iter().enumerate() {
        if cfg.n_videos < 2 || (p.split == "train" && !cfg.train_distractors) || !rng.gen_bool(cfg.distractor_fraction) {
            continue;
        }
        let (a, b) = concepts(&layout, p);
        let mut others: Vec<usize> = (0..cfg.n_videos).filter(|&w| w != p.video).collect();
        others.shuffle(&mut rng);
        let mut made = 0;
        for w in others {
            if made == cfg.distractors_per_query {
                break;
            }
            let scenes = &layout.videos[w];
            let free = |s: &Scene| !s.planted && !s.locked;
            let firsts: Vec<usize> = (0..scenes.len())
                .filter(|&i| {
                    let s = &scenes[i];
                    free(s) && s.sub != Some(b) && layout.pair_free(a, s.sub)
                })
                .collect();
            let Some(&s1) = firsts.choose(&mut rng) else { continue };
            // The two scenes are never adjacent, so no short span covers both.
            let seconds: Vec<usize> = (0..scenes.len())
                .filter(|&i| {
                    let s = &scenes[i];
                    i.abs_diff(s1) > 1 && free(s) && s.img != a && layout.pair_free(s.img, Some(b))
                })
                .collect();
            let Some(&s2) = seconds.choose(&mut rng) else { continue };
            let (img1, sub1) = (layout.videos[w][s1].img, layout.videos[w][s1].sub);
            let (img2, sub2) = (layout.videos[w][s2].img, layout.videos[w][s2].sub);
            layout.set(w, s1, a, sub1);
            layout.set(w, s2, img2, Some(b));
            designated.insert((qi, w));
            if count_conflicts(&layout, &planted, &designated, w) > 0 {
                designated.remove(&(qi, w));
                layout.set(w, s2, img2, sub2);
                layout.set(w, s1, img1, sub1);
                continue;
            }
            layout.videos[w][s1].locked = true;
            layout.videos[w][s2].locked = true;
            made += 1;
        }
    }

    let unresolved = (0..cfg.n_videos)
        .map(|w| count_conflicts(&layout, &planted, &designated, w))
        .sum();
    render(cfg, seed, &mut rng, &layout, &planted, &designated, unresolved)
}

/// Queries whose two concepts both appear in video `w` without `w` being
/// their own video or a designated distractor.
fn count_conflicts(layout: &Layout, planted: &[Planted], designated: &HashSet<(usize, usize)>, w: usize) -> usize {
    planted
        .iter()
        .enumerate()
        .filter(|&(qi, p)| {
            let s = &layout.videos[p.video][p.scene];
            let b = s.sub.expect("planted scenes have subtitles");
            p.video != w && !designated.contains(&(qi, w)) && layout.has_img(w, s.img) && layout.has_sub(w, b)
        })
        .count()
}

/// Whether showing visual concept `c` in scene `s` of video `w` keeps every
/// query's concept pair out of videos other than its own.
fn image_change_is_safe(layout: &Layout, planted: &[Planted], w: usize, s: usize, c: usize) -> bool {
    for p in planted {
        let q = &layout.videos[p.video][p.scene];
        let qb = q.sub.expect("planted scenes have subtitles");
        if q.img == c && p.video != w && layout.has_sub(w, qb) {
            return false;
        }
    }
    let scene = &layout.videos[w][s];
    if scene.planted {
        let sub = scene.sub.expect("planted scenes have subtitles");
        let clash = (0..layout.videos.len()).any(|u| u != w && layout.has_img(u, c) && layout.has_sub(u, sub));
        if clash {
            return false;
        }
    }
    true
}

/// Break the co-occurrence of visual `a` and dialogue `b` inside video `w`.
/// Free scenes are edited first; a planted scene only changes its visual
/// concept, which keeps its moment intact.
fn recolor(
    layout: &mut Layout,
    rng: &mut ChaCha8Rng,
    planted: &[Planted],
    w: usize,
    a: usize,
    b: usize,
    n_c: usize,
) -> bool {
    let n_scenes = layout.videos[w].len();
    let mut try_image = |layout: &mut Layout, in_planted: bool| {
        for s in 0..n_scenes {
            let scene = layout.videos[w][s].clone();
            if scene.locked || scene.planted != in_planted || scene.img != a {
                continue;
            }
            let neighbors: Vec<usize> = [s.checked_sub(1), Some(s + 1)]
                .into_iter()
                .flatten()
                .filter(|&i| i < n_scenes)
                .map(|i| layout.videos[w][i].img)
                .collect();
            for _ in 0..64 {
                let c = rng.gen_range(0..n_c);
                if c != a
                    && !neighbors.contains(&c)
                    && layout.pair_free(c, scene.sub)
                    && image_change_is_safe(layout, planted, w, s, c)
                {
                    layout.set(w, s, c, scene.sub);
                    return true;
                }
            }
        }
        false
    };
    if try_image(layout, false) {
        return true;
    }
    for s in 0..n_scenes {
        let scene = layout.videos[w][s].clone();
        if !scene.planted && !scene.locked && scene.sub == Some(b) {
            layout.set(w, s, scene.img, None);
            return true;
        }
    }
    try_image(layout, true)
}

fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn unit_latent(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `sqrt(d) · P z`, giving unit average coordinate variance.
fn project(basis: &[Vec<f64>], z: &[f64], d: usize) -> Vec<f64> {
    let scale = (d as f64).sqrt();
    (0..d)
        .map(|r| scale * basis.iter().zip(z).map(|(col, zi)| col[r] * zi).sum::<f64>())
        .collect()
}

fn table(rows: &[Vec<f64>]) -> Tensor<f32> {
    Tensor::from_rows(
        &rows
            .iter()
            .map(|r| r.iter().map(|&x| x as f32).collect())
            .collect::<Vec<_>>(),
    )
}

#[allow(clippy::too_many_arguments)]
fn render(
    cfg: &SyntheticConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
    layout: &Layout,
    planted: &[Planted],
    designated: &HashSet<(usize, usize)>,
    unresolved: usize,
) -> Result<SyntheticCorpus, CorpusError> {
    let n_c = cfg.n_concepts;
    let l = cfg.latent_dim;
    let p_img = orthonormal_columns(rng, cfg.d_img, l);
    let p_sub = orthonormal_columns(rng, cfg.d_sub, l);
    let p_word = orthonormal_columns(rng, cfg.d_word, 3 * l);
    let visual: Vec<Vec<f64>> = (0..n_c).map(|_| unit_latent(rng, l)).collect();
    let dialogue: Vec<Vec<f64>> = (0..n_c).map(|_| unit_latent(rng, l)).collect();
    let filler: Vec<Vec<f64>> = (0..cfg.n_filler_words).map(|_| unit_latent(rng, l)).collect();

    let image_rows: Vec<Vec<f64>> = visual.iter().map(|z| project(&p_img, z, cfg.d_img)).collect();
    let subtitle_rows: Vec<Vec<f64>> = dialogue.iter().map(|z| project(&p_sub, z, cfg.d_sub)).collect();
    let word_rows: Vec<Vec<f64>> = [&visual, &dialogue, &filler]
        .into_iter()
        .enumerate()
        .flat_map(|(block, zs)| zs.iter().map(move |z| (block, z)))
        .map(|(block, z)| project(&p_word[block * l..(block + 1) * l], z, cfg.d_word))
        .collect();

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| CorpusError::Config(e.to_string()))?;
    let noisy = |base: &[f64], rng: &mut ChaCha8Rng| -> Vec<f32> {
        base.iter()
            .map(|&x| {
                let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                (x + n) as f32
            })
            .collect()
    };

    let video_id = |v: usize| format!("v{v:05}");
    let mut videos = Vec::with_capacity(cfg.n_videos);
    let mut image_concepts = Vec::with_capacity(cfg.n_videos);
    let mut subtitle_concepts = Vec::with_capacity(cfg.n_videos);
    for (v, scenes) in layout.videos.iter().enumerate() {
        let n: usize = scenes.iter().map(|s| s.len).sum();
        let mut img = Vec::with_capacity(n * cfg.d_img);
        let mut sub = Vec::with_capacity(n * cfg.d_sub);
        let mut has = Vec::with_capacity(n);
        let mut ic = Vec::with_capacity(n);
        let mut sc = Vec::with_capacity(n);
        for s in scenes {
            for _ in 0..s.len {
                img.extend(noisy(&image_rows[s.img], rng));
                match s.sub {
                    Some(c) => {
                        sub.extend(noisy(&subtitle_rows[c], rng));
                        has.push(true);
                    }
                    None => {
                        sub.extend(std::iter::repeat(0.0f32).take(cfg.d_sub));
                        has.push(false);
                    }
                }
                ic.push(s.img);
                sc.push(s.sub);
            }
        }
        videos.push(Video::new(
            video_id(v),
            cfg.frame_duration_s,
            Tensor::new(&[n, cfg.d_img], img).expect("rows"),
            Tensor::new(&[n, cfg.d_sub], sub).expect("rows"),
            has,
        )?);
        image_concepts.push(ic);
        subtitle_concepts.push(sc);
    }

    let mut queries: BTreeMap<String, Vec<Query>> = BTreeMap::new();
    let mut query_concepts = BTreeMap::new();
    let mut distractors = Vec::new();
    let mut counters: HashMap<&'static str, usize> = HashMap::new();
    for (qi, p) in planted.iter().enumerate() {
        let scene = &layout.videos[p.video][p.scene];
        let (a, b) = (scene.img, scene.sub.expect("planted scenes have subtitles"));
        let count = counters.entry(p.split).or_insert(0);
        let query_id = format!("{}{:05}", if p.split == "train" { "qt" } else { "qe" }, *count);
        *count += 1;
        let n_words = rng.gen_range(cfg.min_query_words..=cfg.max_query_words);
        let mut ids = vec![a, n_c + b];
        for _ in 2..n_words {
            ids.push(2 * n_c + rng.gen_range(0..cfg.n_filler_words));
        }
        ids.shuffle(rng);
        let mut words = Vec::with_capacity(n_words * cfg.d_word);
        for &id in &ids {
            words.extend(noisy(&word_rows[id], rng));
        }
        let mut dlist: Vec<usize> = designated
            .iter()
            .filter(|(q, _)| *q == qi)
            .map(|&(_, w)| w)
            .collect();
        dlist.sort_unstable();
        for w in dlist {
            distractors.push((query_id.clone(), video_id(w)));
        }
        query_concepts.insert(query_id.clone(), (a, b));
        queries.entry(p.split.to_string()).or_default().push(Query {
            query_id,
            word_features: Tensor::new(&[n_words, cfg.d_word], words).expect("rows"),
            ground_truth: Some(Moment {
                video_id: video_id(p.video),
                st_frame: scene.start,
                ed_frame: scene.start + scene.len - 1,
            }),
        });
    }

    let corpus = Corpus {
        dims: FeatureDims {
            d_img: cfg.d_img,
            d_sub: cfg.d_sub,
            d_word: cfg.d_word,
        },
        seed: Some(seed),
        videos,
        queries,
    };
    corpus.validate()?;
    Ok(SyntheticCorpus {
        corpus,
        truth: SyntheticTruth {
            image_concepts,
            subtitle_concepts,
            query_concepts,
            image_table: table(&image_rows),
            subtitle_table: table(&subtitle_rows),
            word_table: table(&word_rows),
            distractors,
            unresolved_conflicts: unresolved,
        },
    })
}
