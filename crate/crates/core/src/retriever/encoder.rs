//! Video and query encoders shared in shape by the retriever and localizer.

use serde::{Deserialize, Serialize};

use crate::corpus::{Query, Video};
use crate::numerics::nn::{Linear, TransformerLayer};
use crate::numerics::param::join;
use crate::numerics::{Init, Module, Param, Real, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward width as a multiple of `d_model`.
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    /// Rows in each positional-embedding table.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_ff_mult() -> usize {
    4
}

fn default_max_len() -> usize {
    128
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            ff_mult: default_ff_mult(),
            max_len: default_max_len(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(TensorError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ff_mult == 0 || self.max_len == 0 {
            return Err(TensorError::Config("ff_mult and max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.ff_mult
    }
}

/// Standard deviation of embedding-table initialization.
pub const EMBED_STD: f64 = 0.02;

/// Frame features of one video in the working precision.
#[derive(Clone, Debug)]
pub struct VideoFeatures<T: Real> {
    pub image: Tensor<T>,
    pub subtitle: Tensor<T>,
    pub has_subtitle: Vec<bool>,
}

impl<T: Real> VideoFeatures<T> {
    pub fn from_video(v: &Video) -> Self {
        Self {
            image: v.image_features.cast(),
            subtitle: v.subtitle_features.cast(),
            has_subtitle: v.has_subtitle.clone(),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.has_subtitle.len()
    }
}

pub fn query_words<T: Real>(q: &Query) -> Tensor<T> {
    q.word_features.cast()
}

fn check_len(len: usize, max: usize) -> Result<(), TensorError> {
    if len > max {
        return Err(TensorError::Config(format!(
            "sequence of length {len} exceeds positional table of {max}"
        )));
    }
    Ok(())
}

/// Projects image and subtitle frames to `d`, adds modality and positional
/// embeddings and runs one transformer layer over the joint `2|v|` stream.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoEncoder<T> {
    pub image_proj: Linear<T>,
    pub subtitle_proj: Linear<T>,
    /// Row 0: image, row 1: subtitle.
    pub modality: Param<T>,
    pub positions: Param<T>,
    pub layer: TransformerLayer<T>,
}

impl<T: Real> VideoEncoder<T> {
    pub fn new(init: &mut Init, cfg: &ModelConfig, d_img: usize, d_sub: usize) -> Result<Self, TensorError> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            image_proj: Linear::new(init, d_img, d),
            subtitle_proj: Linear::new(init, d_sub, d),
            modality: init.normal(&[2, d], EMBED_STD),
            positions: init.normal(&[cfg.max_len, d], EMBED_STD),
            layer: TransformerLayer::new(init, d, cfg.n_heads, cfg.d_ff())?,
        })
    }

    /// Returns `(image_reps, subtitle_reps)`, each `|v|×d`. Subtitle tokens of
    /// frames without a subtitle are excluded as attention keys.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        video: &VideoFeatures<T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
        let n = video.n_frames();
        check_len(n, self.positions.value.rows())?;
        let modality = tape.param(&self.modality);
        let pos = tape.param(&self.positions).narrow(0, 0, n)?;
        let img = self
            .image_proj
            .forward(tape, tape.leaf(video.image.clone()))?
            .add_row(modality.narrow(0, 0, 1)?)?
            .add(pos)?;
        let sub = self
            .subtitle_proj
            .forward(tape, tape.leaf(video.subtitle.clone()))?
            .add_row(modality.narrow(0, 1, 1)?)?
            .add(pos)?;
        let stream = Var::concat(&[img, sub], 0)?;
        let mut valid = vec![true; n];
        valid.extend_from_slice(&video.has_subtitle);
        let all_valid = valid.iter().all(|&b| b);
        let out = self.layer.forward(tape, stream, (!all_valid).then_some(valid.as_slice()))?;
        Ok((out.narrow(0, 0, n)?, out.narrow(0, n, n)?))
    }
}

impl<T: Real> Module<T> for VideoEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.image_proj.visit(&join(prefix, "image_proj"), f);
        self.subtitle_proj.visit(&join(prefix, "subtitle_proj"), f);
        f(join(prefix, "modality"), &self.modality);
        f(join(prefix, "positions"), &self.positions);
        self.layer.visit(&join(prefix, "layer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.image_proj.visit_mut(&join(prefix, "image_proj"), f);
        self.subtitle_proj.visit_mut(&join(prefix, "subtitle_proj"), f);
        f(join(prefix, "modality"), &mut self.modality);
        f(join(prefix, "positions"), &mut self.positions);
        self.layer.visit_mut(&join(prefix, "layer"), f);
    }
}

/// Word projection, positional embeddings and one transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEncoder<T> {
    pub word_proj: Linear<T>,
    pub positions: Param<T>,
    pub layer: TransformerLayer<T>,
}

impl<T: Real> QueryEncoder<T> {
    pub fn new(init: &mut Init, cfg: &ModelConfig, d_word: usize) -> Result<Self, TensorError> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            word_proj: Linear::new(init, d_word, d),
            positions: init.normal(&[cfg.max_len, d], EMBED_STD),
            layer: TransformerLayer::new(init, d, cfg.n_heads, cfg.d_ff())?,
        })
    }

    /// Contextual word representations, `L×d`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, words: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let n = words.rows();
        if words.rank() != 2 || n == 0 {
            return Err(TensorError::Config("query must contain at least one word".into()));
        }
        check_len(n, self.positions.value.rows())?;
        let pos = tape.param(&self.positions).narrow(0, 0, n)?;
        let x = self.word_proj.forward(tape, tape.leaf(words.clone()))?.add(pos)?;
        self.layer.forward(tape, x, None)
    }
}

impl<T: Real> Module<T> for QueryEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.word_proj.visit(&join(prefix, "word_proj"), f);
        f(join(prefix, "positions"), &self.positions);
        self.layer.visit(&join(prefix, "layer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.word_proj.visit_mut(&join(prefix, "word_proj"), f);
        f(join(prefix, "positions"), &mut self.positions);
        self.layer.visit_mut(&join(prefix, "layer"), f);
    }
}

/// Modular pooling: `o = w·W`, `α = softmax(o)`, result `αᵀ w` (`1×d`).
/// `weight` is a `d×1` parameter.
pub fn modular_pool<'t, T: Real>(
    tape: &'t Tape<T>,
    words: Var<'t, T>,
    weight: &Param<T>,
) -> Result<Var<'t, T>, TensorError> {
    let alpha = words.matmul(tape.param(weight))?.softmax(0)?;
    alpha.transpose()?.matmul(words)
}
