//! Parameterized layers built from tape ops.

use super::param::{join, Init, Module, Param};
use super::tape::{Tape, Var};
use super::tensor::Real;
use super::TensorError;

type R<'t, T> = Result<Var<'t, T>, TensorError>;

/// Affine map `x·W + b` applied to each row; `W` is `d_in×d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: init.fan_in(&[d_in, d_out], d_in),
            bias: init.zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> R<'t, T> {
        x.matmul(tape.param(&self.weight))?
            .add_row(tape.param(&self.bias))
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Real> LayerNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, d: usize) -> Self {
        Self {
            gamma: init.ones(&[d]),
            beta: init.zeros(&[d]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> R<'t, T> {
        x.layer_norm(
            tape.param(&self.gamma),
            tape.param(&self.beta),
            T::lit(Self::EPS),
        )
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub n_heads: usize,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new(init: &mut Init, d: usize, n_heads: usize) -> Result<Self, TensorError> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(TensorError::Config(format!(
                "{n_heads} heads do not divide model dimension {d}"
            )));
        }
        Ok(Self {
            query: Linear::new(init, d, d),
            key: Linear::new(init, d, d),
            value: Linear::new(init, d, d),
            output: Linear::new(init, d, d),
            n_heads,
        })
    }

    /// Attend from `queries` (`Lq×d`) over `keys`/`values` (`Lk×d`).
    /// `key_valid`, when given, must have `Lk` entries; `false` marks a
    /// padding key that receives zero weight.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        queries: Var<'t, T>,
        keys: Var<'t, T>,
        values: Var<'t, T>,
        key_valid: Option<&[bool]>,
    ) -> R<'t, T> {
        let d = self.query.d_out();
        let head_dim = d / self.n_heads;
        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys)?;
        let v = self.value.forward(tape, values)?;
        let scale = T::one() / T::lit(head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.narrow(1, h * head_dim, head_dim)?;
            let kh = k.narrow(1, h * head_dim, head_dim)?;
            let vh = v.narrow(1, h * head_dim, head_dim)?;
            let scores = qh.matmul_nt(kh)?.scale(scale)?;
            let weights = match key_valid {
                Some(mask) => scores.masked_softmax(mask)?,
                None => scores.softmax(1)?,
            };
            heads.push(weights.matmul(vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat(&heads, 1)?
        };
        self.output.forward(tape, merged)
    }
}

impl<T: Real> Module<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Post-norm transformer encoder layer with a GELU feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer<T> {
    pub attention: MultiHeadAttention<T>,
    pub norm1: LayerNorm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
    pub norm2: LayerNorm<T>,
}

impl<T: Real> TransformerLayer<T> {
    pub fn new(init: &mut Init, d: usize, n_heads: usize, d_ff: usize) -> Result<Self, TensorError> {
        Ok(Self {
            attention: MultiHeadAttention::new(init, d, n_heads)?,
            norm1: LayerNorm::new(init, d),
            ff_in: Linear::new(init, d, d_ff),
            ff_out: Linear::new(init, d_ff, d),
            norm2: LayerNorm::new(init, d),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, key_valid: Option<&[bool]>) -> R<'t, T> {
        let attended = self.attention.forward(tape, x, x, x, key_valid)?;
        let h = self.norm1.forward(tape, x.add(attended)?)?;
        let ff = self.ff_out.forward(tape, self.ff_in.forward(tape, h)?.gelu()?)?;
        self.norm2.forward(tape, h.add(ff)?)
    }
}

impl<T: Real> Module<T> for TransformerLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ff_in.visit(&join(prefix, "ff_in"), f);
        self.ff_out.visit(&join(prefix, "ff_out"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ff_in.visit_mut(&join(prefix, "ff_in"), f);
        self.ff_out.visit_mut(&join(prefix, "ff_out"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// Same-length 1-D convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    pub kernels: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn new(init: &mut Init, width: usize, d_in: usize, d_out: usize) -> Result<Self, TensorError> {
        if width % 2 == 0 {
            return Err(TensorError::Config(format!(
                "conv1d kernel width must be odd, got {width}"
            )));
        }
        Ok(Self {
            kernels: init.fan_in(&[width, d_in, d_out], width * d_in),
            bias: init.zeros(&[d_out]),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> R<'t, T> {
        x.conv1d_same(tape.param(&self.kernels), tape.param(&self.bias))
    }
}

impl<T: Real> Module<T> for Conv1d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "kernels"), &self.kernels);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "kernels"), &mut self.kernels);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
