use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor};

static NEXT_PARAM_ID: AtomicUsize = AtomicUsize::new(0);

/// A learnable tensor with an identity used to key tape leaves.
#[derive(Clone, Debug)]
pub struct Param<T> {
    id: usize,
    pub value: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

impl<T: PartialEq> PartialEq for Param<T> {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

/// A tree of named parameters.
///
/// Visit order is fixed by each implementation and defines the layout of
/// checkpoints and optimizer state.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name, p)));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, p| ok &= p.value.all_finite());
        ok
    }
}

/// Join a parent path and a field name with `.`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded parameter initializer. Values are drawn in `f64` and converted,
/// so the same seed yields the same model in either precision.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Param<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.gen_range(-bound..bound)))
            .collect();
        Param::new(Tensor::new(shape, data).expect("shape"))
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Param<T> {
        let dist = Normal::new(0.0, std).expect("std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        Param::new(Tensor::new(shape, data).expect("shape"))
    }

    pub fn zeros<T: Real>(&mut self, shape: &[usize]) -> Param<T> {
        Param::new(Tensor::zeros(shape))
    }

    pub fn ones<T: Real>(&mut self, shape: &[usize]) -> Param<T> {
        Param::new(Tensor::full(shape, T::one()))
    }
}
