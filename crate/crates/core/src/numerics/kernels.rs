//! Forward kernels over plain tensors. The tape calls these for its forward
//! pass; oracles and inference code may call them directly.
//!
//! Every reduction runs in a fixed left-to-right order so results are
//! bitwise reproducible for identical inputs.

use super::tensor::{split_axis, Real, Tensor};
use super::TensorError;

fn require_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (n, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out.push(dot(arow, b.row(j)));
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (k, m) = require_matrix("matmul_tn", a)?;
    let (k2, n) = require_matrix("matmul_tn", b)?;
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, n) = require_matrix("transpose", a)?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    let (outer, len, inner) = split_axis(x.shape(), axis)?;
    if len == 0 {
        return Err(TensorError::EmptyAxis { op: "softmax", axis });
    }
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(src[idx(a)]);
            }
            let mut sum = T::zero();
            for a in 0..len {
                let e = (src[idx(a)] - max).exp();
                out[idx(a)] = e;
                sum += e;
            }
            for a in 0..len {
                out[idx(a)] = out[idx(a)] / sum;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Softmax over the last axis where only `valid[j]` columns participate;
/// invalid columns receive exactly zero weight.
pub fn masked_softmax_rows<T: Real>(x: &Tensor<T>, valid: &[bool]) -> Result<Tensor<T>, TensorError> {
    let cols = x.cols();
    if valid.len() != cols {
        return Err(TensorError::Shape {
            op: "masked_softmax",
            lhs: x.shape().to_vec(),
            rhs: vec![valid.len()],
        });
    }
    if !valid.iter().any(|&v| v) {
        return Err(TensorError::EmptyAxis {
            op: "masked_softmax",
            axis: x.rank().saturating_sub(1),
        });
    }
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if valid[j] {
                max = max.max(v);
            }
        }
        let mut sum = T::zero();
        for j in 0..cols {
            if valid[j] {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Tensor::new(x.shape(), out)
}

/// `x / max(‖x‖₂, eps)` along `axis`.
pub fn l2_normalize<T: Real>(x: &Tensor<T>, axis: usize, eps: T) -> Result<Tensor<T>, TensorError> {
    let (outer, len, inner) = split_axis(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut sq = T::zero();
            for a in 0..len {
                sq += src[idx(a)] * src[idx(a)];
            }
            let denom = sq.sqrt().max(eps);
            for a in 0..len {
                out[idx(a)] = src[idx(a)] / denom;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Same-length 1-D convolution over the row axis.
///
/// `x` is `L×d_in`, `kernels` is `width×d_in×d_out` with odd `width`,
/// `bias` has `d_out` entries. Out-of-range rows are zero padded.
pub fn conv1d_same<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (len, d_in) = require_matrix("conv1d", x)?;
    let (width, k_in, d_out) = match kernels.shape() {
        [w, i, o] => (*w, *i, *o),
        s => {
            return Err(TensorError::Rank {
                op: "conv1d",
                expected: 3,
                shape: s.to_vec(),
            })
        }
    };
    if width % 2 == 0 {
        return Err(TensorError::Config(format!(
            "conv1d kernel width must be odd, got {width}"
        )));
    }
    if k_in != d_in || bias.len() != d_out {
        return Err(TensorError::Shape {
            op: "conv1d",
            lhs: x.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    let half = width / 2;
    let (xd, kd) = (x.data(), kernels.data());
    let mut out = Vec::with_capacity(len * d_out);
    for _ in 0..len {
        out.extend_from_slice(bias.data());
    }
    for t in 0..len {
        let orow = &mut out[t * d_out..(t + 1) * d_out];
        for r in 0..width {
            let src = t as isize + r as isize - half as isize;
            if src < 0 || src as usize >= len {
                continue;
            }
            let xrow = &xd[src as usize * d_in..(src as usize + 1) * d_in];
            for (i, &xv) in xrow.iter().enumerate() {
                let krow = &kd[(r * d_in + i) * d_out..(r * d_in + i + 1) * d_out];
                for (o, &kv) in orow.iter_mut().zip(krow) {
                    *o += xv * kv;
                }
            }
        }
    }
    Tensor::new(&[len, d_out], out)
}

/// Layer normalization over the last axis. Returns the output plus the
/// per-row mean and reciprocal standard deviation used by the backward pass.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>), TensorError> {
    let cols = x.cols();
    if gamma.len() != cols || beta.len() != cols {
        return Err(TensorError::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let n = T::lit(cols as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut means = Vec::with_capacity(x.rows());
    let mut rstds = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let mut var = T::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        let rstd = T::one() / (var / n + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out.push((v - mean) * rstd * gamma.data()[j] + beta.data()[j]);
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::new(x.shape(), out)?, means, rstds))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(v: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

pub fn gelu_grad<T: Real>(v: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (v + a * v * v * v);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * v * sech2 * c * (T::one() + T::lit(3.0) * a * v * v)
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let mut sum = T::zero();
    for &v in xs {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Cross entropy `-log softmax(logits)[target]` over a flat logit vector.
pub fn cross_entropy_from_logits<T: Real>(logits: &[T], target: usize) -> Result<T, TensorError> {
    if target >= logits.len() {
        return Err(TensorError::Index {
            op: "cross_entropy",
            index: target,
            len: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_direct_product() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_variants_agree_with_plain_matmul() {
        let a = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.5, -1.0]);
        let b = t(&[3, 2], &[0.2, 1.0, -0.7, 2.0, 1.1, 0.0]);
        let ab = matmul(&a, &b).unwrap();
        let bt = transpose(&b).unwrap();
        assert_eq!(matmul_nt(&a, &bt).unwrap(), ab);
        let at = transpose(&a).unwrap();
        assert_eq!(matmul_tn(&at, &b).unwrap(), ab);
    }

    #[test]
    fn softmax_analytic_values() {
        let s = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[2f64.ln(), 0.0]), 0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_empty_axis_is_error() {
        let x = Tensor::<f64>::zeros(&[3, 0]);
        assert!(matches!(softmax(&x, 1), Err(TensorError::EmptyAxis { .. })));
    }

    #[test]
    fn l2_normalize_cases() {
        let v = l2_normalize(&t(&[2], &[3.0, 4.0]), 0, 1e-12).unwrap();
        assert!((v.data()[0] - 0.6).abs() < 1e-15 && (v.data()[1] - 0.8).abs() < 1e-15);
        let z = l2_normalize(&t(&[2], &[0.0, 0.0]), 0, 1e-12).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
        let u = t(&[3], &[0.0, 0.6, 0.8]);
        assert!(l2_normalize(&u, 0, 1e-12).unwrap().max_abs_diff(&u) < 1e-12);
    }

    #[test]
    fn conv1d_direct_cases() {
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let unit = conv1d_same(&x, &t(&[1, 1, 1], &[1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(unit, x);
        let ones = conv1d_same(&x, &t(&[3, 1, 1], &[1.0, 1.0, 1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(ones.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_rejects_even_width() {
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let err = conv1d_same(&x, &t(&[2, 1, 1], &[1.0, 1.0]), &t(&[1], &[0.0])).unwrap_err();
        assert!(matches!(err, TensorError::Config(_)));
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = [0.0f64; 8];
        let l = cross_entropy_from_logits(&uniform, 3).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
        // log(1 + 3e-20) ~ 6.2e-9; with eight logits the exact value is 1.4e-8.
        let mut sat = [0.0f64; 4];
        sat[2] = 20.0;
        assert!(cross_entropy_from_logits(&sat, 2).unwrap() < 1e-8);
        assert!(cross_entropy_from_logits(&sat, 4).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let x = t(&[1, 3], &[5.0, 1.0, 1.0]);
        let s = masked_softmax_rows(&x, &[false, true, true]).unwrap();
        assert_eq!(s.data(), &[0.0, 0.5, 0.5]);
        assert!(masked_softmax_rows(&x, &[false; 3]).is_err());
        assert!(masked_softmax_rows(&x, &[true; 2]).is_err());
    }
}
