//! Plain (non-recording) tensor kernels.
//!
//! The tape records calls to these same functions, so a straight-line
//! composition of them reproduces tape forward values bit for bit.

use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// `C[m×n] = A[m×k] · B[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        bail!(Dimension, "matmul inner dims {k} vs {k2}");
    }
    Tensor::new(vec![m, n], gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1)))
}

/// `C[m×n] = A[m×k] · B[n×k]ᵀ` (weights stored output-major).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        bail!(Dimension, "matmul_nt inner dims {k} vs {k2}");
    }
    Tensor::new(vec![m, n], gemm(m, k, n, a.data(), (k, 1), b.data(), (1, k)))
}

/// `C[n×k] = A[m×n]ᵀ · B[m×k]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let (m2, k) = b.dims2()?;
    if m != m2 {
        bail!(Dimension, "matmul_tn outer dims {m} vs {m2}");
    }
    Tensor::new(vec![n, k], gemm(n, m, k, a.data(), (1, n), b.data(), (k, 1)))
}

// Strided GEMM with row/column strides `(rs, cs)` per operand. The kernel
// blocks only along the inner and column dimensions, so each output row
// depends on its input row alone and gathering rows before or after a
// product gives identical bits.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize)) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: strides describe in-bounds views of the given slices, whose
    // lengths the callers derived from the same dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    Tensor::new(vec![c, r], transpose_raw(x.data(), r, c))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{what}: {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * s).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| silu_scalar(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = x.data().to_vec();
    for i in 0..m {
        softmax_in_place(&mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![m, n], out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-sum-exp of a row, max-stabilized.
pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// RMS normalization with gain; returns the output and per-row `1/rms`.
pub fn rms_norm_with_stats(x: &Tensor, gamma: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (m, d) = x.dims2()?;
    if gamma.len() != d {
        bail!(Dimension, "rms_norm gamma has {} entries for width {d}", gamma.len());
    }
    if d == 0 {
        bail!(Dimension, "rms_norm over zero-width rows");
    }
    let g = gamma.data();
    let mut out = vec![0.0; m * d];
    let mut inv = Vec::with_capacity(m);
    for i in 0..m {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        for j in 0..d {
            out[i * d + j] = row[j] * r * g[j];
        }
    }
    Ok((Tensor::new(vec![m, d], out)?, inv))
}

pub fn rms_norm(x: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    rms_norm_with_stats(x, gamma).map(|(y, _)| y)
}

/// Rotary position embedding applied per head to consecutive pairs.
/// Row `r` sits at position `r % seq_len`. `inverse` rotates backwards.
pub fn rope(x: &Tensor, n_heads: usize, seq_len: usize, inverse: bool) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    if n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
        bail!(Dimension, "rope needs an even head dim, got width {d} over {n_heads} heads");
    }
    let hd = d / n_heads;
    let mut out = x.data().to_vec();
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..m {
        let pos = (r % seq_len) as f64;
        for h in 0..n_heads {
            for p in 0..hd / 2 {
                let freq = ROPE_BASE.powf(-((2 * p) as f64) / hd as f64);
                let (s, c) = (sign * pos * freq).sin_cos();
                let i = r * d + h * hd + 2 * p;
                let (a, b) = (out[i], out[i + 1]);
                out[i] = a * c - b * s;
                out[i + 1] = a * s + b * c;
            }
        }
    }
    Tensor::new(vec![m, d], out)
}

/// Causal multi-head attention over `rows / seq_len` independent sequences.
/// Returns the per-head context (before the output projection) and the
/// attention probabilities laid out `[seq][head][query][key]`.
pub fn causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    seq_len: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let (m, d) = q.dims2()?;
    same_shape(q, k, "attention k")?;
    same_shape(q, v, "attention v")?;
    if seq_len == 0 || m % seq_len != 0 {
        bail!(Dimension, "{m} rows do not split into sequences of {seq_len}");
    }
    if n_heads == 0 || d % n_heads != 0 {
        bail!(Dimension, "width {d} not divisible by {n_heads} heads");
    }
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let n_seq = m / seq_len;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; m * d];
    let mut probs = vec![0.0; n_seq * n_heads * seq_len * seq_len];
    let mut scores = vec![0.0; seq_len];
    for s in 0..n_seq {
        let base = s * seq_len;
        for h in 0..n_heads {
            let off = h * hd;
            for i in 0..seq_len {
                let qi = &qd[(base + i) * d + off..(base + i) * d + off + hd];
                for (j, sc) in scores[..=i].iter_mut().enumerate() {
                    let kj = &kd[(base + j) * d + off..(base + j) * d + off + hd];
                    *sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores[..=i]);
                let prow = ((s * n_heads + h) * seq_len + i) * seq_len;
                probs[prow..prow + i + 1].copy_from_slice(&scores[..=i]);
                let orow = &mut out[(base + i) * d + off..(base + i) * d + off + hd];
                for (j, &p) in scores[..=i].iter().enumerate() {
                    let vj = &vd[(base + j) * d + off..(base + j) * d + off + hd];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![m, d], out)?, probs))
}

/// `σ(A·W1ᵀ ⊙ g(A·W2ᵀ))·W3ᵀ` with σ = identity and g = SiLU.
pub fn swiglu_mlp(a: &Tensor, w1: &Tensor, w2: &Tensor, w3: &Tensor) -> Result<Tensor> {
    let (_, d) = a.dims2()?;
    let (c, d1) = w1.dims2()?;
    if w2.shape() != w1.shape() || d1 != d || w3.shape() != [d, c] {
        bail!(
            Dimension,
            "swiglu shapes A {:?} W1 {:?} W2 {:?} W3 {:?}",
            a.shape(),
            w1.shape(),
            w2.shape(),
            w3.shape()
        );
    }
    let h1 = matmul_nt(a, w1)?;
    let h2 = matmul_nt(a, w2)?;
    let hidden = mul(&h1, &silu(&h2))?;
    matmul_nt(&hidden, w3)
}

/// Rows of `x` selected by `index`, in order.
pub fn gather_rows(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    let mut out = Vec::with_capacity(index.len() * d);
    for &i in index {
        if i >= m {
            bail!(Index, "row {i} out of range for {m} rows");
        }
        out.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![index.len(), d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small() {
        let b = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let c = matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        assert!(matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).is_err());
        assert!(matmul_nt(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn transposed_variants_agree() {
        let a = m(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0]]);
        let b = m(&[&[2.0, 1.0, 0.0], &[1.0, 1.0, -1.0]]);
        let nt = matmul_nt(&a, &b).unwrap();
        let plain = matmul(&a, &transpose(&b).unwrap()).unwrap();
        assert_eq!(nt, plain);
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, matmul(&transpose(&a).unwrap(), &b).unwrap());
    }

    #[test]
    fn softmax_uniform_and_large() {
        let s = softmax_rows(&m(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, 0.0]])).unwrap();
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.row(1)[0] - 1.0).abs() < 1e-12);
        assert!(s.row(1)[1] < 1e-300);
    }

    #[test]
    fn rms_norm_constant_and_zero_gain() {
        let x = m(&[&[3.0, 3.0, 3.0, 3.0], &[-2.0, -2.0, -2.0, -2.0]]);
        let y = rms_norm(&x, &Tensor::full(&[4], 1.0)).unwrap();
        for v in y.row(0) {
            assert!((v - 1.0).abs() < 1e-6);
        }
        for v in y.row(1) {
            assert!((v + 1.0).abs() < 1e-6);
        }
        let z = rms_norm(&x, &Tensor::zeros(&[4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_zero_weights_and_silu_zero() {
        let a = m(&[&[0.3, -0.1, 0.7], &[1.0, 2.0, 3.0]]);
        let w = Tensor::zeros(&[4, 3]);
        let out = swiglu_mlp(&a, &w, &w, &Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let out = swiglu_mlp(&m(&[&[1.0]]), &m(&[&[2.0]]), &m(&[&[0.0]]), &m(&[&[1.0]])).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn rope_inverse_round_trips() {
        let x = Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = rope(&x, 2, 3, false).unwrap();
        let back = rope(&y, 2, 3, true).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-14);
        // position zero is unrotated
        assert_eq!(y.row(0), x.row(0));
    }

    #[test]
    fn gather_rows_checks_range() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(gather_rows(&x, &[0, 1, 1]).is_ok());
        assert!(gather_rows(&x, &[2]).is_err());
    }
}
