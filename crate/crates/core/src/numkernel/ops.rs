//! Forward kernels on plain tensors.
//!
//! These are shared by the differentiable tape and by the KV-cached decoder, which
//! runs without a tape.

use super::tensor::{Scalar, Tensor};
use crate::error::{ArmdError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

/// `c[m,n] += a[m,k] * b[k,n]` on raw row-major slices.
pub(crate) fn mm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    T::gemm_acc(m, k, n, a, (k, 1), b, (n, 1), c, n);
}

pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    mm_acc(a, b, &mut c, m, k, n);
    c
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `c[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn mm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    T::gemm_acc(m, k, n, a, (k, 1), b, (1, k), c, n);
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn mm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    T::gemm_acc(k, m, n, a, (1, k), b, (n, 1), c, n);
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(ArmdError::Dimension(format!(
            "matmul inner dimensions differ: [{m},{k}] x [{k2},{n}]"
        )));
    }
    Tensor::new(vec![m, n], mm(a.data(), b.data(), m, k, n))
}

/// `a * b^T` for `a[m,k]`, `b[n,k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(ArmdError::Dimension(format!(
            "matmul_nt inner dimensions differ: [{m},{k}] x [{n},{k2}]^T"
        )));
    }
    let mut c = vec![T::zero(); m * n];
    mm_nt_acc(a.data(), b.data(), &mut c, m, k, n);
    Tensor::new(vec![m, n], c)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    Tensor::new(vec![c, r], transpose_raw(a.data(), r, c))
}

pub fn add_row<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = x.dims2()?;
    if bias.numel() != c {
        return Err(ArmdError::Dimension(format!(
            "bias of length {} cannot broadcast over {c} columns",
            bias.numel()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Per-row statistics saved by [`layer_norm`] for the backward pass.
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer normalization with variance floor [`LAYER_NORM_EPS`].
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (n, d) = x.dims2()?;
    if d == 0 {
        return Err(ArmdError::Dimension("layer_norm needs d >= 1".into()));
    }
    if gain.numel() != d || bias.numel() != d {
        return Err(ArmdError::Dimension(format!(
            "layer_norm affine parameters must have length {d}"
        )));
    }
    let eps = T::of(LAYER_NORM_EPS);
    let inv_d = T::of(1.0 / d as f64);
    let mut out = vec![T::zero(); n * d];
    let mut mean = Vec::with_capacity(n);
    let mut rstd = Vec::with_capacity(n);
    for (row, out_row) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mu = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        for (((o, &v), &g), &b) in out_row
            .iter_mut()
            .zip(row)
            .zip(gain.data())
            .zip(bias.data())
        {
            *o = (v - mu) * r * g + b;
        }
        mean.push(mu);
        rstd.push(r);
    }
    Ok((Tensor::new(vec![n, d], out)?, NormStats { mean, rstd }))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Rotary embedding applied independently to each `head_dim`-wide chunk of every row,
/// rotating adjacent pairs `(2i, 2i+1)` by `position * base^(-2i/head_dim)`.
///
/// `positions` are original sequence positions, one per row.
pub fn rope_rotate<T: Scalar>(
    x: &Tensor<T>,
    positions: &[usize],
    head_dim: usize,
) -> Result<Tensor<T>> {
    rope_apply(x, positions, head_dim, false)
}

pub(crate) fn rope_apply<T: Scalar>(
    x: &Tensor<T>,
    positions: &[usize],
    head_dim: usize,
    inverse: bool,
) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    if head_dim == 0 || !head_dim.is_multiple_of(2) || d % head_dim != 0 {
        return Err(ArmdError::Dimension(format!(
            "rope needs an even head width dividing d={d}, got {head_dim}"
        )));
    }
    if positions.len() != n {
        return Err(ArmdError::Dimension(format!(
            "rope got {} positions for {n} rows",
            positions.len()
        )));
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut out = x.clone();
    for (row, &pos) in out.data_mut().chunks_mut(d).zip(positions) {
        for (i, &f) in freqs.iter().enumerate() {
            let angle = pos as f64 * f;
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::of(if inverse { -s } else { s }), T::of(c));
            for head in row.chunks_mut(head_dim) {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax over allowed columns. Rows with no allowed column become all zero.
pub(crate) fn masked_softmax_rows<T: Scalar>(scores: &mut [T], cols: usize, allowed: &[bool]) {
    for (row, mask) in scores.chunks_mut(cols).zip(allowed.chunks(cols)) {
        let mut max = T::neg_infinity();
        for (&s, &ok) in row.iter().zip(mask) {
            if ok && s > max {
                max = s;
            }
        }
        if max == T::neg_infinity() {
            row.iter_mut().for_each(|s| *s = T::zero());
            continue;
        }
        let mut total = T::zero();
        for (s, &ok) in row.iter_mut().zip(mask) {
            *s = if ok { (*s - max).exp() } else { T::zero() };
            total += *s;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|s| *s *= inv);
    }
}

/// Softmax of each row restricted to the columns `allowed` marks; forbidden columns get
/// probability zero, and a row with nothing allowed is all zero.
pub fn masked_softmax<T: Scalar>(scores: &Tensor<T>, allowed: &[bool]) -> Result<Tensor<T>> {
    let (r, c) = scores.dims2()?;
    if allowed.len() != r * c {
        return Err(ArmdError::Dimension(format!(
            "mask has {} entries for a [{r},{c}] score matrix",
            allowed.len()
        )));
    }
    let mut out = scores.clone();
    masked_softmax_rows(out.data_mut(), c, allowed);
    Ok(out)
}

/// Saved state of a multi-head attention evaluation.
pub struct AttentionCache<T> {
    /// Post-softmax, pre-dropout probabilities, `[heads, nq, nk]`.
    pub probs: Vec<T>,
}

fn head_slice<T: Scalar>(x: &[T], rows: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head<T: Scalar>(dst: &mut [T], src: &[T], rows: usize, d: usize, h: usize, dh: usize) {
    for r in 0..rows {
        for (o, &s) in dst[r * d + h * dh..r * d + (h + 1) * dh]
            .iter_mut()
            .zip(&src[r * dh..(r + 1) * dh])
        {
            *o += s;
        }
    }
}

/// Multi-head masked scaled dot-product attention.
///
/// `q` is `[nq,d]`, `k` and `v` are `[nk,d]`, `allowed` is `nq*nk` row-major.
/// `dropout`, when given, is a `[heads,nq,nk]` multiplier applied to the probabilities.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    allowed: &[bool],
    heads: usize,
    dropout: Option<&[T]>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (nq, d) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, dv) = v.dims2()?;
    if dk != d || dv != d || nv != nk {
        return Err(ArmdError::Dimension(format!(
            "attention shapes disagree: q[{nq},{d}] k[{nk},{dk}] v[{nv},{dv}]"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(ArmdError::Dimension(format!(
            "{heads} heads do not divide width {d}"
        )));
    }
    if allowed.len() != nq * nk {
        return Err(ArmdError::Dimension("attention mask size mismatch".into()));
    }
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); nq * d];
    let mut probs = vec![T::zero(); heads * nq * nk];
    for h in 0..heads {
        let qh = head_slice(q.data(), nq, d, h, dh);
        let kh = head_slice(k.data(), nk, d, h, dh);
        let vh = head_slice(v.data(), nk, d, h, dh);
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        mm_nt_acc(&qh, &kh, p, nq, dh, nk);
        p.iter_mut().for_each(|s| *s *= scale);
        masked_softmax_rows(p, nk, allowed);
        let oh = match dropout {
            Some(mask) => {
                let dropped: Vec<T> = p
                    .iter()
                    .zip(&mask[h * nq * nk..(h + 1) * nq * nk])
                    .map(|(&a, &b)| a * b)
                    .collect();
                mm(&dropped, &vh, nq, nk, dh)
            }
            None => mm(p, &vh, nq, nk, dh),
        };
        scatter_head(&mut out, &oh, nq, d, h, dh);
    }
    Ok((Tensor::new(vec![nq, d], out)?, AttentionCache { probs }))
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    dropout: Option<&[T]>,
    heads: usize,
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    for h in 0..heads {
        let qh = head_slice(q.data(), nq, d, h, dh);
        let kh = head_slice(k.data(), nk, d, h, dh);
        let vh = head_slice(v.data(), nk, d, h, dh);
        let doh = head_slice(d_out, nq, d, h, dh);
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let drop = dropout.map(|m| &m[h * nq * nk..(h + 1) * nq * nk]);

        let effective: Vec<T> = match drop {
            Some(m) => p.iter().zip(m).map(|(&a, &b)| a * b).collect(),
            None => p.to_vec(),
        };
        let mut dvh = vec![T::zero(); nk * dh];
        mm_tn_acc(&effective, &doh, &mut dvh, nq, nk, dh);

        let mut dp = vec![T::zero(); nq * nk];
        mm_nt_acc(&doh, &vh, &mut dp, nq, dh, nk);
        if let Some(m) = drop {
            dp.iter_mut().zip(m).for_each(|(g, &b)| *g *= b);
        }
        for (dp_row, p_row) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
            let dot: T = dp_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
            for (g, &pij) in dp_row.iter_mut().zip(p_row) {
                *g = pij * (*g - dot) * scale;
            }
        }
        let ds = dp;
        let dqh = mm(&ds, &kh, nq, nk, dh);
        let mut dkh = vec![T::zero(); nk * dh];
        mm_tn_acc(&ds, &qh, &mut dkh, nq, nk, dh);

        scatter_head(&mut dq, &dqh, nq, d, h, dh);
        scatter_head(&mut dk, &dkh, nk, d, h, dh);
        scatter_head(&mut dv, &dvh, nk, d, h, dh);
    }
    (dq, dk, dv)
}

/// Numerically stable `log softmax` of one row, in f64.
pub fn log_softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|x| (x.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn matmul_identity_and_selector() {
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let sel = t(&[&[1.0, 0.0]]);
        let col = t(&[&[5.0], &[7.0]]);
        assert_eq!(matmul(&sel, &col).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut s = 7;
        let a = Tensor::new(vec![3, 4], (0..12).map(|_| lcg(&mut s)).collect()).unwrap();
        let b = Tensor::new(vec![4, 2], (0..8).map(|_| lcg(&mut s)).collect()).unwrap();
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(ArmdError::Dimension(_))));
    }

    #[test]
    fn masked_softmax_examples() {
        let s = t(&[&[0.0, 0.0]]);
        assert_eq!(
            masked_softmax(&s, &[true, true]).unwrap().data(),
            &[0.5, 0.5]
        );
        let s = t(&[&[1.0, 2.0]]);
        assert_eq!(
            masked_softmax(&s, &[false, true]).unwrap().data(),
            &[0.0, 1.0]
        );
        let s = t(&[&[5.0, 9.0]]);
        assert_eq!(
            masked_softmax(&s, &[false, false]).unwrap().data(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[2], 1.0);
        let zero = Tensor::zeros(&[2]);
        let (y, _) = layer_norm(&t(&[&[3.0, 3.0]]), &one, &zero).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let (y, _) = layer_norm(&t(&[&[1.0, -1.0]]), &one, &zero).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut s = 3;
        let row: Vec<f64> = (0..9).map(|_| lcg(&mut s) * 4.0).collect();
        let x = Tensor::new(vec![1, 9], row.clone()).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::full(&[9], 1.0), &Tensor::zeros(&[9])).unwrap();
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        for (yi, xi) in y.data().iter().zip(&row) {
            assert!((yi - (xi - mean) / (var + LAYER_NORM_EPS).sqrt()).abs() < 1e-10);
        }
        let ym = y.data().iter().sum::<f64>() / 9.0;
        let yv = y.data().iter().map(|v| (v - ym).powi(2)).sum::<f64>() / 9.0;
        assert!(ym.abs() < 1e-10);
        assert!((yv - var / (var + LAYER_NORM_EPS)).abs() < 1e-10);
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let x = t(&[&[0.3, -1.2, 0.7, 2.0]]);
        assert_eq!(rope_rotate(&x, &[0], 4).unwrap(), x);
    }

    #[test]
    fn rope_matches_explicit_rotation() {
        for p in [1usize, 2, 5, 17] {
            let x = t(&[&[1.0, 0.0]]);
            let y = rope_rotate(&x, &[p], 2).unwrap();
            let (s, c) = (p as f64).sin_cos();
            // [c -s; s c] * [1, 0]
            assert!((y.data()[0] - c).abs() < 1e-12);
            assert!((y.data()[1] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_rejects_odd_width() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(
            rope_rotate(&x, &[0], 3),
            Err(ArmdError::Dimension(_))
        ));
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.2, 1.7] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
