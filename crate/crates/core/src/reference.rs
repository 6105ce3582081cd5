//! Brute-force oracles used for verification. They share no code with the
//! tiled or sharded implementations.

use crate::tilemath::{DecodeProblem, Matrix};

/// `a * b` by the textbook i, j, k loop, summing in `f32` from zero in
/// ascending `k`.
pub fn naive_gemm(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "naive_gemm inner dimensions");
    let mut out = Vec::with_capacity(a.rows() * b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0f32;
            for k in 0..a.cols() {
                s += a.at(i, k) * b.at(k, j);
            }
            out.push(s);
        }
    }
    Matrix::new(a.rows(), b.cols(), out).expect("sized by construction")
}

/// Softmax attention over the whole unsharded KV cache, in `f64`.
pub fn monolithic_attention(prob: &DecodeProblem) -> Vec<f64> {
    let (h_n, d, n) = (prob.heads(), prob.head_dim(), prob.kv_len());
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f64; h_n * d];
    for h in 0..h_n {
        let q = &prob.q()[h * d..(h + 1) * d];
        let scores: Vec<f64> = (0..n)
            .map(|j| {
                let k = &prob.k()[(h * n + j) * d..(h * n + j + 1) * d];
                scale * q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (j, w) in weights.iter().enumerate() {
            let v = &prob.v()[(h * n + j) * d..(h * n + j + 1) * d];
            for (o, &x) in out[h * d..(h + 1) * d].iter_mut().zip(v) {
                *o += w * x as f64;
            }
        }
        for o in &mut out[h * d..(h + 1) * d] {
            *o /= total;
        }
    }
    out
}

/// Normwise relative error `max|got - want| / max|want|`.
pub fn max_rel_err(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "max_rel_err lengths");
    let scale = want
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
        / scale
}

/// [`max_rel_err`] between two `f32` vectors.
pub fn max_rel_err_f32(got: &[f32], want: &[f32]) -> f64 {
    let want: Vec<f64> = want.iter().map(|&x| x as f64).collect();
    max_rel_err(got, &want)
}

/// True when both slices have identical bit patterns.
pub fn bitwise_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
