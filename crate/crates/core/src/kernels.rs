//! Slice-level numeric kernels shared by the tape and the inference path.
//!
//! All matrices are row-major. Accumulating kernels (`*_acc`) add into `c`.
//! Inner loops run over contiguous output rows so the compiler can vectorize
//! without reassociating sums; results are identical across SIMD widths.

use crate::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { matmul_acc_avx2(c, a, b, k, n) };
        return;
    }
    matmul_rows(c, a, b, k, n);
}

// Same loop compiled with wider vectors. Products and sums stay separate
// (no fused multiply-add), so results match the portable build bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2<T: Real>(c: &mut [T], a: &[T], b: &[T], k: usize, n: usize) {
    matmul_rows(c, a, b, k, n);
}

const MR: usize = 4;
const NR: usize = 16;

// Register-blocked over 4×16 tiles of `c`. Every element still accumulates
// its products in ascending `p` order, so the tiling never changes results.
#[inline(always)]
fn matmul_rows<T: Real>(c: &mut [T], a: &[T], b: &[T], k: usize, n: usize) {
    let m = c.len() / n;
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i in (0..full_rows).step_by(MR) {
        let a_rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        for j in (0..full_cols).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let bp: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (row, ar) in acc.iter_mut().zip(&a_rows) {
                    let av = ar[p];
                    for (x, &y) in row.iter_mut().zip(bp) {
                        *x += av * y;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
        }
        if full_cols < n {
            for (r, ar) in a_rows.iter().enumerate() {
                let ci = &mut c[(i + r) * n + full_cols..(i + r + 1) * n];
                for (p, &av) in ar.iter().enumerate() {
                    for (x, &y) in ci.iter_mut().zip(&b[p * n + full_cols..(p + 1) * n]) {
                        *x += av * y;
                    }
                }
            }
        }
    }
    for (ci, ai) in c[full_rows * n..].chunks_exact_mut(n).zip(a[full_rows * k..].chunks_exact(k)) {
        for (p, &av) in ai.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (x, &y) in ci.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *x += av * y;
            }
        }
    }
}

pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { matmul_tn_avx2(c, a, b, k, n) };
        return;
    }
    matmul_tn_rows(c, a, b, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_tn_avx2<T: Real>(c: &mut [T], a: &[T], b: &[T], k: usize, n: usize) {
    matmul_tn_rows(c, a, b, k, n);
}

#[inline(always)]
fn matmul_tn_rows<T: Real>(c: &mut [T], a: &[T], b: &[T], k: usize, n: usize) {
    for (ar, br) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (i, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let ci = &mut c[i * n..(i + 1) * n];
            for (x, &y) in ci.iter_mut().zip(br) {
                *x += av * y;
            }
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_acc(c, a, &bt, m, k, n);
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Max-subtracted softmax in place. An empty slice is left untouched.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Softmax vector-Jacobian product: `dx = y ⊙ (dy − ⟨dy, y⟩)`.
pub fn softmax_backward_acc<T: Real>(dx: &mut [T], y: &[T], dy: &[T]) {
    let s = dot(dy, y);
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d += yi * (gi - s);
    }
}

/// Reciprocal root-mean-square of a row.
pub fn inv_rms<T: Real>(x: &[T], eps: T) -> T {
    let n = T::of(x.len() as f64);
    let ms = x.iter().fold(T::zero(), |s, &v| s + v * v) / n;
    T::one() / (ms + eps).sqrt()
}

pub fn rmsnorm_rows<T: Real>(x: &[T], w: &[T], eps: T, cols: usize) -> (Vec<T>, Vec<T>) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let ir = inv_rms(xr, eps);
        inv.push(ir);
        for ((o, &xv), &wv) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr).zip(w) {
            *o = xv * ir * wv;
        }
    }
    (out, inv)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Rotary frequencies `θ_j = 10000^(−2j/head_dim)` for `j < head_dim/2`.
pub fn rope_freqs(head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|j| 10000f64.powf(-2.0 * j as f64 / head_dim as f64))
        .collect()
}

/// Rotate adjacent pairs `(2j, 2j+1)` of each head block in every row by
/// `sign · pos · θ_j`. `sign = -1` applies the inverse rotation.
pub fn rope_rows<T: Real>(x: &mut [T], cols: usize, head_dim: usize, positions: &[usize], sign: f64) {
    let freqs = rope_freqs(head_dim);
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let rot: Vec<(T, T)> = freqs
            .iter()
            .map(|&f| {
                let (s, c) = (sign * pos as f64 * f).sin_cos();
                (T::of(s), T::of(c))
            })
            .collect();
        let row = &mut x[r * cols..(r + 1) * cols];
        for head in row.chunks_exact_mut(head_dim) {
            for (j, &(s, c)) in rot.iter().enumerate() {
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = a * c - b * s;
                head[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

/// How the prompt block and the word block of a score row are normalized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrefixNorm<T> {
    /// Two independent softmaxes; the prompt block is scaled by the gate.
    Gated(T),
    /// One softmax over prompts and words together (ungated prefix baseline).
    Joint,
}

/// Attention weights for one query row.
///
/// `scores` holds `prompt_len` prompt scores followed by word scores; only the
/// first `visible` word scores take part (the rest are masked to weight 0).
/// Returns the raw prompt softmax alongside the weights for backward use.
pub fn prefix_weights_row<T: Real>(
    scores: &[T],
    prompt_len: usize,
    visible: usize,
    norm: PrefixNorm<T>,
    weights: &mut [T],
    prompt_probs: &mut [T],
) {
    let width = scores.len();
    debug_assert!(prompt_len + visible <= width);
    weights.iter_mut().for_each(|w| *w = T::zero());
    match norm {
        PrefixNorm::Gated(g) => {
            prompt_probs.copy_from_slice(&scores[..prompt_len]);
            softmax_in_place(prompt_probs);
            for (w, &p) in weights[..prompt_len].iter_mut().zip(prompt_probs.iter()) {
                *w = p * g;
            }
            let words = &mut weights[prompt_len..prompt_len + visible];
            words.copy_from_slice(&scores[prompt_len..prompt_len + visible]);
            softmax_in_place(words);
        }
        PrefixNorm::Joint => {
            let live = &mut weights[..prompt_len + visible];
            live.copy_from_slice(&scores[..prompt_len + visible]);
            softmax_in_place(live);
            prompt_probs.copy_from_slice(&live[..prompt_len]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let got = matmul(&a, &b, m, k, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = transpose(&b, k, n);
        let mut nt = vec![0.0; m * n];
        matmul_nt_acc(&mut nt, &a, &bt, m, k, n);
        assert_eq!(nt, got);
        // aᵀ · c where a is [m×k] and c is [m×n] gives [k×n]
        let at = transpose(&a, m, k);
        let mut tn = vec![0.0; k * n];
        matmul_tn_acc(&mut tn, &a, &want, m, k, n);
        let via_naive = naive(&at, &want, k, m, n);
        for (x, y) in tn.iter().zip(&via_naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_pair_rotation_closed_form() {
        let mut x = vec![1.0f64, 0.0];
        rope_rows(&mut x, 2, 2, &[1], 1.0);
        assert!((x[0] - 1f64.cos()).abs() < 1e-15);
        assert!((x[1] - 1f64.sin()).abs() < 1e-15);
        rope_rows(&mut x, 2, 2, &[1], -1.0);
        assert!((x[0] - 1.0).abs() < 1e-15 && x[1].abs() < 1e-15);
    }

    #[test]
    fn gated_row_with_zero_gate_matches_word_softmax() {
        let scores = [0.3f64, -1.0, 2.0, 0.5, 9.0];
        let mut w = [0.0; 5];
        let mut p = [0.0; 2];
        prefix_weights_row(&scores, 2, 2, PrefixNorm::Gated(0.0), &mut w, &mut p);
        let mut words = [2.0, 0.5];
        softmax_in_place(&mut words);
        assert_eq!(&w[..2], &[0.0, 0.0]);
        assert_eq!(&w[2..4], &words);
        assert_eq!(w[4], 0.0);
    }
}
