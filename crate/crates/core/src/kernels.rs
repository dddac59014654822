//! Plain math kernels over row-major slices.
//!
//! The autodiff tape and the incremental inference path both call these, so
//! teacher-forced and step-by-step forwards accumulate in the same order.
//! Inner loops run over output rows so the compiler can vectorize them.

use crate::scalar::Scalar;

/// RMS norm epsilon.
pub const RMS_EPS: f64 = 1e-5;

/// `c = a @ b` (or `c += a @ b` when `acc`), a: m*k, b: k*n, c: m*n.
pub fn gemm_nn<S: Scalar>(acc: bool, a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !acc {
        c.fill(S::zero());
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
}

/// `c = a @ b^T` (or `+=`), a: m*k, b: n*k, c: m*n.
pub fn gemm_nt<S: Scalar>(acc: bool, a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: S = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            let c_v = &mut c[i * n + j];
            if acc {
                *c_v += dot;
            } else {
                *c_v = dot;
            }
        }
    }
}

/// `c = a^T @ b` (or `+=`), a: k*m, b: k*n, c: m*n.
pub fn gemm_tn<S: Scalar>(acc: bool, a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !acc {
        c.fill(S::zero());
    }
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_pi * b_v;
            }
        }
    }
}

/// In-place softmax of one row, with max subtraction for stability.
pub fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Log-softmax of one row into a fresh vector.
pub fn log_softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let log_sum = row
        .iter()
        .map(|&v| (v - max).exp())
        .fold(S::zero(), |a, b| a + b)
        .ln();
    row.iter().map(|&v| v - max - log_sum).collect()
}

/// `out[j] = x[j] * gain[j] / rms(x)` for one row.
pub fn rms_norm_row<S: Scalar>(x: &[S], gain: &[S], out: &mut [S]) {
    debug_assert_eq!(x.len(), gain.len());
    let n = S::from_usize(x.len());
    let mean_sq = x.iter().map(|&v| v * v).sum::<S>() / n;
    let inv = (mean_sq + S::from_f64(RMS_EPS)).sqrt().recip();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// Rotary position: rotates value pairs within each head by angles that grow
/// with `pos`. `inverse` applies the opposite rotation (used by the backward
/// pass). `x` is one row of width `heads * head_dim`.
pub fn rope_row<S: Scalar>(x: &mut [S], head_dim: usize, pos: usize, inverse: bool) {
    debug_assert_eq!(x.len() % head_dim, 0);
    debug_assert_eq!(head_dim % 2, 0);
    let half = head_dim / 2;
    for head in x.chunks_exact_mut(head_dim) {
        for i in 0..half {
            let theta = pos as f64 * 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
            let theta = if inverse { -theta } else { theta };
            let (sin, cos) = (S::from_f64(theta.sin()), S::from_f64(theta.cos()));
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
}

pub fn silu<S: Scalar>(v: S) -> S {
    v / (S::one() + (-v).exp())
}

/// d/dv silu(v) = sigmoid(v) * (1 + v * (1 - sigmoid(v)))
pub fn silu_grad<S: Scalar>(v: S) -> S {
    let sig = S::one() / (S::one() + (-v).exp());
    sig * (S::one() + v * (S::one() - sig))
}

/// Which key rows a query row may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Row i sees rows 0..=i.
    Causal,
    /// Row i sees rows 0..=min(i + right, len-1).
    CausalWithRight(usize),
}

impl AttnMask {
    pub fn visible_end(self, i: usize, len: usize) -> usize {
        match self {
            AttnMask::Causal => i + 1,
            AttnMask::CausalWithRight(r) => (i + 1 + r).min(len),
        }
    }
}

/// Multi-head scaled dot-product attention over full sequences.
///
/// `q`, `k`, `v` are `len * (heads * head_dim)` with heads laid out as
/// contiguous column blocks. Returns the output and, when `keep_probs`, the
/// per-head attention rows (`heads * len * len`, masked entries zero) for
/// the backward pass.
pub fn attention<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    len: usize,
    heads: usize,
    head_dim: usize,
    mask: AttnMask,
    keep_probs: bool,
) -> (Vec<S>, Option<Vec<S>>) {
    let dim = heads * head_dim;
    debug_assert_eq!(q.len(), len * dim);
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut out = vec![S::zero(); len * dim];
    let mut probs = if keep_probs {
        Some(vec![S::zero(); heads * len * len])
    } else {
        None
    };
    let mut scores = vec![S::zero(); len];
    for h in 0..heads {
        let col = h * head_dim;
        for i in 0..len {
            let visible = mask.visible_end(i, len);
            let q_row = &q[i * dim + col..i * dim + col + head_dim];
            for j in 0..visible {
                let k_row = &k[j * dim + col..j * dim + col + head_dim];
                let dot: S = q_row.iter().zip(k_row).map(|(&a, &b)| a * b).sum();
                scores[j] = dot * scale;
            }
            softmax_row(&mut scores[..visible]);
            let out_row = &mut out[i * dim + col..i * dim + col + head_dim];
            for j in 0..visible {
                let v_row = &v[j * dim + col..j * dim + col + head_dim];
                let a = scores[j];
                for (o, &vv) in out_row.iter_mut().zip(v_row) {
                    *o += a * vv;
                }
            }
            if let Some(p) = probs.as_mut() {
                p[h * len * len + i * len..h * len * len + i * len + visible]
                    .copy_from_slice(&scores[..visible]);
            }
        }
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent triple-loop product in the same element order.
    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn fill(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = crate::rng::stream(seed, 0);
        (0..n)
            .map(|_| crate::rng::uniform_symmetric(&mut rng, 1.0) as f32)
            .collect()
    }

    #[test]
    fn gemm_nn_matches_naive_triple_loop_exactly() {
        let (m, k, n) = (5, 7, 4);
        let a = fill(1, m * k);
        let b = fill(2, k * n);
        let mut c = vec![0.0; m * n];
        gemm_nn(false, &a, &b, m, k, n, &mut c);
        assert_eq!(c, naive_matmul(&a, &b, m, k, n));
    }

    #[test]
    fn gemm_transposed_variants_match_naive() {
        let (m, k, n) = (4, 3, 6);
        let a = fill(3, m * k);
        let b = fill(4, k * n);
        let want = naive_matmul(&a, &b, m, k, n);

        // a @ b == a @ (b^T)^T
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nt(false, &a, &bt, m, k, n, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_tn(false, &at, &b, m, k, n, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_row_handles_large_inputs() {
        let mut row = [1000.0f32, 1000.0];
        softmax_row(&mut row);
        assert!((row[0] - 0.5).abs() < 1e-6 && (row[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rope_row_inverse_round_trips() {
        let mut x: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let orig = x.clone();
        rope_row(&mut x, 4, 17, false);
        assert!(x.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-6));
        rope_row(&mut x, 4, 17, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_preserves_pairwise_dot_shift_invariance() {
        // Rotations make q.k depend only on relative offset.
        let q0: Vec<f64> = (0..4).map(|i| 0.7 - 0.2 * i as f64).collect();
        let k0: Vec<f64> = (0..4).map(|i| -0.4 + 0.3 * i as f64).collect();
        let dot_at = |pq: usize, pk: usize| {
            let (mut q, mut k) = (q0.clone(), k0.clone());
            rope_row(&mut q, 4, pq, false);
            rope_row(&mut k, 4, pk, false);
            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>()
        };
        assert!((dot_at(5, 3) - dot_at(9, 7)).abs() < 1e-9);
    }

    #[test]
    fn attention_causal_first_row_copies_first_value_row() {
        let len = 3;
        let (heads, head_dim) = (2, 2);
        let q = fill(5, len * heads * head_dim);
        let k = fill(6, len * heads * head_dim);
        let v = fill(7, len * heads * head_dim);
        let (out, _) = attention(&q, &k, &v, len, heads, head_dim, AttnMask::Causal, false);
        // Row 0 attends only to row 0: softmax over one entry is 1.
        assert_eq!(&out[..heads * head_dim], &v[..heads * head_dim]);
    }
}
