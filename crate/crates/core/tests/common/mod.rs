//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Triple-loop matrix product.
pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Direct exp-normalise softmax (max-shifted).
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
#[allow(clippy::needless_range_loop)]
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Largest singular value via Jacobi on the smaller Gram matrix.
pub fn svd_sigma_max(w: &[Vec<f64>]) -> f64 {
    let wt = transpose(w);
    let gram = if w.len() >= w[0].len() { matmul(&wt, w) } else { matmul(w, &wt) };
    jacobi_eigenvalues(gram).into_iter().fold(0.0, f64::max).max(0.0).sqrt()
}

/// All singular values, descending.
pub fn singular_values(w: &[Vec<f64>]) -> Vec<f64> {
    let wt = transpose(w);
    let gram = if w.len() >= w[0].len() { matmul(&wt, w) } else { matmul(w, &wt) };
    let mut s: Vec<f64> = jacobi_eigenvalues(gram).into_iter().map(|e| e.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// erf by its Maclaurin series, summed until terms vanish (|x| ≤ 3).
pub fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0;
    loop {
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-18 * sum.abs().max(1e-300) && n > 5.0 {
            break;
        }
        n += 1.0;
        term *= -x * x / n;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

pub fn gelu_oracle(x: f64) -> f64 {
    x * 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

/// Sum of per-matrix element counts, written out matrix by matrix.
pub struct CountOracle {
    pub d_model: u64,
    pub heads: u64,
    pub d_k: u64,
    pub d_v: u64,
    pub d_ffn: u64,
}

impl CountOracle {
    pub fn matrices_one_layer(&self, with_bias: bool) -> Vec<(&'static str, u64)> {
        let (d, a, dk, dv, f) = (self.d_model, self.heads, self.d_k, self.d_v, self.d_ffn);
        let mut m = vec![
            ("W_Q", d * a * dk),
            ("W_K", d * a * dk),
            ("W_V", d * a * dv),
            ("W_O", a * dv * d),
            ("W_1", d * f),
            ("W_2", f * d),
        ];
        if with_bias {
            m.extend([("b_Q", a * dk), ("b_K", a * dk), ("b_V", a * dv), ("b_O", d), ("b_1", f), ("b_2", d)]);
        }
        m
    }

    pub fn total(&self, layers: u64, with_bias: bool) -> u64 {
        layers * self.matrices_one_layer(with_bias).iter().map(|(_, n)| n).sum::<u64>()
    }
}

/// FLOPs as a list of `2·m·n·k` matmuls for one layer at sequence length s.
pub fn flops_oracle_layer(d: u64, heads: u64, dk: u64, dv: u64, f: u64, s: u64) -> u64 {
    let mm = |m: u64, n: u64, k: u64| 2 * m * n * k;
    let per_head = mm(s, dk, d) + mm(s, dk, d) + mm(s, dv, d) + mm(s, s, dk) + mm(s, dv, s) + mm(s, d, dv);
    heads * per_head + mm(s, f, d) + mm(s, d, f)
}
