//! Spectral-norm estimation by power iteration and weight rescaling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;

/// Seed used for the random start vector of [`estimate_spectral_norm`].
pub const ESTIMATE_SEED: u64 = 0x5eed_5eed;
pub const REPORT_TOL: f64 = 1e-9;
pub const REPORT_MAX_ITERS: usize = 1000;

/// How the spectral constraint is enforced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnMode {
    /// Always rescale so that `λ(Ŵ) = target`.
    #[default]
    Rescale,
    /// Only divide when `λ(W) > target`.
    Clip,
}

/// Persistent power-iteration state for one weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    /// Left singular vector estimate, unit norm.
    pub u: Vec<f64>,
    /// Right singular vector estimate from the last step.
    pub v: Vec<f64>,
    pub sigma: f64,
}

impl SpectralState {
    /// Seeded random unit start for an `rows × cols` matrix.
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        Self {
            u: random_unit(rows, seed),
            v: vec![0.0; cols],
            sigma: 0.0,
        }
    }

    /// One power-iteration step against `w`, updating `u`, `v` and `sigma`.
    pub fn step(&mut self, w: &Tensor) -> f64 {
        let (u, v, sigma) = power_iteration_step(w, &self.u);
        self.u = u;
        self.v = v;
        self.sigma = sigma;
        sigma
    }
}

pub(crate) fn random_unit(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        if normalize(&mut u) > 0.0 {
            return u;
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// `v' = normalize(Wᵀu)`, `u' = normalize(W v')`, `σ = u'ᵀ W v'`.
///
/// A zero matrix yields `σ = 0` and returns `u` unchanged.
pub fn power_iteration_step(w: &Tensor, u: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let mut v = w.matvec_t(u);
    if normalize(&mut v) == 0.0 {
        return (u.to_vec(), v, 0.0);
    }
    let wv = w.matvec(&v);
    let sigma = norm(&wv);
    if sigma == 0.0 {
        return (u.to_vec(), v, 0.0);
    }
    let u_new: Vec<f64> = wv.iter().map(|x| x / sigma).collect();
    (u_new, v, sigma)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs power iteration from a seeded random start until the relative change
/// in σ drops below `tol` or `max_iters` is reached.
pub fn estimate_spectral_norm(w: &Tensor, tol: f64, max_iters: usize) -> SpectralEstimate {
    let mut u = random_unit(w.rows(), ESTIMATE_SEED);
    let mut prev = 0.0;
    for it in 1..=max_iters {
        let (nu, _, sigma) = power_iteration_step(w, &u);
        if sigma == 0.0 {
            return SpectralEstimate {
                sigma: 0.0,
                iterations: it,
                converged: true,
            };
        }
        u = nu;
        if it > 1 && (sigma - prev).abs() < tol * sigma {
            return SpectralEstimate {
                sigma,
                iterations: it,
                converged: true,
            };
        }
        prev = sigma;
    }
    SpectralEstimate {
        sigma: prev,
        iterations: max_iters,
        converged: false,
    }
}

/// Converged estimate with the reporting tolerances.
pub fn spectral_norm(w: &Tensor) -> f64 {
    estimate_spectral_norm(w, REPORT_TOL, REPORT_MAX_ITERS).sigma
}

/// `target · W / σ̂`; a dead matrix (`σ̂ = 0`) is returned unchanged.
pub fn normalize_weight(w: &Tensor, sigma_hat: f64, sigma_target: f64) -> Tensor {
    if sigma_hat > 0.0 {
        w.scaled(sigma_target / sigma_hat)
    } else {
        w.clone()
    }
}

/// Scale factor applied to `W` under `mode`.
pub fn sn_factor(sigma: f64, target: f64, mode: SnMode) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    match mode {
        SnMode::Rescale => target / sigma,
        SnMode::Clip if sigma > target => target / sigma,
        SnMode::Clip => 1.0,
    }
}

/// Gradient of the loss w.r.t. `W` given the gradient `g` w.r.t.
/// `Ŵ = target · W / σ`, where `σ = uᵀ W v` with `u`, `v` held constant:
/// `dW = (target/σ)·(G − ⟨G, W⟩/σ · u vᵀ)`.
pub fn rescale_backward(w: &Tensor, g: &[f64], u: &[f64], v: &[f64], sigma: f64, target: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return g.to_vec();
    }
    let c = target / sigma;
    let inner: f64 = g.iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let k = inner / sigma;
    let n = w.cols();
    g.iter()
        .enumerate()
        .map(|(idx, gi)| c * (gi - k * u[idx / n] * v[idx % n]))
        .collect()
}

/// One row of a spectral-norm trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub layer: usize,
    pub matrix: String,
    pub sigma: f64,
    pub converged: bool,
}

/// Converged spectral norms of every live attention output slice and FFN
/// matrix of `params` (pass the weights the model actually applies).
pub fn log_spectral_trace(params: &crate::model::ModelParams, step: u64) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    let mut push = |layer: usize, matrix: String, w: &Tensor| {
        let e = estimate_spectral_norm(w, REPORT_TOL, REPORT_MAX_ITERS);
        rows.push(TraceRow {
            step,
            layer,
            matrix,
            sigma: e.sigma,
            converged: e.converged,
        });
    };
    for (l, layer) in params.layers.iter().enumerate() {
        for (h, hp) in &layer.heads {
            push(l, format!("attn_out.h{h}"), &hp.wo);
        }
        if let Some(ffn) = &layer.ffn {
            push(l, "ffn.w1".to_string(), &ffn.w1);
            push(l, "ffn.w2".to_string(), &ffn.w2);
        }
    }
    rows
}
