use super::tensor::{dot, matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};
use crate::gates;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::config("model.activation", format!("unknown activation `{other}`"))),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Broadcast a length-n vector over every row of an m×n matrix.
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant tensor.
    MulConst(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Act(Var, Activation),
    Tanh(Var),
    Gate {
        v: Var,
        scale: f64,
        /// Set when the gate sits inside its linear band; holds the index of
        /// the arg-max coordinate and the slope `L`.
        band: Option<(usize, f64)>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SelectRow(Var, usize),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    AbsSum(Var),
    SpectralScale {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
        target: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations recorded in insertion order.
///
/// Backward walks the tape in exact reverse order, so gradients are
/// bit-reproducible for identical inputs. A graph is meant to be built and
/// consumed on one thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.matmul(tb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        matmul_bt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.numel() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scaled(factor);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if t.numel() != mask.len() {
            return Err(Error::Shape {
                op: "mul_const",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = t.data().iter().zip(mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, mask.to_vec()), ng))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(0.0),
                Activation::Gelu => gelu(v),
            })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Act(a, kind), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// `S_ε(v) = t_ε(v) · v` over the whole tensor. Returns the output node and
    /// the gate value `t`.
    pub fn s_epsilon(&mut self, v: Var, eps: f64, sharpness: f64) -> (Var, f64) {
        let t = self.value(v);
        let (max_abs, argmax) = gates::max_abs_argmax(t.data());
        let scale = gates::gate_from_max_abs(max_abs, eps, sharpness);
        let band = if scale > 0.0 && scale < 1.0 {
            Some((argmax, sharpness))
        } else {
            None
        };
        let out = t.scaled(scale);
        let ng = self.ng(v);
        (self.push(out, Op::Gate { v, scale, band }, ng), scale)
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let n = t.cols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::Input(format!(
                    "row index {id} out of range for table with {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), n, data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks the rows of `a` above the rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("concat_rows", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::matrix(ta.rows() + tb.rows(), ta.cols(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatRows(a, b), ng))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let t = self.value(a);
        if row >= t.rows() {
            return Err(Error::Input(format!("row {row} out of range")));
        }
        let out = Tensor::matrix(1, t.cols(), t.row(row).to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SelectRow(a, row), ng))
    }

    /// Softmax cross-entropy of a single logit row against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != 1 || target >= t.cols() {
            return Err(Error::Input(format!(
                "cross_entropy expects one logit row and target < {}",
                t.cols()
            )));
        }
        let mut probs = t.data().to_vec();
        softmax_in_place(&mut probs);
        let row = t.data();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - row[target];
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `Σ |a_i|`, subgradient 0 at 0.
    pub fn abs_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v.abs()).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::AbsSum(a), ng)
    }

    /// Re-parameterizes `w` as `target · w / σ` with `σ = uᵀ w v`, treating the
    /// singular-vector estimates `u`, `v` as constants.
    pub fn spectral_scale(&mut self, w: Var, u: &[f64], v: &[f64], target: f64) -> Result<Var> {
        let tw = self.value(w);
        if tw.rows() != u.len() || tw.cols() != v.len() {
            return Err(Error::Shape {
                op: "spectral_scale",
                left: tw.shape().to_vec(),
                right: vec![u.len(), v.len()],
            });
        }
        let sigma = dot(u, &tw.matvec(v));
        let out = if sigma > 0.0 {
            tw.scaled(target / sigma)
        } else {
            tw.clone()
        };
        let ng = self.ng(w);
        Ok(self.push(
            out,
            Op::SpectralScale {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
                target,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`, populating gradients of every
    /// node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                self.nodes[idx].grad = Some(g);
                continue;
            }
            let contributions = self.local_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (target, delta) in contributions {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut self.nodes[target.0].grad {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(g, tb.data(), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(ta.data(), g, &mut db, m, k, n);
                    out.push((*b, db));
                }
            }
            Op::MatMulT(a, b) => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, tb.data(), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_at_into(g, ta.data(), &mut db, m, n, k);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    out.push((*a, g.to_vec()));
                }
                if want(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::AddRow(a, r) => {
                if want(*a) {
                    out.push((*a, g.to_vec()));
                }
                if want(*r) {
                    let n = val(*r).numel();
                    let mut dr = vec![0.0; n];
                    for row in g.chunks(n) {
                        dr.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    out.push((*r, dr));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|x| x * f).collect())),
            Op::MulConst(a, m) => out.push((*a, g.iter().zip(m).map(|(x, y)| x * y).collect())),
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                out.push((*a, da));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gv = val(*gain).data();
                if want(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dot(&dh, hr) / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if want(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if want(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Act(a, kind) => {
                let x = val(*a).data();
                let da = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, gi)| {
                        gi * match kind {
                            Activation::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Gelu => gelu_grad(xi),
                        }
                    })
                    .collect();
                out.push((*a, da));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                out.push((*a, y.iter().zip(g).map(|(yi, gi)| gi * (1.0 - yi * yi)).collect()));
            }
            Op::Gate { v, scale, band } => {
                let mut dv: Vec<f64> = g.iter().map(|x| x * scale).collect();
                if let Some((k, slope)) = band {
                    let vin = val(*v).data();
                    let gv = dot(g, vin);
                    dv[*k] += slope * vin[*k].signum() * gv;
                }
                out.push((*v, dv));
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let n = t.cols();
                let mut dt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt[id * n + j] += g[r * n + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::ConcatRows(a, b) => {
                let na = val(*a).numel();
                if want(*a) {
                    out.push((*a, g[..na].to_vec()));
                }
                if want(*b) {
                    out.push((*b, g[na..].to_vec()));
                }
            }
            Op::SelectRow(a, row) => {
                let t = val(*a);
                let n = t.cols();
                let mut da = vec![0.0; t.numel()];
                da[row * n..(row + 1) * n].copy_from_slice(g);
                out.push((*a, da));
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let mut dl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                dl[*target] -= g[0];
                out.push((*logits, dl));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).numel()])),
            Op::AbsSum(a) => out.push((
                *a,
                val(*a)
                    .data()
                    .iter()
                    .map(|x| {
                        if *x > 0.0 {
                            g[0]
                        } else if *x < 0.0 {
                            -g[0]
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )),
            Op::SpectralScale {
                w,
                u,
                v,
                sigma,
                target,
            } => {
                let dw = crate::spectral::rescale_backward(val(*w), g, u, v, *sigma, *target);
                out.push((*w, dw));
            }
        }
        out
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `x · Φ(x)` with the exact Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
