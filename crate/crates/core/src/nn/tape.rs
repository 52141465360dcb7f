//! Reverse-mode differentiation over matrix-valued operations.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes. Each node
//! stores its value and the operation that produced it; [`Tape::backward`]
//! walks the list in reverse and accumulates adjoints, routing parameter
//! adjoints into a [`Gradients`] buffer laid out like the parameter store.

use crate::error::{Error, Result};
use crate::nn::params::{Gradients, ParamId, PredictorParams};
use crate::tensor::{gemm_acc, Tensor2};

pub const LN_EPS: f64 = 1e-5;

/// Node handle on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    BandSoftmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RowDiff(Var),
    MeanAbsDiff(Var, Tensor2),
    MeanSqDiff(Var, Tensor2),
    SumAll(Var),
}

struct Node {
    op: Op,
    // `None` for parameters, whose values live in the parameter store.
    value: Option<Tensor2>,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<'p> {
    params: &'p PredictorParams,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p PredictorParams) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p PredictorParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor2) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor2) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape(format!(
                "matmul {}x{} · {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        let mut out = Tensor2::zeros(va.rows(), vb.cols());
        gemm_acc(va, false, vb, false, &mut out);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(format!(
                "matmul_nt inner {} vs {}",
                va.cols(),
                vb.cols()
            )));
        }
        let mut out = Tensor2::zeros(va.rows(), vb.rows());
        gemm_acc(va, false, vb, true, &mut out);
        Ok(self.push(Op::MatMulNt(a, b), out))
    }

    /// `a + 1·b` with `b` a single row broadcast over all rows of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::shape(format!(
                "bias {}x{} for {}x{}",
                vb.rows(),
                vb.cols(),
                va.rows(),
                va.cols()
            )));
        }
        let mut out = va.clone();
        let bias = vb.data();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias(a, b), out))
    }

    fn binary(&self, a: Var, b: Var, what: &str) -> Result<(&Tensor2, &Tensor2)> {
        let (va, vb) = (self.value(a), self.value(b));
        va.ensure_same_shape(vb, what)?;
        Ok((va, vb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = self.binary(a, b, "add")?;
            va.add(vb)
        };
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = self.binary(a, b, "sub")?;
            va.sub(vb)
        };
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = self.binary(a, b, "mul")?;
            va.zip_map(vb, |x, y| x * y)
        };
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(Op::Scale(a, s), out)
    }

    /// Per-row normalization to zero mean and unit population variance
    /// (no affine parameters).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows());
        let n = vx.cols() as f64;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(Op::LayerNorm { x, inv_std }, out)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(Op::Gelu(x), out)
    }

    /// Row softmax restricted to columns `j` with `|i - j| <= half_width`;
    /// masked entries are exactly zero.
    pub fn band_softmax(&mut self, x: Var, half_width: usize) -> Var {
        let vx = self.value(x);
        let mut out = Tensor2::zeros(vx.rows(), vx.cols());
        for i in 0..vx.rows() {
            let lo = i.saturating_sub(half_width);
            let hi = i
                .saturating_add(half_width)
                .min(vx.cols().saturating_sub(1));
            if lo > hi || lo >= vx.cols() {
                continue;
            }
            let src = &vx.row(i)[lo..=hi];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out.row_mut(i)[lo..=hi];
            let mut z = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        self.push(Op::BandSoftmax(x), out)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        self.push(Op::SliceRows(x, start), out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        self.push(Op::SliceCols(x, start), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor2::concat_rows(&vals)?
        };
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor2::concat_cols(&vals)?
        };
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// One-step difference along rows: `out[l] = x[l + 1] - x[l]`.
    pub fn row_diff(&mut self, x: Var) -> Result<Var> {
        let out = row_diff(self.value(x))?;
        Ok(self.push(Op::RowDiff(x), out))
    }

    /// Mean absolute deviation from a constant target, as a 1x1 value.
    pub fn mean_abs_diff(&mut self, x: Var, target: Tensor2) -> Result<Var> {
        let vx = self.value(x);
        vx.ensure_same_shape(&target, "mean_abs_diff")?;
        let m = vx
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / vx.len().max(1) as f64;
        Ok(self.push(Op::MeanAbsDiff(x, target), Tensor2::filled(1, 1, m)))
    }

    /// Mean squared deviation from a constant target, as a 1x1 value.
    pub fn mean_sq_diff(&mut self, x: Var, target: Tensor2) -> Result<Var> {
        let vx = self.value(x);
        vx.ensure_same_shape(&target, "mean_sq_diff")?;
        let m = vx
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / vx.len().max(1) as f64;
        Ok(self.push(Op::MeanSqDiff(x, target), Tensor2::filled(1, 1, m)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::SumAll(x), Tensor2::filled(1, 1, s))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Propagates adjoints from the scalar `loss` back to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() || self.value(loss).shape() != (1, 1) {
            return Err(Error::State(
                "backward requires a recorded 1x1 loss node".into(),
            ));
        }
        let mut grads = self.params.zeros_like();
        let mut adj: Vec<Option<Tensor2>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut adj, *a, va);
                    gemm_acc(&g, false, vb, true, ga);
                    let gb = slot(&mut adj, *b, vb);
                    gemm_acc(va, true, &g, false, gb);
                }
                Op::MatMulNt(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut adj, *a, va);
                    gemm_acc(&g, false, vb, false, ga);
                    let gb = slot(&mut adj, *b, vb);
                    gemm_acc(&g, true, va, false, gb);
                }
                Op::AddBias(a, b) => {
                    let vb = self.value(*b);
                    let gb = slot(&mut adj, *b, vb);
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.scale(-1.0));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut adj, *a, g.zip_map(vb, |x, y| x * y));
                    accumulate(&mut adj, *b, g.zip_map(va, |x, y| x * y));
                }
                Op::AddScalar(a) => accumulate(&mut adj, *a, g),
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scale(*s)),
                Op::LayerNorm { x, inv_std } => {
                    // dx = inv_std * (g - mean(g) - y * mean(g * y))
                    let y = node.value.as_ref().expect("layer norm keeps its output");
                    let n = y.cols() as f64;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, gv), yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = inv_std[r] * (gv - mg - yv * mgy);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    accumulate(&mut adj, *x, g.zip_map(vx, |gv, xv| gv * gelu_grad(xv)));
                }
                Op::BandSoftmax(x) => {
                    // ds_ij = p_ij (g_ij - Σ_k p_ik g_ik); masked p are zero
                    let p = node.value.as_ref().expect("softmax keeps its output");
                    let mut dx = Tensor2::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dotpg: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, pv), gv) in dx.row_mut(r).iter_mut().zip(pr).zip(gr) {
                            *d = pv * (gv - dotpg);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::SliceRows(x, start) => {
                    let vx = self.value(*x);
                    let gx = slot(&mut adj, *x, vx);
                    let c = gx.cols();
                    for (o, v) in gx.data_mut()[start * c..(start + g.rows()) * c]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *o += v;
                    }
                }
                Op::SliceCols(x, start) => {
                    let vx = self.value(*x);
                    let gx = slot(&mut adj, *x, vx);
                    for r in 0..g.rows() {
                        for (o, v) in gx.row_mut(r)[*start..*start + g.cols()]
                            .iter_mut()
                            .zip(g.row(r))
                        {
                            *o += v;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        accumulate(&mut adj, p, g.slice_rows(start, rows));
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        accumulate(&mut adj, p, g.slice_cols(start, cols));
                        start += cols;
                    }
                }
                Op::RowDiff(x) => {
                    let vx = self.value(*x);
                    let gx = slot(&mut adj, *x, vx);
                    for l in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = g.get(l, c);
                            let lo = gx.get(l, c);
                            gx.set(l, c, lo - v);
                            let hi = gx.get(l + 1, c);
                            gx.set(l + 1, c, hi + v);
                        }
                    }
                }
                Op::MeanAbsDiff(x, target) => {
                    let vx = self.value(*x);
                    let s = g.data()[0] / vx.len().max(1) as f64;
                    accumulate(&mut adj, *x, vx.zip_map(target, |a, b| s * sign(a - b)));
                }
                Op::MeanSqDiff(x, target) => {
                    let vx = self.value(*x);
                    let s = 2.0 * g.data()[0] / vx.len().max(1) as f64;
                    accumulate(&mut adj, *x, vx.zip_map(target, |a, b| s * (a - b)));
                }
                Op::SumAll(x) => {
                    let vx = self.value(*x);
                    accumulate(
                        &mut adj,
                        *x,
                        Tensor2::filled(vx.rows(), vx.cols(), g.data()[0]),
                    );
                }
            }
        }
        Ok(grads)
    }
}

fn slot<'a>(adj: &'a mut [Option<Tensor2>], v: Var, like: &Tensor2) -> &'a mut Tensor2 {
    adj[v.0].get_or_insert_with(|| Tensor2::zeros(like.rows(), like.cols()))
}

fn accumulate(adj: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// `out[l] = x[l + 1] - x[l]`
pub fn row_diff(x: &Tensor2) -> Result<Tensor2> {
    if x.rows() < 2 {
        return Err(Error::shape(format!(
            "time difference needs at least 2 frames, got {}",
            x.rows()
        )));
    }
    let mut out = Tensor2::zeros(x.rows() - 1, x.cols());
    for l in 0..x.rows() - 1 {
        for ((o, a), b) in out.row_mut(l).iter_mut().zip(x.row(l + 1)).zip(x.row(l)) {
            *o = a - b;
        }
    }
    Ok(out)
}
