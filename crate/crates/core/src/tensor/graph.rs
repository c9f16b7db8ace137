use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::conv::{self, ConvGeom};
use super::{dim_err, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a trainable parameter slot, independent of any graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Scale(Var, f64),
    Shift(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation tape. Nodes are appended in evaluation order,
/// so reverse index order is a reverse topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
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

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is computed by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Binds a parameter. Binding the same id twice returns the same node,
    /// so every use of a parameter within one graph shares one leaf.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Gradients for every bound parameter; zero when the loss does not
    /// depend on it.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let value = &self.nodes[v.0].value;
                let data = self
                    .grad(v)
                    .map_or_else(|| vec![0.0; value.len()], <[f64]>::to_vec);
                (
                    id,
                    Tensor::new(value.shape().to_vec(), data).expect("grad shape"),
                )
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = self
            .op_inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b) => vec![a, b],
            Op::Conv2d { x, k, .. } => vec![x, k],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Upsample { x: a, .. } => vec![a],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        conv::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn broadcast_shape(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
    ) -> Result<Vec<usize>, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.len() == 1 {
            Ok(ta.shape().to_vec())
        } else if ta.len() == 1 {
            Ok(tb.shape().to_vec())
        } else {
            Err(dim_err(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ))
        }
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                f(
                    da[if da.len() == 1 { 0 } else { i }],
                    db[if db.len() == 1 { 0 } else { i }],
                )
            })
            .collect();
        self.push(name, Tensor::new(shape, data)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `bias[c]` to every element of channel/column `c` of `x`
    /// (`x` is `B×n` or `B×C×…`, `bias` has length `x.shape[1]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let channels = tx.shape().get(1).copied().unwrap_or(0);
        if tx.shape().len() < 2 || tb.len() != channels {
            return Err(dim_err(
                "add_bias",
                format!("{:?} with bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let inner: usize = tx.shape()[2..].iter().product();
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / inner) % channels])
            .collect();
        let shape = tx.shape().to_vec();
        self.push("add_bias", Tensor::new(shape, data)?, Op::AddBias(x, bias))
    }

    fn map(
        &mut self,
        name: &'static str,
        a: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var, TensorError> {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(name, Tensor::new(shape, data)?, op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("relu", a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("sigmoid", a, Op::Sigmoid(a), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v < 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("negative input {v}"),
            });
        }
        self.map("log", a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("square", a, Op::Square(a), |v| v * v)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        self.map("sqrt", a, Op::Sqrt(a), f64::sqrt)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.map("scale", a, Op::Scale(a, c), |v| v * c)
    }

    /// Adds a constant.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.map("shift", a, Op::Shift(a), |v| v + c)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.map("clamp", a, Op::Clamp(a, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(a))
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = [t.rows(), t.row_len()];
        self.reshape(a, &shape)
    }

    /// 2-D cross-correlation with zero padding. `x` is `B×C×H×W`,
    /// `k` is `F×C×kh×kw`; the result is `B×F×Ho×Wo` with
    /// `Ho = (H + 2·pad − kh) / stride + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (sx, sk) = (
            self.value(x).shape().to_vec(),
            self.value(k).shape().to_vec(),
        );
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(dim_err("conv2d", format!("input {sx:?} kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be at least 1"));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(dim_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; b * rows * ncol];
        let mut out = vec![0.0; b * f * ncol];
        let (xd, kd) = (self.value(x).data(), self.value(k).data());
        for i in 0..b {
            let img = &xd[i * geom.image_len()..(i + 1) * geom.image_len()];
            let col = &mut cols[i * rows * ncol..(i + 1) * rows * ncol];
            conv::im2col(img, &geom, col);
            conv::gemm(
                f,
                rows,
                ncol,
                kd,
                false,
                col,
                false,
                0.0,
                &mut out[i * f * ncol..(i + 1) * f * ncol],
            );
        }
        let value = Tensor::new(vec![b, f, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", value, Op::Conv2d { x, k, geom, cols })
    }

    /// Nearest-neighbour spatial upsampling of a `B×C×H×W` tensor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(dim_err("upsample", format!("{s:?} by {factor}")));
        }
        let data = conv::upsample(self.value(x).data(), s[0] * s[1], s[2], s[3], factor);
        let value = Tensor::new(vec![s[0], s[1], s[2] * factor, s[3] * factor], data)?;
        self.push("upsample", value, Op::Upsample { x, factor })
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate (+=)
    /// over every use of a node; previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&self.nodes, &mut grads, i, &g);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

/// Accumulates `g ⊙ other` (with scalar broadcast on either side) into `target`.
fn acc_broadcast(target: &mut [f64], g: &[f64], other: Option<&[f64]>, sign: f64) {
    let factor = |i: usize| match other {
        None => sign,
        Some(o) => sign * o[if o.len() == 1 { 0 } else { i }],
    };
    if target.len() == g.len() {
        for (i, (t, gi)) in target.iter_mut().zip(g).enumerate() {
            *t += gi * factor(i);
        }
    } else {
        target[0] += g
            .iter()
            .enumerate()
            .map(|(i, gi)| gi * factor(i))
            .sum::<f64>();
    }
}

fn unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: Var,
    g: &[f64],
    d: impl Fn(usize) -> f64,
) {
    if let Some(t) = slot(nodes, grads, a) {
        for (i, (ti, gi)) in t.iter_mut().zip(g).enumerate() {
            *ti += gi * d(i);
        }
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(t) = slot(nodes, grads, a) {
                conv::gemm(m, n, k, g, false, val(b), true, 1.0, t);
            }
            if let Some(t) = slot(nodes, grads, b) {
                conv::gemm(k, m, n, val(a), true, g, false, 1.0, t);
            }
        }
        Op::Add(a, b) => {
            if let Some(t) = slot(nodes, grads, a) {
                acc_broadcast(t, g, None, 1.0);
            }
            if let Some(t) = slot(nodes, grads, b) {
                acc_broadcast(t, g, None, 1.0);
            }
        }
        Op::Sub(a, b) => {
            if let Some(t) = slot(nodes, grads, a) {
                acc_broadcast(t, g, None, 1.0);
            }
            if let Some(t) = slot(nodes, grads, b) {
                acc_broadcast(t, g, None, -1.0);
            }
        }
        Op::Mul(a, b) => {
            if let Some(t) = slot(nodes, grads, a) {
                acc_broadcast(t, g, Some(val(b)), 1.0);
            }
            if let Some(t) = slot(nodes, grads, b) {
                acc_broadcast(t, g, Some(val(a)), 1.0);
            }
        }
        Op::AddBias(x, b) => {
            unary(nodes, grads, x, g, |_| 1.0);
            let shape = nodes[x.0].value.shape();
            let channels = shape[1];
            let inner: usize = shape[2..].iter().product();
            if let Some(t) = slot(nodes, grads, b) {
                for (j, gj) in g.iter().enumerate() {
                    t[(j / inner) % channels] += gj;
                }
            }
        }
        Op::Relu(a) => unary(nodes, grads, a, g, |j| if y[j] > 0.0 { 1.0 } else { 0.0 }),
        Op::Sigmoid(a) => unary(nodes, grads, a, g, |j| y[j] * (1.0 - y[j])),
        Op::Exp(a) => unary(nodes, grads, a, g, |j| y[j]),
        Op::Log(a) => {
            let x = val(a);
            unary(nodes, grads, a, g, |j| 1.0 / x[j])
        }
        Op::Square(a) => {
            let x = val(a);
            unary(nodes, grads, a, g, |j| 2.0 * x[j])
        }
        Op::Sqrt(a) => unary(nodes, grads, a, g, |j| 0.5 / y[j]),
        Op::Scale(a, c) => unary(nodes, grads, a, g, |_| c),
        Op::Shift(a) | Op::Reshape(a) => unary(nodes, grads, a, g, |_| 1.0),
        Op::Clamp(a, lo, hi) => {
            let x = val(a);
            unary(nodes, grads, a, g, |j| {
                if x[j] >= lo && x[j] <= hi {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Op::Sum(a) => {
            if let Some(t) = slot(nodes, grads, a) {
                t.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Conv2d {
            x,
            k,
            ref geom,
            ref cols,
        } => {
            let f = nodes[k.0].value.shape()[0];
            let (rows, ncol) = (geom.col_rows(), geom.col_cols());
            let batch = nodes[x.0].value.shape()[0];
            if let Some(t) = slot(nodes, grads, k) {
                for b in 0..batch {
                    let gb = &g[b * f * ncol..(b + 1) * f * ncol];
                    let cb = &cols[b * rows * ncol..(b + 1) * rows * ncol];
                    conv::gemm(f, ncol, rows, gb, false, cb, true, 1.0, t);
                }
            }
            let kd = val(k);
            if let Some(t) = slot(nodes, grads, x) {
                let mut dcols = vec![0.0; rows * ncol];
                let il = geom.image_len();
                for b in 0..batch {
                    let gb = &g[b * f * ncol..(b + 1) * f * ncol];
                    conv::gemm(rows, f, ncol, kd, true, gb, false, 0.0, &mut dcols);
                    conv::col2im(&dcols, geom, &mut t[b * il..(b + 1) * il]);
                }
            }
        }
        Op::Upsample { x, factor } => {
            let s = nodes[x.0].value.shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            if let Some(t) = slot(nodes, grads, x) {
                conv::upsample_backward(g, planes, h, w, factor, t);
            }
        }
    }
}
