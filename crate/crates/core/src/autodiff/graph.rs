//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Each builder call evaluates its forward value immediately and appends a
//! node, so node order is a topological order by construction. `backward`
//! walks the nodes once in reverse.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Concat(Vec<NodeId>),
    Silu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    LogLoss {
        p: NodeId,
        target: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Concat(_) => "concat",
            Op::Silu(_) => "silu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mse(..) => "mse",
            Op::LogLoss { .. } => "log_loss",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like its value when no path reached it.
    pub fn get_or_zeros(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `c (m×n) = op(a) (m×k) · op(b) (k×n)`, accumulating into `c` when `accumulate`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are asserted above and the strides address a
    // dense row-major (or transposed) layout inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Forward values of the requested nodes.
    pub fn eval(&self, outputs: &[NodeId]) -> Vec<Tensor> {
        outputs.iter().map(|&id| self.value(id).clone()).collect()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> Result<NodeId> {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {} at node {}",
                op.name(),
                self.nodes.len()
            )));
        }
        Ok(self.push(op, value, requires_grad))
    }

    fn structural(&self, op: &'static str, msg: String) -> Error {
        Error::Structural {
            node: self.nodes.len(),
            op,
            msg,
        }
    }

    fn matrix_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(self.structural(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `x·w + b` with `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (rows, inner) = self.matrix_dims(x, "affine")?;
        let (w_in, out) = self.matrix_dims(w, "affine")?;
        if inner != w_in {
            return Err(self.structural("affine", format!("input width {inner} vs weight rows {w_in}")));
        }
        let mut y = vec![0.0; rows * out];
        gemm(
            rows,
            inner,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut y,
            false,
        );
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [out] {
                return Err(self.structural("affine", format!("bias shape {:?} vs output width {out}", bias.shape())));
            }
            for row in y.chunks_mut(out) {
                for (v, bb) in row.iter_mut().zip(bias.data()) {
                    *v += bb;
                }
            }
            inputs.push(b);
        }
        let value = Tensor::new(vec![rows, out], y)?;
        self.push_op(Op::Affine { x, w, b }, value, &inputs)
    }

    /// Concatenates matrices along the column axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.structural("concat", "no inputs".into()));
        }
        let rows = self.matrix_dims(parts[0], "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat")?;
            if r != rows {
                return Err(self.structural("concat", format!("row count {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push_op(Op::Concat(parts.to_vec()), value, parts)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push_op(Op::Silu(x), value, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(sigmoid);
        self.push_op(Op::Sigmoid(x), value, &[x])
    }

    /// Per-row normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims(x, "layer_norm")?;
        if self.value(gain).shape() != [cols] || self.value(bias).shape() != [cols] {
            return Err(self.structural("layer_norm", format!("gain/bias must be [{cols}]")));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..cols {
                let h = (r[j] - mean) * rs;
                xhat[i * cols + j] = h;
                y[i * cols + j] = h * g[j] + bb[j];
            }
        }
        let value = Tensor::new(vec![rows, cols], y)?;
        self.push_op(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            value,
            &[x, gain, bias],
        )
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.structural(
                op,
                format!(
                    "operand shapes {:?} and {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).add(self.value(b))?;
        self.push_op(Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).sub(self.value(b))?;
        self.push_op(Op::Sub(a, b), value, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push_op(Op::Mul(a, b), value, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let value = self.value(a).scale(k);
        self.push_op(Op::Scale(a, k), value, &[a])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(Op::Sum(x), value, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push_op(Op::Mean(x), value, &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / va.len() as f64);
        self.push_op(Op::Mse(a, b), value, &[a, b])
    }

    /// Mean binary log-loss of probabilities `p` against a constant label.
    ///
    /// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`; the
    /// gradient is zero where the clamp is active.
    pub fn log_loss(&mut self, p: NodeId, target: f64) -> Result<NodeId> {
        if !(0.0..=1.0).contains(&target) {
            return Err(self.structural("log_loss", format!("target {target} outside [0,1]")));
        }
        let pv = self.value(p).data();
        let s: f64 = pv
            .iter()
            .map(|&v| {
                let c = v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(target * c.ln() + (1.0 - target) * (1.0 - c).ln())
            })
            .sum();
        let value = Tensor::scalar(s / pv.len() as f64);
        self.push_op(Op::LogLoss { p, target }, value, &[p])
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Structural {
                node: loss.0,
                op: self.nodes[loss.0].op.name(),
                msg: format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let upstream = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, &upstream, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (rows, inner) = (xv.rows(), xv.cols());
                let out = wv.cols();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * inner];
                    gemm(rows, out, inner, dy.data(), false, wv.data(), true, &mut dx, false);
                    self.accumulate(grads, *x, Tensor::new(vec![rows, inner], dx)?)?;
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; inner * out];
                    gemm(inner, rows, out, xv.data(), true, dy.data(), false, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::new(vec![inner, out], dw)?)?;
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; out];
                        for row in dy.data().chunks(out) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![out], db)?)?;
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = dy.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&dy.row(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![rows, c], d)?)?;
                    }
                    offset += c;
                }
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(dy, |v, g| {
                    let s = sigmoid(v);
                    g * s * (1.0 + v * (1.0 - s))
                })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = node.value.zip_map(dy, |y, g| g * y * (1.0 - y))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (dy.rows(), dy.cols());
                let g = self.value(*gain).data();
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    let dyr = dy.row(i);
                    let hr = &xhat[i * cols..(i + 1) * cols];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..cols {
                        dgain[j] += dyr[j] * hr[j];
                        dbias[j] += dyr[j];
                        let dh = dyr[j] * g[j];
                        sum_d += dh;
                        sum_dh += dh * hr[j];
                    }
                    let n = cols as f64;
                    for j in 0..cols {
                        let dh = dyr[j] * g[j];
                        dx[i * cols + j] = rstd[i] / n * (n * dh - sum_d - hr[j] * sum_dh);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], dx)?)?;
                self.accumulate(grads, *gain, Tensor::new(vec![cols], dgain)?)?;
                self.accumulate(grads, *bias, Tensor::new(vec![cols], dbias)?)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let da = dy.zip_map(self.value(*b), |g, v| g * v)?;
                let db = dy.zip_map(self.value(*a), |g, v| g * v)?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, dy.scale(*k))?;
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.data()[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g))?;
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let g = dy.data()[0];
                let da = self.value(*a).zip_map(self.value(*b), |x, y| 2.0 * (x - y) / n * g)?;
                self.accumulate(grads, *b, da.scale(-1.0))?;
                self.accumulate(grads, *a, da)?;
            }
            Op::LogLoss { p, target } => {
                let pv = self.value(*p);
                let n = pv.len() as f64;
                let g = dy.data()[0];
                let y = *target;
                let dp = pv.map(|v| {
                    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&v) {
                        0.0
                    } else {
                        g * (-y / v + (1.0 - y) / (1.0 - v)) / n
                    }
                });
                self.accumulate(grads, *p, dp)?;
            }
        }
        Ok(())
    }
}

/// Sinusoidal features of integer timesteps, shape `[times.len(), dim]`.
///
/// The first half holds sines, the second cosines; angular frequencies run
/// geometrically from 1 down to `1 / max_period`. Not differentiable.
pub fn sinusoidal_embedding(times: &[usize], dim: usize, max_period: f64) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            (-max_period.ln() * frac).exp()
        })
        .collect();
    let mut data = Vec::with_capacity(times.len() * dim);
    for &t in times {
        let t = t as f64;
        data.extend(freqs.iter().map(|f| (t * f).sin()));
        data.extend(freqs.iter().map(|f| (t * f).cos()));
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::new(vec![times.len(), dim], data).expect("embedding shape")
}
