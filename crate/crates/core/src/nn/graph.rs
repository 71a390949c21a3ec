//! Reverse-mode autodiff on a recorded graph.
//!
//! Gradients are themselves built out of graph nodes, so a gradient can be
//! differentiated again. This is what the gradient penalty needs: the
//! penalty is a function of `∂D/∂x̂`, and its gradient with respect to the
//! critic parameters flows back through that first backward pass.
//!
//! Node ids are handed out in creation order, which is a topological order.

use super::tensor::{conv2d, conv2d_transpose, conv2d_weight, matmul, transpose, ConvGeom, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `[C]` broadcast along axis 1 of `shape`.
    BroadcastChannel(NodeId),
    /// Sum over every axis except 1.
    SumToChannel(NodeId),
    Conv(NodeId, NodeId, ConvGeom),
    ConvT(NodeId, NodeId, ConvGeom),
    ConvW(NodeId, NodeId, ConvGeom),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sqrt(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    BroadcastScalar(NodeId),
    SumPerSample(NodeId),
    BroadcastPerSample(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameters, or inputs whose gradient is wanted).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        if requires_grad {
            self.variable(value)
        } else {
            self.constant(value)
        }
    }

    // --- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "div")?;
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    // --- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(&self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose of {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let data = transpose(&self.value(a).data, m, n);
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::Transpose(a), &[a]))
    }

    /// Broadcasts a `[C]` vector along axis 1 of `shape`.
    pub fn broadcast_channel(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let c = self.value(a).len();
        if shape.len() < 2 || shape[1] != c || self.shape(a).len() != 1 {
            return Err(Error::shape(format!(
                "broadcast {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(shape.iter().product());
        for _ in 0..shape[0] {
            for &v in src {
                data.extend(std::iter::repeat(v).take(inner));
            }
        }
        let v = Tensor {
            shape: shape.to_vec(),
            data,
        };
        Ok(self.push(v, Op::BroadcastChannel(a), &[a]))
    }

    pub fn sum_to_channel(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("sum_to_channel of {shape:?}")));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut data = vec![0.0; c];
        for (i, v) in self.value(a).data.iter().enumerate() {
            data[(i / inner) % c] += v;
        }
        Ok(self.push(Tensor { shape: vec![c], data }, Op::SumToChannel(a), &[a]))
    }

    /// `x + b` with `b: [C]` broadcast along the channel axis.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast_channel(b, &shape)?;
        self.add(x, bb)
    }

    // --- convolutions ------------------------------------------------------

    /// `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]` → `[B, Co, Ho, Wo]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(Error::shape(format!("conv2d {xs:?} with {ws:?}")));
        }
        let g = ConvGeom::new(ws[2], stride, pad, xs[2], xs[3])?;
        self.conv_raw(x, w, g)
    }

    fn conv_raw(&mut self, x: NodeId, w: NodeId, g: ConvGeom) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || xs[1] != ws[1] || xs[2] != g.h || xs[3] != g.w {
            return Err(Error::shape(format!("conv2d {xs:?} with {ws:?}")));
        }
        let (b, ci, co) = (xs[0], ws[1], ws[0]);
        let data = conv2d(&self.value(x).data, &self.value(w).data, b, ci, co, &g);
        let v = Tensor {
            shape: vec![b, co, g.ho, g.wo],
            data,
        };
        Ok(self.push(v, Op::Conv(x, w, g), &[x, w]))
    }

    /// Transposed convolution: `y: [B, Co, Ho, Wo]`, `w: [Co, Ci, k, k]`
    /// → `[B, Ci, out_h, out_w]`. Used for learned upsampling.
    pub fn conv_transpose2d(
        &mut self,
        y: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<NodeId> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv_transpose2d weight {ws:?}")));
        }
        let g = ConvGeom::new(ws[2], stride, pad, out_hw.0, out_hw.1)?;
        self.conv_t_raw(y, w, g)
    }

    fn conv_t_raw(&mut self, y: NodeId, w: NodeId, g: ConvGeom) -> Result<NodeId> {
        let (ys, ws) = (self.shape(y).to_vec(), self.shape(w).to_vec());
        if ys.len() != 4 || ys[1] != ws[0] || ys[2] != g.ho || ys[3] != g.wo {
            return Err(Error::shape(format!("conv_transpose2d {ys:?} with {ws:?}")));
        }
        let (b, ci, co) = (ys[0], ws[1], ws[0]);
        let data = conv2d_transpose(&self.value(y).data, &self.value(w).data, b, ci, co, &g);
        let v = Tensor {
            shape: vec![b, ci, g.h, g.w],
            data,
        };
        Ok(self.push(v, Op::ConvT(y, w, g), &[y, w]))
    }

    fn conv_w_raw(&mut self, x: NodeId, y: NodeId, g: ConvGeom) -> Result<NodeId> {
        let (xs, ys) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        let (b, ci, co) = (xs[0], xs[1], ys[1]);
        let data = conv2d_weight(&self.value(x).data, &self.value(y).data, b, ci, co, &g);
        let v = Tensor {
            shape: vec![co, ci, g.k, g.k],
            data,
        };
        Ok(self.push(v, Op::ConvW(x, y, g), &[x, y]))
    }

    // --- shape and reductions ----------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let len: usize = shape.iter().product();
        if len != self.value(a).len() {
            return Err(Error::shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let v = Tensor {
            shape: shape.to_vec(),
            data: self.value(a).data.clone(),
        };
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = Tensor::filled(shape.to_vec(), self.value(a).item());
        self.push(v, Op::BroadcastScalar(a), &[a])
    }

    /// `[B, ...]` → `[B]`
    pub fn sum_per_sample(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let b = t.batch();
        let per = t.len() / b.max(1);
        let data = t.data.chunks(per.max(1)).map(|c| c.iter().sum()).collect();
        self.push(Tensor { shape: vec![b], data }, Op::SumPerSample(a), &[a])
    }

    fn broadcast_per_sample(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for &v in &self.value(a).data {
            data.extend(std::iter::repeat(v).take(per));
        }
        let v = Tensor {
            shape: shape.to_vec(),
            data,
        };
        self.push(v, Op::BroadcastPerSample(a), &[a])
    }

    // --- backward ----------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to each node in `wrt`.
    ///
    /// The returned gradients are graph nodes and can be differentiated
    /// again. Nodes in `wrt` that `loss` does not depend on get a zero
    /// constant.
    pub fn grad(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::DetachedGraph);
        }
        let top = loss.0;
        // only walk nodes that can reach something in `wrt`
        let min = wrt.iter().map(|w| w.0).min().unwrap_or(top);
        let mut grads: Vec<Option<NodeId>> = vec![None; top + 1];
        let seed = Tensor::filled(self.shape(loss).to_vec(), 1.0);
        grads[top] = Some(self.constant(seed));

        for id in (min..=top).rev() {
            let Some(g) = grads[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let this = NodeId(id);
            let mut contribs: Vec<(NodeId, NodeId)> = Vec::with_capacity(2);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    contribs.push((a, g));
                    contribs.push((b, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((a, g));
                    if self.requires_grad(b) {
                        let n = self.scale(g, -1.0);
                        contribs.push((b, n));
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(a) {
                        let ga = self.mul(g, b)?;
                        contribs.push((a, ga));
                    }
                    if self.requires_grad(b) {
                        let gb = self.mul(g, a)?;
                        contribs.push((b, gb));
                    }
                }
                Op::Div(a, b) => {
                    if self.requires_grad(a) {
                        let ga = self.div(g, b)?;
                        contribs.push((a, ga));
                    }
                    if self.requires_grad(b) {
                        // d(a/b)/db = -(a/b)/b
                        let q = self.div(this, b)?;
                        let t = self.mul(g, q)?;
                        let gb = self.scale(t, -1.0);
                        contribs.push((b, gb));
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    contribs.push((a, ga));
                }
                Op::AddScalar(a) => contribs.push((a, g)),
                Op::MatMul(a, b) => {
                    if self.requires_grad(a) {
                        let bt = self.transpose(b)?;
                        let ga = self.matmul(g, bt)?;
                        contribs.push((a, ga));
                    }
                    if self.requires_grad(b) {
                        let at = self.transpose(a)?;
                        let gb = self.matmul(at, g)?;
                        contribs.push((b, gb));
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g)?;
                    contribs.push((a, ga));
                }
                Op::BroadcastChannel(a) => {
                    let ga = self.sum_to_channel(g)?;
                    contribs.push((a, ga));
                }
                Op::SumToChannel(a) => {
                    let shape = self.shape(a).to_vec();
                    let ga = self.broadcast_channel(g, &shape)?;
                    contribs.push((a, ga));
                }
                // <y, conv(x, w)> is trilinear; each adjoint is one of the
                // other two kernels.
                Op::Conv(x, w, geom) => {
                    if self.requires_grad(x) {
                        let gx = self.conv_t_raw(g, w, geom)?;
                        contribs.push((x, gx));
                    }
                    if self.requires_grad(w) {
                        let gw = self.conv_w_raw(x, g, geom)?;
                        contribs.push((w, gw));
                    }
                }
                Op::ConvT(y, w, geom) => {
                    if self.requires_grad(y) {
                        let gy = self.conv_raw(g, w, geom)?;
                        contribs.push((y, gy));
                    }
                    if self.requires_grad(w) {
                        let gw = self.conv_w_raw(g, y, geom)?;
                        contribs.push((w, gw));
                    }
                }
                Op::ConvW(x, y, geom) => {
                    if self.requires_grad(x) {
                        let gx = self.conv_t_raw(y, g, geom)?;
                        contribs.push((x, gx));
                    }
                    if self.requires_grad(y) {
                        let gy = self.conv_raw(x, g, geom)?;
                        contribs.push((y, gy));
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    // piecewise linear: the local slope is a constant
                    let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
                    let m = self.constant(mask);
                    let ga = self.mul(g, m)?;
                    contribs.push((a, ga));
                }
                Op::Tanh(a) => {
                    let sq = self.mul(this, this)?;
                    let neg = self.scale(sq, -1.0);
                    let d = self.add_scalar(neg, 1.0);
                    let ga = self.mul(g, d)?;
                    contribs.push((a, ga));
                }
                Op::Sqrt(a) => {
                    let half = self.scale(g, 0.5);
                    let ga = self.div(half, this)?;
                    contribs.push((a, ga));
                }
                Op::Reshape(a) => {
                    let shape = self.shape(a).to_vec();
                    let ga = self.reshape(g, &shape)?;
                    contribs.push((a, ga));
                }
                Op::Sum(a) => {
                    let shape = self.shape(a).to_vec();
                    let ga = self.broadcast_scalar(g, &shape);
                    contribs.push((a, ga));
                }
                Op::BroadcastScalar(a) => {
                    let ga = self.sum(g);
                    contribs.push((a, ga));
                }
                Op::SumPerSample(a) => {
                    let shape = self.shape(a).to_vec();
                    let ga = self.broadcast_per_sample(g, &shape);
                    contribs.push((a, ga));
                }
                Op::BroadcastPerSample(a) => {
                    let ga = self.sum_per_sample(g);
                    contribs.push((a, ga));
                }
            }
            for (target, gc) in contribs {
                if !self.requires_grad(target) {
                    continue;
                }
                grads[target.0] = Some(match grads[target.0] {
                    Some(prev) => self.add(prev, gc)?,
                    None => gc,
                });
            }
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(w).to_vec());
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    /// Sign of every leaky-ReLU input, in recording order. Two evaluations
    /// with equal patterns lie on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu(a, _) => Some(self.value(a).data.iter().map(|&x| x > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Smallest `|x|` over all leaky-ReLU inputs. Finite-difference checks use
    /// this to stay clear of the kink.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu(a, _) => Some(
                    self.value(a)
                        .data
                        .iter()
                        .fold(f64::INFINITY, |m, x| m.min(x.abs())),
                ),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }
}
