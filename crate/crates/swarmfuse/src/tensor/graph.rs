//! The recorded compute graph: an eager tape of tensor operations.
//!
//! Node values are computed at insertion time, so downstream code can make
//! data-dependent decisions (argmax routing, match selection) while the
//! graph is still being built. `backward` then walks the tape once in
//! reverse topological order.

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MatMul { a: Var, b: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Softmax { x: Var, axis: usize },
    CrossEntropy { x: Var, labels: Vec<u32>, from_probs: bool, ignore: Option<u32>, n_valid: usize },
    Upsample2x { x: Var },
    MaxPool2x { x: Var, argmax: Vec<u32> },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Emax { a: Var, b: Var },
    Reshape { x: Var },
    Permute { x: Var, order: Vec<usize> },
    Clamp01 { x: Var },
    SumAll { x: Var },
    DistanceVolume { a: Var, b: Var },
    FeatureNorms { x: Var },
    SelectPerCell { inputs: Vec<Var>, winners: Vec<u32> },
}

impl Op {
    fn inputs(&self, out: &mut Vec<usize>) {
        out.clear();
        match self {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, .. } => out.extend([x.0, w.0, b.0]),
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } | Op::Emax { a, b } => {
                out.extend([a.0, b.0])
            }
            Op::DistanceVolume { a, b } => out.extend([a.0, b.0]),
            Op::Relu { x }
            | Op::Scale { x, .. }
            | Op::Softmax { x, .. }
            | Op::CrossEntropy { x, .. }
            | Op::Upsample2x { x }
            | Op::MaxPool2x { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Clamp01 { x }
            | Op::SumAll { x }
            | Op::FeatureNorms { x } => out.push(x.0),
            Op::Concat { xs, .. } => out.extend(xs.iter().map(|v| v.0)),
            Op::SelectPerCell { inputs, .. } => out.extend(inputs.iter().map(|v| v.0)),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f32>>,
    param: Option<String>,
}

/// Eager reverse-mode tape. One graph per forward pass; independent graphs
/// are independent values and may live on different threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value, grad: None, param: None });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn result_tensor(&self, shape: Vec<usize>, data: Vec<f32>, requires: bool) -> Tensor {
        let mut t = Tensor::from_vec(&shape, data).expect("kernel produced consistent shape");
        if requires {
            t = t.with_grad();
        }
        t
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        if t.requires_grad() {
            t = Tensor::from_vec(&t.shape().to_vec(), t.data().to_vec()).unwrap();
        }
        self.push(Op::Leaf, t)
    }

    /// Insert a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let t = t.with_grad();
        self.push(Op::Leaf, t)
    }

    /// Insert a named parameter leaf; its gradient can be collected with
    /// [`Graph::param_grads`] after `backward`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let copy = Tensor::from_vec(&t.shape().to_vec(), t.data().to_vec())
            .unwrap()
            .with_grad();
        let v = self.push(Op::Leaf, copy);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Operations ────────────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let dims = ops::conv2d_dims(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
            stride,
            pad,
        )?;
        let out = ops::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &dims);
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        let t = self.result_tensor(vec![dims.n, dims.f, dims.h_out, dims.w_out], out, req);
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shapes("matmul", ash, bsh));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let out = ops::matmul_forward(self.value(a).data(), self.value(b).data(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        let t = self.result_tensor(vec![m, n], out, req);
        Ok(self.push(Op::MatMul { a, b }, t))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f32> = self.value(x).data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = self.result_tensor(self.value(x).shape().to_vec(), data, self.requires(x));
        self.push(Op::Relu { x }, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shapes("add", self.value(a).shape(), self.value(b).shape()));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = self.result_tensor(self.value(a).shape().to_vec(), data, self.requires(a) || self.requires(b));
        Ok(self.push(Op::Add { a, b }, t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shapes("mul", self.value(a).shape(), self.value(b).shape()));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = self.result_tensor(self.value(a).shape().to_vec(), data, self.requires(a) || self.requires(b));
        Ok(self.push(Op::Mul { a, b }, t))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let data: Vec<f32> = self.value(x).data().iter().map(|&v| c * v).collect();
        let t = self.result_tensor(self.value(x).shape().to_vec(), data, self.requires(x));
        self.push(Op::Scale { x, c }, t)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let out = ops::softmax_forward(self.value(x).data(), &shape, axis);
        let t = self.result_tensor(shape, out, self.requires(x));
        Ok(self.push(Op::Softmax { x, axis }, t))
    }

    /// Mean negative log-likelihood over non-ignored rows.
    ///
    /// Returns the scalar loss var and whether every row was ignored (in
    /// which case the loss is defined as 0).
    pub fn cross_entropy(
        &mut self,
        x: Var,
        labels: &[u32],
        from_probs: bool,
        ignore: Option<u32>,
    ) -> Result<(Var, bool)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("cross_entropy wants [rows, classes], got {shape:?}")));
        }
        let res = ops::cross_entropy_forward(
            self.value(x).data(),
            shape[0],
            shape[1],
            labels,
            from_probs,
            ignore,
        )?;
        let all_ignored = res.n_valid == 0;
        let t = self.result_tensor(vec![1], vec![res.loss], self.requires(x));
        let v = self.push(
            Op::CrossEntropy {
                x,
                labels: labels.to_vec(),
                from_probs,
                ignore,
                n_valid: res.n_valid,
            },
            t,
        );
        Ok((v, all_ignored))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (out, shape) = ops::upsample2x_forward(self.value(x).data(), self.value(x).shape())?;
        let t = self.result_tensor(shape, out, self.requires(x));
        Ok(self.push(Op::Upsample2x { x }, t))
    }

    pub fn maxpool2x(&mut self, x: Var) -> Result<Var> {
        let (out, argmax, shape) = ops::maxpool2x_forward(self.value(x).data(), self.value(x).shape())?;
        let t = self.result_tensor(shape, out, self.requires(x));
        Ok(self.push(Op::MaxPool2x { x, argmax }, t))
    }

    /// Select whole slices along `axis` by index; gradients scatter-add back.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "index_select axis {axis} out of range for {shape:?}"
            )));
        }
        let (out, out_shape) = ops::index_select_forward(self.value(x).data(), &shape, axis, indices)?;
        let t = self.result_tensor(out_shape, out, self.requires(x));
        Ok(self.push(Op::IndexSelect { x, axis, indices: indices.to_vec() }, t))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let parts: Vec<(&[f32], &[usize])> = xs
            .iter()
            .map(|&v| (self.value(v).data(), self.value(v).shape()))
            .collect();
        let (out, shape) = ops::concat_forward(&parts, axis)?;
        let req = xs.iter().any(|&v| self.requires(v));
        let t = self.result_tensor(shape, out, req);
        Ok(self.push(Op::Concat { xs: xs.to_vec(), axis }, t))
    }

    /// Elementwise maximum; ties forward the first argument.
    pub fn emax(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shapes("emax", self.value(a).shape(), self.value(b).shape()));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let t = self.result_tensor(self.value(a).shape().to_vec(), data, self.requires(a) || self.requires(b));
        Ok(self.push(Op::Emax { a, b }, t))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::shapes("reshape", self.value(x).shape(), shape));
        }
        let t = self.result_tensor(shape.to_vec(), self.value(x).data().to_vec(), self.requires(x));
        Ok(self.push(Op::Reshape { x }, t))
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape();
        let mut seen = vec![false; shape.len()];
        if order.len() != shape.len() || order.iter().any(|&o| o >= shape.len() || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::Dimension(format!("permute order {order:?} invalid for {shape:?}")));
        }
        let (out, out_shape) = ops::permute_forward(self.value(x).data(), shape, order);
        let t = self.result_tensor(out_shape, out, self.requires(x));
        Ok(self.push(Op::Permute { x, order: order.to_vec() }, t))
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let data: Vec<f32> = self.value(x).data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        let t = self.result_tensor(self.value(x).shape().to_vec(), data, self.requires(x));
        self.push(Op::Clamp01 { x }, t)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = ops::sum_all(self.value(x).data());
        let t = self.result_tensor(vec![1], vec![s], self.requires(x));
        self.push(Op::SumAll { x }, t)
    }

    /// Dense pairwise L2 distances between two `[k,h,w]` feature grids,
    /// shaped `[ha, wa, hb, wb]`; differentiable w.r.t. both grids.
    pub fn distance_volume(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = ops::distance_volume_forward(
            self.value(a).data(),
            self.value(a).shape(),
            self.value(b).data(),
            self.value(b).shape(),
        )?;
        let req = self.requires(a) || self.requires(b);
        let t = self.result_tensor(shape, out, req);
        Ok(self.push(Op::DistanceVolume { a, b }, t))
    }

    /// Per-cell L2 norm of a `[k,h,w]` feature grid, shaped `[h, w]`.
    pub fn feature_norms(&mut self, x: Var) -> Result<Var> {
        let (out, shape) = ops::feature_norms_forward(self.value(x).data(), self.value(x).shape())?;
        let t = self.result_tensor(shape, out, self.requires(x));
        Ok(self.push(Op::FeatureNorms { x }, t))
    }

    /// Per-cell winner-take-all routing across branches of equal `[k,h,w]`
    /// shape. `winners[cell]` picks the branch whose feature vector is
    /// forwarded unchanged; gradients flow only into the selected branch.
    pub fn select_per_cell(&mut self, inputs: &[Var], winners: &[u32]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Config("select_per_cell with no branches".into()));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        for &v in inputs {
            if self.value(v).shape() != shape {
                return Err(Error::shapes("select_per_cell branches", &shape, self.value(v).shape()));
            }
        }
        let datas: Vec<&[f32]> = inputs.iter().map(|&v| self.value(v).data()).collect();
        let out = ops::select_per_cell_forward(&datas, &shape, winners)?;
        let req = inputs.iter().any(|&v| self.requires(v));
        let t = self.result_tensor(shape, out, req);
        Ok(self.push(Op::SelectPerCell { inputs: inputs.to_vec(), winners: winners.to_vec() }, t))
    }

    // ── Backward ──────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss; each reachable node is visited once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward wants a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }

        let mut needed = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        let mut inputs = Vec::new();
        while let Some(id) = stack.pop() {
            if needed[id] || !self.nodes[id].value.requires_grad() {
                continue;
            }
            needed[id] = true;
            self.nodes[id].op.inputs(&mut inputs);
            stack.extend(inputs.iter().copied());
        }

        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !needed[id] || self.nodes[id].grad.is_none() {
                continue;
            }
            self.step_backward(id);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f32>) {
        if !self.nodes[v.0].value.requires_grad() {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn step_backward(&mut self, id: usize) {
        let g = self.nodes[id].grad.take().expect("grad present");
        // Re-attach so `grad(v)` keeps working after backward.
        self.nodes[id].grad = Some(g.clone());
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let dims = ops::conv2d_dims(
                    self.value(x).shape(),
                    self.value(w).shape(),
                    self.value(b).shape(),
                    stride,
                    pad,
                )
                .expect("checked at forward");
                let (gx, gw, gb) = ops::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    &g,
                    &dims,
                    self.requires(x),
                    self.requires(w),
                );
                if let Some(gx) = gx {
                    self.accumulate(x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(w, gw);
                }
                self.accumulate(b, gb);
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                let (ga, gb) = ops::matmul_backward(self.value(a).data(), self.value(b).data(), &g, m, k, n);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Relu { x } => {
                let x = *x;
                let gx: Vec<f32> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let ga: Vec<f32> = self.value(b).data().iter().zip(&g).map(|(&v, &gi)| v * gi).collect();
                let gb: Vec<f32> = self.value(a).data().iter().zip(&g).map(|(&v, &gi)| v * gi).collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.accumulate(x, g.iter().map(|&gi| c * gi).collect());
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let y = self.nodes[id].value.data();
                let gx = ops::softmax_backward(y, &g, self.nodes[id].value.shape(), axis);
                self.accumulate(x, gx);
            }
            Op::CrossEntropy { x, labels, from_probs, ignore, n_valid } => {
                let x = *x;
                let shape = self.value(x).shape();
                let gx = ops::cross_entropy_backward(
                    self.value(x).data(),
                    shape[0],
                    shape[1],
                    labels,
                    *from_probs,
                    *ignore,
                    *n_valid,
                    g[0],
                );
                self.accumulate(x, gx);
            }
            Op::Upsample2x { x } => {
                let x = *x;
                let gx = ops::upsample2x_backward(&g, self.value(x).shape());
                self.accumulate(x, gx);
            }
            Op::MaxPool2x { x, argmax } => {
                let x = *x;
                let gx = ops::maxpool2x_backward(&g, argmax, self.value(x).shape());
                self.accumulate(x, gx);
            }
            Op::IndexSelect { x, axis, indices } => {
                let x = *x;
                let gx = ops::index_select_backward(&g, self.value(x).shape(), *axis, indices);
                self.accumulate(x, gx);
            }
            Op::Concat { xs, axis } => {
                let xs = xs.clone();
                let axis = *axis;
                let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| self.value(v).shape().to_vec()).collect();
                let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
                let grads = ops::concat_backward(&g, self.nodes[id].value.shape(), &shape_refs, axis);
                for (v, gv) in xs.iter().zip(grads) {
                    self.accumulate(*v, gv);
                }
            }
            Op::Emax { a, b } => {
                let (a, b) = (*a, *b);
                let mut ga = vec![0.0f32; g.len()];
                let mut gb = vec![0.0f32; g.len()];
                for (i, ((&av, &bv), &gi)) in self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .zip(&g)
                    .enumerate()
                {
                    if av >= bv {
                        ga[i] = gi;
                    } else {
                        gb[i] = gi;
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Reshape { x } => {
                let x = *x;
                self.accumulate(x, g);
            }
            Op::Permute { x, order } => {
                let x = *x;
                let inv = ops::invert_order(order);
                let (gx, _) = ops::permute_forward(&g, self.nodes[id].value.shape(), &inv);
                self.accumulate(x, gx);
            }
            Op::Clamp01 { x } => {
                let x = *x;
                let gx: Vec<f32> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| if v > 0.0 && v < 1.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::SumAll { x } => {
                let x = *x;
                self.accumulate(x, vec![g[0]; self.value(x).numel()]);
            }
            Op::DistanceVolume { a, b } => {
                let (a, b) = (*a, *b);
                let (ga, gb) = ops::distance_volume_backward(
                    self.value(a).data(),
                    self.value(a).shape(),
                    self.value(b).data(),
                    self.value(b).shape(),
                    self.nodes[id].value.data(),
                    &g,
                );
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::FeatureNorms { x } => {
                let x = *x;
                let gx = ops::feature_norms_backward(
                    self.value(x).data(),
                    self.value(x).shape(),
                    self.nodes[id].value.data(),
                    &g,
                );
                self.accumulate(x, gx);
            }
            Op::SelectPerCell { inputs, winners } => {
                let inputs = inputs.clone();
                let shape = self.nodes[id].value.shape().to_vec();
                let grads = ops::select_per_cell_backward(inputs.len(), &shape, winners, &g);
                for (v, gv) in inputs.iter().zip(grads) {
                    self.accumulate(*v, gv);
                }
            }
        }
    }

    /// Named parameter gradients accumulated by the last `backward`.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.nodes.iter().filter_map(|n| match (&n.param, &n.grad) {
            (Some(name), Some(g)) => Some((name.as_str(), g.as_slice())),
            _ => None,
        })
    }

    /// Flat index of the per-fiber argmax along `axis`, ties to the lowest
    /// index. Returns one entry per fiber, in row-major fiber order.
    pub fn argmax_along(&self, v: Var, axis: usize) -> Vec<usize> {
        let t = self.value(v);
        let (outer, m, inner) = ops::axis_split(t.shape(), axis);
        let data = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * m * inner + i;
                let mut best = f32::NEG_INFINITY;
                let mut best_j = 0usize;
                for j in 0..m {
                    let val = data[base + j * inner];
                    if val > best {
                        best = val;
                        best_j = j;
                    }
                }
                out.push(best_j);
            }
        }
        out
    }
}
