//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so a reverse walk
//! over the node list is a valid topological order for the backward pass.
//! Leaves are either differentiable inputs or constants; gradients are only
//! computed along paths that reach a differentiable leaf, which is what lets
//! the attack differentiate through a generator without paying for weight
//! gradients.

use crate::error::{Error, Result};
use crate::losses::{relativistic_with_grad, GanRole};
use crate::tensor::{conv2d_backward, conv2d_forward, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    LeakyRelu { x: Var, slope: f64 },
    Add(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Upsample { x: Var, factor: usize },
    AvgPool2(Var),
    Linear { x: Var, w: Var, b: Var },
    BroadcastMean(Var),
    MeanAbsDiff(Var, Var),
    Dot { x: Var, w: Tensor },
    Relativistic { real: Var, fake: Var, role: GanRole },
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

/// Gradients of one backward pass, available for differentiable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: [usize; 4]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride)?;
        let rg = self.grad_any(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.grad_any(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q);
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Argument("empty concat".into()))?);
        let [n, _, h, w] = first;
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Dimension(format!("concat: {s:?} vs {first:?}")));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).item_slice(i));
            }
        }
        let out = Tensor::from_vec([n, channels, h, w], data)?;
        let rg = self.grad_any(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in src.data().chunks(h * w) {
            for oy in 0..oh {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    data.push(row[ox / factor]);
                }
            }
        }
        let out = Tensor::from_vec([n, c, oh, ow], data).expect("shape computed above");
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Upsample { x, factor }, rg)
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in src.data().chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    data.push(0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]));
                }
            }
        }
        let out = Tensor::from_vec([n, c, oh, ow], data).expect("shape computed above");
        let rg = self.grad_any(&[x]);
        self.push(out, Op::AvgPool2(x), rg)
    }

    /// Fully connected layer over each flattened batch item; `w` is `[out, in, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        let (n, input) = (xs.batch(), xs.item_len());
        let out_dim = ws.batch();
        if ws.item_len() != input || self.value(b).len() != out_dim {
            return Err(Error::Dimension(format!(
                "linear: input {:?}, weight {:?}",
                xs.shape(),
                ws.shape()
            )));
        }
        let mut out = Tensor::zeros([n, out_dim, 1, 1]);
        for i in 0..n {
            for o in 0..out_dim {
                out.data_mut()[i * out_dim + o] = self.value(b).data()[o];
            }
        }
        crate::tensor::gemm(n, input, out_dim, xs.data(), false, ws.data(), true, 1.0, out.data_mut());
        let rg = self.grad_any(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Replace every value with the mean of its batch item, broadcast to `shape`.
    pub fn broadcast_mean(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let src = self.value(x);
        if shape[0] != src.batch() {
            return Err(Error::Dimension("broadcast_mean: batch mismatch".into()));
        }
        let per = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(shape[0] * per);
        for i in 0..src.batch() {
            let item = src.item_slice(i);
            let m = item.iter().sum::<f64>() / item.len() as f64;
            data.extend(std::iter::repeat(m).take(per));
        }
        let out = Tensor::from_vec(shape, data)?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(out, Op::BroadcastMean(x), rg))
    }

    /// `mean |a − b|` as a one-element tensor.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "l1: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(p, q)| (p - q).abs()).sum();
        let out = Tensor::scalar(s / va.len() as f64);
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::MeanAbsDiff(a, b), rg))
    }

    /// `Σ x ⊙ w` against a constant weight tensor, as a one-element tensor.
    pub fn dot_const(&mut self, x: Var, w: Tensor) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != w.shape() {
            return Err(Error::Dimension(format!(
                "dot: {:?} vs {:?}",
                vx.shape(),
                w.shape()
            )));
        }
        let s: f64 = vx.data().iter().zip(w.data()).map(|(p, q)| p * q).sum();
        let rg = self.grad_any(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, w }, rg))
    }

    /// Relativistic-average GAN loss over per-sample logits (`[N,1,1,1]`).
    pub fn relativistic_loss(&mut self, real: Var, fake: Var, role: GanRole) -> Result<Var> {
        let (loss, _, _) =
            relativistic_with_grad(self.value(real).data(), self.value(fake).data(), role)?;
        let rg = self.grad_any(&[real, fake]);
        Ok(self.push(Tensor::scalar(loss), Op::Relativistic { real, fake, role }, rg))
    }

    /// Backpropagate from a one-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Tensor| match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride } => {
                let g = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *stride,
                    [rg(*x), rg(*w), rg(*b)],
                );
                if let Some(dx) = g.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = g.dw {
                    acc(*w, dw);
                }
                if let Some(db) = g.db {
                    let shape = self.shape(*b);
                    acc(*b, Tensor::from_vec(shape, db.into_vec()).expect("bias shape"));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                acc(*x, self.value(*x).zip_map(gy, |v, g| if v > 0.0 { g } else { s * g }));
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    acc(*a, gy.clone());
                }
                if rg(*b) {
                    acc(*b, gy.clone());
                }
            }
            Op::Scale(x, k) => {
                let k = *k;
                acc(*x, gy.map(|g| g * k));
            }
            Op::Concat(parts) => {
                let [n, c, h, w] = gy.shape();
                let plane = h * w;
                let mut offset = 0;
                for p in parts {
                    let pc = self.shape(*p)[1];
                    if rg(*p) {
                        let mut data = Vec::with_capacity(n * pc * plane);
                        for i in 0..n {
                            let start = (i * c + offset) * plane;
                            data.extend_from_slice(&gy.data()[start..start + pc * plane]);
                        }
                        acc(*p, Tensor::from_vec([n, pc, h, w], data).expect("concat part"));
                    }
                    offset += pc;
                }
            }
            Op::Upsample { x, factor } => {
                let f = *factor;
                let [n, c, h, w] = self.shape(*x);
                let ow = w * f;
                let mut dx = Tensor::zeros([n, c, h, w]);
                for (dst, src) in dx
                    .data_mut()
                    .chunks_mut(h * w)
                    .zip(gy.data().chunks(h * w * f * f))
                {
                    for (oy, row) in src.chunks(ow).enumerate() {
                        let base = (oy / f) * w;
                        for (ox, g) in row.iter().enumerate() {
                            dst[base + ox / f] += g;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w] = self.shape(*x);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = Tensor::zeros([n, c, h, w]);
                for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(gy.data().chunks(oh * ow)) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = 0.25 * src[oy * ow + ox];
                            let i = 2 * oy * w + 2 * ox;
                            dst[i] += g;
                            dst[i + 1] += g;
                            dst[i + w] += g;
                            dst[i + w + 1] += g;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (n, input, out_dim) = (xs.batch(), xs.item_len(), ws.batch());
                if rg(*x) {
                    let mut dx = Tensor::zeros(xs.shape());
                    crate::tensor::gemm(n, out_dim, input, gy.data(), false, ws.data(), false, 0.0, dx.data_mut());
                    acc(*x, dx);
                }
                if rg(*w) {
                    let mut dw = Tensor::zeros(ws.shape());
                    crate::tensor::gemm(out_dim, n, input, gy.data(), true, xs.data(), false, 0.0, dw.data_mut());
                    acc(*w, dw);
                }
                if rg(*b) {
                    let mut db = Tensor::zeros(self.shape(*b));
                    for row in gy.data().chunks(out_dim) {
                        for (d, g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::BroadcastMean(x) => {
                let xs = self.value(*x);
                let len = xs.item_len() as f64;
                let mut dx = Tensor::zeros(xs.shape());
                let per = gy.item_len();
                for i in 0..xs.batch() {
                    let g = gy.data()[i * per..(i + 1) * per].iter().sum::<f64>() / len;
                    let item = xs.item_len();
                    dx.data_mut()[i * item..(i + 1) * item].fill(g);
                }
                acc(*x, dx);
            }
            Op::MeanAbsDiff(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = gy.item() / va.len() as f64;
                let da = va.zip_map(vb, |p, q| k * sign(p - q));
                if rg(*b) {
                    acc(*b, da.map(|v| -v));
                }
                if rg(*a) {
                    acc(*a, da);
                }
            }
            Op::Dot { x, w } => {
                let k = gy.item();
                acc(*x, w.map(|v| v * k));
            }
            Op::Relativistic { real, fake, role } => {
                let (vr, vf) = (self.value(*real), self.value(*fake));
                let (_, dr, df) =
                    relativistic_with_grad(vr.data(), vf.data(), *role).expect("validated in forward");
                let k = gy.item();
                if rg(*real) {
                    let t = Tensor::from_vec(vr.shape(), dr.into_iter().map(|v| v * k).collect());
                    acc(*real, t.expect("logit shape"));
                }
                if rg(*fake) {
                    let t = Tensor::from_vec(vf.shape(), df.into_iter().map(|v| v * k).collect());
                    acc(*fake, t.expect("logit shape"));
                }
            }
        }
    }
}

/// `sign` with `sign(0) = 0`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
