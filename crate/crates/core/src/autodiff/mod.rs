//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape of nodes. Every constructor evaluates
//! its forward value immediately, so parents always precede children and a
//! single reverse sweep in [`Graph::backward`] yields exact gradients. Graphs
//! are rebuilt for every forward pass; parameters enter as leaves tagged with
//! their index in the owning parameter store.

mod kernels;
pub mod rational_fit;

use rand::Rng;

use crate::mixture::{self, Position3D};
use crate::{Error, Result, Tensor};
use kernels::ConvDims;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { w: Var, x: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Conv2d { input: Var, kernels: Var, bias: Var, dims: ConvDims },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Softmax(Var),
    Rational { x: Var, p: Var, q: Var },
    Tanh(Var),
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Concat(Var, Var),
    Reshape(Var),
    Slice { x: Var, start: usize },
    MixtureNll { head: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients, indexed by parameter id. Parameters that did
    /// not influence the output get zeros of the right shape.
    pub fn parameters(&self, graph: &Graph, shapes: &[&[usize]]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &self.grads[i]) {
                out[pid].add_assign(g);
            }
        }
        out
    }
}

fn dim_err(op: &str, msg: String) -> Error {
    Error::Dimension(format!("{op}: {msg}"))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|&p| self.requires(p));
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, param: Option<usize>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf whose gradient is tracked (e.g. inputs for saliency).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, None, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, None, false)
    }

    /// A trainable leaf tagged with its parameter id.
    pub fn param(&mut self, id: usize, value: Tensor) -> Result<Var> {
        self.leaf(value, Some(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// Dense layer `W·x + b` for `W: [m, k]`, `x: [k]`, `b: [m]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (sw, sx, sb) = (self.value(w).shape(), self.value(x).shape(), self.value(b).shape());
        if sw.len() != 2 || sx.len() != 1 || sb.len() != 1 || sw[1] != sx[0] || sw[0] != sb[0] {
            return Err(dim_err("linear", format!("W{sw:?} x{sx:?} b{sb:?}")));
        }
        let (m, k) = (sw[0], sw[1]);
        let (wd, xd) = (self.value(w).data(), self.value(x).data());
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wd[i * k..(i + 1) * k];
                row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>()
            })
            .zip(self.value(b).data())
            .map(|(s, bv)| s + bv)
            .collect();
        self.push("linear", Tensor::vector(out), Op::Linear { w, x, b }, &[w, x, b])
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.scale_assign(c);
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Same-padded 2-D cross-correlation: `input: [C_in, H, W]`,
    /// `kernels: [C_out, C_in, k, k]` with odd `k`, `bias: [C_out]`.
    pub fn conv2d_same(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (si, sk, sb) = (
            self.value(input).shape(),
            self.value(kernels).shape(),
            self.value(bias).shape(),
        );
        if sk.len() != 4 || sk[2] != sk[3] {
            return Err(dim_err("conv2d", format!("kernels must be [C_out, C_in, k, k], got {sk:?}")));
        }
        if sk[2] % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size must be odd, got {}", sk[2])));
        }
        if si.len() != 3 || si[0] != sk[1] || sb != [sk[0]] {
            return Err(dim_err("conv2d", format!("input {si:?}, kernels {sk:?}, bias {sb:?}")));
        }
        let dims = ConvDims {
            c_in: si[0],
            c_out: sk[0],
            h: si[1],
            w: si[2],
            k: sk[2],
        };
        let out = kernels::conv2d_forward(
            dims,
            self.value(input).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new(vec![dims.c_out, dims.h, dims.w], out)?;
        self.push("conv2d", t, Op::Conv2d { input, kernels, bias, dims }, &[input, kernels, bias])
    }

    /// 2x2 max pooling with stride 2 over `[C, H, W]`; odd edges use a
    /// truncated window. Ties route the gradient to the first maximum in
    /// row-major order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        if s.len() != 3 {
            return Err(dim_err("maxpool2d", format!("expected [C, H, W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (out, argmax) = kernels::maxpool2d_forward(c, h, w, self.value(input).data());
        let t = Tensor::new(vec![c, h.div_ceil(2), w.div_ceil(2)], out)?;
        self.push("maxpool2d", t, Op::MaxPool2d { input, argmax }, &[input])
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 1 {
            return Err(dim_err("softmax", format!("expected a vector, got {s:?}")));
        }
        let out = mixture::softmax(self.value(logits).data());
        self.push("softmax", Tensor::vector(out), Op::Softmax(logits), &[logits])
    }

    /// Elementwise `(p₀ + p₁x + p₂x² + p₃x³) / (1 + |q₁x + q₂x²|)`.
    pub fn rational(&mut self, x: Var, p: Var, q: Var) -> Result<Var> {
        if self.value(p).shape() != [4] || self.value(q).shape() != [2] {
            return Err(dim_err(
                "rational",
                format!("p {:?}, q {:?}", self.value(p).shape(), self.value(q).shape()),
            ));
        }
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let data = self.value(x).data().iter().map(|&v| kernels::rational(v, pd, qd)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("rational", t, Op::Rational { x, p, q }, &[x, p, q])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("tanh", t, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("sigmoid", t, Op::Sigmoid(x), &[x])
    }

    /// Inverted dropout. In inference mode, or with `rate == 0`, returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask }, &[x])
    }

    /// Joins two vectors end to end.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 1 || sb.len() != 1 {
            return Err(dim_err("concat", format!("expected vectors, got {sa:?} and {sb:?}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push("concat", Tensor::vector(data), Op::Concat(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, vec![n])
    }

    /// Contiguous sub-vector `x[start..start + len]` of a flat view.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).len();
        if start + len > n {
            return Err(dim_err("slice", format!("{start}..{} out of {n}", start + len)));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        self.push("slice", Tensor::vector(data), Op::Slice { x, start }, &[x])
    }

    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice(x, i, 1)
    }

    /// Negative log-likelihood of `target` under the mixture encoded by a raw
    /// head (see [`crate::mixture`] for the layout).
    pub fn mixture_nll(&mut self, head: Var, target: &Position3D, components: usize, jitter: f64) -> Result<Var> {
        if self.value(head).ndim() != 1 {
            return Err(dim_err("mixture_nll", format!("head must be a vector, got {:?}", self.value(head).shape())));
        }
        let (nll, grad) = mixture::head_nll(self.value(head).data(), target, components, jitter)?;
        self.push("mixture_nll", Tensor::scalar(nll), Op::MixtureNll { head, grad }, &[head])
    }

    /// Reverse sweep from a one-element output node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&self.nodes[i], &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn shaped(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape follows value shape")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.requires(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).map(|j| gd[i * n + j] * bd[p * n + j]).sum();
                        }
                    }
                    self.accumulate(grads, *a, self.shaped(*a, da));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * gd[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, self.shaped(*b, db));
                }
            }
            Op::Linear { w, x, b } => {
                let sw = self.value(*w).shape();
                let (m, k) = (sw[0], sw[1]);
                let (wd, xd) = (self.value(*w).data(), self.value(*x).data());
                if self.requires(*w) {
                    let mut dw = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = gd[i];
                        for (d, xv) in dw[i * k..(i + 1) * k].iter_mut().zip(xd) {
                            *d = gi * xv;
                        }
                    }
                    self.accumulate(grads, *w, self.shaped(*w, dw));
                }
                if self.requires(*x) {
                    let mut dx = vec![0.0; k];
                    for i in 0..m {
                        let gi = gd[i];
                        for (d, wv) in dx.iter_mut().zip(&wd[i * k..(i + 1) * k]) {
                            *d += gi * wv;
                        }
                    }
                    self.accumulate(grads, *x, self.shaped(*x, dx));
                }
                self.accumulate(grads, *b, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.requires(*a) {
                    let d = gd.iter().zip(bd).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, self.shaped(*a, d));
                }
                if self.requires(*b) {
                    let d = gd.iter().zip(ad).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, self.shaped(*b, d));
                }
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|v| v * c).collect();
                self.accumulate(grads, *a, self.shaped(*a, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.shaped(*a, vec![gd[0]; n]));
            }
            Op::Conv2d { input, kernels, bias, dims } => {
                let want = [self.requires(*input), self.requires(*kernels), self.requires(*bias)];
                let cg = kernels::conv2d_backward(
                    *dims,
                    self.value(*input).data(),
                    self.value(*kernels).data(),
                    gd,
                    want,
                );
                if let Some(d) = cg.input {
                    self.accumulate(grads, *input, self.shaped(*input, d));
                }
                if let Some(d) = cg.kernels {
                    self.accumulate(grads, *kernels, self.shaped(*kernels, d));
                }
                if let Some(d) = cg.bias {
                    self.accumulate(grads, *bias, self.shaped(*bias, d));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (gv, &idx) in gd.iter().zip(argmax) {
                    d[idx] += gv;
                }
                self.accumulate(grads, *input, self.shaped(*input, d));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: f64 = gd.iter().zip(y).map(|(a, b)| a * b).sum();
                let d = y.iter().zip(gd).map(|(yv, gv)| yv * (gv - dot)).collect();
                self.accumulate(grads, *x, self.shaped(*x, d));
            }
            Op::Rational { x, p, q } => {
                let (pd, qd) = (self.value(*p).data(), self.value(*q).data());
                let xd = self.value(*x).data();
                let mut dx = vec![0.0; xd.len()];
                let mut dp = [0.0; 4];
                let mut dq = [0.0; 2];
                for ((xv, gv), dxv) in xd.iter().zip(gd).zip(dx.iter_mut()) {
                    let (px, pp, pq) = kernels::rational_partials(*xv, pd, qd);
                    *dxv = gv * px;
                    for j in 0..4 {
                        dp[j] += gv * pp[j];
                    }
                    for j in 0..2 {
                        dq[j] += gv * pq[j];
                    }
                }
                self.accumulate(grads, *x, self.shaped(*x, dx));
                self.accumulate(grads, *p, Tensor::vector(dp.to_vec()));
                self.accumulate(grads, *q, Tensor::vector(dq.to_vec()));
            }
            Op::Tanh(x) => {
                let d = node.value.data().iter().zip(gd).map(|(y, gv)| gv * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, self.shaped(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = node.value.data().iter().zip(gd).map(|(y, gv)| gv * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, self.shaped(*x, d));
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.accumulate(grads, *x, self.shaped(*x, d));
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(grads, *a, self.shaped(*a, gd[..na].to_vec()));
                self.accumulate(grads, *b, self.shaped(*b, gd[na..].to_vec()));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.shaped(*x, gd.to_vec()));
            }
            Op::Slice { x, start } => {
                let mut d = vec![0.0; self.value(*x).len()];
                d[*start..*start + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, self.shaped(*x, d));
            }
            Op::MixtureNll { head, grad } => {
                let d = grad.iter().map(|v| v * gd[0]).collect();
                self.accumulate(grads, *head, self.shaped(*head, d));
            }
        }
    }
}
