//! Tape-based reverse-mode differentiation over a small closed set of operators.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operator appends a
//! node holding its value and enough saved state to run its local gradient
//! rule. Nodes are appended in evaluation order, so walking the tape backwards
//! is a valid reverse topological order.

use std::borrow::Cow;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding policy for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        pad: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2x(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    GaussianLogPdf {
        mean: Var,
        x: Vec<f64>,
        sigma: f64,
    },
    Mse {
        input: Var,
        target: Vec<f64>,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Leaves may borrow parameter storage for `'a`.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf owning its value.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, true)
    }

    /// Trainable leaf borrowing an existing tensor (parameters).
    pub fn leaf_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.value.to_vec());
        self.push(shape, Cow::Owned(data), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ── operators ───────────────────────────────────────────────────────

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// `[m×k]·[k] → [m]`; the dense-layer workhorse.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        let xlen: usize = sx.iter().product();
        if sw.len() != 2 || sw[1] != xlen {
            return dim_err(format!("matvec {sw:?} x {sx:?}"));
        }
        let (m, k) = (sw[0], sw[1]);
        let (wv, xv) = (self.value(w), self.value(x));
        let out: Vec<f64> = (0..m)
            .map(|i| dot(&wv[i * k..(i + 1) * k], xv))
            .collect();
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(vec![m], Cow::Owned(out), Op::MatVec(w, x), rg))
    }

    /// Dense layer `w·x + b`.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let y = self.matvec(w, x)?;
        self.add(y, b)
    }

    /// Cross-correlation of `[C_in×H×W]` with `[C_out×C_in×k×k]` kernels plus bias.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernels), self.shape(bias));
        if si.len() != 3 || sk.len() != 4 {
            return dim_err(format!("conv2d input {si:?} kernels {sk:?}"));
        }
        let (cin, h, w) = (si[0], si[1], si[2]);
        let (cout, kcin, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kh != kw {
            return dim_err(format!("non-square kernel {kh}x{kw}"));
        }
        if kh % 2 == 0 {
            return Err(Error::Config(format!("even kernel size {kh}")));
        }
        if kcin != cin {
            return dim_err(format!("kernel expects {kcin} channels, input has {cin}"));
        }
        if sb.iter().product::<usize>() != cout {
            return dim_err(format!("bias {sb:?} for {cout} output channels"));
        }
        let k = kh;
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => {
                if k > h || k > w {
                    return dim_err(format!("kernel {k} larger than input {h}x{w}"));
                }
                0
            }
        };
        let (oh, ow) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let (iv, kv, bv) = (self.value(input), self.value(kernels), self.value(bias));
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            plane.iter_mut().for_each(|o| *o = bv[co]);
            for ci in 0..cin {
                let src = &iv[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = valid_range(ky, pad, h, oh);
                    for kx in 0..k {
                        let wgt = kv[((co * cin + ci) * k + ky) * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(kx, pad, w, ow);
                        if x0 == x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy + ky - pad;
                            let orow = &mut plane[oy * ow + x0..oy * ow + x1];
                            let irow = &src[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o += wgt * i;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernels) || self.rg(bias);
        Ok(self.push(
            vec![cout, oh, ow],
            Cow::Owned(out),
            Op::Conv2d {
                input,
                kernels,
                bias,
                pad,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first position in row-major order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return dim_err(format!("maxpool2d needs [C, even H, even W], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let iv = self.value(input);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if iv[idx] > iv[best] {
                            best = idx;
                        }
                    }
                    out.push(iv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![c, oh, ow], Cow::Owned(out), Op::MaxPool2d { input, argmax }, rg))
    }

    /// Nearest-neighbour 2× spatial upsampling of `[C×H×W]`.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 3 {
            return dim_err(format!("upsample2x needs [C, H, W], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let iv = self.value(input);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = iv[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![c, 2 * h, 2 * w], Cow::Owned(out), Op::Upsample2x(input), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, Cow::Owned(out), op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "elementwise shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, Cow::Owned(out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Sum of all elements as a scalar `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a), rg)
    }

    /// Flattens and concatenates operands into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of nothing");
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let n = out.len();
        Ok(self.push(vec![n], Cow::Owned(out), Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return dim_err(format!("reshape {:?} into {shape:?}", self.shape(a)));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), Cow::Owned(data), Op::Reshape(a), rg))
    }

    /// Max-subtracted log-sum-exp cross entropy of a logit vector against a class index.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if self.shape(logits).len() != 1 || z.len() < 2 {
            return dim_err(format!("logits must be a vector of K>=2, got {:?}", self.shape(logits)));
        }
        if label >= z.len() {
            return Err(Error::Argument(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let probs = softmax(z);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Log density of an isotropic Gaussian `N(mean, σ²I)` at the constant point `x`.
    /// Gradient flows into `mean` only.
    pub fn gaussian_log_pdf(&mut self, x: &[f64], mean: Var, sigma: f64) -> Result<Var> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        let mu = self.value(mean);
        if mu.len() != x.len() {
            return dim_err(format!("point has {} dims, mean has {}", x.len(), mu.len()));
        }
        let value = gaussian_log_density(x, mu, sigma);
        let rg = self.rg(mean);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![value]),
            Op::GaussianLogPdf {
                mean,
                x: x.to_vec(),
                sigma,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, input: Var, target: &[f64]) -> Result<Var> {
        let v = self.value(input);
        if v.len() != target.len() {
            return dim_err(format!("mse over {} vs {} values", v.len(), target.len()));
        }
        let loss = v
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / v.len() as f64;
        let rg = self.rg(input);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            Op::Mse {
                input,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    // ── gradients ───────────────────────────────────────────────────────

    /// Runs reverse accumulation from a scalar loss. Fails if gradients from an
    /// earlier call are still held; use [`Tape::zero_grad`] or
    /// [`Tape::backward_accumulate`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Graph(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        self.backward_accumulate(loss)
    }

    /// Like [`Tape::backward`] but adds into any gradients already held.
    pub fn backward_accumulate(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Argument(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Graph("loss is detached from every trainable leaf".into()));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        accumulate(&mut grads, &self.nodes, loss.0, &[1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        match &mut self.grads {
            None => self.grads = Some(grads),
            Some(held) => {
                held.resize_with(self.nodes.len(), || None);
                for (h, g) in held.iter_mut().zip(grads) {
                    match (h.as_mut(), g) {
                        (Some(h), Some(g)) => h.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        (None, Some(g)) => *h = Some(g),
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].requires_grad {
                    let bv = &nodes[b.0].value;
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            da[r * k + p] = dot(&g[r * n..(r + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                    accumulate(grads, nodes, a.0, &da);
                }
                if nodes[b.0].requires_grad {
                    let av = &nodes[a.0].value;
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let arp = av[r * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += arp * gv;
                            }
                        }
                    }
                    accumulate(grads, nodes, b.0, &db);
                }
            }
            Op::MatVec(w, x) => {
                let k = nodes[w.0].shape[1];
                if nodes[w.0].requires_grad {
                    let xv = &nodes[x.0].value;
                    let slot = grad_slot(grads, nodes, w.0);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        for (d, &xv) in slot[r * k..(r + 1) * k].iter_mut().zip(xv.iter()) {
                            *d += gr * xv;
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let wv = &nodes[w.0].value;
                    let mut dx = vec![0.0; k];
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        for (d, &wv) in dx.iter_mut().zip(&wv[r * k..(r + 1) * k]) {
                            *d += gr * wv;
                        }
                    }
                    accumulate(grads, nodes, x.0, &dx);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                pad,
            } => {
                let pad = *pad;
                let si = &nodes[input.0].shape;
                let sk = &nodes[kernels.0].shape;
                let (cin, h, w) = (si[0], si[1], si[2]);
                let (cout, k) = (sk[0], sk[2]);
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let iv = &nodes[input.0].value;
                let kv = &nodes[kernels.0].value;
                if nodes[bias.0].requires_grad {
                    let db: Vec<f64> = (0..cout)
                        .map(|co| g[co * oh * ow..(co + 1) * oh * ow].iter().sum())
                        .collect();
                    accumulate(grads, nodes, bias.0, &db);
                }
                let want_k = nodes[kernels.0].requires_grad;
                let want_i = nodes[input.0].requires_grad;
                let mut dk = if want_k { vec![0.0; kv.len()] } else { Vec::new() };
                let mut di = if want_i { vec![0.0; iv.len()] } else { Vec::new() };
                for co in 0..cout {
                    let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
                    for ci in 0..cin {
                        for ky in 0..k {
                            let (y0, y1) = valid_range(ky, pad, h, oh);
                            for kx in 0..k {
                                let (x0, x1) = valid_range(kx, pad, w, ow);
                                if x0 == x1 {
                                    continue;
                                }
                                let kidx = ((co * cin + ci) * k + ky) * k + kx;
                                let wgt = kv[kidx];
                                let mut acc = 0.0;
                                for oy in y0..y1 {
                                    let iy = oy + ky - pad;
                                    let start = ci * h * w + iy * w + x0 + kx - pad;
                                    let end = start + (x1 - x0);
                                    let grow = &gplane[oy * ow + x0..oy * ow + x1];
                                    if want_k {
                                        acc += dot(grow, &iv[start..end]);
                                    }
                                    if want_i && wgt != 0.0 {
                                        for (d, &gv) in di[start..end].iter_mut().zip(grow) {
                                            *d += wgt * gv;
                                        }
                                    }
                                }
                                if want_k {
                                    dk[kidx] += acc;
                                }
                            }
                        }
                    }
                }
                if want_k {
                    accumulate(grads, nodes, kernels.0, &dk);
                }
                if want_i {
                    accumulate(grads, nodes, input.0, &di);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if nodes[input.0].requires_grad {
                    let slot = grad_slot(grads, nodes, input.0);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        slot[src] += gv;
                    }
                }
            }
            Op::Upsample2x(a) => {
                if nodes[a.0].requires_grad {
                    let s = &nodes[a.0].shape;
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let slot = grad_slot(grads, nodes, a.0);
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                slot[(ch * h + y / 2) * w + x / 2] += g[(ch * 2 * h + y) * 2 * w + x];
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if nodes[a.0].requires_grad {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(nodes[a.0].value.iter())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(grads, nodes, a.0, &d);
                }
            }
            Op::Tanh(a) => {
                if nodes[a.0].requires_grad {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(node.value.iter())
                        .map(|(&gv, &y)| gv * (1.0 - y * y))
                        .collect();
                    accumulate(grads, nodes, a.0, &d);
                }
            }
            Op::Sigmoid(a) => {
                if nodes[a.0].requires_grad {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(node.value.iter())
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(grads, nodes, a.0, &d);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, a.0, g);
                accumulate(grads, nodes, b.0, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, a.0, g);
                if nodes[b.0].requires_grad {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, nodes, b.0, &neg);
                }
            }
            Op::Mul(a, b) => {
                if nodes[a.0].requires_grad {
                    let d: Vec<f64> = g.iter().zip(nodes[b.0].value.iter()).map(|(x, y)| x * y).collect();
                    accumulate(grads, nodes, a.0, &d);
                }
                if nodes[b.0].requires_grad {
                    let d: Vec<f64> = g.iter().zip(nodes[a.0].value.iter()).map(|(x, y)| x * y).collect();
                    accumulate(grads, nodes, b.0, &d);
                }
            }
            Op::Scale(a, c) => {
                if nodes[a.0].requires_grad {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(grads, nodes, a.0, &d);
                }
            }
            Op::Sum(a) => {
                if nodes[a.0].requires_grad {
                    let d = vec![g[0]; nodes[a.0].value.len()];
                    accumulate(grads, nodes, a.0, &d);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    accumulate(grads, nodes, p.0, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Reshape(a) => accumulate(grads, nodes, a.0, g),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                if nodes[logits.0].requires_grad {
                    let d: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(j, &p)| g[0] * (p - if j == *label { 1.0 } else { 0.0 }))
                        .collect();
                    accumulate(grads, nodes, logits.0, &d);
                }
            }
            Op::GaussianLogPdf { mean, x, sigma } => {
                if nodes[mean.0].requires_grad {
                    let s2 = sigma * sigma;
                    let d: Vec<f64> = x
                        .iter()
                        .zip(nodes[mean.0].value.iter())
                        .map(|(&xv, &m)| g[0] * (xv - m) / s2)
                        .collect();
                    accumulate(grads, nodes, mean.0, &d);
                }
            }
            Op::Mse { input, target } => {
                if nodes[input.0].requires_grad {
                    let n = target.len() as f64;
                    let d: Vec<f64> = nodes[input.0]
                        .value
                        .iter()
                        .zip(target)
                        .map(|(&a, &t)| g[0] * 2.0 * (a - t) / n)
                        .collect();
                    accumulate(grads, nodes, input.0, &d);
                }
            }
        }
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], idx: usize) -> &'g mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node<'_>], idx: usize, d: &[f64]) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(existing) => existing.iter_mut().zip(d).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Output positions `[lo, hi)` whose tap at kernel offset `k_off` lands inside
/// an input of extent `n`; empty when the tap never does.
fn valid_range(k_off: usize, pad: usize, n: usize, out_n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k_off).min(out_n);
    let hi = (n + pad).saturating_sub(k_off).min(out_n);
    (lo, hi.max(lo))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log N(x; mean, σ²I)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma)
}
