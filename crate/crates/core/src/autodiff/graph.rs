//! The tape: every op appends a node holding its output value and enough
//! saved state to run its adjoint. Nodes only ever reference earlier nodes,
//! so reverse index order is a valid topological order for the sweep.

use std::sync::Arc;

use indexmap::IndexMap;

use super::{AutodiffError, ParamSet, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    oc: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

enum Op<T> {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul { x: Var, w: Var },
    BiasAdd { x: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Vec<T> },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat { a: Var, b: Var },
    SliceLast { x: Var, start: usize },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Mean(Var),
    Mse(Var, Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Variables of one GRU cell on a graph.
///
/// Layout: `w_ih` is `[in, 3H]` with gate blocks `[z | r | n]`, `w_hh_zr` is
/// `[H, 2H]` with blocks `[z | r]`, `w_hh_n` is `[H, H]` and `bias` is `[3H]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh_zr: Var,
    pub w_hh_n: Var,
    pub bias: Var,
}

/// Named parameter handles produced by [`Graph::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, AutodiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Recorded computation over tensors.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Result<Var, AutodiffError> {
        self.shared_leaf(Arc::new(value), needs_grad)
    }

    fn shared_leaf(&mut self, value: Arc<Tensor<T>>, needs_grad: bool) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var, AutodiffError> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, AutodiffError> {
        self.leaf(value, false)
    }

    /// Puts every tensor of `params` on the tape. Frozen sets still let
    /// gradients flow *through* ops that use them, they just collect none.
    pub fn bind(&mut self, params: &ParamSet<T>, trainable: bool) -> Result<Bound, AutodiffError> {
        let mut vars = IndexMap::with_capacity(params.len());
        for (name, t) in params.iter_shared() {
            let v = self.shared_leaf(Arc::clone(t), trainable)?;
            vars.insert(name.to_string(), v);
        }
        Ok(Bound { vars })
    }

    /// `x[.., in] @ w[in, out] + b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] || bs != [ws[1]] {
            return Err(shape_err("affine", &[xs, ws, bs]));
        }
        let mut y = self.matmul_value(x, w);
        let out = ws[1];
        let bias = self.value(b).data().to_vec();
        for row in y.data_mut().chunks_mut(out) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v = *v + bb;
            }
        }
        self.push("affine", y, Op::Affine { x, w, b }, &[x, w, b])
    }

    /// `x[.., in] @ w[in, out]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err("matmul", &[xs, ws]));
        }
        let y = self.matmul_value(x, w);
        self.push("matmul", y, Op::MatMul { x, w }, &[x, w])
    }

    fn matmul_value(&self, x: Var, w: Var) -> Tensor<T> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (inp, out) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.leading();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let mut y = Tensor::zeros(&shape);
        T::gemm(
            rows,
            inp,
            out,
            T::one(),
            xv.data(),
            inp as isize,
            1,
            wv.data(),
            out as isize,
            1,
            T::zero(),
            y.data_mut(),
            out as isize,
            1,
        );
        y
    }

    /// Adds `b[C]` to every row of `x[.., C]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, bs) = (self.value(x).shape(), self.value(b).shape());
        if xs.is_empty() || bs != [xs[xs.len() - 1]] {
            return Err(shape_err("bias_add", &[xs, bs]));
        }
        let mut y = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in y.data_mut().chunks_mut(bias.len()) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v = *v + bb;
            }
        }
        self.push("bias_add", y, Op::BiasAdd { x, b }, &[x, b])
    }

    /// Valid (unpadded) convolution of `x[N, H, W, C]` with `k[kh, kw, C, OC]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var, AutodiffError> {
        let (xs, ks) = (self.value(x).shape().to_vec(), self.value(k).shape().to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] || stride == 0 || xs[1] < ks[0] || xs[2] < ks[1] {
            return Err(shape_err("conv2d", &[&xs, &ks]));
        }
        let geom = ConvGeom {
            n: xs[0],
            h: xs[1],
            w: xs[2],
            c: xs[3],
            kh: ks[0],
            kw: ks[1],
            oc: ks[3],
            oh: (xs[1] - ks[0]) / stride + 1,
            ow: (xs[2] - ks[1]) / stride + 1,
            stride,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.n * geom.oh * geom.ow;
        let patch = geom.kh * geom.kw * geom.c;
        let mut y = Tensor::zeros(&[geom.n, geom.oh, geom.ow, geom.oc]);
        T::gemm(
            rows,
            patch,
            geom.oc,
            T::one(),
            &cols,
            patch as isize,
            1,
            self.value(k).data(),
            geom.oc as isize,
            1,
            T::zero(),
            y.data_mut(),
            geom.oc as isize,
            1,
        );
        self.push("conv2d", y, Op::Conv2d { x, k, geom, cols }, &[x, k])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", y, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let y = self.value(x).map(|v| v.tanh());
        self.push("tanh", y, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let y = self.value(x).map(sigmoid);
        self.push("sigmoid", y, Op::Sigmoid(x), &[x])
    }

    /// Group normalization over channels-last input `x[N, .., C]`; statistics
    /// are taken per sample and per channel group across all spatial positions.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let xs = self.value(x).shape().to_vec();
        let (gs, bs) = (self.value(gamma).shape(), self.value(beta).shape());
        let c = *xs.last().unwrap_or(&0);
        if xs.len() < 2 || groups == 0 || !c.is_multiple_of(groups) || gs != [c] || bs != [c] {
            return Err(shape_err("group_norm", &[&xs, gs, bs]));
        }
        let n = xs[0];
        let spatial = self.value(x).len() / (n * c);
        let cg = c / groups;
        let count = T::from_f64((spatial * cg) as f64);
        let eps = T::from_f64(GROUP_NORM_EPS);
        let xd = self.value(x).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); n * groups];
        for s in 0..n {
            let base = s * spatial * c;
            for g in 0..groups {
                let idx = |p: usize, j: usize| base + p * c + g * cg + j;
                let mut mean = T::zero();
                for p in 0..spatial {
                    for j in 0..cg {
                        mean = mean + xd[idx(p, j)];
                    }
                }
                mean = mean / count;
                let mut var = T::zero();
                for p in 0..spatial {
                    for j in 0..cg {
                        let d = xd[idx(p, j)] - mean;
                        var = var + d * d;
                    }
                }
                var = var / count;
                let is = T::one() / (var + eps).sqrt();
                inv_std[s * groups + g] = is;
                for p in 0..spatial {
                    for j in 0..cg {
                        let i = idx(p, j);
                        xhat[i] = (xd[i] - mean) * is;
                    }
                }
            }
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let yd: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| gd[i % c] * h + bd[i % c])
            .collect();
        let y = Tensor::new(xs, yd)?;
        self.push(
            "group_norm",
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Joins `a[.., p]` and `b[.., q]` along the last axis into `[.., p + q]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (as_, bs) = (av.shape(), bv.shape());
        if as_.is_empty() || as_.len() != bs.len() || as_[..as_.len() - 1] != bs[..bs.len() - 1] {
            return Err(shape_err("concat", &[as_, bs]));
        }
        let (p, q) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..av.leading() {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let mut shape = as_.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let y = Tensor::new(shape, data)?;
        self.push("concat", y, Op::Concat { a, b }, &[a, b])
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let w = xv.last_dim();
        if xv.shape().is_empty() || start + len > w || len == 0 {
            return Err(shape_err("slice_last", &[xv.shape()]));
        }
        let mut data = Vec::with_capacity(xv.leading() * len);
        for i in 0..xv.leading() {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let y = Tensor::new(shape, data)?;
        self.push("slice_last", y, Op::SliceLast { x, start }, &[x])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(shape_err("reshape", &[xv.shape(), shape]));
        }
        let y = xv.clone().reshape(shape.to_vec())?;
        self.push("reshape", y, Op::Reshape(x), &[x])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, &[av.shape(), bv.shape()]));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let y = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let y = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let y = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, AutodiffError> {
        let y = self.value(x).map(|v| v * c);
        self.push("scale", y, Op::Scale(x, c), &[x])
    }

    /// Mean over every element, giving a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(shape_err("mean", &[xv.shape()]));
        }
        let m = xv.sum() / T::from_f64(xv.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean squared difference, giving a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let d = self.zip_same("mse", a, b, |x, y| (x - y) * (x - y))?;
        if d.is_empty() {
            return Err(shape_err("mse", &[d.shape()]));
        }
        let m = d.sum() / T::from_f64(d.len() as f64);
        self.push("mse", Tensor::scalar(m), Op::Mse(a, b), &[a, b])
    }

    /// One GRU step. The reset gate scales the hidden state before the
    /// candidate's recurrent product:
    ///
    /// ```text
    /// z  = σ(x W_z + h U_z + b_z)
    /// r  = σ(x W_r + h U_r + b_r)
    /// n  = tanh(x W_n + (r ⊙ h) U_n + b_n)
    /// h' = (1 − z) ⊙ h + z ⊙ n
    /// ```
    pub fn gru_cell(&mut self, x: Var, h: Var, p: &GruVars) -> Result<Var, AutodiffError> {
        let hidden = self.value(p.w_hh_n).shape().first().copied().unwrap_or(0);
        let hs = self.value(h).shape().to_vec();
        let shapes_ok = hs.len() == 2
            && hs[1] == hidden
            && self.value(p.w_ih).shape().get(1) == Some(&(3 * hidden))
            && self.value(p.w_hh_zr).shape() == [hidden, 2 * hidden]
            && self.value(p.w_hh_n).shape() == [hidden, hidden];
        if !shapes_ok {
            return Err(shape_err(
                "gru_cell",
                &[self.value(x).shape(), &hs, self.value(p.w_ih).shape(), self.value(p.w_hh_zr).shape(), self.value(p.w_hh_n).shape()],
            ));
        }
        let gx = self.affine(x, p.w_ih, p.bias)?;
        let gh = self.matmul(h, p.w_hh_zr)?;
        let xz = self.slice_last(gx, 0, hidden)?;
        let xr = self.slice_last(gx, hidden, hidden)?;
        let xn = self.slice_last(gx, 2 * hidden, hidden)?;
        let hz = self.slice_last(gh, 0, hidden)?;
        let hr = self.slice_last(gh, hidden, hidden)?;
        let z_pre = self.add(xz, hz)?;
        let z = self.sigmoid(z_pre)?;
        let r_pre = self.add(xr, hr)?;
        let r = self.sigmoid(r_pre)?;
        let rh = self.mul(r, h)?;
        let hn = self.matmul(rh, p.w_hh_n)?;
        let n_pre = self.add(xn, hn)?;
        let n = self.tanh(n_pre)?;
        let delta = self.sub(n, h)?;
        let step = self.mul(z, delta)?;
        self.add(h, step)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, &g, &mut grads);
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn adjoint(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                self.matmul_adjoint(*x, *w, g, grads);
                if self.needs(*b) {
                    let width = g.last_dim();
                    let mut db = vec![T::zero(); width];
                    for row in g.data().chunks(width) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(db));
                }
            }
            Op::MatMul { x, w } => self.matmul_adjoint(*x, *w, g, grads),
            Op::BiasAdd { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let width = g.last_dim();
                    let mut db = vec![T::zero(); width];
                    for row in g.data().chunks(width) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(db));
                }
            }
            Op::Conv2d { x, k, geom, cols } => {
                let rows = geom.n * geom.oh * geom.ow;
                let patch = geom.kh * geom.kw * geom.c;
                if self.needs(*k) {
                    let mut dk = Tensor::zeros(self.value(*k).shape());
                    T::gemm(
                        patch,
                        rows,
                        geom.oc,
                        T::one(),
                        cols,
                        1,
                        patch as isize,
                        g.data(),
                        geom.oc as isize,
                        1,
                        T::zero(),
                        dk.data_mut(),
                        geom.oc as isize,
                        1,
                    );
                    self.accumulate(grads, *k, dk);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    T::gemm(
                        rows,
                        geom.oc,
                        patch,
                        T::one(),
                        g.data(),
                        geom.oc as isize,
                        1,
                        self.value(*k).data(),
                        1,
                        geom.oc as isize,
                        T::zero(),
                        &mut dcols,
                        patch as isize,
                        1,
                    );
                    let dx = col2im(&dcols, geom);
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx).expect("conv input shape"));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Tanh(x) => {
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &d)| d * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data).unwrap());
            }
            Op::Sigmoid(x) => {
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &d)| d * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data).unwrap());
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let xs = self.value(*x).shape();
                let c = *xs.last().unwrap();
                let n = xs[0];
                let spatial = xhat.len() / (n * c);
                let cg = c / groups;
                let gd = self.value(*gamma).data();
                let gdat = g.data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (i, (&d, &h)) in gdat.iter().zip(xhat).enumerate() {
                        dgamma[i % c] = dgamma[i % c] + d * h;
                        dbeta[i % c] = dbeta[i % c] + d;
                    }
                    self.accumulate(grads, *gamma, Tensor::from_vec(dgamma));
                    self.accumulate(grads, *beta, Tensor::from_vec(dbeta));
                }
                if self.needs(*x) {
                    let m = T::from_f64((spatial * cg) as f64);
                    let mut dx = vec![T::zero(); xhat.len()];
                    for s in 0..n {
                        let base = s * spatial * c;
                        for gi in 0..*groups {
                            let idx = |p: usize, j: usize| base + p * c + gi * cg + j;
                            let mut sum_d = T::zero();
                            let mut sum_dh = T::zero();
                            for p in 0..spatial {
                                for j in 0..cg {
                                    let k = idx(p, j);
                                    let dh = gdat[k] * gd[gi * cg + j];
                                    sum_d = sum_d + dh;
                                    sum_dh = sum_dh + dh * xhat[k];
                                }
                            }
                            let is = inv_std[s * groups + gi];
                            for p in 0..spatial {
                                for j in 0..cg {
                                    let k = idx(p, j);
                                    let dh = gdat[k] * gd[gi * cg + j];
                                    dx[k] = is * (m * dh - sum_d - xhat[k] * sum_dh) / m;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xs.to_vec(), dx).unwrap());
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape).expect("reshape adjoint"));
            }
            Op::Concat { a, b } => {
                let p = self.value(*a).last_dim();
                let q = self.value(*b).last_dim();
                let rows = g.leading();
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(rows * p);
                    for r in 0..rows {
                        da.extend_from_slice(&g.row(r)[..p]);
                    }
                    self.accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(rows * q);
                    for r in 0..rows {
                        db.extend_from_slice(&g.row(r)[p..]);
                    }
                    self.accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db).unwrap());
                }
            }
            Op::SliceLast { x, start } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let w = xv.last_dim();
                    let len = g.last_dim();
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..g.leading() {
                        dx.data_mut()[r * w + start..r * w + start + len].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    let data = g.data().iter().zip(bv.data()).map(|(&d, &y)| d * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let data = g.data().iter().zip(av.data()).map(|(&d, &y)| d * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let d = g.data()[0] / T::from_f64(xv.len() as f64);
                self.accumulate(grads, *x, Tensor::filled(xv.shape(), d));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = g.data()[0] * T::from_f64(2.0 / av.len() as f64);
                let da: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| k * (x - y)).collect();
                let da = Tensor::new(av.shape().to_vec(), da).unwrap();
                if self.needs(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
        }
    }

    fn matmul_adjoint(&self, x: Var, w: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (inp, out) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.leading();
        if self.needs(x) {
            let mut dx = Tensor::zeros(xv.shape());
            T::gemm(
                rows,
                out,
                inp,
                T::one(),
                g.data(),
                out as isize,
                1,
                wv.data(),
                1,
                out as isize,
                T::zero(),
                dx.data_mut(),
                inp as isize,
                1,
            );
            self.accumulate(grads, x, dx);
        }
        if self.needs(w) {
            let mut dw = Tensor::zeros(wv.shape());
            T::gemm(
                inp,
                rows,
                out,
                T::one(),
                xv.data(),
                1,
                inp as isize,
                g.data(),
                out as isize,
                1,
                T::zero(),
                dw.data_mut(),
                out as isize,
                1,
            );
            self.accumulate(grads, w, dw);
        }
    }
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.kh * g.kw * g.c;
    let mut cols = Vec::with_capacity(g.n * g.oh * g.ow * patch);
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for i in 0..g.kh {
                    let row = ((n * g.h) + oy * g.stride + i) * g.w;
                    let start = (row + ox * g.stride) * g.c;
                    cols.extend_from_slice(&x[start..start + g.kw * g.c]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.kh * g.kw * g.c;
    let mut dx = vec![T::zero(); g.n * g.h * g.w * g.c];
    let mut r = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &dcols[r * patch..(r + 1) * patch];
                for i in 0..g.kh {
                    let row = ((n * g.h) + oy * g.stride + i) * g.w;
                    let start = (row + ox * g.stride) * g.c;
                    let seg = &src[i * g.kw * g.c..(i + 1) * g.kw * g.c];
                    for (d, &s) in dx[start..start + g.kw * g.c].iter_mut().zip(seg) {
                        *d = *d + s;
                    }
                }
                r += 1;
            }
        }
    }
    dx
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Collects gradients for every bound parameter, zero-filled where the
    /// loss does not reach a parameter.
    pub fn collect(&self, graph: &Graph<T>, bound: &Bound) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, v) in bound.iter() {
            let g = self
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
            out.insert(name, g);
        }
        out
    }
}
