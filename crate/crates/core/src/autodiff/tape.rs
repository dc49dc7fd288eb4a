//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the node
//! vector is already in topological order and the backward sweep simply walks
//! it in reverse. A tape is built for one forward pass (one bag) and dropped
//! after its gradients have been read.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Tanh,
    Log,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n, m] + [m]` broadcast over rows.
    AddRow(Var, Var),
    /// Constant affine map `a·x + b`.
    Affine(Var, f64),
    /// Multiply by a one-element tensor.
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    /// `[n, 1] -> [n, m]`
    BroadcastCol(Var),
    /// `[m] or [1, m] -> [n, m]`
    BroadcastRow(Var),
    Sum(Var),
    /// `[n, m] -> [n, 1]`
    RowSum(Var),
    Transpose(Var),
    Reshape(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
    },
    /// Routes gradient to the stored flat input index of each output.
    Route(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::AddScalar(a, b) => vec![*a, *b],
            Op::Affine(x, _)
            | Op::BroadcastCol(x)
            | Op::BroadcastRow(x)
            | Op::Sum(x)
            | Op::RowSum(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Unary(x, _)
            | Op::Clamp(x, _, _)
            | Op::SoftmaxRows(x)
            | Op::Route(x, _)
            | Op::Dropout(x, _) => vec![*x],
            Op::Conv2d { input, kernels, bias, .. } => vec![*input, *kernels, *bias],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.node_grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// One gradient per parameter in `store`, zeros where the loss does not
    /// reach the parameter.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        for &(id, var) in &self.param_vars {
            if let Some(g) = &self.node_grads[var.0] {
                out[id.0].data_mut().copy_from_slice(g);
            }
        }
        out
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            op => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient is tracked, without a backing parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push_leaf(store.value(id).clone(), true);
        self.param_vars.push((id, v));
        v
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return dim_err(format!("matmul: [{m}, {k}] · [{k2}, {n}]"));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return dim_err(format!("matmul_nt: [{m}, {k}] · [{n}, {k2}]ᵀ"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a length-`m` vector to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims2(x)?;
        if self.value(row).len() != m {
            return dim_err(format!(
                "add_row: matrix [{n}, {m}] with row of shape {:?}",
                self.shape(row)
            ));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(m)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::AddRow(x, row)))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    fn check_scalar(&self, s: Var, what: &str) -> Result<f64> {
        self.value(s)
            .item()
            .map_err(|_| Error::Dimension(format!("{what}: expected scalar, got {:?}", self.shape(s))))
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar(s, "mul_scalar")?;
        let value = self.value(x).map(|v| v * sv);
        Ok(self.push(value, Op::MulScalar(x, s)))
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar(s, "add_scalar")?;
        let value = self.value(x).map(|v| v + sv);
        Ok(self.push(value, Op::AddScalar(x, s)))
    }

    /// Repeats an `[n, 1]` column `m` times.
    pub fn broadcast_col(&mut self, x: Var, m: usize) -> Result<Var> {
        let (n, one) = self.dims2(x)?;
        if one != 1 {
            return dim_err(format!("broadcast_col: expected [n, 1], got [{n}, {one}]"));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, m))
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::BroadcastCol(x)))
    }

    /// Repeats a length-`m` row `n` times.
    pub fn broadcast_row(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() > 2 || (v.ndim() == 2 && v.shape()[0] != 1) {
            return dim_err(format!("broadcast_row: expected [m] or [1, m], got {:?}", v.shape()));
        }
        let m = v.len();
        let data = v.data().repeat(n);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::BroadcastRow(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2(x)?;
        let data = self
            .value(x)
            .data()
            .chunks_exact(m)
            .map(|r| r.iter().sum())
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, 1], data), Op::RowSum(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let v = self.value(x);
        if f == Unary::Log {
            if let Some(bad) = v.data().iter().find(|&&t| !(t > 0.0)) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let out = v.map(|t| match f {
            Unary::Sigmoid => sigmoid(t),
            Unary::Relu => if t > 0.0 || t.is_nan() { t } else { 0.0 },
            Unary::Tanh => t.tanh(),
            Unary::Log => t.ln(),
            Unary::Exp => t.exp(),
        });
        Ok(self.push(out, Op::Unary(x, f)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("relu is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh).expect("tanh is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    /// Elementwise clamp; gradient flows only where the input lies in `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|t| t.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (n, m) = v.dims2()?;
        if v.data().iter().any(|t| t.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = Vec::with_capacity(n * m);
        for r in v.data().chunks_exact(m) {
            out.extend(softmax(r));
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::SoftmaxRows(x)))
    }

    /// Valid cross-correlation.
    ///
    /// `input` is `[C, H, W]` or a batch `[N, C, H, W]`; `kernels` is
    /// `[O, C, k, k]` and `bias` has `O` entries. The output keeps the
    /// batched-ness of the input.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(input), self.shape(kernels), stride)?;
        if self.value(bias).len() != geo.out_c {
            return dim_err(format!(
                "conv2d: bias of shape {:?} for {} output channels",
                self.shape(bias),
                geo.out_c
            ));
        }
        let out = geo.forward(
            self.value(input).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
        );
        let shape = geo.out_shape(self.value(input).ndim() == 4);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d { input, kernels, bias, stride },
        ))
    }

    /// Max pooling over `[C, H, W]` or `[N, C, H, W]`. Ties resolve to the
    /// first element in row-major window order.
    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (batch, c, h, w) = split_image_shape(&shape, "maxpool2d")?;
        if k == 0 || stride == 0 {
            return Err(Error::Config("maxpool2d: window and stride must be >= 1".into()));
        }
        if h < k || w < k {
            return dim_err(format!("maxpool2d: window {k} exceeds input {h}x{w}"));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let data = self.value(input).data();
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut arg = Vec::with_capacity(batch * c * oh * ow);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if data[idx] > data[best] || data[idx].is_nan() {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    arg.push(best);
                }
            }
        }
        let mut oshape = shape;
        let nd = oshape.len();
        oshape[nd - 2] = oh;
        oshape[nd - 1] = ow;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Route(input, arg)))
    }

    /// Column-wise maximum of an `[n, d]` matrix, returned as `[d]`. Ties go
    /// to the smallest row index.
    pub fn max_over_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (n, d) = v.dims2()?;
        let data = v.data();
        let mut out = Vec::with_capacity(d);
        let mut arg = Vec::with_capacity(d);
        for j in 0..d {
            let mut best = j;
            for i in 1..n {
                if data[i * d + j] > data[best] || data[i * d + j].is_nan() {
                    best = i * d + j;
                }
            }
            out.push(data[best]);
            arg.push(best);
        }
        Ok(self.push(Tensor::from_parts(vec![d], out), Op::Route(x, arg)))
    }

    /// Inverted dropout. `train == false` (or `p == 0`) is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        Ok(self.push(out, Op::Dropout(x, mask)))
    }

    /// Reverse sweep from a scalar `loss`. The tape is left untouched, so the
    /// sweep can be repeated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            node_grads: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            param_vars: self.param_vars.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let len = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape()[1];
                // dA = G · Bᵀ
                if self.nodes[a.0].needs_grad {
                    let bd = val(*b);
                    let ga = acc(&mut grads[a.0], m * k);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for l in 0..k {
                            let br = &bd[l * n..(l + 1) * n];
                            ga[r * k + l] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                // dB = Aᵀ · G
                if !self.nodes[b.0].needs_grad {
                    return;
                }
                let ad = val(*a);
                let gb = acc(&mut grads[b.0], k * n);
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    for l in 0..k {
                        let a_rl = ad[r * k + l];
                        if a_rl != 0.0 {
                            for (dst, &gv) in gb[l * n..(l + 1) * n].iter_mut().zip(gr) {
                                *dst += a_rl * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape()[0];
                {
                    // dA = G · B
                    let bd = val(*b);
                    let ga = acc(&mut grads[a.0], m * k);
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            for l in 0..k {
                                ga[r * k + l] += gv * bd[j * k + l];
                            }
                        }
                    }
                }
                // dB = Gᵀ · A
                let ad = val(*a);
                let gb = acc(&mut grads[b.0], n * k);
                for r in 0..m {
                    for j in 0..n {
                        let gv = g[r * n + j];
                        for l in 0..k {
                            gb[j * k + l] += gv * ad[r * k + l];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(&mut grads[a.0], g.len()), g, 1.0);
                add_into(acc(&mut grads[b.0], g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(&mut grads[a.0], g.len()), g, 1.0);
                add_into(acc(&mut grads[b.0], g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                {
                    let bd = val(*b);
                    let ga = acc(&mut grads[a.0], g.len());
                    for ((dst, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *dst += gv * bv;
                    }
                }
                let ad = val(*a);
                let gb = acc(&mut grads[b.0], g.len());
                for ((dst, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                    *dst += gv * av;
                }
            }
            Op::AddRow(x, row) => {
                let m = len(*row);
                add_into(acc(&mut grads[x.0], g.len()), g, 1.0);
                let gr = acc(&mut grads[row.0], m);
                for chunk in g.chunks_exact(m) {
                    add_into(gr, chunk, 1.0);
                }
            }
            Op::Affine(x, s) => add_into(acc(&mut grads[x.0], g.len()), g, *s),
            Op::MulScalar(x, s) => {
                let sv = val(*s)[0];
                add_into(acc(&mut grads[x.0], g.len()), g, sv);
                let dot: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                acc(&mut grads[s.0], 1)[0] += dot;
            }
            Op::AddScalar(x, s) => {
                add_into(acc(&mut grads[x.0], g.len()), g, 1.0);
                acc(&mut grads[s.0], 1)[0] += g.iter().sum::<f64>();
            }
            Op::BroadcastCol(x) => {
                let n = len(*x);
                let m = g.len() / n;
                let gx = acc(&mut grads[x.0], n);
                for (dst, chunk) in gx.iter_mut().zip(g.chunks_exact(m)) {
                    *dst += chunk.iter().sum::<f64>();
                }
            }
            Op::BroadcastRow(x) => {
                let m = len(*x);
                let gx = acc(&mut grads[x.0], m);
                for chunk in g.chunks_exact(m) {
                    add_into(gx, chunk, 1.0);
                }
            }
            Op::Sum(x) => {
                let gx = acc(&mut grads[x.0], len(*x));
                for dst in gx.iter_mut() {
                    *dst += g[0];
                }
            }
            Op::RowSum(x) => {
                let n = g.len();
                let m = len(*x) / n;
                let gx = acc(&mut grads[x.0], n * m);
                for (r, &gv) in g.iter().enumerate() {
                    for dst in &mut gx[r * m..(r + 1) * m] {
                        *dst += gv;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                let gx = acc(&mut grads[x.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => add_into(acc(&mut grads[x.0], g.len()), g, 1.0),
            Op::Unary(x, f) => {
                let xs = val(*x);
                let ys = node.value.data();
                let gx = acc(&mut grads[x.0], g.len());
                for k in 0..g.len() {
                    let d = match f {
                        Unary::Sigmoid => ys[k] * (1.0 - ys[k]),
                        Unary::Relu => {
                            if xs[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - ys[k] * ys[k],
                        Unary::Log => 1.0 / xs[k],
                        Unary::Exp => ys[k],
                    };
                    gx[k] += g[k] * d;
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xs = val(*x);
                let gx = acc(&mut grads[x.0], g.len());
                for k in 0..g.len() {
                    if xs[k] >= *lo && xs[k] <= *hi {
                        gx[k] += g[k];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let m = node.value.shape()[1];
                let ys = node.value.data();
                let gx = acc(&mut grads[x.0], g.len());
                for (r, (yr, gr)) in ys.chunks_exact(m).zip(g.chunks_exact(m)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        gx[r * m + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Conv2d { input, kernels, bias, stride } => {
                let geo = ConvGeometry::new(
                    self.nodes[input.0].value.shape(),
                    self.nodes[kernels.0].value.shape(),
                    *stride,
                )
                .expect("validated at forward time");
                let want_input = self.nodes[input.0].needs_grad;
                let mut gin = if want_input {
                    grads[input.0].take().unwrap_or_else(|| vec![0.0; len(*input)])
                } else {
                    Vec::new()
                };
                let mut gk = grads[kernels.0].take().unwrap_or_else(|| vec![0.0; len(*kernels)]);
                let mut gb = grads[bias.0].take().unwrap_or_else(|| vec![0.0; len(*bias)]);
                geo.backward(val(*input), val(*kernels), g, want_input.then_some(&mut gin[..]), &mut gk, &mut gb);
                if want_input {
                    grads[input.0] = Some(gin);
                }
                grads[kernels.0] = Some(gk);
                grads[bias.0] = Some(gb);
            }
            Op::Route(x, arg) => {
                let gx = acc(&mut grads[x.0], len(*x));
                for (&src, &gv) in arg.iter().zip(g) {
                    gx[src] += gv;
                }
            }
            Op::Dropout(x, mask) => {
                let gx = acc(&mut grads[x.0], g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * mask[k];
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                *o += a_il * bv;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn split_image_shape(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => dim_err(format!("{what}: expected [C, H, W] or [N, C, H, W], got {shape:?}")),
    }
}

struct ConvGeometry {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernels: &[usize], stride: usize) -> Result<Self> {
        let (batch, in_c, h, w) = split_image_shape(input, "conv2d")?;
        let [out_c, kc, kh, kw] = *kernels else {
            return dim_err(format!("conv2d: kernels must be [O, C, k, k], got {kernels:?}"));
        };
        if kh != kw {
            return dim_err(format!("conv2d: only square kernels supported, got {kh}x{kw}"));
        }
        if kc != in_c {
            return dim_err(format!(
                "conv2d: input has {in_c} channels but kernels expect {kc} (input {input:?}, kernels {kernels:?})"
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if h < kh || w < kh {
            return dim_err(format!("conv2d: kernel {kh}x{kh} larger than input {h}x{w}"));
        }
        Ok(Self {
            batch,
            in_c,
            h,
            w,
            out_c,
            k: kh,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kh) / stride + 1,
        })
    }

    fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.out_c, self.oh, self.ow]
        } else {
            vec![self.out_c, self.oh, self.ow]
        }
    }

    /// Unfolds the input into a `[C·k·k, N·oh·ow]` matrix so the
    /// convolution becomes one matrix product with long contiguous rows.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let Self { batch, in_c, h, w, k, stride, oh, ow, .. } = *self;
        let (p, q) = (oh * ow, batch * oh * ow);
        let mut col = vec![0.0; in_c * k * k * q];
        for c in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * q..][..q];
                    for n in 0..batch {
                        let src = &input[(n * in_c + c) * h * w..][..h * w];
                        for oy in 0..oh {
                            let srow = &src[(oy * stride + ky) * w + kx..];
                            let dst = &mut row[n * p + oy * ow..][..ow];
                            if stride == 1 {
                                dst.copy_from_slice(&srow[..ow]);
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = srow[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn forward(&self, input: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
        let Self { batch, in_c, out_c, k, oh, ow, .. } = *self;
        let (p, q, r) = (oh * ow, batch * oh * ow, in_c * k * k);
        let col = self.im2col(input);
        let mut acc = vec![0.0; out_c * q];
        gemm(out_c, r, q, Mat::rows(kernels, r), Mat::rows(&col, q), 0.0, &mut acc);
        let mut out = vec![0.0; batch * out_c * p];
        for n in 0..batch {
            for o in 0..out_c {
                let src = &acc[o * q + n * p..][..p];
                for (d, &v) in out[(n * out_c + o) * p..][..p].iter_mut().zip(src) {
                    *d = v + bias[o];
                }
            }
        }
        out
    }

    fn backward(
        &self,
        input: &[f64],
        kernels: &[f64],
        g: &[f64],
        gin: Option<&mut [f64]>,
        gk: &mut [f64],
        gb: &mut [f64],
    ) {
        let Self { batch, in_c, h, w, out_c, k, stride, oh, ow } = *self;
        let (p, q, r) = (oh * ow, batch * oh * ow, in_c * k * k);
        // Output gradient regrouped as [O, N·oh·ow] to line up with the columns.
        let mut gq = vec![0.0; out_c * q];
        for n in 0..batch {
            for o in 0..out_c {
                gq[o * q + n * p..][..p].copy_from_slice(&g[(n * out_c + o) * p..][..p]);
            }
        }
        for o in 0..out_c {
            gb[o] += gq[o * q..][..q].iter().sum::<f64>();
        }
        let col = self.im2col(input);
        gemm(out_c, q, r, Mat::rows(&gq, q), Mat::cols(&col, q), 1.0, gk);
        let Some(gin) = gin else { return };
        let mut gcol = col;
        gemm(r, out_c, q, Mat::cols(kernels, r), Mat::rows(&gq, q), 0.0, &mut gcol);
        for c in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &gcol[((c * k + ky) * k + kx) * q..][..q];
                    for n in 0..batch {
                        let dst = &mut gin[(n * in_c + c) * h * w..][..h * w];
                        for oy in 0..oh {
                            let src = &row[n * p + oy * ow..][..ow];
                            let base = (oy * stride + ky) * w + kx;
                            for (ox, &v) in src.iter().enumerate() {
                                dst[base + ox * stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense matrix operand: row-major data, read either as stored or
/// transposed.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Mat<'a> {
    /// Row-major matrix with `cols` columns.
    fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, row_stride: cols as isize, col_stride: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    fn cols(data: &'a [f64], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols as isize }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || {
            let last = (rows - 1) as isize * self.row_stride + (cols - 1) as isize * self.col_stride;
            (last as usize) < self.data.len()
        }
    }
}

/// `c ← a·b + beta·c` for `a: [m, k]`, `b: [k, n]` and row-major `c: [m, n]`.
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    assert!(a.fits(m, k) && b.fits(k, n) && c.len() >= m * n, "gemm operands out of bounds");
    // SAFETY: the assertion above keeps every index the kernel touches
    // inside the three slices, and `c` is borrowed mutably so it cannot
    // alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

