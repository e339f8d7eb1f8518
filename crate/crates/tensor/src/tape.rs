//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in order.
//! [`Tape::backward`] walks the record in exact reverse order and
//! accumulates vector-Jacobian products into the leaves that require
//! gradients. A fresh tape is built for every forward pass.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::conv::{self, ConvSpec};
use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

/// A linear operator with an exact adjoint, usable as a tape op.
pub trait LinearMap {
    fn in_shape(&self) -> Vec<usize>;
    fn out_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn adjoint(&self, y: &Tensor) -> Result<Tensor>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    SoftThreshold(usize, usize),
    Conv { x: usize, k: usize, spec: ConvSpec },
    ConvT { y: usize, k: usize, spec: ConvSpec },
    MulChannels { x: usize, k: usize },
    AddChannels { x: usize, b: usize },
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, axis: usize, xhat: Rc<Vec<f64>>, inv_std: Rc<Vec<f64>> },
    Concat { parts: Vec<usize>, axis: usize },
    Reshape(usize),
    Gather { x: usize, idx: Rc<Vec<usize>> },
    Upsample2(usize),
    AvgPool2(usize),
    GlobalAvgPool(usize),
    Sum(usize),
    Mean(usize),
    Linear { x: usize, map: Rc<dyn LinearMap>, adjoint: bool },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
    param_order: RefCell<Vec<String>>,
    grad_enabled: bool,
    flops: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            param_order: RefCell::new(Vec::new()),
            grad_enabled: true,
            flops: Cell::new(0),
        }
    }

    /// A tape on which parameters never require gradients.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-add count accumulated by matrix products on this tape.
    pub fn matmul_flops(&self) -> u64 {
        self.flops.get()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        value.ensure_finite(name)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn req(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    /// Binds a named parameter. Repeated requests for the same name return
    /// the same leaf, so parameters shared across stages accumulate gradients.
    pub fn param(&self, name: &str, value: &Tensor) -> Result<Var<'_>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let v = self.leaf(value.clone(), self.grad_enabled)?;
        self.params.borrow_mut().insert(name.to_string(), v.id);
        self.param_order.borrow_mut().push(name.to_string());
        Ok(v)
    }

    /// Parameter gradients in first-use order. Parameters the loss does not
    /// depend on are reported with zero gradients.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        let params = self.params.borrow();
        let nodes = self.nodes.borrow();
        self.param_order
            .borrow()
            .iter()
            .map(|name| {
                let id = params[name];
                let g = grads
                    .grads
                    .get(id)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(nodes[id].value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backward_op(&nodes, node, &g, &mut grads, self)?;
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(acc) => acc.axpy(1.0, &g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_dims(shape: &[usize], transpose: bool) -> Result<(usize, usize, usize)> {
    let (b, r, c) = match shape {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => return shape_err("matmul", format!("expected 2-D or 3-D operand, got {:?}", shape)),
    };
    Ok(if transpose { (b, c, r) } else { (b, r, c) })
}

/// Sums a batched gradient down to a broadcast operand's shape.
fn sum_batch_to(g: Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if g.len() == n {
        return g.reshape(shape.to_vec());
    }
    let mut out = vec![0.0; n];
    for chunk in g.data().chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Batched `op(A) · op(B)` on raw row-major buffers. A 2-D operand is
/// broadcast over the batch of a 3-D one.
fn matmul_raw(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<(Tensor, u64)> {
    let (ba, m, k) = matmul_dims(a.shape(), ta)?;
    let (bb, k2, n) = matmul_dims(b.shape(), tb)?;
    let (a_bc, b_bc) = (a.ndim() == 2, b.ndim() == 2);
    let batch = ba.max(bb);
    if (ba != bb && !a_bc && !b_bc) || k != k2 {
        return shape_err(
            "matmul",
            format!("{:?}{} x {:?}{}", a.shape(), if ta { "ᵀ" } else { "" }, b.shape(), if tb { "ᵀ" } else { "" }),
        );
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let (ai, bj) = (if a_bc { 0 } else { bi }, if b_bc { 0 } else { bi });
        let ab = &ad[ai * m * k..(ai + 1) * m * k];
        let bbuf = &bd[bj * k * n..(bj + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = if ta { ab[kk * m + i] } else { ab[i * k + kk] };
                if av == 0.0 {
                    continue;
                }
                if tb {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o += av * bbuf[j * k + kk];
                    }
                } else {
                    for (o, bv) in orow.iter_mut().zip(&bbuf[kk * n..(kk + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
    let shape = if a.ndim() == 3 || b.ndim() == 3 {
        vec![batch, m, n]
    } else {
        vec![m, n]
    };
    Ok((Tensor::new(shape, out)?, (batch * m * n * k) as u64))
}

fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample2_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                dst[oy * wo + ox] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

fn upsample2_adjoint(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(in_shape.to_vec());
    for p in 0..n * c {
        let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * wo + ox];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                dst[y0 * w + x1] += (1.0 - fy) * fx * v;
                dst[y1 * w + x0] += fy * (1.0 - fx) * v;
                dst[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    out
}

fn channel_layout(x: &[usize], k: &[usize], op: &'static str) -> Result<(usize, usize, usize, bool)> {
    if x.len() < 2 {
        return shape_err(op, format!("input needs [N, C, ...], got {:?}", x));
    }
    let (n, c) = (x[0], x[1]);
    let inner: usize = x[2..].iter().product();
    let per_sample = match k {
        [kc] if *kc == c => false,
        [kn, kc] if *kn == n && *kc == c => true,
        _ => return shape_err(op, format!("channel operand {:?} does not match {:?}", k, x)),
    };
    Ok((n, c, inner, per_sample))
}

/// Applies `f(x, k[channel])` to every element of `[N, C, inner]` data.
fn channel_apply(data: &mut [f64], k: &[f64], c: usize, inner: usize, per_sample: bool, f: impl Fn(&mut f64, f64)) {
    if inner == 0 {
        return;
    }
    for (j, chunk) in data.chunks_mut(inner).enumerate() {
        let kv = if per_sample { k[j] } else { k[j % c] };
        for v in chunk {
            f(v, kv);
        }
    }
}

fn backward_op(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], tape: &Tape) -> Result<()> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.scale(-1.0))?;
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, g.mul(val(*b))?)?;
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, g.mul(val(*a))?)?;
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if wants(*a) {
                accumulate(nodes, grads, *a, g.zip_map(bv, |gv, d| gv / d)?)?;
            }
            if wants(*b) {
                let t = g.mul(val(*a))?;
                accumulate(nodes, grads, *b, t.zip_map(bv, |v, d| -v / (d * d))?)?;
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.scale(*s))?,
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone())?,
        Op::Square(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |gv, x| 2.0 * x * gv)?)?,
        Op::Relu(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?,
        )?,
        Op::Sigmoid(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?,
        )?,
        Op::Softplus(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |gv, x| gv * sigmoid(x))?)?,
        Op::Exp(a) => accumulate(nodes, grads, *a, g.mul(&node.value)?)?,
        Op::SoftThreshold(x, e) => {
            let xv = val(*x);
            let ev = val(*e);
            if wants(*x) {
                let mut gx = g.clone();
                for ((gv, &xi), &ei) in gx.data_mut().iter_mut().zip(xv.data()).zip(ev.data()) {
                    if xi.abs() <= ei {
                        *gv = 0.0;
                    }
                }
                accumulate(nodes, grads, *x, gx)?;
            }
            if wants(*e) {
                let mut ge = g.clone();
                for ((gv, &xi), &ei) in ge.data_mut().iter_mut().zip(xv.data()).zip(ev.data()) {
                    *gv = if xi.abs() > ei { -xi.signum() * *gv } else { 0.0 };
                }
                accumulate(nodes, grads, *e, ge)?;
            }
        }
        Op::Conv { x, k, spec } => {
            let xv = val(*x);
            let kv = val(*k);
            if wants(*x) {
                let [_, _, h, w] = xv.dims4()?;
                accumulate(nodes, grads, *x, conv::conv2d_adjoint(g, kv, *spec, (h, w))?)?;
            }
            if wants(*k) {
                accumulate(nodes, grads, *k, conv::conv2d_kernel_grad(xv, g, kv.shape(), *spec)?)?;
            }
        }
        Op::ConvT { y, k, spec } => {
            let yv = val(*y);
            let kv = val(*k);
            if wants(*y) {
                accumulate(nodes, grads, *y, conv::conv2d_forward(g, kv, *spec)?)?;
            }
            if wants(*k) {
                accumulate(nodes, grads, *k, conv::conv2d_kernel_grad(g, yv, kv.shape(), *spec)?)?;
            }
        }
        Op::MulChannels { x, k } => {
            let xv = val(*x);
            let kv = val(*k);
            let (n, c, inner, per_sample) = channel_layout(xv.shape(), kv.shape(), "mul_channels")?;
            if wants(*x) {
                let mut gx = g.clone();
                channel_apply(gx.data_mut(), kv.data(), c, inner, per_sample, |v, k| *v *= k);
                accumulate(nodes, grads, *x, gx)?;
            }
            if wants(*k) {
                let mut gk = Tensor::zeros(kv.shape().to_vec());
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        let acc: f64 = g.data()[off..off + inner]
                            .iter()
                            .zip(&xv.data()[off..off + inner])
                            .map(|(a, b)| a * b)
                            .sum();
                        gk.data_mut()[if per_sample { s * c + ch } else { ch }] += acc;
                    }
                }
                accumulate(nodes, grads, *k, gk)?;
            }
        }
        Op::AddChannels { x, b } => {
            let xv = val(*x);
            let bv = val(*b);
            let (n, c, inner, per_sample) = channel_layout(xv.shape(), bv.shape(), "add_channels")?;
            accumulate(nodes, grads, *x, g.clone())?;
            if wants(*b) {
                let mut gb = Tensor::zeros(bv.shape().to_vec());
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        let acc: f64 = g.data()[off..off + inner].iter().sum();
                        gb.data_mut()[if per_sample { s * c + ch } else { ch }] += acc;
                    }
                }
                accumulate(nodes, grads, *b, gb)?;
            }
        }
        Op::Matmul { a, b, ta, tb } => {
            let av = val(*a);
            let bv = val(*b);
            if wants(*a) {
                let (ga, f) = if !*ta {
                    matmul_raw(g, bv, false, !*tb)?
                } else {
                    matmul_raw(bv, g, *tb, true)?
                };
                tape.flops.set(tape.flops.get() + f);
                accumulate(nodes, grads, *a, sum_batch_to(ga, av.shape())?)?;
            }
            if wants(*b) {
                let (gb, f) = if !*tb {
                    matmul_raw(av, g, !*ta, false)?
                } else {
                    matmul_raw(g, av, true, *ta)?
                };
                tape.flops.set(tape.flops.get() + f);
                accumulate(nodes, grads, *b, sum_batch_to(gb, bv.shape())?)?;
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            let mut gx = g.clone();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dotp: f64 = (0..len).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                    for j in 0..len {
                        gx.data_mut()[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dotp);
                    }
                }
            }
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::LayerNorm { x, gamma, beta, axis, xhat, inv_std } => {
            let shape = node.value.shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            let gam = val(*gamma);
            if wants(*x) {
                let mut gx = Tensor::zeros(shape.to_vec());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let s = inv_std[o * inner + i];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..len {
                            let gh = g.data()[idx(j)] * gam.data()[j];
                            m1 += gh;
                            m2 += gh * xhat[idx(j)];
                        }
                        m1 /= len as f64;
                        m2 /= len as f64;
                        for j in 0..len {
                            let gh = g.data()[idx(j)] * gam.data()[j];
                            gx.data_mut()[idx(j)] = s * (gh - m1 - xhat[idx(j)] * m2);
                        }
                    }
                }
                accumulate(nodes, grads, *x, gx)?;
            }
            if wants(*gamma) || wants(*beta) {
                let mut gg = Tensor::zeros(vec![len]);
                let mut gb = Tensor::zeros(vec![len]);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            let p = (o * len + j) * inner + i;
                            gg.data_mut()[j] += g.data()[p] * xhat[p];
                            gb.data_mut()[j] += g.data()[p];
                        }
                    }
                }
                accumulate(nodes, grads, *gamma, gg)?;
                accumulate(nodes, grads, *beta, gb)?;
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if wants(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(val(p).shape().to_vec(), gp)?)?;
                }
                offset += len;
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.clone().reshape(val(*a).shape().to_vec())?)?,
        Op::Gather { x, idx } => {
            let mut gx = Tensor::zeros(val(*x).shape().to_vec());
            for (gv, &i) in g.data().iter().zip(idx.iter()) {
                gx.data_mut()[i] += gv;
            }
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::Upsample2(a) => accumulate(nodes, grads, *a, upsample2_adjoint(g, val(*a).shape()))?,
        Op::AvgPool2(a) => {
            let [n, c, h, w] = val(*a).dims4()?;
            let (ho, wo) = (h / 2, w / 2);
            let mut gx = Tensor::zeros(vec![n, c, h, w]);
            for p in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        gx.data_mut()[(p * h + y) * w + x] = 0.25 * g.data()[(p * ho + y / 2) * wo + x / 2];
                    }
                }
            }
            accumulate(nodes, grads, *a, gx)?;
        }
        Op::GlobalAvgPool(a) => {
            let [n, c, h, w] = val(*a).dims4()?;
            let hw = h * w;
            let mut gx = Tensor::zeros(vec![n, c, h, w]);
            for p in 0..n * c {
                let v = g.data()[p] / hw as f64;
                gx.data_mut()[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d = v);
            }
            accumulate(nodes, grads, *a, gx)?;
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, Tensor::full(val(*a).shape().to_vec(), g.data()[0]))?,
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape().to_vec(), g.data()[0] / n))?
        }
        Op::Linear { x, map, adjoint } => {
            let gx = if *adjoint { map.apply(g)? } else { map.adjoint(g)? };
            accumulate(nodes, grads, *x, gx)?;
        }
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn soft_threshold_scalar(x: f64, eps: f64) -> f64 {
    x.signum() * (x.abs() - eps).max(0.0)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, out: Tensor, op: Op, name: &'static str) -> Result<Var<'t>> {
        let r = self.tape.req(&[self.id]);
        self.tape.push(out, op, r, name)
    }

    fn binary(&self, other: Var<'t>, out: Tensor, op: Op, name: &'static str) -> Result<Var<'t>> {
        let r = self.tape.req(&[self.id, other.id]);
        self.tape.push(out, op, r, name)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().add(&other.value())?;
        self.binary(other, out, Op::Add(self.id, other.id), "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().sub(&other.value())?;
        self.binary(other, out, Op::Sub(self.id, other.id), "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().mul(&other.value())?;
        self.binary(other, out, Op::Mul(self.id, other.id), "mul")
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().zip_map(&other.value(), |a, b| a / b)?;
        self.binary(other, out, Op::Div(self.id, other.id), "div")
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let out = self.value().scale(s);
        self.unary(out, Op::Scale(self.id, s), "scale")
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + s);
        self.unary(out, Op::AddScalar(self.id), "add_scalar")
    }

    pub fn square(&self) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * v);
        self.unary(out, Op::Square(self.id), "square")
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let out = self.value().map(|v| v.max(0.0));
        self.unary(out, Op::Relu(self.id), "relu")
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let out = self.value().map(sigmoid);
        self.unary(out, Op::Sigmoid(self.id), "sigmoid")
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        let out = self.value().map(softplus);
        self.unary(out, Op::Softplus(self.id), "softplus")
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let out = self.value().map(f64::exp);
        self.unary(out, Op::Exp(self.id), "exp")
    }

    /// Elementwise `sign(x)·max(|x| − ε, 0)`; `eps` must match `self`'s shape.
    pub fn soft_threshold(&self, eps: Var<'t>) -> Result<Var<'t>> {
        let e = eps.value();
        if e.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Usage("soft_threshold: negative threshold".into()));
        }
        let out = self.value().zip_map(&e, soft_threshold_scalar)?;
        self.binary(eps, out, Op::SoftThreshold(self.id, eps.id), "soft_threshold")
    }

    pub fn conv2d(&self, k: Var<'t>, spec: ConvSpec) -> Result<Var<'t>> {
        let out = conv::conv2d_forward(&self.value(), &k.value(), spec)?;
        self.binary(k, out, Op::Conv { x: self.id, k: k.id, spec }, "conv2d")
    }

    /// Adjoint of [`Var::conv2d`] with the same kernel and spec; `out_hw` is
    /// the spatial size of the corresponding forward input.
    pub fn conv2d_transpose(&self, k: Var<'t>, spec: ConvSpec, out_hw: (usize, usize)) -> Result<Var<'t>> {
        let out = conv::conv2d_adjoint(&self.value(), &k.value(), spec, out_hw)?;
        self.binary(k, out, Op::ConvT { y: self.id, k: k.id, spec }, "conv2d_transpose")
    }

    /// Per-channel scale; `k` is `[C]` or `[N, C]`.
    pub fn mul_channels(&self, k: Var<'t>) -> Result<Var<'t>> {
        let xv = self.value();
        let kv = k.value();
        let (_, c, inner, per_sample) = channel_layout(xv.shape(), kv.shape(), "mul_channels")?;
        let mut out = xv.as_ref().clone();
        channel_apply(out.data_mut(), kv.data(), c, inner, per_sample, |v, k| *v *= k);
        self.binary(k, out, Op::MulChannels { x: self.id, k: k.id }, "mul_channels")
    }

    /// Per-channel shift; `b` is `[C]` or `[N, C]`.
    pub fn add_channels(&self, b: Var<'t>) -> Result<Var<'t>> {
        let xv = self.value();
        let bv = b.value();
        let (_, c, inner, per_sample) = channel_layout(xv.shape(), bv.shape(), "add_channels")?;
        let mut out = xv.as_ref().clone();
        channel_apply(out.data_mut(), bv.data(), c, inner, per_sample, |v, b| *v += b);
        self.binary(b, out, Op::AddChannels { x: self.id, b: b.id }, "add_channels")
    }

    /// `op(self) · op(other)` for 2-D or batched 3-D operands.
    pub fn matmul_t(&self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let (out, f) = matmul_raw(&self.value(), &other.value(), ta, tb)?;
        self.tape.flops.set(self.tape.flops.get() + f);
        self.binary(other, out, Op::Matmul { a: self.id, b: other.id, ta, tb }, "matmul")
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// `x · wᵀ + b` for `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn fully_connected(&self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(w, false, true)?.add_channels(b)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let xv = self.value();
        if axis >= xv.ndim() {
            return shape_err("softmax", format!("axis {} out of range for {:?}", axis, xv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.as_ref().clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| xv.data()[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (xv.data()[idx(j)] - m).exp();
                    out.data_mut()[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out.data_mut()[idx(j)] /= z;
                }
            }
        }
        self.unary(out, Op::Softmax { x: self.id, axis }, "softmax")
    }

    /// Normalises over `axis` then applies `gamma`, `beta` (both of length
    /// `shape[axis]`).
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, axis: usize, eps: f64) -> Result<Var<'t>> {
        let xv = self.value();
        if axis >= xv.ndim() {
            return shape_err("layer_norm", format!("axis {} out of range for {:?}", axis, xv.shape()));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [len] || bv.shape() != [len] {
            return shape_err("layer_norm", format!("affine params must be [{}]", len));
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| xv.data()[idx(j)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|j| (xv.data()[idx(j)] - mean).powi(2)).sum::<f64>() / len as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = s;
                for j in 0..len {
                    let h = (xv.data()[idx(j)] - mean) * s;
                    xhat[idx(j)] = h;
                    out[idx(j)] = gv.data()[j] * h + bv.data()[j];
                }
            }
        }
        let r = self.tape.req(&[self.id, gamma.id, beta.id]);
        self.tape.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                axis,
                xhat: Rc::new(xhat),
                inv_std: Rc::new(inv_std),
            },
            r,
            "layer_norm",
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.value().as_ref().clone().reshape(shape)?;
        self.unary(out, Op::Reshape(self.id), "reshape")
    }

    /// `out[i] = self[idx[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&self, idx: Rc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let xv = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return shape_err("gather", format!("index {} out of range {}", bad, xv.len()));
        }
        let out = Tensor::new(shape, idx.iter().map(|&i| xv.data()[i]).collect())?;
        self.unary(out, Op::Gather { x: self.id, idx }, "gather")
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if a >= shape.len() || b >= shape.len() {
            return shape_err("transpose", format!("axes {},{} out of range for {:?}", a, b, shape));
        }
        let mut perm: Vec<usize> = (0..shape.len()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (idx, out_shape) = permute_indices(&shape, perm)?;
        self.gather(Rc::new(idx), out_shape)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err("narrow", format!("{}..{} on axis {} of {:?}", start, start + len, axis, shape));
        }
        let (outer, total, inner) = split_axis(&shape, axis);
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in start..start + len {
                for i in 0..inner {
                    idx.push((o * total + j) * inner + i);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(Rc::new(idx), out_shape)
    }

    pub fn upsample2(&self) -> Result<Var<'t>> {
        let out = upsample2_forward(&self.value())?;
        self.unary(out, Op::Upsample2(self.id), "upsample2")
    }

    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        let xv = self.value();
        let [n, c, h, w] = xv.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("avg_pool2", format!("spatial dims must be even, got {}x{}", h, w));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    out[(p * ho + y / 2) * wo + x / 2] += 0.25 * xv.data()[(p * h + y) * w + x];
                }
            }
        }
        self.unary(Tensor::new(vec![n, c, ho, wo], out)?, Op::AvgPool2(self.id), "avg_pool2")
    }

    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let xv = self.value();
        let [n, c, h, w] = xv.dims4()?;
        let out: Vec<f64> = (0..n * c)
            .map(|p| xv.data()[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        self.unary(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(self.id), "global_avg_pool")
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let s = self.value().mean();
        self.unary(Tensor::scalar(s), Op::Mean(self.id), "mean")
    }

    pub fn linear_map(&self, map: Rc<dyn LinearMap>) -> Result<Var<'t>> {
        let out = map.apply(&self.value())?;
        self.unary(out, Op::Linear { x: self.id, map, adjoint: false }, "linear_map")
    }

    pub fn linear_adjoint(&self, map: Rc<dyn LinearMap>) -> Result<Var<'t>> {
        let out = map.adjoint(&self.value())?;
        self.unary(out, Op::Linear { x: self.id, map, adjoint: true }, "linear_adjoint")
    }
}

/// Concatenates along `axis`. All parts must agree on the other axes.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        return Err(TensorError::Usage("concat of zero tensors".into()));
    };
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return shape_err("concat", format!("axis {} out of range for {:?}", axis, base));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return shape_err("concat", format!("{:?} vs {:?} on axis {}", s, base, axis));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis];
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let r = tape.req(&ids);
    tape.push(Tensor::new(shape, out)?, Op::Concat { parts: ids, axis }, r, "concat")
}

/// Flat gather indices realising an axis permutation.
pub fn permute_indices(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let nd = shape.len();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return shape_err("permute", format!("invalid permutation {:?} for {:?}", perm, shape));
    }
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; nd];
    for _ in 0..total {
        idx.push(counter.iter().zip(perm).map(|(&c, &p)| c * strides[p]).sum());
        for d in (0..nd).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Ok((idx, out_shape))
}
