//! Tape-based reverse-mode differentiation.
//!
//! A forward pass records one node per operation onto a [`Tape`]; the tape
//! is rebuilt every training step, so data-dependent control flow (random
//! augmentation, noise draws) needs no special handling. [`Tape::backward`]
//! walks the records in reverse, accumulating gradients additively at
//! fan-out points. Gradients are materialized for `requires_grad` leaves;
//! intermediate buffers are dropped as soon as they have been consumed.
//!
//! Every forward output is checked for non-finite values and rejected with
//! a numeric error, and each op validates its input shapes up front.

use crate::error::{HdcError, Result};
use crate::linalg::ResolvedKernel;
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    BiasAdd { x: Var, bias: Var },
    Upsample2x(Var),
    Relu(Var),
    SoftmaxChannels(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, T),
    MulScalar(Var, T),
    Gap(Var),
    Sum(Var),
    Mean(Var),
    Ln(Var),
    Log2(Var),
    PowI(Var, i32),
    Square(Var),
    Trace(Var),
    DiagPart(Var),
    Standardize { x: Var, eps: T },
    StopGrad(#[allow(dead_code)] Var),
    ConcatChannels(Var, Var),
    Gram { z: Var, kernel: ResolvedKernel },
    TraceNormalize(Var),
    CrossEntropy { x: Var, targets: Vec<u32> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Gradient map produced by one backward pass, indexed by node id.
/// Only `requires_grad` leaves are populated; everything else reads as zero.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, materializing zeros of the given shape when no
    /// gradient flowed to it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Record an input tensor. Gradients are reported for it after
    /// `backward` iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.leaf(Tensor::scalar(v), false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(HdcError::numeric(format!(
                "non-finite value produced by {:?}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(HdcError::contract(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("zip shape")
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddScalar(x, c), self.needs(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::MulScalar(x, c), self.needs(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        ops::relu_fwd(t.data(), out.data_mut());
        self.push(out, Op::Relu(x), self.needs(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.ln());
        self.push(v, Op::Ln(x), self.needs(x))
    }

    pub fn log2(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.log2());
        self.push(v, Op::Log2(x), self.needs(x))
    }

    pub fn powi(&mut self, x: Var, n: i32) -> Result<Var> {
        if n < 1 {
            return Err(HdcError::contract(format!("powi exponent must be >= 1, got {n}")));
        }
        let v = self.value(x).map(|e| e.powi(n));
        self.push(v, Op::PowI(x, n), self.needs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x), self.needs(x))
    }

    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad(x), false)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(ops::sum(self.value(x).data()));
        self.push(v, Op::Sum(x), self.needs(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::scalar(ops::sum(t.data()) / T::from_f64(t.numel() as f64));
        self.push(v, Op::Mean(x), self.needs(x))
    }

    // ── matrix ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(HdcError::contract(format!("matmul: incompatible shapes {sa:?} vs {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        ops::matmul(self.value(a).data(), self.value(b).data(), m, k, n, out.data_mut());
        self.push(out, Op::MatMul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(HdcError::contract(format!("transpose expects a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let t = self.value(x);
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push(out, Op::Transpose(x), self.needs(x))
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let n = self.square_order(x, "trace")?;
        let t = self.value(x);
        let mut acc = T::ZERO;
        for i in 0..n {
            acc += t.data()[i * n + i];
        }
        self.push(Tensor::scalar(acc), Op::Trace(x), self.needs(x))
    }

    pub fn diag_part(&mut self, x: Var) -> Result<Var> {
        let n = self.square_order(x, "diag_part")?;
        let t = self.value(x);
        let data: Vec<T> = (0..n).map(|i| t.data()[i * n + i]).collect();
        self.push(Tensor::new(vec![n], data)?, Op::DiagPart(x), self.needs(x))
    }

    fn square_order(&self, x: Var, what: &str) -> Result<usize> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(HdcError::contract(format!("{what} expects a square matrix, got {s:?}")));
        }
        Ok(s[0])
    }

    /// Per-column batch standardization of a `b x d` matrix.
    pub fn standardize_columns(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(HdcError::contract(format!("standardize expects b x d, got {s:?}")));
        }
        if s[0] < 2 {
            return Err(HdcError::contract(format!("standardize needs batch >= 2, got {}", s[0])));
        }
        let (b, d) = (s[0], s[1]);
        let mut out = Tensor::zeros(vec![b, d]);
        ops::standardize_fwd(self.value(x).data(), b, d, eps, out.data_mut());
        self.push(out, Op::Standardize { x, eps }, self.needs(x))
    }

    /// Batch Gram matrix `K_ij = k(z_i, z_j)` for a `b x d` feature matrix.
    /// The kernel is fully resolved (fixed bandwidth); no gradient flows
    /// through kernel parameters.
    pub fn gram(&mut self, z: Var, kernel: ResolvedKernel) -> Result<Var> {
        let s = self.shape(z);
        if s.len() != 2 {
            return Err(HdcError::contract(format!("gram expects b x d features, got {s:?}")));
        }
        let (b, d) = (s[0], s[1]);
        let zt = self.value(z);
        let mut out = Tensor::zeros(vec![b, b]);
        crate::linalg::gram_into(zt.data(), b, d, &kernel, out.data_mut());
        self.push(out, Op::Gram { z, kernel }, self.needs(z))
    }

    /// Divide a square matrix by its trace. Errors when the trace is not
    /// strictly positive (a PSD Gram with zero trace is a degenerate batch).
    pub fn trace_normalize(&mut self, x: Var) -> Result<Var> {
        let n = self.square_order(x, "trace_normalize")?;
        let t = self.value(x);
        let mut tr = T::ZERO;
        for i in 0..n {
            tr += t.data()[i * n + i];
        }
        if tr.to_f64() <= 0.0 {
            return Err(HdcError::numeric(format!("trace_normalize: trace {tr} <= 0 (degenerate batch)")));
        }
        let v = t.map(|e| e / tr);
        self.push(v, Op::TraceNormalize(x), self.needs(x))
    }

    // ── image ops (B x C x H x W) ───────────────────────────────────────

    fn image_dims(&self, x: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(HdcError::contract(format!("{what} expects B x C x H x W, got {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// 2-D convolution with zero padding. Weight is `Cout x Cin x Kh x Kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (b, cin, h, wd) = self.image_dims(x, "conv2d")?;
        let ws = self.shape(w);
        if ws.len() != 4 || ws[1] != cin {
            return Err(HdcError::contract(format!(
                "conv2d: weight {ws:?} incompatible with input {:?}",
                self.shape(x)
            )));
        }
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = ops::conv_out_size(h, kh, stride, pad);
        let ow = ops::conv_out_size(wd, kw, stride, pad);
        let mut out = Tensor::zeros(vec![b, cout, oh, ow]);
        ops::conv2d_fwd(
            self.value(x).data(),
            b,
            cin,
            h,
            wd,
            self.value(w).data(),
            cout,
            kh,
            kw,
            stride,
            pad,
            out.data_mut(),
        );
        self.push(out, Op::Conv2d { x, w, stride, pad }, self.needs(x) || self.needs(w))
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (b, c, h, w) = self.image_dims(x, "bias_add")?;
        if self.shape(bias) != [c] {
            return Err(HdcError::contract(format!(
                "bias_add: bias {:?} does not match channels {c}",
                self.shape(bias)
            )));
        }
        let mut out = Tensor::zeros(vec![b, c, h, w]);
        ops::bias_add_fwd(self.value(x).data(), self.value(bias).data(), c, h * w, out.data_mut());
        self.push(out, Op::BiasAdd { x, bias }, self.needs(x) || self.needs(bias))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.image_dims(x, "upsample2x")?;
        let mut out = Tensor::zeros(vec![b, c, 2 * h, 2 * w]);
        ops::upsample2x_fwd(self.value(x).data(), b * c, h, w, out.data_mut());
        self.push(out, Op::Upsample2x(x), self.needs(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.image_dims(a, "concat_channels")?;
        let (bb, cb, hb, wb) = self.image_dims(b, "concat_channels")?;
        if ba != bb || ha != hb || wa != wb {
            return Err(HdcError::contract(format!(
                "concat_channels: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = ha * wa;
        let mut out = Tensor::zeros(vec![ba, ca + cb, ha, wa]);
        {
            let (ta, tb) = (self.value(a).data(), self.value(b).data());
            let o = out.data_mut();
            for bi in 0..ba {
                let dst = &mut o[bi * (ca + cb) * plane..(bi + 1) * (ca + cb) * plane];
                dst[..ca * plane].copy_from_slice(&ta[bi * ca * plane..(bi + 1) * ca * plane]);
                dst[ca * plane..].copy_from_slice(&tb[bi * cb * plane..(bi + 1) * cb * plane]);
            }
        }
        self.push(out, Op::ConcatChannels(a, b), self.needs(a) || self.needs(b))
    }

    /// Softmax over the channel axis of `B x C x H x W` (or `B x C`).
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (b, c, plane) = self.channels_view(x, "softmax_channels")?;
        let mut out = Tensor::zeros(self.shape(x).to_vec());
        ops::softmax_channels_fwd(self.value(x).data(), b, c, plane, out.data_mut());
        self.push(out, Op::SoftmaxChannels(x), self.needs(x))
    }

    fn channels_view(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        match s.len() {
            2 => Ok((s[0], s[1], 1)),
            4 => Ok((s[0], s[1], s[2] * s[3])),
            _ => Err(HdcError::contract(format!("{what} expects rank 2 or 4, got {s:?}"))),
        }
    }

    /// Global average pool `B x C x H x W -> B x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.image_dims(x, "global_avg_pool")?;
        let mut out = Tensor::zeros(vec![b, c]);
        ops::gap_fwd(self.value(x).data(), b * c, h * w, out.data_mut());
        self.push(out, Op::Gap(x), self.needs(x))
    }

    /// Mean cross-entropy from logits `B x C x H x W` against class-index
    /// targets (length `B*H*W`), natural log.
    pub fn cross_entropy_logits(&mut self, x: Var, targets: &[u32]) -> Result<Var> {
        let (b, c, h, w) = self.image_dims(x, "cross_entropy_logits")?;
        if targets.len() != b * h * w {
            return Err(HdcError::contract(format!(
                "cross_entropy: {} targets for {} pixels",
                targets.len(),
                b * h * w
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(HdcError::contract(format!("cross_entropy: target class {bad} >= C={c}")));
        }
        let loss = ops::cross_entropy_fwd(self.value(x).data(), b, c, h * w, targets);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { x, targets: targets.to_vec() },
            self.needs(x),
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. May be called once per recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(HdcError::contract("backward called twice on one tape recording"));
        }
        self.backward_done = true;
        if self.value(loss).numel() != 1 {
            return Err(HdcError::contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match &grads[id] {
                Some(_) => grads[id].take().expect("present"),
                None => continue,
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g); // keep leaf gradients for the caller
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[id].value.shape().to_vec(), data).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        // Allocates the receiver buffer on first touch.
        macro_rules! buf {
            ($v:expr) => {{
                let vid = $v.0;
                if grads[vid].is_none() {
                    grads[vid] = Some(vec![T::ZERO; self.nodes[vid].value.numel()]);
                }
                grads[vid].as_mut().expect("just set")
            }};
        }

        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    ops::axpy(T::ONE, g, buf!(*a));
                }
                if self.needs(*b) {
                    ops::axpy(T::ONE, g, buf!(*b));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    ops::axpy(T::ONE, g, buf!(*a));
                }
                if self.needs(*b) {
                    ops::axpy(-T::ONE, g, buf!(*b));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb: Vec<T> = self.value(*b).data().to_vec();
                    let ga = buf!(*a);
                    for i in 0..g.len() {
                        ga[i] = g[i].mul_add(vb[i], ga[i]);
                    }
                }
                if self.needs(*b) {
                    let va: Vec<T> = self.value(*a).data().to_vec();
                    let gb = buf!(*b);
                    for i in 0..g.len() {
                        gb[i] = g[i].mul_add(va[i], gb[i]);
                    }
                }
            }
            Op::AddScalar(x, _) => {
                if self.needs(*x) {
                    ops::axpy(T::ONE, g, buf!(*x));
                }
            }
            Op::MulScalar(x, c) => {
                if self.needs(*x) {
                    ops::axpy(*c, g, buf!(*x));
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let vx = self.value(*x).data();
                    let n = vx.len();
                    let gx = buf!(*x);
                    // relu_bwd reads x by value; inline to avoid a copy.
                    for i in 0..n {
                        if vx[i] > T::ZERO {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Ln(x) => {
                if self.needs(*x) {
                    let vx = self.value(*x).data();
                    let gx = buf!(*x);
                    for i in 0..g.len() {
                        gx[i] += g[i] / vx[i];
                    }
                }
            }
            Op::Log2(x) => {
                if self.needs(*x) {
                    let ln2 = T::from_f64(std::f64::consts::LN_2);
                    let vx = self.value(*x).data();
                    let gx = buf!(*x);
                    for i in 0..g.len() {
                        gx[i] += g[i] / (vx[i] * ln2);
                    }
                }
            }
            Op::PowI(x, n) => {
                if self.needs(*x) {
                    let nf = T::from_f64(f64::from(*n));
                    let vx = self.value(*x).data();
                    let gx = buf!(*x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * nf * vx[i].powi(n - 1);
                    }
                }
            }
            Op::Square(x) => {
                if self.needs(*x) {
                    let two = T::from_f64(2.0);
                    let vx = self.value(*x).data();
                    let gx = buf!(*x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * two * vx[i];
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let gv = g[0];
                    for v in buf!(*x).iter_mut() {
                        *v += gv;
                    }
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let n = self.nodes[x.0].value.numel();
                    let gv = g[0] / T::from_f64(n as f64);
                    for v in buf!(*x).iter_mut() {
                        *v += gv;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // gA += g . B^T
                    let vb = self.value(*b).data();
                    let ga = buf!(*a);
                    for i in 0..m {
                        for l in 0..k {
                            ga[i * k + l] += row_dot_col_t(g, vb, i, l, n);
                        }
                    }
                }
                if self.needs(*b) {
                    // gB += A^T . g
                    let va = self.value(*a).data();
                    let gb = buf!(*b);
                    for l in 0..k {
                        for i in 0..m {
                            let av = va[i * k + l];
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &mut gb[l * n..(l + 1) * n];
                            for j in 0..n {
                                brow[j] = grow[j].mul_add(av, brow[j]);
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                    let gx = buf!(*x);
                    for i in 0..n {
                        for j in 0..m {
                            gx[j * n + i] += g[i * m + j];
                        }
                    }
                }
            }
            Op::Trace(x) => {
                if self.needs(*x) {
                    let n = self.shape(*x)[0];
                    let gx = buf!(*x);
                    for i in 0..n {
                        gx[i * n + i] += g[0];
                    }
                }
            }
            Op::DiagPart(x) => {
                if self.needs(*x) {
                    let n = self.shape(*x)[0];
                    let gx = buf!(*x);
                    for i in 0..n {
                        gx[i * n + i] += g[i];
                    }
                }
            }
            Op::TraceNormalize(x) => {
                if self.needs(*x) {
                    let n = self.shape(*x)[0];
                    let vx = self.value(*x).data();
                    let mut tr = T::ZERO;
                    for i in 0..n {
                        tr += vx[i * n + i];
                    }
                    // <g, y> where y = x / tr
                    let y = node.value.data();
                    let gy = ops::dot(g, y);
                    let gx = buf!(*x);
                    for i in 0..n * n {
                        gx[i] += g[i] / tr;
                    }
                    let corr = gy / tr;
                    for i in 0..n {
                        gx[i * n + i] -= corr;
                    }
                }
            }
            Op::Gram { z, kernel } => {
                if self.needs(*z) {
                    let s = self.shape(*z);
                    let (b, d) = (s[0], s[1]);
                    let vz = self.value(*z).data();
                    let k = node.value.data();
                    let gz = buf!(*z);
                    crate::linalg::gram_backward(vz, b, d, kernel, k, g, gz);
                }
            }
            Op::Standardize { x, eps } => {
                if self.needs(*x) {
                    let s = self.shape(*x);
                    let (b, d) = (s[0], s[1]);
                    let vx = self.value(*x).data();
                    let y = node.value.data();
                    ops::standardize_bwd(vx, y, g, b, d, *eps, buf!(*x));
                }
            }
            Op::SoftmaxChannels(x) => {
                if self.needs(*x) {
                    let (b, c, plane) = self.channels_view(*x, "softmax bwd")?;
                    let y = node.value.data();
                    ops::softmax_channels_bwd(y, g, b, c, plane, buf!(*x));
                }
            }
            Op::Gap(x) => {
                if self.needs(*x) {
                    let s = self.shape(*x);
                    ops::gap_bwd(g, s[0] * s[1], s[2] * s[3], buf!(*x));
                }
            }
            Op::Upsample2x(x) => {
                if self.needs(*x) {
                    let s = self.shape(*x);
                    ops::upsample2x_bwd(g, s[0] * s[1], s[2], s[3], buf!(*x));
                }
            }
            Op::ConcatChannels(a, b) => {
                let (ba, ca, ha, wa) = self.image_dims(*a, "concat bwd")?;
                let cb = self.shape(*b)[1];
                let plane = ha * wa;
                if self.needs(*a) {
                    let ga = buf!(*a);
                    for bi in 0..ba {
                        let src = &g[bi * (ca + cb) * plane..bi * (ca + cb) * plane + ca * plane];
                        ops::axpy(T::ONE, src, &mut ga[bi * ca * plane..(bi + 1) * ca * plane]);
                    }
                }
                if self.needs(*b) {
                    let gb = buf!(*b);
                    for bi in 0..ba {
                        let off = bi * (ca + cb) * plane + ca * plane;
                        let src = &g[off..off + cb * plane];
                        ops::axpy(T::ONE, src, &mut gb[bi * cb * plane..(bi + 1) * cb * plane]);
                    }
                }
            }
            Op::BiasAdd { x, bias } => {
                let (_, c, h, w) = self.image_dims(*x, "bias bwd")?;
                if self.needs(*x) {
                    ops::axpy(T::ONE, g, buf!(*x));
                }
                if self.needs(*bias) {
                    ops::bias_add_bwd(g, c, h * w, buf!(*bias));
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (b, cin, h, wd) = self.image_dims(*x, "conv bwd")?;
                let ws = self.shape(*w);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                if self.needs(*x) {
                    let vw = self.value(*w).data();
                    ops::conv2d_bwd_input(g, b, cin, h, wd, vw, cout, kh, kw, *stride, *pad, buf!(*x));
                }
                if self.needs(*w) {
                    let vx = self.value(*x).data();
                    ops::conv2d_bwd_weight(g, vx, b, cin, h, wd, cout, kh, kw, *stride, *pad, buf!(*w));
                }
            }
            Op::CrossEntropy { x, targets } => {
                if self.needs(*x) {
                    let (b, c, h, w) = self.image_dims(*x, "ce bwd")?;
                    let vx = self.value(*x).data();
                    ops::cross_entropy_bwd(vx, b, c, h * w, targets, g[0], buf!(*x));
                }
            }
        }
        Ok(())
    }
}

/// dot(g[i,:], B[l,:]) — row of g against row l of B (i.e. column of B^T).
#[inline]
fn row_dot_col_t<T: Real>(g: &[T], b: &[T], i: usize, l: usize, n: usize) -> T {
    ops::dot(&g[i * n..(i + 1) * n], &b[l * n..(l + 1) * n])
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Conv2d { .. } => "conv2d",
        Op::BiasAdd { .. } => "bias_add",
        Op::Upsample2x(..) => "upsample2x",
        Op::Relu(..) => "relu",
        Op::SoftmaxChannels(..) => "softmax_channels",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::Gap(..) => "global_avg_pool",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Ln(..) => "ln",
        Op::Log2(..) => "log2",
        Op::PowI(..) => "powi",
        Op::Square(..) => "square",
        Op::Trace(..) => "trace",
        Op::DiagPart(..) => "diag_part",
        Op::Standardize { .. } => "standardize",
        Op::StopGrad(..) => "stop_grad",
        Op::ConcatChannels(..) => "concat_channels",
        Op::Gram { .. } => "gram",
        Op::TraceNormalize(..) => "trace_normalize",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}
