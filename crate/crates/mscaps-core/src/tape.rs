//! Reverse-mode automatic differentiation over a recorded op list.
//!
//! A `Tape` appends one `Node` per forward op, so list order is already
//! topological. `backward` walks the list in reverse, routing each node's
//! gradient into its parents; gradients accumulate additively across fan-out.
//! A tape and its values are confined to one thread; parallelism happens
//! across independent tapes.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{err_arg, err_dim, Result};
use crate::fmath;
use crate::kernels::{self, CapsGeom, ConvGeom};
use crate::tensor::Tensor;

/// Spatial padding mode for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by the dilated kernel reach.
    Valid,
    /// Zero padding sized so stride-1 output matches the input extent.
    Same,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

enum Rule {
    Leaf,
    Conv2d { input: usize, kernel: usize, geom: ConvGeom },
    Conv1dChannels { input: usize, kernel: usize },
    GlobalAvgPool { input: usize, hw: usize },
    Sigmoid { input: usize },
    Relu { input: usize },
    Add { lhs: usize, rhs: usize },
    Mul { lhs: usize, rhs: usize },
    Scale { input: usize, factor: f64 },
    SoftmaxLast { input: usize, n: usize },
    Reshape { input: usize },
    ChannelScale { map: usize, weights: usize, channels: usize },
    SquashVecs { input: usize, d: usize },
    WeightedCapsSum { coeffs: usize, preds: usize, dims: (usize, usize, usize, usize) },
    CapsAgreement { preds: usize, caps: usize, dims: (usize, usize, usize, usize) },
    ConvCapsPredict { grid: usize, weights: usize, geom: CapsGeom },
    FcCapsPredict { grid: usize, weights: usize, dims: (usize, usize, usize, usize) },
    VecNorms { input: usize, d: usize },
    MarginLoss { norms: usize, label: usize, m_plus: f64, m_minus: f64, lambda: f64 },
    Sum { input: usize },
}

struct Node {
    value: Tensor,
    rule: Rule,
}

/// Wengert list of forward ops with reverse-mode gradients.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, rule: Rule) -> Val {
        debug_assert!(value.all_finite(), "op produced a non-finite value");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, rule });
        Val(nodes.len() - 1)
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&self, t: Tensor) -> Val {
        self.push(t, Rule::Leaf)
    }

    /// Clone of the forward value at `v`.
    pub fn value(&self, v: Val) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Shape of the value at `v`.
    pub fn shape(&self, v: Val) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// The single element of a scalar value.
    pub fn scalar_value(&self, v: Val) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[v.0].value.numel(), 1);
        nodes[v.0].value.data()[0]
    }

    /// Gradient at `v` from the latest `backward`, if it was reached.
    pub fn grad(&self, v: Val) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.0].value.grad().map(|g| g.to_vec())
    }

    /// Dilated 2-D cross-correlation: input [h,w,cin], kernel [k,k,cin,cout].
    pub fn conv2d(
        &self,
        input: Val,
        kernel: Val,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Val> {
        let (out, geom) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let w = &nodes[kernel.0].value;
            if x.rank() != 3 {
                return Err(err_dim!("conv2d input must be [h,w,cin], got {:?}", x.shape()));
            }
            if w.rank() != 4 || w.shape()[0] != w.shape()[1] {
                return Err(err_dim!("conv2d kernel must be [k,k,cin,cout], got {:?}", w.shape()));
            }
            let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (k, cout) = (w.shape()[0], w.shape()[3]);
            if k % 2 == 0 {
                return Err(err_arg!("conv2d kernel extent must be odd, got {k}"));
            }
            if stride == 0 || dilation == 0 {
                return Err(err_arg!("conv2d stride and dilation must be >= 1"));
            }
            if w.shape()[2] != cin {
                return Err(err_dim!(
                    "conv2d kernel expects {} input channels, input has {cin}",
                    w.shape()[2]
                ));
            }
            let pad = match padding {
                Padding::Valid => 0,
                Padding::Same => dilation * (k - 1) / 2,
            };
            let oh = kernels::conv_out_dim(h, k, stride, dilation, pad)
                .ok_or_else(|| err_dim!("conv2d kernel reach exceeds input height {h}"))?;
            let ow = kernels::conv_out_dim(wd, k, stride, dilation, pad)
                .ok_or_else(|| err_dim!("conv2d kernel reach exceeds input width {wd}"))?;
            let geom = ConvGeom { h, w: wd, cin, k, cout, stride, dilation, pad, oh, ow };
            let mut out = vec![0.0; oh * ow * cout];
            kernels::conv2d_forward(x.data(), w.data(), &mut out, geom);
            (Tensor::from_vec(&[oh, ow, cout], out)?, geom)
        };
        Ok(self.push(out, Rule::Conv2d { input: input.0, kernel: kernel.0, geom }))
    }

    /// k-tap convolution along a channel vector, zero-padded at the ends.
    pub fn conv1d_channels(&self, input: Val, kernel: Val) -> Result<Val> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let w = &nodes[kernel.0].value;
            if x.rank() != 1 || w.rank() != 1 {
                return Err(err_dim!(
                    "conv1d_channels takes vectors, got {:?} and {:?}",
                    x.shape(),
                    w.shape()
                ));
            }
            if w.numel() % 2 == 0 {
                return Err(err_arg!("conv1d_channels kernel length must be odd, got {}", w.numel()));
            }
            let mut out = vec![0.0; x.numel()];
            kernels::conv1d_forward(x.data(), w.data(), &mut out);
            Tensor::from_vec(x.shape(), out)?
        };
        Ok(self.push(out, Rule::Conv1dChannels { input: input.0, kernel: kernel.0 }))
    }

    /// Per-channel spatial mean of an [h,w,c] map.
    pub fn global_avg_pool(&self, input: Val) -> Result<Val> {
        let (out, hw) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            if x.rank() != 3 {
                return Err(err_dim!("global_avg_pool input must be [h,w,c], got {:?}", x.shape()));
            }
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let hw = h * w;
            let inv = 1.0 / hw as f64;
            let mut out = vec![0.0; c];
            for row in x.data().chunks_exact(c) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
            (Tensor::from_vec(&[c], out)?, hw)
        };
        Ok(self.push(out, Rule::GlobalAvgPool { input: input.0, hw }))
    }

    pub fn sigmoid(&self, input: Val) -> Val {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let data = x
                .data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 {
                        1.0 / (1.0 + fmath::exp(-v))
                    } else {
                        let e = fmath::exp(v);
                        e / (1.0 + e)
                    }
                })
                .collect();
            Tensor::from_vec(x.shape(), data).expect("shape preserved")
        };
        self.push(out, Rule::Sigmoid { input: input.0 })
    }

    pub fn relu(&self, input: Val) -> Val {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Tensor::from_vec(x.shape(), data).expect("shape preserved")
        };
        self.push(out, Rule::Relu { input: input.0 })
    }

    pub fn add(&self, lhs: Val, rhs: Val) -> Result<Val> {
        let out = {
            let nodes = self.nodes.borrow();
            let (a, b) = (&nodes[lhs.0].value, &nodes[rhs.0].value);
            if a.shape() != b.shape() {
                return Err(err_dim!("add shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_vec(a.shape(), data)?
        };
        Ok(self.push(out, Rule::Add { lhs: lhs.0, rhs: rhs.0 }))
    }

    pub fn mul(&self, lhs: Val, rhs: Val) -> Result<Val> {
        let out = {
            let nodes = self.nodes.borrow();
            let (a, b) = (&nodes[lhs.0].value, &nodes[rhs.0].value);
            if a.shape() != b.shape() {
                return Err(err_dim!("mul shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            Tensor::from_vec(a.shape(), data)?
        };
        Ok(self.push(out, Rule::Mul { lhs: lhs.0, rhs: rhs.0 }))
    }

    pub fn scale(&self, input: Val, factor: f64) -> Val {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let data = x.data().iter().map(|&v| v * factor).collect();
            Tensor::from_vec(x.shape(), data).expect("shape preserved")
        };
        self.push(out, Rule::Scale { input: input.0, factor })
    }

    /// Softmax over the trailing axis, max-subtracted for stability.
    pub fn softmax_last(&self, input: Val) -> Result<Val> {
        let (out, n) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let n = *x.shape().last().expect("rank >= 1");
            let mut out = vec![0.0; x.numel()];
            kernels::softmax_rows_forward(x.data(), &mut out, n);
            (Tensor::from_vec(x.shape(), out)?, n)
        };
        Ok(self.push(out, Rule::SoftmaxLast { input: input.0, n }))
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(&self, input: Val, shape: &[usize]) -> Result<Val> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[input.0].value.reshaped(shape)?
        };
        Ok(self.push(out, Rule::Reshape { input: input.0 }))
    }

    /// Scales channel j of an [h,w,c] map by weights[j].
    pub fn channel_scale(&self, map: Val, weights: Val) -> Result<Val> {
        let (out, channels) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[map.0].value;
            let m = &nodes[weights.0].value;
            if x.rank() != 3 {
                return Err(err_dim!("channel_scale map must be [h,w,c], got {:?}", x.shape()));
            }
            let c = x.shape()[2];
            if m.shape() != [c] {
                return Err(err_dim!(
                    "channel_scale weights must be [{c}], got {:?}",
                    m.shape()
                ));
            }
            let mw = m.data();
            let mut out = vec![0.0; x.numel()];
            for (row_out, row_in) in out.chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
                for ((o, &v), &s) in row_out.iter_mut().zip(row_in).zip(mw) {
                    *o = v * s;
                }
            }
            (Tensor::from_vec(x.shape(), out)?, c)
        };
        Ok(self.push(out, Rule::ChannelScale { map: map.0, weights: weights.0, channels }))
    }

    /// Squash nonlinearity applied to each trailing-axis vector.
    pub fn squash_vecs(&self, input: Val) -> Result<Val> {
        let (out, d) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let d = *x.shape().last().expect("rank >= 1");
            let mut out = vec![0.0; x.numel()];
            kernels::squash_rows_forward(x.data(), &mut out, d);
            (Tensor::from_vec(x.shape(), out)?, d)
        };
        Ok(self.push(out, Rule::SquashVecs { input: input.0, d }))
    }

    /// s[p,j,:] = sum_i coeffs[p,i,j] * preds[p,i,j,:].
    pub fn weighted_caps_sum(&self, coeffs: Val, preds: Val) -> Result<Val> {
        let (out, dims) = {
            let nodes = self.nodes.borrow();
            let c = &nodes[coeffs.0].value;
            let u = &nodes[preds.0].value;
            if u.rank() != 4 {
                return Err(err_dim!("predictions must be [p,i,j,d], got {:?}", u.shape()));
            }
            if c.shape() != &u.shape()[..3] {
                return Err(err_dim!(
                    "coefficients {:?} do not match predictions {:?}",
                    c.shape(),
                    u.shape()
                ));
            }
            let dims = (u.shape()[0], u.shape()[1], u.shape()[2], u.shape()[3]);
            let mut out = vec![0.0; dims.0 * dims.2 * dims.3];
            kernels::weighted_caps_sum_forward(c.data(), u.data(), &mut out, dims);
            (Tensor::from_vec(&[dims.0, dims.2, dims.3], out)?, dims)
        };
        Ok(self.push(out, Rule::WeightedCapsSum { coeffs: coeffs.0, preds: preds.0, dims }))
    }

    /// a[p,i,j] = preds[p,i,j,:] . caps[p,j,:].
    pub fn caps_agreement(&self, preds: Val, caps: Val) -> Result<Val> {
        let (out, dims) = {
            let nodes = self.nodes.borrow();
            let u = &nodes[preds.0].value;
            let v = &nodes[caps.0].value;
            if u.rank() != 4 {
                return Err(err_dim!("predictions must be [p,i,j,d], got {:?}", u.shape()));
            }
            let dims = (u.shape()[0], u.shape()[1], u.shape()[2], u.shape()[3]);
            if v.shape() != [dims.0, dims.2, dims.3] {
                return Err(err_dim!(
                    "capsules {:?} do not match predictions {:?}",
                    v.shape(),
                    u.shape()
                ));
            }
            let mut out = vec![0.0; dims.0 * dims.1 * dims.2];
            kernels::caps_agreement_forward(u.data(), v.data(), &mut out, dims);
            (Tensor::from_vec(&[dims.0, dims.1, dims.2], out)?, dims)
        };
        Ok(self.push(out, Rule::CapsAgreement { preds: preds.0, caps: caps.0, dims }))
    }

    /// Window-gathered capsule predictions: grid [gh,gw,n,d] with weights
    /// [e,e,n,d,jn,jd] -> [p, e*e*n, jn, jd] over valid stride-1 windows.
    pub fn conv_caps_predict(&self, grid: Val, weights: Val) -> Result<Val> {
        let (out, geom) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[grid.0].value;
            let w = &nodes[weights.0].value;
            if x.rank() != 4 {
                return Err(err_dim!("capsule grid must be [h,w,n,d], got {:?}", x.shape()));
            }
            if w.rank() != 6 || w.shape()[0] != w.shape()[1] {
                return Err(err_dim!(
                    "conv-caps weights must be [e,e,n,d,jn,jd], got {:?}",
                    w.shape()
                ));
            }
            let (gh, gw, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (e, jn, jd) = (w.shape()[0], w.shape()[4], w.shape()[5]);
            if e % 2 == 0 {
                return Err(err_arg!("conv-caps window extent must be odd, got {e}"));
            }
            if w.shape()[2] != n || w.shape()[3] != d {
                return Err(err_dim!(
                    "conv-caps weights expect {}x{} input capsules, grid has {n}x{d}",
                    w.shape()[2],
                    w.shape()[3]
                ));
            }
            if e > gh || e > gw {
                return Err(err_arg!("conv-caps window {e} exceeds grid {gh}x{gw}"));
            }
            let (oh, ow) = (gh - e + 1, gw - e + 1);
            let geom = CapsGeom { gw, n, d, e, jn, jd, oh, ow };
            let i = e * e * n;
            let mut out = vec![0.0; oh * ow * i * jn * jd];
            kernels::conv_caps_predict_forward(x.data(), w.data(), &mut out, geom);
            (Tensor::from_vec(&[oh * ow, i, jn, jd], out)?, geom)
        };
        Ok(self.push(out, Rule::ConvCapsPredict { grid: grid.0, weights: weights.0, geom }))
    }

    /// Fully connected capsule predictions: grid [i,d] with weights
    /// [i,d,k,jd] -> [1,i,k,jd].
    pub fn fc_caps_predict(&self, grid: Val, weights: Val) -> Result<Val> {
        let (out, dims) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[grid.0].value;
            let w = &nodes[weights.0].value;
            if x.rank() != 2 {
                return Err(err_dim!("fc-caps input must be [i,d], got {:?}", x.shape()));
            }
            if w.rank() != 4 {
                return Err(err_dim!("fc-caps weights must be [i,d,k,jd], got {:?}", w.shape()));
            }
            let (i, d) = (x.shape()[0], x.shape()[1]);
            if w.shape()[0] != i || w.shape()[1] != d {
                return Err(err_dim!(
                    "fc-caps weights {:?} do not match input [{i},{d}]",
                    w.shape()
                ));
            }
            let (k, jd) = (w.shape()[2], w.shape()[3]);
            let dims = (i, d, k, jd);
            let mut out = vec![0.0; i * k * jd];
            kernels::fc_caps_predict_forward(x.data(), w.data(), &mut out, dims);
            (Tensor::from_vec(&[1, i, k, jd], out)?, dims)
        };
        Ok(self.push(out, Rule::FcCapsPredict { grid: grid.0, weights: weights.0, dims }))
    }

    /// Euclidean norm of each trailing-axis vector; output drops that axis.
    pub fn vec_norms(&self, input: Val) -> Result<Val> {
        let (out, d) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            if x.rank() < 2 {
                return Err(err_dim!("vec_norms input must have rank >= 2, got {:?}", x.shape()));
            }
            let d = *x.shape().last().expect("rank >= 2");
            let lead = &x.shape()[..x.rank() - 1];
            let mut out = vec![0.0; x.numel() / d];
            kernels::norm_rows_forward(x.data(), &mut out, d);
            (Tensor::from_vec(lead, out)?, d)
        };
        Ok(self.push(out, Rule::VecNorms { input: input.0, d }))
    }

    /// Two-hinge capsule margin loss over class-capsule norms.
    ///
    /// L = sum_k T_k max(0, m_plus - x_k)^2
    ///   + lambda (1 - T_k) max(0, x_k - m_minus)^2, T_k = [k == label].
    pub fn margin_loss(
        &self,
        norms: Val,
        label: usize,
        m_plus: f64,
        m_minus: f64,
        lambda: f64,
    ) -> Result<Val> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[norms.0].value;
            if x.rank() != 1 {
                return Err(err_dim!("margin_loss norms must be a vector, got {:?}", x.shape()));
            }
            if label >= x.numel() {
                return Err(err_arg!(
                    "margin_loss label {label} out of range for {} classes",
                    x.numel()
                ));
            }
            let mut loss = 0.0;
            for (k, &v) in x.data().iter().enumerate() {
                if k == label {
                    let h = (m_plus - v).max(0.0);
                    loss += h * h;
                } else {
                    let h = (v - m_minus).max(0.0);
                    loss += lambda * h * h;
                }
            }
            Tensor::scalar(loss)
        };
        Ok(self.push(out, Rule::MarginLoss { norms: norms.0, label, m_plus, m_minus, lambda }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, input: Val) -> Val {
        let out = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[input.0].value.data().iter().sum())
        };
        self.push(out, Rule::Sum { input: input.0 })
    }

    /// Populates gradients of `output` w.r.t. every reachable node.
    ///
    /// Clears gradients from any previous pass first.
    pub fn backward(&self, output: Val) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[output.0].value.numel() != 1 {
            return Err(err_arg!(
                "backward requires a scalar output, got shape {:?}",
                nodes[output.0].value.shape()
            ));
        }
        for node in nodes.iter_mut() {
            node.value.clear_grad();
        }
        nodes[output.0].value.grad_mut()[0] = 1.0;
        for idx in (0..=output.0).rev() {
            let (before, rest) = nodes.split_at_mut(idx);
            let node = &rest[0];
            if node.value.grad().is_none() {
                continue;
            }
            propagate(before, node);
        }
        Ok(())
    }
}

/// Two disjoint mutable nodes; indices must differ.
fn pair(nodes: &mut [Node], a: usize, b: usize) -> (&mut Node, &mut Node) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = nodes.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn propagate(before: &mut [Node], node: &Node) {
    let dout = node.value.grad().expect("caller checked");
    match node.rule {
        Rule::Leaf => {}
        Rule::Conv2d { input, kernel, geom } => {
            let (xn, wn) = pair(before, input, kernel);
            let (x, dx) = xn.value.data_and_grad_mut();
            let (w, dw) = wn.value.data_and_grad_mut();
            kernels::conv2d_backward(x, w, dout, dx, dw, geom);
        }
        Rule::Conv1dChannels { input, kernel } => {
            let (xn, wn) = pair(before, input, kernel);
            let (x, dx) = xn.value.data_and_grad_mut();
            let (w, dw) = wn.value.data_and_grad_mut();
            kernels::conv1d_backward(x, w, dout, dx, dw);
        }
        Rule::GlobalAvgPool { input, hw } => {
            let (_, dx) = before[input].value.data_and_grad_mut();
            let inv = 1.0 / hw as f64;
            let c = dout.len();
            for row in dx.chunks_exact_mut(c) {
                for (d, &g) in row.iter_mut().zip(dout) {
                    *d += g * inv;
                }
            }
        }
        Rule::Sigmoid { input } => {
            let y = node.value.data();
            let (_, dx) = before[input].value.data_and_grad_mut();
            for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dout) {
                *d += g * yv * (1.0 - yv);
            }
        }
        Rule::Relu { input } => {
            let y = node.value.data();
            let (_, dx) = before[input].value.data_and_grad_mut();
            for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dout) {
                if yv > 0.0 {
                    *d += g;
                }
            }
        }
        Rule::Add { lhs, rhs } => {
            {
                let (_, da) = before[lhs].value.data_and_grad_mut();
                for (d, &g) in da.iter_mut().zip(dout) {
                    *d += g;
                }
            }
            let (_, db) = before[rhs].value.data_and_grad_mut();
            for (d, &g) in db.iter_mut().zip(dout) {
                *d += g;
            }
        }
        Rule::Mul { lhs, rhs } => {
            if lhs == rhs {
                let (x, dx) = before[lhs].value.data_and_grad_mut();
                for ((d, &xv), &g) in dx.iter_mut().zip(x).zip(dout) {
                    *d += 2.0 * xv * g;
                }
            } else {
                let (an, bn) = pair(before, lhs, rhs);
                {
                    let b = bn.value.data();
                    let (_, da) = an.value.data_and_grad_mut();
                    for ((d, &bv), &g) in da.iter_mut().zip(b).zip(dout) {
                        *d += bv * g;
                    }
                }
                let a = an.value.data();
                let (_, db) = bn.value.data_and_grad_mut();
                for ((d, &av), &g) in db.iter_mut().zip(a).zip(dout) {
                    *d += av * g;
                }
            }
        }
        Rule::Scale { input, factor } => {
            let (_, dx) = before[input].value.data_and_grad_mut();
            for (d, &g) in dx.iter_mut().zip(dout) {
                *d += factor * g;
            }
        }
        Rule::SoftmaxLast { input, n } => {
            let y = node.value.data();
            let (_, dx) = before[input].value.data_and_grad_mut();
            kernels::softmax_rows_backward(y, dout, dx, n);
        }
        Rule::Reshape { input } => {
            let (_, dx) = before[input].value.data_and_grad_mut();
            for (d, &g) in dx.iter_mut().zip(dout) {
                *d += g;
            }
        }
        Rule::ChannelScale { map, weights, channels } => {
            let (mn, wn) = pair(before, map, weights);
            let (x, dx) = mn.value.data_and_grad_mut();
            let (m, dm) = wn.value.data_and_grad_mut();
            for (row_x, (row_dx, row_g)) in x
                .chunks_exact(channels)
                .zip(dx.chunks_exact_mut(channels).zip(dout.chunks_exact(channels)))
            {
                for (c, ((&xv, d), &g)) in row_x.iter().zip(row_dx.iter_mut()).zip(row_g).enumerate()
                {
                    *d += m[c] * g;
                    dm[c] += xv * g;
                }
            }
        }
        Rule::SquashVecs { input, d } => {
            let (x, dx) = before[input].value.data_and_grad_mut();
            kernels::squash_rows_backward(x, dout, dx, d);
        }
        Rule::WeightedCapsSum { coeffs, preds, dims } => {
            let (cn, un) = pair(before, coeffs, preds);
            let (c, dc) = cn.value.data_and_grad_mut();
            let (u, du) = un.value.data_and_grad_mut();
            kernels::weighted_caps_sum_backward(c, u, dout, dc, du, dims);
        }
        Rule::CapsAgreement { preds, caps, dims } => {
            let (un, vn) = pair(before, preds, caps);
            let (u, du) = un.value.data_and_grad_mut();
            let (v, dv) = vn.value.data_and_grad_mut();
            kernels::caps_agreement_backward(u, v, dout, du, dv, dims);
        }
        Rule::ConvCapsPredict { grid, weights, geom } => {
            let (gn, wn) = pair(before, grid, weights);
            let (g, dg) = gn.value.data_and_grad_mut();
            let (w, dw) = wn.value.data_and_grad_mut();
            kernels::conv_caps_predict_backward(g, w, dout, dg, dw, geom);
        }
        Rule::FcCapsPredict { grid, weights, dims } => {
            let (gn, wn) = pair(before, grid, weights);
            let (g, dg) = gn.value.data_and_grad_mut();
            let (w, dw) = wn.value.data_and_grad_mut();
            kernels::fc_caps_predict_backward(g, w, dout, dg, dw, dims);
        }
        Rule::VecNorms { input, d } => {
            let y = node.value.data();
            let (x, dx) = before[input].value.data_and_grad_mut();
            kernels::norm_rows_backward(x, y, dout, dx, d);
        }
        Rule::MarginLoss { norms, label, m_plus, m_minus, lambda } => {
            let g = dout[0];
            let (x, dx) = before[norms].value.data_and_grad_mut();
            for (k, (d, &v)) in dx.iter_mut().zip(x.iter()).enumerate() {
                if k == label {
                    *d += g * -2.0 * (m_plus - v).max(0.0);
                } else {
                    *d += g * 2.0 * lambda * (v - m_minus).max(0.0);
                }
            }
        }
        Rule::Sum { input } => {
            let g = dout[0];
            let (_, dx) = before[input].value.data_and_grad_mut();
            for d in dx.iter_mut() {
                *d += g;
            }
        }
    }
}
