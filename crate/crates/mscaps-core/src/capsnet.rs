//! Two-scale capsule network: primary capsules from two kernel sizes,
//! windowed capsule layers routed by agreement, fully connected class
//! capsules, fused by summation and read out by vector norm.

use alloc::vec;
use alloc::vec::Vec;

use crate::afc::{afc_forward, AfcParams, AfcVals};
use crate::error::{err_arg, err_dim, Result};
use crate::fmath;
use crate::tape::{Padding, Tape, Val};
use crate::tensor::Tensor;

/// Patch sizes below this leave one of the two branches without a full
/// routing window after its valid convolutions.
pub const MIN_PATCH: usize = 9;

/// Structural hyperparameters. `c` must be divisible by `d`; the quotient
/// is the number of capsule types per grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsConfig {
    /// Channels per dilated branch in the front end.
    pub c0: usize,
    /// Fused channel count, split into capsules as n * d.
    pub c: usize,
    /// Capsule vector width for primary and windowed layers.
    pub d: usize,
    /// Class capsule vector width.
    pub class_d: usize,
    /// Channel-attention tap count.
    pub attn_k: usize,
    /// Window extent of the capsule conv layer.
    pub conv_caps_extent: usize,
}

impl Default for CapsConfig {
    fn default() -> Self {
        Self { c0: 32, c: 64, d: 8, class_d: 16, attn_k: 3, conv_caps_extent: 3 }
    }
}

impl CapsConfig {
    /// Small shapes for tests and finite-difference checks.
    pub fn toy() -> Self {
        Self { c0: 2, c: 4, d: 2, class_d: 3, attn_k: 3, conv_caps_extent: 3 }
    }

    /// Capsule types per grid cell.
    pub fn n(&self) -> usize {
        self.c / self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.c0 == 0 || self.c == 0 || self.d == 0 || self.class_d == 0 {
            return Err(err_arg!("channel and capsule widths must be positive"));
        }
        if self.c % self.d != 0 {
            return Err(err_arg!(
                "fused channels {} not divisible by capsule width {}",
                self.c,
                self.d
            ));
        }
        if self.attn_k % 2 == 0 {
            return Err(err_arg!("attention taps must be odd, got {}", self.attn_k));
        }
        if self.conv_caps_extent % 2 == 0 {
            return Err(err_arg!(
                "capsule window extent must be odd, got {}",
                self.conv_caps_extent
            ));
        }
        Ok(())
    }
}

/// Margin-loss shape: target class pushed above `m_plus`, others below
/// `m_minus`, with the negative term scaled by `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { m_plus: 0.9, m_minus: 0.1, lambda: 0.5 }
    }
}

/// Grid sizes along the two branches for a given patch size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeChain {
    pub r: usize,
    /// Primary grid side per branch (kernel 3, then kernel 5).
    pub primary: [usize; 2],
    /// Windowed-capsule grid side per branch.
    pub routed: [usize; 2],
    /// Class-capsule input count per branch.
    pub class_inputs: [usize; 2],
}

/// Valid-convolution shape algebra for patch size `r`.
pub fn shape_chain(r: usize, cfg: &CapsConfig) -> Result<ShapeChain> {
    cfg.validate()?;
    if r < MIN_PATCH {
        return Err(err_arg!("patch size {r} below the network minimum {MIN_PATCH}"));
    }
    let e = cfg.conv_caps_extent;
    let p1 = r - 2;
    let p2 = r - 4;
    if p2 < e {
        return Err(err_arg!(
            "patch size {r} leaves a {p2} grid, smaller than the routing window {e}"
        ));
    }
    let r1 = p1 - e + 1;
    let r2 = p2 - e + 1;
    let n = cfg.n();
    Ok(ShapeChain {
        r,
        primary: [p1, p2],
        routed: [r1, r2],
        class_inputs: [r1 * r1 * n, r2 * r2 * n],
    })
}

/// All learnable tensors. Class-capsule weights depend on the patch size,
/// so a parameter set is built for one `r`.
#[derive(Debug, Clone)]
pub struct MsCapsParams {
    pub cfg: CapsConfig,
    pub r: usize,
    pub afc: AfcParams,
    /// Primary capsule kernels: [3,3,c,c] and [5,5,c,c].
    pub primary_kernels: [Tensor; 2],
    /// Windowed-capsule transforms per branch: [e,e,n,d,n,d].
    pub conv_caps_w: [Tensor; 2],
    /// Class-capsule transforms per branch: [inputs,d,2,class_d].
    pub class_caps_w: [Tensor; 2],
}

impl MsCapsParams {
    /// Zero-initialized parameters for patch size `r`.
    pub fn zeros(r: usize, cfg: CapsConfig) -> Result<Self> {
        let chain = shape_chain(r, &cfg)?;
        let (c0, c, n, d, e, cd) =
            (cfg.c0, cfg.c, cfg.n(), cfg.d, cfg.conv_caps_extent, cfg.class_d);
        let afc = AfcParams::new(
            [
                Tensor::zeros(&[3, 3, 1, c0]),
                Tensor::zeros(&[3, 3, 1, c0]),
                Tensor::zeros(&[3, 3, 1, c0]),
            ],
            [
                Tensor::zeros(&[cfg.attn_k]),
                Tensor::zeros(&[cfg.attn_k]),
                Tensor::zeros(&[cfg.attn_k]),
            ],
            [
                Tensor::zeros(&[1, 1, c0, c]),
                Tensor::zeros(&[1, 1, c0, c]),
                Tensor::zeros(&[1, 1, c0, c]),
            ],
        )?;
        Ok(Self {
            cfg,
            r,
            afc,
            primary_kernels: [
                Tensor::zeros(&[3, 3, c, c]),
                Tensor::zeros(&[5, 5, c, c]),
            ],
            conv_caps_w: [
                Tensor::zeros(&[e, e, n, d, n, d]),
                Tensor::zeros(&[e, e, n, d, n, d]),
            ],
            class_caps_w: [
                Tensor::zeros(&[chain.class_inputs[0], d, 2, cd]),
                Tensor::zeros(&[chain.class_inputs[1], d, 2, cd]),
            ],
        })
    }

    /// Canonical tensor order used by initialization and serialization:
    /// front-end kernels, attention taps, match kernels, primary kernels,
    /// windowed transforms, class transforms.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::with_capacity(15);
        v.extend(self.afc.branch_kernels.iter());
        v.extend(self.afc.attn_kernels.iter());
        v.extend(self.afc.match_kernels.iter());
        v.extend(self.primary_kernels.iter());
        v.extend(self.conv_caps_w.iter());
        v.extend(self.class_caps_w.iter());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::with_capacity(15);
        v.extend(self.afc.branch_kernels.iter_mut());
        v.extend(self.afc.attn_kernels.iter_mut());
        v.extend(self.afc.match_kernels.iter_mut());
        v.extend(self.primary_kernels.iter_mut());
        v.extend(self.conv_caps_w.iter_mut());
        v.extend(self.class_caps_w.iter_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Tape handles for the full parameter set.
#[derive(Debug, Clone, Copy)]
pub struct MsCapsVals {
    pub afc: AfcVals,
    pub primary_kernels: [Val; 2],
    pub conv_caps_w: [Val; 2],
    pub class_caps_w: [Val; 2],
}

impl MsCapsVals {
    pub fn load(tape: &Tape, params: &MsCapsParams) -> Self {
        Self {
            afc: AfcVals::load(tape, &params.afc),
            primary_kernels: [
                tape.leaf(params.primary_kernels[0].clone()),
                tape.leaf(params.primary_kernels[1].clone()),
            ],
            conv_caps_w: [
                tape.leaf(params.conv_caps_w[0].clone()),
                tape.leaf(params.conv_caps_w[1].clone()),
            ],
            class_caps_w: [
                tape.leaf(params.class_caps_w[0].clone()),
                tape.leaf(params.class_caps_w[1].clone()),
            ],
        }
    }

    /// Same canonical order as `MsCapsParams::tensors`.
    pub fn vals(&self) -> Vec<Val> {
        let mut v: Vec<Val> = Vec::with_capacity(15);
        v.extend(self.afc.branch_kernels.iter().copied());
        v.extend(self.afc.attn_kernels.iter().copied());
        v.extend(self.afc.match_kernels.iter().copied());
        v.extend(self.primary_kernels.iter().copied());
        v.extend(self.conv_caps_w.iter().copied());
        v.extend(self.class_caps_w.iter().copied());
        v
    }
}

/// Norm-preserving direction with length mapped to [0,1):
/// v = (n^2/(1+n^2)) * s/n, and 0 at s = 0.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let alpha = fmath::sqrt(n2) / (1.0 + n2);
    s.iter().map(|x| x * alpha).collect()
}

/// Valid convolution to n*d channels, regrouped into capsules and squashed.
pub fn primary_caps_forward(tape: &Tape, f: Val, kernel: Val, d: usize) -> Result<Val> {
    let shape = tape.shape(f);
    if shape.len() != 3 {
        return Err(err_dim!("primary capsules expect [h,w,c], got {shape:?}"));
    }
    let kshape = tape.shape(kernel);
    let cout = *kshape.last().ok_or_else(|| err_dim!("empty kernel"))?;
    if d == 0 || cout % d != 0 {
        return Err(err_arg!("channels {cout} not divisible by capsule width {d}"));
    }
    let conv = tape.conv2d(f, kernel, 1, 1, Padding::Valid)?;
    let cshape = tape.shape(conv);
    let grid = tape.reshape(conv, &[cshape[0], cshape[1], cout / d, d])?;
    tape.squash_vecs(grid)
}

/// Agreement routing over predictions [p,i,j,d]: coefficients start
/// uniform, then follow the dot-product agreement between predictions and
/// squashed outputs. Positions along the leading axis route independently.
/// Returns (capsules [p,j,d], final coefficients [p,i,j]).
pub fn dynamic_routing(tape: &Tape, u_hat: Val, iters: usize) -> Result<(Val, Val)> {
    if iters < 1 {
        return Err(err_arg!("routing needs at least one iteration"));
    }
    let shape = tape.shape(u_hat);
    if shape.len() != 4 {
        return Err(err_dim!("routing expects predictions [p,i,j,d], got {shape:?}"));
    }
    let logits_shape = [shape[0], shape[1], shape[2]];
    let mut b = tape.leaf(Tensor::zeros(&logits_shape));
    let mut out = None;
    for it in 0..iters {
        let c = tape.softmax_last(b)?;
        let s = tape.weighted_caps_sum(c, u_hat)?;
        let v = tape.squash_vecs(s)?;
        if it + 1 < iters {
            // The final-iteration logit update would never be read.
            let agreement = tape.caps_agreement(u_hat, v)?;
            b = tape.add(b, agreement)?;
        }
        out = Some((v, c));
    }
    Ok(out.unwrap())
}

/// Windowed capsule layer: each valid window of the grid predicts every
/// output type through the shared transforms, then routes by agreement.
/// Output grid shrinks by extent-1 per side.
pub fn conv_caps_forward(tape: &Tape, grid: Val, w: Val, iters: usize) -> Result<Val> {
    let gshape = tape.shape(grid);
    let wshape = tape.shape(w);
    if wshape.len() != 6 {
        return Err(err_dim!("windowed transforms must be [e,e,n,d,jn,jd], got {wshape:?}"));
    }
    let (e, jn, jd) = (wshape[0], wshape[4], wshape[5]);
    let u_hat = tape.conv_caps_predict(grid, w)?;
    let (v, _) = dynamic_routing(tape, u_hat, iters)?;
    let (oh, ow) = (gshape[0] - e + 1, gshape[1] - e + 1);
    tape.reshape(v, &[oh, ow, jn, jd])
}

/// Fully connected capsule layer: every grid capsule predicts each class
/// through its own transform; one routing pass over all of them.
pub fn class_caps_forward(tape: &Tape, grid: Val, w: Val, iters: usize) -> Result<Val> {
    let gshape = tape.shape(grid);
    let wshape = tape.shape(w);
    if wshape.len() != 4 {
        return Err(err_dim!("class transforms must be [i,d,k,jd], got {wshape:?}"));
    }
    let (inputs, d) = (wshape[0], wshape[1]);
    let numel: usize = gshape.iter().product();
    if numel != inputs * d {
        return Err(err_dim!(
            "grid {gshape:?} does not provide {inputs} capsules of width {d}"
        ));
    }
    let flat = tape.reshape(grid, &[inputs, d])?;
    let u_hat = tape.fc_caps_predict(flat, w)?;
    let (v, _) = dynamic_routing(tape, u_hat, iters)?;
    tape.reshape(v, &[wshape[2], wshape[3]])
}

/// Class from per-class activity norms; an exact tie reads as unchanged.
pub fn classify(norms: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in norms.iter().enumerate().skip(1) {
        if v > norms[best] {
            best = k;
        }
    }
    best
}

/// Sums the two branches' class capsules and reads class activity norms.
pub fn fuse_and_classify(tape: &Tape, v1: Val, v2: Val) -> Result<(Val, Val, usize)> {
    let fused = tape.add(v1, v2)?;
    let norms = tape.vec_norms(fused)?;
    let class = classify(tape.value(norms).data());
    Ok((fused, norms, class))
}

/// One branch: primary capsules at the given kernel, windowed routing,
/// class capsules.
fn branch_forward(
    tape: &Tape,
    features: Val,
    primary_kernel: Val,
    conv_w: Val,
    class_w: Val,
    d: usize,
    iters: usize,
) -> Result<Val> {
    let primary = primary_caps_forward(tape, features, primary_kernel, d)?;
    let routed = conv_caps_forward(tape, primary, conv_w, iters)?;
    class_caps_forward(tape, routed, class_w, iters)
}

/// Output of a full forward pass, kept on the tape for backprop.
#[derive(Debug, Clone, Copy)]
pub struct NetworkOutput {
    pub fused: Val,
    pub norms: Val,
    pub class: usize,
}

/// Full network on one patch already loaded on the tape.
pub fn network_forward(
    tape: &Tape,
    patch: Val,
    params: &MsCapsVals,
    cfg: &CapsConfig,
    iters: usize,
) -> Result<NetworkOutput> {
    let pshape = tape.shape(patch);
    if pshape.len() != 3 || pshape[2] != 1 || pshape[0] != pshape[1] {
        return Err(err_dim!("network input must be [r,r,1], got {pshape:?}"));
    }
    shape_chain(pshape[0], cfg)?;
    let features = afc_forward(tape, patch, &params.afc)?;
    let v1 = branch_forward(
        tape,
        features,
        params.primary_kernels[0],
        params.conv_caps_w[0],
        params.class_caps_w[0],
        cfg.d,
        iters,
    )?;
    let v2 = branch_forward(
        tape,
        features,
        params.primary_kernels[1],
        params.conv_caps_w[1],
        params.class_caps_w[1],
        cfg.d,
        iters,
    )?;
    let (fused, norms, class) = fuse_and_classify(tape, v1, v2)?;
    Ok(NetworkOutput { fused, norms, class })
}

/// Margin loss of a forward pass against a binary label.
pub fn network_loss(
    tape: &Tape,
    patch: Val,
    label: usize,
    params: &MsCapsVals,
    cfg: &CapsConfig,
    loss_cfg: &LossConfig,
    iters: usize,
) -> Result<Val> {
    if label > 1 {
        return Err(err_arg!("label must be 0 or 1, got {label}"));
    }
    let out = network_forward(tape, patch, params, cfg, iters)?;
    tape.margin_loss(out.norms, label, loss_cfg.m_plus, loss_cfg.m_minus, loss_cfg.lambda)
}
