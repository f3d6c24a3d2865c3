//! Adaptive fusion convolution front end: three dilated branches with
//! channel attention, fused by 1x1-matched pixel-wise summation.

use alloc::vec::Vec;

use crate::error::{err_dim, Result};
use crate::tape::{Padding, Tape, Val};
use crate::tensor::Tensor;

/// Parameters of the front end. Branch b runs its 3x3 kernel at dilation
/// b+1, weights channels via a k-tap attention kernel, then projects
/// c0 -> c with a 1x1 kernel so the three branches sum elementwise.
#[derive(Debug, Clone)]
pub struct AfcParams {
    pub branch_kernels: [Tensor; 3],
    pub attn_kernels: [Tensor; 3],
    pub match_kernels: [Tensor; 3],
}

impl AfcParams {
    pub fn new(
        branch_kernels: [Tensor; 3],
        attn_kernels: [Tensor; 3],
        match_kernels: [Tensor; 3],
    ) -> Result<Self> {
        let c0 = branch_kernels[0].shape().get(3).copied().unwrap_or(0);
        let c = match_kernels[0].shape().get(3).copied().unwrap_or(0);
        for k in &branch_kernels {
            if k.shape() != [3, 3, 1, c0] {
                return Err(err_dim!(
                    "branch kernel must be [3,3,1,{}], got {:?}",
                    c0,
                    k.shape()
                ));
            }
        }
        for k in &attn_kernels {
            if k.rank() != 1 || k.shape()[0] % 2 == 0 {
                return Err(err_dim!(
                    "attention kernel must have an odd tap count, got {:?}",
                    k.shape()
                ));
            }
        }
        for k in &match_kernels {
            if k.shape() != [1, 1, c0, c] {
                return Err(err_dim!(
                    "match kernel must be [1,1,{},{}], got {:?}",
                    c0,
                    c,
                    k.shape()
                ));
            }
        }
        Ok(Self { branch_kernels, attn_kernels, match_kernels })
    }

    /// Per-branch channel count before fusion.
    pub fn c0(&self) -> usize {
        self.branch_kernels[0].shape()[3]
    }

    /// Fused channel count.
    pub fn c(&self) -> usize {
        self.match_kernels[0].shape()[3]
    }
}

/// Tape handles for AFC parameters loaded as leaves.
#[derive(Debug, Clone, Copy)]
pub struct AfcVals {
    pub branch_kernels: [Val; 3],
    pub attn_kernels: [Val; 3],
    pub match_kernels: [Val; 3],
}

impl AfcVals {
    pub fn load(tape: &Tape, params: &AfcParams) -> Self {
        let leaf3 = |ts: &[Tensor; 3]| {
            [
                tape.leaf(ts[0].clone()),
                tape.leaf(ts[1].clone()),
                tape.leaf(ts[2].clone()),
            ]
        };
        Self {
            branch_kernels: leaf3(&params.branch_kernels),
            attn_kernels: leaf3(&params.attn_kernels),
            match_kernels: leaf3(&params.match_kernels),
        }
    }
}

/// Rescales every channel of `f_in` by a gate derived from its own global
/// statistics: mean-pool to one value per channel, mix neighboring channels
/// with a 1-D conv, sigmoid to (0,1), multiply back.
pub fn channel_attention(tape: &Tape, f_in: Val, attn_kernel: Val) -> Result<Val> {
    let pooled = tape.global_avg_pool(f_in)?;
    let mixed = tape.conv1d_channels(pooled, attn_kernel)?;
    let gates = tape.sigmoid(mixed);
    tape.channel_scale(f_in, gates)
}

/// Full front end: each branch sees the patch at its own dilation, gates its
/// channels, and is projected to the common width; branches sum pixel-wise.
/// Spatial size is preserved (same padding in every conv).
pub fn afc_forward(tape: &Tape, patch: Val, params: &AfcVals) -> Result<Val> {
    let mut fused: Option<Val> = None;
    for b in 0..3 {
        let feat = tape.conv2d(
            patch,
            params.branch_kernels[b],
            1,
            b + 1,
            Padding::Same,
        )?;
        let gated = channel_attention(tape, feat, params.attn_kernels[b])?;
        let matched = tape.conv2d(gated, params.match_kernels[b], 1, 1, Padding::Same)?;
        fused = Some(match fused {
            Some(acc) => tape.add(acc, matched)?,
            None => matched,
        });
    }
    Ok(fused.unwrap())
}

/// Convenience: load params and run the front end on a bare patch tensor.
pub fn afc_apply(tape: &Tape, patch: Tensor, params: &AfcParams) -> Result<Val> {
    let p = tape.leaf(patch);
    let vals = AfcVals::load(tape, params);
    afc_forward(tape, p, &vals)
}

#[allow(dead_code)]
fn shapes_of(params: &AfcParams) -> Vec<Vec<usize>> {
    let mut v = Vec::new();
    for t in &params.branch_kernels {
        v.push(t.shape().to_vec());
    }
    for t in &params.attn_kernels {
        v.push(t.shape().to_vec());
    }
    for t in &params.match_kernels {
        v.push(t.shape().to_vec());
    }
    v
}
