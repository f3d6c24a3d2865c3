//! Raw forward/backward loops behind the tape ops.
//!
//! Layout conventions: feature maps are [h, w, c] with the channel axis
//! contiguous; capsule grids are [h, w, n, d] with d contiguous; prediction
//! blocks are [p, i, j, d] with the (j, d) tail contiguous per (p, i) pair.
//! Inner loops run over the contiguous tail so they vectorize.

use crate::fmath;

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Geometry of one 2-D convolution, fixed at record time.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output extent of a padded dilated convolution; `None` when the kernel
/// footprint exceeds the padded input.
pub(crate) fn conv_out_dim(
    extent: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Option<usize> {
    let reach = dilation * (k - 1);
    let padded = extent + 2 * pad;
    if padded <= reach {
        return None;
    }
    Some((padded - reach - 1) / stride + 1)
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], out: &mut [f64], g: ConvGeom) {
    debug_assert_eq!(input.len(), g.h * g.w * g.cin);
    debug_assert_eq!(kernel.len(), g.k * g.k * g.cin * g.cout);
    debug_assert_eq!(out.len(), g.oh * g.ow * g.cout);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let out_row = &mut out[(oy * g.ow + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let in_row = &input[(iy as usize * g.w + ix as usize) * g.cin..][..g.cin];
                    let w_base = (ky * g.k + kx) * g.cin * g.cout;
                    for (ci, &a) in in_row.iter().enumerate() {
                        let w_row = &kernel[w_base + ci * g.cout..][..g.cout];
                        axpy(out_row, a, w_row);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    dinput: &mut [f64],
    dkernel: &mut [f64],
    g: ConvGeom,
) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let dout_row = &dout[(oy * g.ow + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let ii = (iy as usize * g.w + ix as usize) * g.cin;
                    let w_base = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let a = input[ii + ci];
                        let w_row = &kernel[w_base + ci * g.cout..][..g.cout];
                        let dw_row = &mut dkernel[w_base + ci * g.cout..][..g.cout];
                        let mut acc = 0.0;
                        for ((&gout, &wv), dw) in
                            dout_row.iter().zip(w_row).zip(dw_row.iter_mut())
                        {
                            acc += gout * wv;
                            *dw += a * gout;
                        }
                        dinput[ii + ci] += acc;
                    }
                }
            }
        }
    }
}

/// 1-D convolution along the channel axis, zero-padded to keep the length.
pub(crate) fn conv1d_forward(input: &[f64], kernel: &[f64], out: &mut [f64]) {
    let c = input.len();
    let k = kernel.len();
    let half = (k - 1) / 2;
    for j in 0..c {
        let mut acc = 0.0;
        for (t, &wv) in kernel.iter().enumerate() {
            let i = j as isize + t as isize - half as isize;
            if i >= 0 && (i as usize) < c {
                acc += wv * input[i as usize];
            }
        }
        out[j] = acc;
    }
}

pub(crate) fn conv1d_backward(
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    dinput: &mut [f64],
    dkernel: &mut [f64],
) {
    let c = input.len();
    let k = kernel.len();
    let half = (k - 1) / 2;
    for j in 0..c {
        let gout = dout[j];
        for t in 0..k {
            let i = j as isize + t as isize - half as isize;
            if i >= 0 && (i as usize) < c {
                dinput[i as usize] += kernel[t] * gout;
                dkernel[t] += input[i as usize] * gout;
            }
        }
    }
}

/// Softmax over the trailing axis of length `n`, max-subtracted per row.
pub(crate) fn softmax_rows_forward(input: &[f64], out: &mut [f64], n: usize) {
    for (row_in, row_out) in input.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mut m = row_in[0];
        for &x in row_in {
            if x > m {
                m = x;
            }
        }
        let mut sum = 0.0;
        for (o, &x) in row_out.iter_mut().zip(row_in) {
            let e = fmath::exp(x - m);
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in row_out.iter_mut() {
            *o *= inv;
        }
    }
}

pub(crate) fn softmax_rows_backward(out: &[f64], dout: &[f64], dinput: &mut [f64], n: usize) {
    for ((row_y, row_dy), row_dx) in out
        .chunks_exact(n)
        .zip(dout.chunks_exact(n))
        .zip(dinput.chunks_exact_mut(n))
    {
        let s = dot(row_y, row_dy);
        for ((dx, &y), &dy) in row_dx.iter_mut().zip(row_y).zip(row_dy) {
            *dx += y * (dy - s);
        }
    }
}

/// Squash nonlinearity per trailing d-vector: v = s * (|s| / (1 + |s|^2)),
/// with v = 0 at s = 0, so |v| = |s|^2 / (1 + |s|^2) < 1.
pub(crate) fn squash_rows_forward(input: &[f64], out: &mut [f64], d: usize) {
    for (row_s, row_v) in input.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let n2 = dot(row_s, row_s);
        let alpha = fmath::sqrt(n2) / (1.0 + n2);
        for (v, &s) in row_v.iter_mut().zip(row_s) {
            *v = alpha * s;
        }
    }
}

pub(crate) fn squash_rows_backward(input: &[f64], dout: &[f64], dinput: &mut [f64], d: usize) {
    for ((row_s, row_dv), row_ds) in input
        .chunks_exact(d)
        .zip(dout.chunks_exact(d))
        .zip(dinput.chunks_exact_mut(d))
    {
        let n2 = dot(row_s, row_s);
        if n2 == 0.0 {
            continue;
        }
        let n = fmath::sqrt(n2);
        let denom = 1.0 + n2;
        let alpha = n / denom;
        let dalpha_over_n = (1.0 - n2) / (denom * denom * n);
        let sdv = dot(row_s, row_dv);
        for ((ds, &s), &dv) in row_ds.iter_mut().zip(row_s).zip(row_dv) {
            *ds += alpha * dv + dalpha_over_n * sdv * s;
        }
    }
}

/// Euclidean norm per trailing d-vector.
pub(crate) fn norm_rows_forward(input: &[f64], out: &mut [f64], d: usize) {
    for (row, o) in input.chunks_exact(d).zip(out.iter_mut()) {
        *o = fmath::sqrt(dot(row, row));
    }
}

pub(crate) fn norm_rows_backward(
    input: &[f64],
    out: &[f64],
    dout: &[f64],
    dinput: &mut [f64],
    d: usize,
) {
    for ((row_x, row_dx), (&y, &dy)) in input
        .chunks_exact(d)
        .zip(dinput.chunks_exact_mut(d))
        .zip(out.iter().zip(dout))
    {
        if y == 0.0 {
            continue;
        }
        let f = dy / y;
        for (dx, &x) in row_dx.iter_mut().zip(row_x) {
            *dx += f * x;
        }
    }
}

/// Coupling-weighted sum of predictions: s[p,j,:] = sum_i c[p,i,j] u[p,i,j,:].
pub(crate) fn weighted_caps_sum_forward(
    coeffs: &[f64],
    preds: &[f64],
    out: &mut [f64],
    (p, i, j, d): (usize, usize, usize, usize),
) {
    for pp in 0..p {
        let out_block = &mut out[pp * j * d..][..j * d];
        for ii in 0..i {
            let c_row = &coeffs[(pp * i + ii) * j..][..j];
            let u_block = &preds[(pp * i + ii) * j * d..][..j * d];
            for (jj, &cv) in c_row.iter().enumerate() {
                axpy(&mut out_block[jj * d..jj * d + d], cv, &u_block[jj * d..jj * d + d]);
            }
        }
    }
}

pub(crate) fn weighted_caps_sum_backward(
    coeffs: &[f64],
    preds: &[f64],
    dout: &[f64],
    dcoeffs: &mut [f64],
    dpreds: &mut [f64],
    (p, i, j, d): (usize, usize, usize, usize),
) {
    for pp in 0..p {
        let dout_block = &dout[pp * j * d..][..j * d];
        for ii in 0..i {
            let base = (pp * i + ii) * j;
            let u_block = &preds[base * d..][..j * d];
            let du_block = &mut dpreds[base * d..][..j * d];
            for jj in 0..j {
                let ds_row = &dout_block[jj * d..jj * d + d];
                dcoeffs[base + jj] += dot(&u_block[jj * d..jj * d + d], ds_row);
                axpy(&mut du_block[jj * d..jj * d + d], coeffs[base + jj], ds_row);
            }
        }
    }
}

/// Agreement logits: a[p,i,j] = u[p,i,j,:] . v[p,j,:].
pub(crate) fn caps_agreement_forward(
    preds: &[f64],
    caps: &[f64],
    out: &mut [f64],
    (p, i, j, d): (usize, usize, usize, usize),
) {
    for pp in 0..p {
        let v_block = &caps[pp * j * d..][..j * d];
        for ii in 0..i {
            let base = (pp * i + ii) * j;
            let u_block = &preds[base * d..][..j * d];
            for jj in 0..j {
                out[base + jj] = dot(&u_block[jj * d..jj * d + d], &v_block[jj * d..jj * d + d]);
            }
        }
    }
}

pub(crate) fn caps_agreement_backward(
    preds: &[f64],
    caps: &[f64],
    dout: &[f64],
    dpreds: &mut [f64],
    dcaps: &mut [f64],
    (p, i, j, d): (usize, usize, usize, usize),
) {
    for pp in 0..p {
        let v_block = &caps[pp * j * d..][..j * d];
        let dv_block = &mut dcaps[pp * j * d..][..j * d];
        for ii in 0..i {
            let base = (pp * i + ii) * j;
            let u_block = &preds[base * d..][..j * d];
            let du_block = &mut dpreds[base * d..][..j * d];
            for jj in 0..j {
                let da = dout[base + jj];
                axpy(&mut du_block[jj * d..jj * d + d], da, &v_block[jj * d..jj * d + d]);
                axpy(&mut dv_block[jj * d..jj * d + d], da, &u_block[jj * d..jj * d + d]);
            }
        }
    }
}

/// Geometry of a conv-capsule prediction, fixed at record time.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CapsGeom {
    pub gw: usize,
    /// Input capsule types per grid cell.
    pub n: usize,
    /// Input capsule dimension.
    pub d: usize,
    /// Window extent (odd).
    pub e: usize,
    /// Output capsule types.
    pub jn: usize,
    /// Output capsule dimension.
    pub jd: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Prediction vectors for a conv-capsule layer.
///
/// grid: [gh, gw, n, d]; weights: [e, e, n, d, jn, jd] (one d -> jd matrix per
/// window offset, input type, and output type, shared across grid positions);
/// out: [p, i, jn, jd] with p = oh*ow window positions and i = e*e*n window
/// capsules.
pub(crate) fn conv_caps_predict_forward(
    grid: &[f64],
    weights: &[f64],
    out: &mut [f64],
    g: CapsGeom,
) {
    let i_count = g.e * g.e * g.n;
    let tail = g.jn * g.jd;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let p = oy * g.ow + ox;
            for ky in 0..g.e {
                for kx in 0..g.e {
                    let cell = ((oy + ky) * g.gw + (ox + kx)) * g.n;
                    for t in 0..g.n {
                        let i = (ky * g.e + kx) * g.n + t;
                        let g_row = &grid[(cell + t) * g.d..][..g.d];
                        let out_row = &mut out[(p * i_count + i) * tail..][..tail];
                        let w_base = (((ky * g.e + kx) * g.n + t) * g.d) * tail;
                        for (dd, &a) in g_row.iter().enumerate() {
                            axpy(out_row, a, &weights[w_base + dd * tail..][..tail]);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_caps_predict_backward(
    grid: &[f64],
    weights: &[f64],
    dout: &[f64],
    dgrid: &mut [f64],
    dweights: &mut [f64],
    g: CapsGeom,
) {
    let i_count = g.e * g.e * g.n;
    let tail = g.jn * g.jd;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let p = oy * g.ow + ox;
            for ky in 0..g.e {
                for kx in 0..g.e {
                    let cell = ((oy + ky) * g.gw + (ox + kx)) * g.n;
                    for t in 0..g.n {
                        let i = (ky * g.e + kx) * g.n + t;
                        let dout_row = &dout[(p * i_count + i) * tail..][..tail];
                        let w_base = (((ky * g.e + kx) * g.n + t) * g.d) * tail;
                        for dd in 0..g.d {
                            let a = grid[(cell + t) * g.d + dd];
                            dgrid[(cell + t) * g.d + dd] +=
                                dot(&weights[w_base + dd * tail..][..tail], dout_row);
                            axpy(&mut dweights[w_base + dd * tail..][..tail], a, dout_row);
                        }
                    }
                }
            }
        }
    }
}

/// Prediction vectors for a fully connected capsule layer.
///
/// grid: [i, d] flattened input capsules; weights: [i, d, k, jd] (a distinct
/// d -> jd matrix per input capsule and output class); out: [1, i, k, jd].
pub(crate) fn fc_caps_predict_forward(
    grid: &[f64],
    weights: &[f64],
    out: &mut [f64],
    (i, d, k, jd): (usize, usize, usize, usize),
) {
    let tail = k * jd;
    for ii in 0..i {
        let out_row = &mut out[ii * tail..][..tail];
        for dd in 0..d {
            let a = grid[ii * d + dd];
            axpy(out_row, a, &weights[(ii * d + dd) * tail..][..tail]);
        }
    }
}

pub(crate) fn fc_caps_predict_backward(
    grid: &[f64],
    weights: &[f64],
    dout: &[f64],
    dgrid: &mut [f64],
    dweights: &mut [f64],
    (i, d, k, jd): (usize, usize, usize, usize),
) {
    let tail = k * jd;
    for ii in 0..i {
        let dout_row = &dout[ii * tail..][..tail];
        for dd in 0..d {
            let a = grid[ii * d + dd];
            dgrid[ii * d + dd] += dot(&weights[(ii * d + dd) * tail..][..tail], dout_row);
            axpy(&mut dweights[(ii * d + dd) * tail..][..tail], a, dout_row);
        }
    }
}
