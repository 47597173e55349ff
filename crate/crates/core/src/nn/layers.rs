//! 3D layer kernels: forward passes and analytic backward passes.
//!
//! Convolutions are lowered to GEMM through an explicit im2col over
//! z-slabs; transposed convolutions GEMM into per-offset rows that are
//! scattered back to the doubled grid. Every parallel loop either owns
//! disjoint output regions or reduces partial buffers in a fixed order,
//! so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use super::tensor::{gemm_rm, Scalar, Tensor5};
use crate::{Error, Result};

/// Spatial elements targeted per GEMM slab; bounds im2col memory.
const SLAB_TARGET: usize = 32768;

fn z_slabs(d: usize, hw: usize) -> Vec<(usize, usize)> {
    let step = (SLAB_TARGET / hw.max(1)).clamp(1, d);
    let mut out = Vec::new();
    let mut z0 = 0;
    while z0 < d {
        let zn = step.min(d - z0);
        out.push((z0, zn));
        z0 += zn;
    }
    out
}

/// im2col for a 3x3x3 stride-1 pad-1 kernel over input z-planes
/// `[z0, z0+zn)` of one batch item. Row `(ci*27 + (dz*3+dy)*3 + dx)`,
/// column `(zz*H + yy)*W + xx`; out-of-bounds taps stay zero.
fn build_col<T: Scalar>(
    xb: &[T],
    ci_n: usize,
    d: usize,
    h: usize,
    wd: usize,
    z0: usize,
    zn: usize,
) -> Vec<T> {
    let hw = h * wd;
    let dhw = d * hw;
    let mc = zn * hw;
    let mut col = vec![T::zero(); ci_n * 27 * mc];
    for ci in 0..ci_n {
        for dz in 0..3usize {
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let row_idx = ci * 27 + (dz * 3 + dy) * 3 + dx;
                    let row = &mut col[row_idx * mc..(row_idx + 1) * mc];
                    for zz in 0..zn {
                        let zi = (z0 + zz) as isize + dz as isize - 1;
                        if zi < 0 || zi >= d as isize {
                            continue;
                        }
                        for yy in 0..h {
                            let yi = yy as isize + dy as isize - 1;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let src = &xb[ci * dhw + zi as usize * hw + yi as usize * wd..][..wd];
                            let dst = &mut row[zz * hw + yy * wd..][..wd];
                            // dst[x] = src[x + dx - 1]
                            match dx {
                                0 => dst[1..].copy_from_slice(&src[..wd - 1]),
                                1 => dst.copy_from_slice(src),
                                _ => dst[..wd - 1].copy_from_slice(&src[1..]),
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

// Kernel layout is (C_out, C_in, 3, 3, 3) for conv and (C_in, C_out, 4, 4, 4)
// for transposed conv.
fn check_conv_shapes<T: Scalar>(x: &Tensor5<T>, w: &Tensor5<T>, ksize: usize) -> Result<()> {
    let [_, ci_x, ..] = x.shape();
    let [s0, s1, k0, k1, k2] = w.shape();
    let ci_w = if ksize == 3 { s1 } else { s0 };
    if (k0, k1, k2) != (ksize, ksize, ksize) {
        return Err(Error::Shape(format!(
            "kernel must be {ksize}^3, got {:?}",
            &w.shape()[2..]
        )));
    }
    if ci_w != ci_x {
        return Err(Error::Shape(format!(
            "kernel expects {ci_w} input channels, tensor has {ci_x}"
        )));
    }
    Ok(())
}

/// 3x3x3 convolution, stride 1, padding 1: output spatial dims equal
/// input spatial dims. Kernel layout `(C_out, C_in, 3, 3, 3)`.
pub fn conv3d_forward<T: Scalar>(x: &Tensor5<T>, w: &Tensor5<T>) -> Result<Tensor5<T>> {
    check_conv_shapes(x, w, 3)?;
    let [n_n, ci_n, d, h, wd] = x.shape();
    let co_n = w.shape()[0];
    let hw = h * wd;
    let dhw = d * hw;
    let k = ci_n * 27;
    let slabs = z_slabs(d, hw);

    let tasks: Vec<(usize, usize, usize)> = (0..n_n)
        .flat_map(|n| slabs.iter().map(move |&(z0, zn)| (n, z0, zn)))
        .collect();
    let parts: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(n, z0, zn)| {
            let col = build_col(x.batch_slice(n), ci_n, d, h, wd, z0, zn);
            let mc = zn * hw;
            let mut out = vec![T::zero(); co_n * mc];
            gemm_rm(co_n, k, mc, w.data(), &col, T::zero(), &mut out);
            out
        })
        .collect();

    let mut y = Tensor5::zeros([n_n, co_n, d, h, wd]);
    for (&(n, z0, zn), part) in tasks.iter().zip(&parts) {
        let mc = zn * hw;
        let yb = &mut y.data_mut()[n * co_n * dhw..(n + 1) * co_n * dhw];
        for co in 0..co_n {
            yb[co * dhw + z0 * hw..][..mc].copy_from_slice(&part[co * mc..(co + 1) * mc]);
        }
    }
    Ok(y)
}

/// Kernel with swapped channel roles and flipped taps: convolving the
/// output gradient with it yields the input gradient.
fn flip_transpose<T: Scalar>(w: &Tensor5<T>) -> Tensor5<T> {
    let [co_n, ci_n, ..] = w.shape();
    let mut out = Tensor5::zeros([ci_n, co_n, 3, 3, 3]);
    for co in 0..co_n {
        for ci in 0..ci_n {
            for dz in 0..3 {
                for dy in 0..3 {
                    for dx in 0..3 {
                        *out.at_mut(ci, co, 2 - dz, 2 - dy, 2 - dx) = w.at(co, ci, dz, dy, dx);
                    }
                }
            }
        }
    }
    out
}

/// Exact gradients of [`conv3d_forward`] with respect to input and kernel.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    gy: &Tensor5<T>,
) -> Result<(Tensor5<T>, Tensor5<T>)> {
    check_conv_shapes(x, w, 3)?;
    let [n_n, ci_n, d, h, wd] = x.shape();
    let co_n = w.shape()[0];
    if gy.shape() != [n_n, co_n, d, h, wd] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match forward output",
            gy.shape()
        )));
    }
    let gx = conv3d_forward(gy, &flip_transpose(w))?;

    let hw = h * wd;
    let dhw = d * hw;
    let k = ci_n * 27;
    let slabs = z_slabs(d, hw);
    let tasks: Vec<(usize, usize, usize)> = (0..n_n)
        .flat_map(|n| slabs.iter().map(move |&(z0, zn)| (n, z0, zn)))
        .collect();
    // per-slab gw^T (k x co), reduced in task order
    let parts: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(n, z0, zn)| {
            let col = build_col(x.batch_slice(n), ci_n, d, h, wd, z0, zn);
            let mc = zn * hw;
            let mut gwt = vec![T::zero(); k * co_n];
            let gyb = gy.batch_slice(n);
            unsafe {
                T::gemm(
                    k,
                    mc,
                    co_n,
                    T::one(),
                    col.as_ptr(),
                    mc as isize,
                    1,
                    gyb.as_ptr().add(z0 * hw),
                    1,
                    dhw as isize,
                    T::zero(),
                    gwt.as_mut_ptr(),
                    co_n as isize,
                    1,
                );
            }
            gwt
        })
        .collect();

    let mut gwt_total = vec![T::zero(); k * co_n];
    for part in &parts {
        for (a, b) in gwt_total.iter_mut().zip(part) {
            *a += *b;
        }
    }
    let mut gw = Tensor5::zeros(w.shape());
    let gw_data = gw.data_mut();
    for kk in 0..k {
        for co in 0..co_n {
            gw_data[co * k + kk] = gwt_total[kk * co_n + co];
        }
    }
    Ok((gx, gw))
}

/// 4x4x4 transposed convolution, stride 2, padding 1: output spatial
/// dims are exactly doubled. Kernel layout `(C_in, C_out, 4, 4, 4)`.
/// The forward map is the adjoint of a stride-2 4x4x4 convolution that
/// shares the kernel.
pub fn deconv3d_forward<T: Scalar>(x: &Tensor5<T>, w: &Tensor5<T>) -> Result<Tensor5<T>> {
    check_conv_shapes(x, w, 4)?;
    let [n_n, ci_n, d, h, wd] = x.shape();
    let co_n = w.shape()[1];
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let hw = h * wd;
    let dhw = d * hw;
    let (ohow, odhw) = (oh * ow, od * oh * ow);
    let slabs = z_slabs(d, hw);

    // each (n, co) task owns output channel (n, co); GEMM produces the 64
    // per-offset rows which are then scattered onto the doubled grid
    let tasks: Vec<(usize, usize)> = (0..n_n)
        .flat_map(|n| (0..co_n).map(move |co| (n, co)))
        .collect();
    let parts: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(n, co)| {
            let xb = x.batch_slice(n);
            let mut ychan = vec![T::zero(); odhw];
            for &(z0, zn) in &slabs {
                let mc = zn * hw;
                let mut cols = vec![T::zero(); 64 * mc];
                unsafe {
                    // A[off][ci] = w[ci][co][off], strided view of the kernel
                    T::gemm(
                        64,
                        ci_n,
                        mc,
                        T::one(),
                        w.data().as_ptr().add(co * 64),
                        1,
                        (co_n * 64) as isize,
                        xb.as_ptr().add(z0 * hw),
                        dhw as isize,
                        1,
                        T::zero(),
                        cols.as_mut_ptr(),
                        mc as isize,
                        1,
                    );
                }
                for off in 0..64usize {
                    let (dz, dy, dx) = (off / 16, (off / 4) % 4, off % 4);
                    let row = &cols[off * mc..(off + 1) * mc];
                    for zz in 0..zn {
                        let zo = 2 * (z0 + zz) as isize + dz as isize - 1;
                        if zo < 0 || zo >= od as isize {
                            continue;
                        }
                        for yy in 0..h {
                            let yo = 2 * yy as isize + dy as isize - 1;
                            if yo < 0 || yo >= oh as isize {
                                continue;
                            }
                            let src = &row[zz * hw + yy * wd..][..wd];
                            let dst_base = zo as usize * ohow + yo as usize * ow;
                            // xo = 2*xx + dx - 1
                            let xx0 = usize::from(dx == 0);
                            let xx1 = if dx == 3 { wd - 1 } else { wd };
                            for (xx, &v) in src.iter().enumerate().take(xx1).skip(xx0) {
                                let xo = 2 * xx + dx - 1;
                                ychan[dst_base + xo] += v;
                            }
                        }
                    }
                }
            }
            ychan
        })
        .collect();

    let mut y = Tensor5::zeros([n_n, co_n, od, oh, ow]);
    for (&(n, co), part) in tasks.iter().zip(&parts) {
        y.data_mut()[(n * co_n + co) * odhw..][..odhw].copy_from_slice(part);
    }
    Ok(y)
}

/// Gather of the output gradient into per-offset rows: entry
/// `[(co*64+off), m]` holds `gy` at the voxel that input position `m`
/// touches through tap `off`, or zero outside the grid.
fn build_cols_g<T: Scalar>(
    gyb: &[T],
    co_n: usize,
    d: usize,
    h: usize,
    wd: usize,
    z0: usize,
    zn: usize,
) -> Vec<T> {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let (ohow, odhw) = (oh * ow, od * oh * ow);
    let hw = h * wd;
    let mc = zn * hw;
    let mut cols = vec![T::zero(); co_n * 64 * mc];
    for co in 0..co_n {
        for off in 0..64usize {
            let (dz, dy, dx) = (off / 16, (off / 4) % 4, off % 4);
            let row = &mut cols[(co * 64 + off) * mc..(co * 64 + off + 1) * mc];
            for zz in 0..zn {
                let zo = 2 * (z0 + zz) as isize + dz as isize - 1;
                if zo < 0 || zo >= od as isize {
                    continue;
                }
                for yy in 0..h {
                    let yo = 2 * yy as isize + dy as isize - 1;
                    if yo < 0 || yo >= oh as isize {
                        continue;
                    }
                    let src = &gyb[co * odhw + zo as usize * ohow + yo as usize * ow..][..ow];
                    let dst = &mut row[zz * hw + yy * wd..][..wd];
                    let xx0 = usize::from(dx == 0);
                    let xx1 = if dx == 3 { wd - 1 } else { wd };
                    for (xx, slot) in dst.iter_mut().enumerate().take(xx1).skip(xx0) {
                        *slot = src[2 * xx + dx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Exact gradients of [`deconv3d_forward`].
pub fn deconv3d_backward<T: Scalar>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    gy: &Tensor5<T>,
) -> Result<(Tensor5<T>, Tensor5<T>)> {
    check_conv_shapes(x, w, 4)?;
    let [n_n, ci_n, d, h, wd] = x.shape();
    let co_n = w.shape()[1];
    if gy.shape() != [n_n, co_n, 2 * d, 2 * h, 2 * wd] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match doubled forward output",
            gy.shape()
        )));
    }
    let hw = h * wd;
    let dhw = d * hw;
    let k64 = co_n * 64;
    let slabs = z_slabs(d, hw);
    let tasks: Vec<(usize, usize, usize)> = (0..n_n)
        .flat_map(|n| slabs.iter().map(move |&(z0, zn)| (n, z0, zn)))
        .collect();

    let parts: Vec<(Vec<T>, Vec<T>)> = tasks
        .par_iter()
        .map(|&(n, z0, zn)| {
            let mc = zn * hw;
            let cols = build_cols_g(gy.batch_slice(n), co_n, d, h, wd, z0, zn);
            // gx slab (ci x mc) = w (ci x co*64) . cols
            let mut gx_part = vec![T::zero(); ci_n * mc];
            gemm_rm(ci_n, k64, mc, w.data(), &cols, T::zero(), &mut gx_part);
            // gw^T slab (co*64 x ci) = cols . x_slab^T
            let mut gwt = vec![T::zero(); k64 * ci_n];
            let xb = x.batch_slice(n);
            unsafe {
                T::gemm(
                    k64,
                    mc,
                    ci_n,
                    T::one(),
                    cols.as_ptr(),
                    mc as isize,
                    1,
                    xb.as_ptr().add(z0 * hw),
                    1,
                    dhw as isize,
                    T::zero(),
                    gwt.as_mut_ptr(),
                    ci_n as isize,
                    1,
                );
            }
            (gx_part, gwt)
        })
        .collect();

    let mut gx = Tensor5::zeros(x.shape());
    let mut gwt_total = vec![T::zero(); k64 * ci_n];
    for (&(n, z0, zn), (gx_part, gwt)) in tasks.iter().zip(&parts) {
        let mc = zn * hw;
        let gxb = &mut gx.data_mut()[n * ci_n * dhw..(n + 1) * ci_n * dhw];
        for ci in 0..ci_n {
            gxb[ci * dhw + z0 * hw..][..mc].copy_from_slice(&gx_part[ci * mc..(ci + 1) * mc]);
        }
        for (a, b) in gwt_total.iter_mut().zip(gwt) {
            *a += *b;
        }
    }
    let mut gw = Tensor5::zeros(w.shape());
    let gw_data = gw.data_mut();
    for ci in 0..ci_n {
        for co in 0..co_n {
            for off in 0..64 {
                gw_data[(ci * co_n + co) * 64 + off] = gwt_total[(co * 64 + off) * ci_n + ci];
            }
        }
    }
    Ok((gx, gw))
}

/// 2x2x2 max pooling with stride 2. Returns the pooled tensor and, per
/// output element, the flat index of its argmax in the input; ties break
/// toward the lowest linear index.
pub fn maxpool3d_forward<T: Scalar>(x: &Tensor5<T>) -> Result<(Tensor5<T>, Vec<u32>)> {
    let [n_n, c_n, d, h, wd] = x.shape();
    if d % 2 != 0 || h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::Shape(format!(
            "pooling needs even spatial dims, got {d}x{h}x{wd}"
        )));
    }
    assert!(x.len() < u32::MAX as usize);
    let (pd, ph, pw) = (d / 2, h / 2, wd / 2);
    let (hw, dhw) = (h * wd, d * h * wd);
    let (phw, pdhw) = (ph * pw, pd * ph * pw);
    let mut y = Tensor5::zeros([n_n, c_n, pd, ph, pw]);
    let mut argmax = vec![0u32; n_n * c_n * pdhw];

    let xd = x.data();
    y.data_mut()
        .par_chunks_mut(pdhw)
        .zip(argmax.par_chunks_mut(pdhw))
        .enumerate()
        .for_each(|(chan, (yc, ac))| {
            let base = chan * dhw;
            let mut o = 0;
            for zo in 0..pd {
                for yo in 0..ph {
                    for xo in 0..pw {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for dz in 0..2usize {
                            for dy in 0..2usize {
                                for dx in 0..2usize {
                                    let idx =
                                        base + (2 * zo + dz) * hw + (2 * yo + dy) * wd + (2 * xo + dx);
                                    let v = xd[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        yc[o] = best;
                        ac[o] = best_idx as u32;
                        o += 1;
                    }
                }
            }
        });
    let _ = phw;
    Ok((y, argmax))
}

/// Routes each output gradient to its stored argmax position.
pub fn maxpool3d_backward<T: Scalar>(
    input_shape: [usize; 5],
    argmax: &[u32],
    gy: &Tensor5<T>,
) -> Tensor5<T> {
    let [_, _, d, h, wd] = input_shape;
    let dhw = d * h * wd;
    let pdhw = dhw / 8;
    assert_eq!(gy.channel_len(), pdhw);
    let mut gx = Tensor5::zeros(input_shape);
    let gyd = gy.data();
    gx.data_mut()
        .par_chunks_mut(dhw)
        .enumerate()
        .for_each(|(chan, gxc)| {
            let in_base = chan * dhw;
            let out_base = chan * pdhw;
            for o in 0..pdhw {
                gxc[argmax[out_base + o] as usize - in_base] += gyd[out_base + o];
            }
        });
    gx
}

/// Elementwise `max(0, x)`.
pub fn relu_forward<T: Scalar>(x: &Tensor5<T>) -> Tensor5<T> {
    let mut y = x.clone();
    y.data_mut().par_chunks_mut(1 << 16).for_each(|chunk| {
        for v in chunk {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    });
    y
}

/// Gradient is passed where the forward input was strictly positive and
/// zeroed elsewhere; the subgradient at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor5<T>, gy: &Tensor5<T>) -> Tensor5<T> {
    assert_eq!(x.shape(), gy.shape());
    let mut gx = gy.clone();
    let xd = x.data();
    gx.data_mut()
        .par_chunks_mut(1 << 16)
        .enumerate()
        .for_each(|(i, chunk)| {
            let base = i << 16;
            for (j, v) in chunk.iter_mut().enumerate() {
                if !(xd[base + j] > T::zero()) {
                    *v = T::zero();
                }
            }
        });
    gx
}

/// Per-channel running statistics for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// False until at least one training-mode pass has updated the stats
    /// (or weights were loaded from a file that carried them).
    pub ready: bool,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            ready: false,
        }
    }
}

/// Values cached by the training-mode forward pass for the backward pass.
pub struct BnCache<T> {
    pub xhat: Tensor5<T>,
    pub inv_std: Vec<T>,
}

fn bn_channel_stats<T: Scalar>(x: &Tensor5<T>) -> (Vec<T>, Vec<T>) {
    let [n_n, c_n, ..] = x.shape();
    let s = x.channel_len();
    let m = T::from_f64((n_n * s) as f64);
    let stats: Vec<(T, T)> = (0..c_n)
        .into_par_iter()
        .map(|c| {
            let mut sum = T::zero();
            for n in 0..n_n {
                let chan = &x.batch_slice(n)[c * s..(c + 1) * s];
                for &v in chan {
                    sum += v;
                }
            }
            let mean = sum / m;
            let mut sq = T::zero();
            for n in 0..n_n {
                let chan = &x.batch_slice(n)[c * s..(c + 1) * s];
                for &v in chan {
                    let dv = v - mean;
                    sq += dv * dv;
                }
            }
            (mean, sq / m)
        })
        .collect();
    stats.into_iter().unzip()
}

/// Training-mode batch normalization over `(N, D, H, W)` per channel,
/// with running-stat update `running = momentum*running + (1-momentum)*batch`.
pub fn batchnorm3d_train<T: Scalar>(
    x: &Tensor5<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
    momentum: T,
    running: &mut RunningStats<T>,
) -> (Tensor5<T>, BnCache<T>) {
    let c_n = x.channels();
    assert_eq!(gamma.len(), c_n);
    assert_eq!(beta.len(), c_n);
    let (mean, var) = bn_channel_stats(x);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let s = x.channel_len();
    let mut xhat = x.clone();
    let mut y = Tensor5::zeros(x.shape());
    xhat.data_mut()
        .par_chunks_mut(s)
        .zip(y.data_mut().par_chunks_mut(s))
        .enumerate()
        .for_each(|(chunk, (xh, yc))| {
            let c = chunk % c_n;
            let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for (xv, yv) in xh.iter_mut().zip(yc.iter_mut()) {
                *xv = (*xv - mu) * is;
                *yv = g * *xv + b;
            }
        });

    let one_minus = T::one() - momentum;
    for c in 0..c_n {
        running.mean[c] = momentum * running.mean[c] + one_minus * mean[c];
        running.var[c] = momentum * running.var[c] + one_minus * var[c];
    }
    running.ready = true;
    (y, BnCache { xhat, inv_std })
}

/// Eval-mode batch normalization using running statistics. Errors when no
/// training pass has populated them yet.
pub fn batchnorm3d_eval<T: Scalar>(
    x: &Tensor5<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
    running: &RunningStats<T>,
) -> Result<Tensor5<T>> {
    if !running.ready {
        return Err(Error::Data(
            "batchnorm eval before any running stats exist; train or load weights first".into(),
        ));
    }
    let c_n = x.channels();
    let s = x.channel_len();
    // y = a*x + b with per-channel constants
    let a: Vec<T> = (0..c_n)
        .map(|c| gamma[c] / (running.var[c] + eps).sqrt())
        .collect();
    let b: Vec<T> = (0..c_n)
        .map(|c| beta[c] - running.mean[c] * a[c])
        .collect();
    let mut y = x.clone();
    y.data_mut().par_chunks_mut(s).enumerate().for_each(|(chunk, yc)| {
        let c = chunk % c_n;
        let (ac, bc) = (a[c], b[c]);
        for v in yc {
            *v = ac * *v + bc;
        }
    });
    Ok(y)
}

/// Gradients of [`batchnorm3d_train`] with respect to input, gamma, beta.
pub fn batchnorm3d_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    gy: &Tensor5<T>,
) -> (Tensor5<T>, Vec<T>, Vec<T>) {
    let [n_n, c_n, ..] = gy.shape();
    let s = gy.channel_len();
    let m = T::from_f64((n_n * s) as f64);

    let sums: Vec<(T, T)> = (0..c_n)
        .into_par_iter()
        .map(|c| {
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for n in 0..n_n {
                let g = &gy.batch_slice(n)[c * s..(c + 1) * s];
                let xh = &cache.xhat.batch_slice(n)[c * s..(c + 1) * s];
                for (gv, xv) in g.iter().zip(xh) {
                    sg += *gv;
                    sgx += *gv * *xv;
                }
            }
            (sg, sgx)
        })
        .collect();
    let dbeta: Vec<T> = sums.iter().map(|&(sg, _)| sg).collect();
    let dgamma: Vec<T> = sums.iter().map(|&(_, sgx)| sgx).collect();

    let mut gx = Tensor5::zeros(gy.shape());
    let gyd = gy.data();
    let xhd = cache.xhat.data();
    gx.data_mut()
        .par_chunks_mut(s)
        .enumerate()
        .for_each(|(chunk, gxc)| {
            let c = chunk % c_n;
            let scale = gamma[c] * cache.inv_std[c];
            let mean_g = dbeta[c] / m;
            let mean_gx = dgamma[c] / m;
            let base = chunk * s;
            for (j, v) in gxc.iter_mut().enumerate() {
                let g = gyd[base + j];
                let xh = xhd[base + j];
                *v = scale * (g - mean_g - xh * mean_gx);
            }
        });
    (gx, dgamma, dbeta)
}

/// Voxel-wise softmax cross-entropy over the channel axis.
///
/// Returns the mean loss over all `N*D*H*W` voxels and
/// `grad = (softmax - onehot) / num_voxels`, stabilized by per-voxel
/// max subtraction.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor5<T>,
    targets: &[u8],
) -> Result<(f64, Tensor5<T>)> {
    let [n_n, c_n, d, h, wd] = logits.shape();
    let s = d * h * wd;
    let m = n_n * s;
    if targets.len() != m {
        return Err(Error::Shape(format!(
            "{} targets for {m} voxels",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c_n) {
        return Err(Error::Data(format!(
            "target class {bad} out of range for {c_n} channels"
        )));
    }

    let ld = logits.data();
    // per-voxel log-sum-exp, flat over (n, spatial)
    let mut lse = vec![T::zero(); m];
    let loss_parts: Vec<f64> = lse
        .par_chunks_mut(8192)
        .enumerate()
        .map(|(chunk, out)| {
            let base = chunk * 8192;
            let mut part = 0.0f64;
            for (j, slot) in out.iter_mut().enumerate() {
                let v = base + j;
                let (n, sp) = (v / s, v % s);
                let voxel = n * c_n * s + sp;
                let mut mx = ld[voxel];
                for c in 1..c_n {
                    let x = ld[voxel + c * s];
                    if x > mx {
                        mx = x;
                    }
                }
                let mut sum = T::zero();
                for c in 0..c_n {
                    sum += (ld[voxel + c * s] - mx).exp();
                }
                let l = mx + sum.ln();
                *slot = l;
                part += (l - ld[voxel + targets[v] as usize * s]).to_f64();
            }
            part
        })
        .collect();
    let loss = loss_parts.iter().sum::<f64>() / m as f64;

    let inv_m = T::from_f64(1.0 / m as f64);
    let mut grad = Tensor5::zeros(logits.shape());
    grad.data_mut()
        .par_chunks_mut(s)
        .enumerate()
        .for_each(|(chunk, gc)| {
            let (n, c) = (chunk / c_n, chunk % c_n);
            let base = chunk * s;
            for (sp, v) in gc.iter_mut().enumerate() {
                let flat = n * s + sp;
                let p = (ld[base + sp] - lse[flat]).exp();
                let onehot = if targets[flat] as usize == c { T::one() } else { T::zero() };
                *v = (p - onehot) * inv_m;
            }
        });
    Ok((loss, grad))
}

/// 1x1x1 convolution (per-voxel linear map) with bias; used by the
/// prediction heads.
pub fn conv1x1_forward<T: Scalar>(x: &Tensor5<T>, w: &Tensor5<T>, bias: &[T]) -> Tensor5<T> {
    let [n_n, ci_n, d, h, wd] = x.shape();
    let [co_n, wci, ..] = w.shape();
    assert_eq!(wci, ci_n);
    assert_eq!(bias.len(), co_n);
    let s = d * h * wd;
    let mut y = Tensor5::zeros([n_n, co_n, d, h, wd]);
    for n in 0..n_n {
        let yb = &mut y.data_mut()[n * co_n * s..(n + 1) * co_n * s];
        gemm_rm(co_n, ci_n, s, w.data(), x.batch_slice(n), T::zero(), yb);
        for co in 0..co_n {
            let b = bias[co];
            for v in &mut yb[co * s..(co + 1) * s] {
                *v += b;
            }
        }
    }
    y
}

/// Gradients of [`conv1x1_forward`]: input, weight, bias.
pub fn conv1x1_backward<T: Scalar>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    gy: &Tensor5<T>,
) -> (Tensor5<T>, Tensor5<T>, Vec<T>) {
    let [n_n, ci_n, d, h, wd] = x.shape();
    let co_n = w.shape()[0];
    let s = d * h * wd;
    let mut gx = Tensor5::zeros(x.shape());
    let mut gw = Tensor5::zeros(w.shape());
    let mut gb = vec![T::zero(); co_n];
    for n in 0..n_n {
        let gyb = gy.batch_slice(n);
        // gx = w^T . gy
        let gxb = &mut gx.data_mut()[n * ci_n * s..(n + 1) * ci_n * s];
        unsafe {
            T::gemm(
                ci_n,
                co_n,
                s,
                T::one(),
                w.data().as_ptr(),
                1,
                ci_n as isize,
                gyb.as_ptr(),
                s as isize,
                1,
                T::zero(),
                gxb.as_mut_ptr(),
                s as isize,
                1,
            );
        }
        // gw += gy . x^T
        unsafe {
            T::gemm(
                co_n,
                s,
                ci_n,
                T::one(),
                gyb.as_ptr(),
                s as isize,
                1,
                x.batch_slice(n).as_ptr(),
                1,
                s as isize,
                T::one(),
                gw.data_mut().as_mut_ptr(),
                ci_n as isize,
                1,
            );
        }
        for co in 0..co_n {
            for &g in &gyb[co * s..(co + 1) * s] {
                gb[co] += g;
            }
        }
    }
    (gx, gw, gb)
}
