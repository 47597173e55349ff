//! Naive reference implementations of the 3D kernels.
//!
//! Direct nested-loop translations of the layer definitions, kept
//! deliberately independent of the optimized implementations in
//! [`super::layers`]. Tests and benches use them as oracles; nothing in
//! the production path calls into this module.

use super::tensor::{Scalar, Tensor5};

/// Stride-1, padding-1 convolution with 3x3x3 kernels, six nested loops.
pub fn naive_conv3d_forward<T: Scalar>(x: &Tensor5<T>, w: &Tensor5<T>) -> Tensor5<T> {
    let [n_n, ci_n, d, h, wd] = x.shape();
    let [co_n, wci, k0, k1, k2] = w.shape();
    assert_eq!((wci, k0, k1, k2), (ci_n, 3, 3, 3));
    let mut y = Tensor5::zeros([n_n, co_n, d, h, wd]);
    for n in 0..n_n {
        for co in 0..co_n {
            for zo in 0..d {
                for yo in 0..h {
                    for xo in 0..wd {
                        let mut acc = T::zero();
                        for ci in 0..ci_n {
                            for dz in 0..3usize {
                                for dy in 0..3usize {
                                    for dx in 0..3usize {
                                        let zi = zo as isize + dz as isize - 1;
                                        let yi = yo as isize + dy as isize - 1;
                                        let xi = xo as isize + dx as isize - 1;
                                        if zi < 0 || yi < 0 || xi < 0 {
                                            continue;
                                        }
                                        let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                        if zi >= d || yi >= h || xi >= wd {
                                            continue;
                                        }
                                        acc += w.at(co, ci, dz, dy, dx) * x.at(n, ci, zi, yi, xi);
                                    }
                                }
                            }
                        }
                        *y.at_mut(n, co, zo, yo, xo) = acc;
                    }
                }
            }
        }
    }
    y
}

/// Gradients of [`naive_conv3d_forward`] by direct accumulation.
pub fn naive_conv3d_backward<T: Scalar>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    gy: &Tensor5<T>,
) -> (Tensor5<T>, Tensor5<T>) {
    let [n_n, ci_n, d, h, wd] = x.shape();
    let [co_n, ..] = w.shape();
    let mut gx = Tensor5::zeros(x.shape());
    let mut gw = Tensor5::zeros(w.shape());
    for n in 0..n_n {
        for co in 0..co_n {
            for zo in 0..d {
                for yo in 0..h {
                    for xo in 0..wd {
                        let g = gy.at(n, co, zo, yo, xo);
                        for ci in 0..ci_n {
                            for dz in 0..3usize {
                                for dy in 0..3usize {
                                    for dx in 0..3usize {
                                        let zi = zo as isize + dz as isize - 1;
                                        let yi = yo as isize + dy as isize - 1;
                                        let xi = xo as isize + dx as isize - 1;
                                        if zi < 0 || yi < 0 || xi < 0 {
                                            continue;
                                        }
                                        let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                        if zi >= d || yi >= h || xi >= wd {
                                            continue;
                                        }
                                        *gx.at_mut(n, ci, zi, yi, xi) += w.at(co, ci, dz, dy, dx) * g;
                                        *gw.at_mut(co, ci, dz, dy, dx) += x.at(n, ci, zi, yi, xi) * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Stride-2, padding-1 convolution with 4x4x4 kernels. The kernel layout
/// `(C_in, C_out, 4, 4, 4)` matches the transposed-convolution weights:
/// this operator is the adjoint of `deconv3d_forward` under the shared
/// kernel, contracting an output-resolution tensor back to input
/// resolution.
pub fn naive_strided_conv3d<T: Scalar>(y: &Tensor5<T>, w: &Tensor5<T>) -> Tensor5<T> {
    let [n_n, co_n, od, oh, ow] = y.shape();
    let [ci_n, wco, k0, k1, k2] = w.shape();
    assert_eq!((wco, k0, k1, k2), (co_n, 4, 4, 4));
    assert!(od % 2 == 0 && oh % 2 == 0 && ow % 2 == 0);
    let (d, h, wd) = (od / 2, oh / 2, ow / 2);
    let mut out = Tensor5::zeros([n_n, ci_n, d, h, wd]);
    for n in 0..n_n {
        for ci in 0..ci_n {
            for zi in 0..d {
                for yi in 0..h {
                    for xi in 0..wd {
                        let mut acc = T::zero();
                        for co in 0..co_n {
                            for dz in 0..4usize {
                                for dy in 0..4usize {
                                    for dx in 0..4usize {
                                        let zo = 2 * zi as isize + dz as isize - 1;
                                        let yo = 2 * yi as isize + dy as isize - 1;
                                        let xo = 2 * xi as isize + dx as isize - 1;
                                        if zo < 0 || yo < 0 || xo < 0 {
                                            continue;
                                        }
                                        let (zo, yo, xo) = (zo as usize, yo as usize, xo as usize);
                                        if zo >= od || yo >= oh || xo >= ow {
                                            continue;
                                        }
                                        acc += w.at(ci, co, dz, dy, dx) * y.at(n, co, zo, yo, xo);
                                    }
                                }
                            }
                        }
                        *out.at_mut(n, ci, zi, yi, xi) = acc;
                    }
                }
            }
        }
    }
    out
}

/// Block-max pooling oracle: each 2x2x2 block reduced independently.
pub fn naive_maxpool3d<T: Scalar>(x: &Tensor5<T>) -> Tensor5<T> {
    let [n_n, c_n, d, h, wd] = x.shape();
    assert!(d % 2 == 0 && h % 2 == 0 && wd % 2 == 0);
    let mut y = Tensor5::zeros([n_n, c_n, d / 2, h / 2, wd / 2]);
    for n in 0..n_n {
        for c in 0..c_n {
            for zo in 0..d / 2 {
                for yo in 0..h / 2 {
                    for xo in 0..wd / 2 {
                        let mut m = T::neg_infinity();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let v = x.at(n, c, 2 * zo + dz, 2 * yo + dy, 2 * xo + dx);
                                    if v > m {
                                        m = v;
                                    }
                                }
                            }
                        }
                        *y.at_mut(n, c, zo, yo, xo) = m;
                    }
                }
            }
        }
    }
    y
}

/// Central finite differences of `f` with respect to `values[i]`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    values: &mut Vec<f64>,
    i: usize,
    step: f64,
) -> f64 {
    let orig = values[i];
    values[i] = orig + step;
    let fp = f(values);
    values[i] = orig - step;
    let fm = f(values);
    values[i] = orig;
    (fp - fm) / (2.0 * step)
}

/// Relative-error comparison used by all gradient checks: exact relative
/// error for gradients of useful magnitude, absolute below `floor`.
pub fn grad_close(analytic: f64, numeric: f64, tol: f64, floor: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() <= tol * scale
}
