//! Differentiable tensor operations.
//!
//! Each op computes its forward value, and, when the tape is active and any
//! input requires a gradient, pushes a backward closure capturing its
//! operands. Backward closures accumulate into input gradient buffers.

use super::kernels::{
    conv_bias_grad, conv_forward, conv_input_adjoint, conv_weight_grad, ConvGeom,
};
use super::{GradientTape, Scalar, Shape, Tensor};
use crate::error::{DceError, Result};
use crate::parallel::par_chunks_mut;
use std::cell::RefCell;

/// 2-D convolution. `weight` is (out_c, in_c, k, k); `bias` is (1, out_c, 1, 1).
pub fn conv2d<T: Scalar>(
    tape: &GradientTape<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    let (si, sw) = (input.shape(), weight.shape());
    if sw.h != sw.w {
        return Err(DceError::shape(
            "conv2d",
            format!("kernel must be square, got {}x{}", sw.h, sw.w),
        ));
    }
    if si.c != sw.c {
        return Err(DceError::shape(
            "conv2d",
            format!("input channels {} != weight in_c {}", si.c, sw.c),
        ));
    }
    if let Some(b) = bias {
        let sb = b.shape();
        if sb != Shape::new(1, sw.n, 1, 1) {
            return Err(DceError::shape(
                "conv2d",
                format!("bias shape {} != 1x{}x1x1", sb, sw.n),
            ));
        }
    }
    let g = ConvGeom::forward(si.n, si.c, si.h, si.w, sw.n, sw.h, stride, padding, dilation)?;
    let out_shape = Shape::new(g.n, g.cout, g.hout, g.wout);

    let mut data = vec![T::zero(); out_shape.numel()];
    if let Some(b) = bias {
        let bv = b.data();
        let op = g.out_plane();
        par_chunks_mut(&mut data, op, |pi, plane| {
            plane.fill(bv[pi % g.cout]);
        });
    }
    conv_forward(&g, input.data(), weight.data(), &mut data);

    let mut tracked: Vec<&Tensor<T>> = vec![input, weight];
    if let Some(b) = bias {
        tracked.push(b);
    }
    let track = tape.wants(&tracked);
    let out = Tensor::output(out_shape, data, track);
    if track {
        let (x, w, b, o) = (input.clone(), weight.clone(), bias.cloned(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if x.requires_grad() {
                    x.accum_grad_with(|gx| conv_input_adjoint(&g, go, w.data(), gx));
                }
                if w.requires_grad() {
                    w.accum_grad_with(|gw| conv_weight_grad(&g, x.data(), go, gw));
                }
                if let Some(b) = &b {
                    if b.requires_grad() {
                        b.accum_grad_with(|gb| conv_bias_grad(&g, go, gb));
                    }
                }
            });
        }));
    }
    Ok(out)
}

/// Transposed 2-D convolution (adjoint of [`conv2d`] with the same stride
/// and padding). `weight` is (in_c, out_c, k, k); output spatial size is
/// `(in - 1) * stride - 2 * padding + k`.
pub fn conv_transpose2d<T: Scalar>(
    tape: &GradientTape<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (si, sw) = (input.shape(), weight.shape());
    if sw.h != sw.w {
        return Err(DceError::shape(
            "conv_transpose2d",
            format!("kernel must be square, got {}x{}", sw.h, sw.w),
        ));
    }
    if si.c != sw.n {
        return Err(DceError::shape(
            "conv_transpose2d",
            format!("input channels {} != weight in_c {}", si.c, sw.n),
        ));
    }
    if stride < 1 {
        return Err(DceError::invalid("conv_transpose2d", "stride must be >= 1"));
    }
    let k = sw.h;
    let hout = ((si.h - 1) * stride + k).checked_sub(2 * padding);
    let wout = ((si.w - 1) * stride + k).checked_sub(2 * padding);
    let (Some(hout), Some(wout)) = (hout, wout) else {
        return Err(DceError::invalid(
            "conv_transpose2d",
            format!("padding {padding} swallows the whole output"),
        ));
    };
    // Same geometry as the matching forward conv: (cin, hin, win) describe
    // this op's output, (cout, hout, wout) its input.
    let g = ConvGeom {
        n: si.n,
        cin: sw.c,
        hin: hout,
        win: wout,
        cout: si.c,
        k,
        stride,
        pad: padding,
        dil: 1,
        hout: si.h,
        wout: si.w,
    };
    let out_shape = Shape::new(si.n, sw.c, hout, wout);
    let mut data = vec![T::zero(); out_shape.numel()];
    conv_input_adjoint(&g, input.data(), weight.data(), &mut data);

    let track = tape.wants(&[input, weight]);
    let out = Tensor::output(out_shape, data, track);
    if track {
        let (x, w, o) = (input.clone(), weight.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if x.requires_grad() {
                    x.accum_grad_with(|gx| conv_forward(&g, go, w.data(), gx));
                }
                if w.requires_grad() {
                    w.accum_grad_with(|gw| conv_weight_grad(&g, go, x.data(), gw));
                }
            });
        }));
    }
    Ok(out)
}

/// Running batch-norm statistics (one entry per channel) plus constants.
pub struct RunningStats<T: Scalar> {
    mean: RefCell<Vec<T>>,
    var: RefCell<Vec<T>>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: RefCell::new(vec![T::zero(); channels]),
            var: RefCell::new(vec![T::one(); channels]),
            momentum: T::cast(0.1),
            eps: T::cast(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.borrow().len()
    }

    pub fn mean_vec(&self) -> Vec<T> {
        self.mean.borrow().clone()
    }

    pub fn var_vec(&self) -> Vec<T> {
        self.var.borrow().clone()
    }

    pub fn set(&self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(DceError::shape(
                "batch_norm",
                format!(
                    "running stats length {}/{} != channels {}",
                    mean.len(),
                    var.len(),
                    self.channels()
                ),
            ));
        }
        *self.mean.borrow_mut() = mean;
        *self.var.borrow_mut() = var;
        Ok(())
    }
}

/// Per-channel batch normalization.
///
/// Training mode normalizes with batch statistics and updates the running
/// buffers; eval mode normalizes with the running buffers. `scale`/`shift`
/// are (1, C, 1, 1).
pub fn batch_norm<T: Scalar>(
    tape: &GradientTape<T>,
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    stats: &RunningStats<T>,
    training: bool,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let c = s.c;
    for (name, t) in [("scale", scale), ("shift", shift)] {
        if t.shape() != Shape::new(1, c, 1, 1) {
            return Err(DceError::shape(
                "batch_norm",
                format!("{name} shape {} != 1x{}x1x1", t.shape(), c),
            ));
        }
    }
    if stats.channels() != c {
        return Err(DceError::shape(
            "batch_norm",
            format!("running stats channels {} != {}", stats.channels(), c),
        ));
    }
    let m = s.n * s.h * s.w;
    if m == 0 {
        return Err(DceError::invalid("batch_norm", "zero-size batch"));
    }

    let plane = s.plane();
    let x = input.data();
    let mcount = T::cast(m as f64);

    // Per-channel (mean, inverse std) used for normalization.
    let mut mean = vec![T::zero(); c];
    let mut istd = vec![T::zero(); c];
    let mut batch_var = vec![T::zero(); c];
    if training {
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..s.n {
                acc += x[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
            }
            let mu = acc / mcount;
            let mut vacc = T::zero();
            for b in 0..s.n {
                vacc += x[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<T>();
            }
            let var = vacc / mcount;
            mean[ch] = mu;
            batch_var[ch] = var;
            istd[ch] = (var + stats.eps).sqrt().recip();
        }
        // Running update uses the unbiased variance, matching the usual
        // train/eval convention.
        let unbias = if m > 1 {
            mcount / T::cast((m - 1) as f64)
        } else {
            T::one()
        };
        let mom = stats.momentum;
        let keep = T::one() - mom;
        let mut rm = stats.mean.borrow_mut();
        let mut rv = stats.var.borrow_mut();
        for ch in 0..c {
            rm[ch] = keep * rm[ch] + mom * mean[ch];
            rv[ch] = keep * rv[ch] + mom * batch_var[ch] * unbias;
        }
    } else {
        let rm = stats.mean.borrow();
        let rv = stats.var.borrow();
        for ch in 0..c {
            mean[ch] = rm[ch];
            istd[ch] = (rv[ch] + stats.eps).sqrt().recip();
        }
    }

    let gamma = scale.data();
    let beta = shift.data();
    let mut data = vec![T::zero(); s.numel()];
    par_chunks_mut(&mut data, plane, |pi, out_plane| {
        let ch = pi % c;
        let (mu, is, ga, be) = (mean[ch], istd[ch], gamma[ch], beta[ch]);
        let xp = &x[pi * plane..][..plane];
        for (o, &v) in out_plane.iter_mut().zip(xp) {
            *o = (v - mu) * is * ga + be;
        }
    });

    let track = tape.wants(&[input, scale, shift]);
    let out = Tensor::output(s, data, track);
    if track {
        let (xi, sc, sh, o) = (input.clone(), scale.clone(), shift.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                let x = xi.data();
                let gamma = sc.data();
                // Channel reductions shared by all three gradients.
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut a, mut bxh) = (T::zero(), T::zero());
                    for b in 0..s.n {
                        let base = (b * c + ch) * plane;
                        for i in 0..plane {
                            let g = go[base + i];
                            a += g;
                            bxh += g * (x[base + i] - mean[ch]) * istd[ch];
                        }
                    }
                    sum_g[ch] = a;
                    sum_gx[ch] = bxh;
                }
                if sh.requires_grad() {
                    sh.accum_grad_with(|gb| {
                        for ch in 0..c {
                            gb[ch] += sum_g[ch];
                        }
                    });
                }
                if sc.requires_grad() {
                    sc.accum_grad_with(|gg| {
                        for ch in 0..c {
                            gg[ch] += sum_gx[ch];
                        }
                    });
                }
                if xi.requires_grad() {
                    xi.accum_grad_with(|gx| {
                        par_chunks_mut(gx, plane, |pi, gxp| {
                            let ch = pi % c;
                            let (mu, is, ga) = (mean[ch], istd[ch], gamma[ch]);
                            let base = pi * plane;
                            if training {
                                let mg = sum_g[ch] / mcount;
                                let mgx = sum_gx[ch] / mcount;
                                for (i, d) in gxp.iter_mut().enumerate() {
                                    let xh = (x[base + i] - mu) * is;
                                    *d += ga * is * (go[base + i] - mg - xh * mgx);
                                }
                            } else {
                                for (i, d) in gxp.iter_mut().enumerate() {
                                    *d += ga * is * go[base + i];
                                }
                            }
                        });
                    });
                }
            });
        }));
    }
    Ok(out)
}

/// Elementwise max(0, x). Subgradient 0 at exactly 0.
pub fn relu<T: Scalar>(tape: &GradientTape<T>, input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    let track = tape.wants(&[input]);
    let out = Tensor::output(input.shape(), data, track);
    if track {
        let (x, o) = (input.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if x.requires_grad() {
                    x.accum_grad_with(|gx| {
                        for ((d, &g), &v) in gx.iter_mut().zip(go).zip(x.data()) {
                            if v > T::zero() {
                                *d += g;
                            }
                        }
                    });
                }
            });
        }));
    }
    out
}

/// Concatenate along the channel dimension, order preserved.
pub fn concat_channels<T: Scalar>(
    tape: &GradientTape<T>,
    tensors: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    let Some(first) = tensors.first() else {
        return Err(DceError::invalid("concat_channels", "empty input list"));
    };
    let s0 = first.shape();
    let mut c_total = 0;
    for t in tensors {
        let s = t.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(DceError::shape(
                "concat_channels",
                format!("batch/spatial mismatch: {} vs {}", s, s0),
            ));
        }
        c_total += s.c;
    }
    let out_shape = Shape::new(s0.n, c_total, s0.h, s0.w);
    let plane = s0.plane();
    let mut data = vec![T::zero(); out_shape.numel()];
    for b in 0..s0.n {
        let mut coff = 0;
        for t in tensors {
            let c = t.shape().c;
            let src = &t.data()[b * c * plane..][..c * plane];
            data[(b * c_total + coff) * plane..][..c * plane].copy_from_slice(src);
            coff += c;
        }
    }
    let track = tape.wants(tensors);
    let out = Tensor::output(out_shape, data, track);
    if track {
        let inputs: Vec<Tensor<T>> = tensors.iter().map(|t| (*t).clone()).collect();
        let o = out.clone();
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                let mut coff = 0;
                for t in &inputs {
                    let c = t.shape().c;
                    if t.requires_grad() {
                        t.accum_grad_with(|gx| {
                            for b in 0..s0.n {
                                let src = &go[(b * c_total + coff) * plane..][..c * plane];
                                for (d, &g) in
                                    gx[b * c * plane..][..c * plane].iter_mut().zip(src)
                                {
                                    *d += g;
                                }
                            }
                        });
                    }
                    coff += c;
                }
            });
        }));
    }
    Ok(out)
}

/// Interpolation taps for one axis under the align-corners convention:
/// normalized coordinate ±1 maps to the centers of the corner pixels.
fn resize_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, T::zero());
            }
            let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::cast(src - i0 as f64))
        })
        .collect()
}

/// Align-corners bilinear resize to (out_h, out_w).
pub fn bilinear_resize<T: Scalar>(
    tape: &GradientTape<T>,
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if out_h < 1 || out_w < 1 {
        return Err(DceError::invalid(
            "bilinear_resize",
            format!("output dims {out_h}x{out_w} must be >= 1"),
        ));
    }
    let track = tape.wants(&[input]);

    if (out_h, out_w) == (s.h, s.w) {
        // Bit-identical passthrough.
        let out = Tensor::output(s, input.data().to_vec(), track);
        if track {
            let (x, o) = (input.clone(), out.clone());
            tape.push(Box::new(move || {
                o.with_grad(|go| {
                    let Some(go) = go else { return };
                    if x.requires_grad() {
                        x.accum_grad_with(|gx| {
                            for (d, &g) in gx.iter_mut().zip(go) {
                                *d += g;
                            }
                        });
                    }
                });
            }));
        }
        return Ok(out);
    }

    let ty = resize_taps::<T>(s.h, out_h);
    let tx = resize_taps::<T>(s.w, out_w);
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    let (ip, op) = (s.plane(), out_h * out_w);
    let x = input.data();
    let mut data = vec![T::zero(); out_shape.numel()];
    par_chunks_mut(&mut data, op, |pi, plane| {
        let xp = &x[pi * ip..][..ip];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let row = &mut plane[oy * out_w..][..out_w];
            let r0 = &xp[y0 * s.w..][..s.w];
            let r1 = &xp[y1 * s.w..][..s.w];
            for (ox, o) in row.iter_mut().enumerate() {
                let (x0, x1, fx) = tx[ox];
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                *o = top + (bot - top) * fy;
            }
        }
    });

    let out = Tensor::output(out_shape, data, track);
    if track {
        let (xi, o) = (input.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if xi.requires_grad() {
                    xi.accum_grad_with(|gx| {
                        par_chunks_mut(gx, ip, |pi, gxp| {
                            let gop = &go[pi * op..][..op];
                            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                                for (ox, &g) in gop[oy * out_w..][..out_w].iter().enumerate() {
                                    let (x0, x1, fx) = tx[ox];
                                    let one = T::one();
                                    gxp[y0 * s.w + x0] += g * (one - fy) * (one - fx);
                                    gxp[y0 * s.w + x1] += g * (one - fy) * fx;
                                    gxp[y1 * s.w + x0] += g * fy * (one - fx);
                                    gxp[y1 * s.w + x1] += g * fy * fx;
                                }
                            }
                        });
                    });
                }
            });
        }));
    }
    Ok(out)
}

/// Divide each spatial location's channel vector by max(eps, its norm).
pub fn l2_normalize_channels<T: Scalar>(
    tape: &GradientTape<T>,
    input: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(DceError::invalid("l2_normalize_channels", "eps must be > 0"));
    }
    let s = input.shape();
    let (c, plane) = (s.c, s.plane());
    let x = input.data();
    let locs = s.n * plane;
    let mut norms = vec![T::zero(); locs];
    for (l, nv) in norms.iter_mut().enumerate() {
        let (b, p) = (l / plane, l % plane);
        let mut acc = T::zero();
        for ch in 0..c {
            let v = x[(b * c + ch) * plane + p];
            acc += v * v;
        }
        *nv = acc.sqrt();
    }
    let mut data = vec![T::zero(); s.numel()];
    par_chunks_mut(&mut data, plane, |pi, out_plane| {
        let (b, ch) = (pi / c, pi % c);
        let _ = ch;
        let xp = &x[pi * plane..][..plane];
        let nb = &norms[b * plane..][..plane];
        for ((o, &v), &r) in out_plane.iter_mut().zip(xp).zip(nb) {
            *o = v / r.max(eps);
        }
    });

    let track = tape.wants(&[input]);
    let out = Tensor::output(s, data, track);
    if track {
        let (xi, o) = (input.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if xi.requires_grad() {
                    let x = xi.data();
                    xi.accum_grad_with(|gx| {
                        for l in 0..locs {
                            let (b, p) = (l / plane, l % plane);
                            let r = norms[l];
                            if r >= eps {
                                let mut dot = T::zero();
                                for ch in 0..c {
                                    let i = (b * c + ch) * plane + p;
                                    dot += x[i] * go[i];
                                }
                                let r3 = r * r * r;
                                for ch in 0..c {
                                    let i = (b * c + ch) * plane + p;
                                    gx[i] += go[i] / r - x[i] * dot / r3;
                                }
                            } else {
                                for ch in 0..c {
                                    let i = (b * c + ch) * plane + p;
                                    gx[i] += go[i] / eps;
                                }
                            }
                        }
                    });
                }
            });
        }));
    }
    Ok(out)
}

/// Multiply channel `c` by `factors[c]` everywhere.
pub fn scale_channels<T: Scalar>(
    tape: &GradientTape<T>,
    input: &Tensor<T>,
    factors: &[T],
) -> Result<Tensor<T>> {
    let s = input.shape();
    if factors.len() != s.c {
        return Err(DceError::shape(
            "scale_channels",
            format!("{} factors for {} channels", factors.len(), s.c),
        ));
    }
    let plane = s.plane();
    let mut data = input.data().to_vec();
    par_chunks_mut(&mut data, plane, |pi, p| {
        let f = factors[pi % s.c];
        for v in p.iter_mut() {
            *v *= f;
        }
    });
    let track = tape.wants(&[input]);
    let out = Tensor::output(s, data, track);
    if track {
        let (x, o, fs) = (input.clone(), out.clone(), factors.to_vec());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if x.requires_grad() {
                    x.accum_grad_with(|gx| {
                        par_chunks_mut(gx, plane, |pi, gp| {
                            let f = fs[pi % s.c];
                            for (d, &g) in gp.iter_mut().zip(&go[pi * plane..][..plane]) {
                                *d += g * f;
                            }
                        });
                    });
                }
            });
        }));
    }
    Ok(out)
}

fn elementwise_binary<T: Scalar>(
    tape: &GradientTape<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
    bsign: T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(DceError::shape(
            op,
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    let track = tape.wants(&[a, b]);
    let out = Tensor::output(a.shape(), data, track);
    if track {
        let (ai, bi, o) = (a.clone(), b.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if ai.requires_grad() {
                    ai.accum_grad_with(|g| {
                        for (d, &v) in g.iter_mut().zip(go) {
                            *d += v;
                        }
                    });
                }
                if bi.requires_grad() {
                    bi.accum_grad_with(|g| {
                        for (d, &v) in g.iter_mut().zip(go) {
                            *d += bsign * v;
                        }
                    });
                }
            });
        }));
    }
    Ok(out)
}

pub fn add<T: Scalar>(tape: &GradientTape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise_binary(tape, a, b, "add", |x, y| x + y, T::one())
}

pub fn sub<T: Scalar>(tape: &GradientTape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise_binary(tape, a, b, "sub", |x, y| x - y, -T::one())
}

/// Multiply by a constant scalar.
pub fn scale<T: Scalar>(tape: &GradientTape<T>, input: &Tensor<T>, k: T) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v * k).collect();
    let track = tape.wants(&[input]);
    let out = Tensor::output(input.shape(), data, track);
    if track {
        let (x, o) = (input.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if x.requires_grad() {
                    x.accum_grad_with(|gx| {
                        for (d, &g) in gx.iter_mut().zip(go) {
                            *d += g * k;
                        }
                    });
                }
            });
        }));
    }
    out
}

/// Sum of all elements as a 1x1x1x1 tensor.
pub fn sum_all<T: Scalar>(tape: &GradientTape<T>, input: &Tensor<T>) -> Tensor<T> {
    let total: T = input.data().iter().copied().sum();
    let track = tape.wants(&[input]);
    let out = Tensor::output(Shape::scalar(), vec![total], track);
    if track {
        let (x, o) = (input.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                let g0 = go[0];
                if x.requires_grad() {
                    x.accum_grad_with(|gx| {
                        for d in gx.iter_mut() {
                            *d += g0;
                        }
                    });
                }
            });
        }));
    }
    out
}

/// Sum of squared elements as a 1x1x1x1 tensor.
pub fn sum_sq<T: Scalar>(tape: &GradientTape<T>, input: &Tensor<T>) -> Tensor<T> {
    let total: T = input.data().iter().map(|&v| v * v).sum();
    let track = tape.wants(&[input]);
    let out = Tensor::output(Shape::scalar(), vec![total], track);
    if track {
        let (x, o) = (input.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                let g0 = go[0];
                if x.requires_grad() {
                    x.accum_grad_with(|gx| {
                        let two = T::cast(2.0);
                        for (d, &v) in gx.iter_mut().zip(x.data()) {
                            *d += two * v * g0;
                        }
                    });
                }
            });
        }));
    }
    out
}

/// Sum over all pixels of the smoothed per-pixel endpoint error
/// sqrt(du^2 + dv^2 + eps) between two 2-channel fields.
pub fn epe_sum<T: Scalar>(
    tape: &GradientTape<T>,
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let s = pred.shape();
    if s != gt.shape() {
        return Err(DceError::shape(
            "epe_sum",
            format!("{} vs {}", s, gt.shape()),
        ));
    }
    if s.c != 2 {
        return Err(DceError::shape(
            "epe_sum",
            format!("expected 2 channels, got {}", s.c),
        ));
    }
    let plane = s.plane();
    let (p, g) = (pred.data(), gt.data());
    let mut total = T::zero();
    for b in 0..s.n {
        let bu = (b * 2) * plane;
        let bv = (b * 2 + 1) * plane;
        for i in 0..plane {
            let du = p[bu + i] - g[bu + i];
            let dv = p[bv + i] - g[bv + i];
            total += (du * du + dv * dv + eps).sqrt();
        }
    }
    let track = tape.wants(&[pred, gt]);
    let out = Tensor::output(Shape::scalar(), vec![total], track);
    if track {
        let (pi, gi, o) = (pred.clone(), gt.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                let gs = go[0];
                let (p, g) = (pi.data(), gi.data());
                let put = |t: &Tensor<T>, sign: T| {
                    t.accum_grad_with(|gx| {
                        for b in 0..s.n {
                            let bu = (b * 2) * plane;
                            let bv = (b * 2 + 1) * plane;
                            for i in 0..plane {
                                let du = p[bu + i] - g[bu + i];
                                let dv = p[bv + i] - g[bv + i];
                                let r = (du * du + dv * dv + eps).sqrt();
                                gx[bu + i] += sign * gs * du / r;
                                gx[bv + i] += sign * gs * dv / r;
                            }
                        }
                    });
                };
                if pi.requires_grad() {
                    put(&pi, T::one());
                }
                if gi.requires_grad() {
                    put(&gi, -T::one());
                }
            });
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t(shape: Shape, data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv2d_counts_overlapping_ones() {
        let tape = GradientTape::disabled();
        let x = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0f32);
        let w = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0f32);
        let y = conv2d(&tape, &x, &w, None, 1, 1, 1).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[8], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let tape = GradientTape::disabled();
        let x = t(
            Shape::new(1, 1, 2, 3),
            vec![0.5, -1.0, 2.0, 3.0, 4.5, -0.25],
        );
        let w = t(Shape::new(1, 1, 1, 1), vec![1.0]);
        let y = conv2d(&tape, &x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let tape = GradientTape::disabled();
        let x = Tensor::filled(Shape::new(1, 3, 4, 4), 1.0f32);
        let w = Tensor::filled(Shape::new(2, 4, 3, 3), 1.0f32);
        let err = conv2d(&tape, &x, &w, None, 1, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels 3"));
    }

    #[test]
    fn conv_transpose_spreads_single_tap() {
        let tape = GradientTape::disabled();
        let x = t(Shape::new(1, 1, 1, 1), vec![2.5]);
        let w = Tensor::filled(Shape::new(1, 1, 2, 2), 1.0f32);
        let y = conv_transpose2d(&tape, &x, &w, 2, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv_transpose_zero_input_zero_output() {
        let tape = GradientTape::disabled();
        let x = Tensor::zeros(Shape::new(2, 3, 4, 4));
        let w = Tensor::filled(Shape::new(3, 2, 4, 4), 0.7f32);
        let y = conv_transpose2d(&tape, &x, &w, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_constant_input_returns_shift() {
        let tape = GradientTape::disabled();
        let mut data = vec![3.0f32; 2 * 2 * 4];
        data[4..8].fill(-1.0); // channel 1 constant at -1 in both batches
        data[12..16].fill(-1.0);
        let x = t(Shape::new(2, 2, 2, 2), data);
        let gamma = t(Shape::new(1, 2, 1, 1), vec![2.0, 5.0]);
        let beta = t(Shape::new(1, 2, 1, 1), vec![0.25, -0.5]);
        let stats = RunningStats::new(2);
        let y = batch_norm(&tape, &x, &gamma, &beta, &stats, true).unwrap();
        for b in 0..2 {
            for i in 0..4 {
                assert!((y.data()[(b * 2) * 4 + i] - 0.25).abs() < 1e-6);
                assert!((y.data()[(b * 2 + 1) * 4 + i] + 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_norm_is_near_identity_on_standardized_input() {
        let tape = GradientTape::disabled();
        // channel with mean 0, variance 1 over the batch
        let vals = vec![-1.0f32, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0];
        let x = t(Shape::new(2, 1, 2, 2), vals);
        let gamma = t(Shape::new(1, 1, 1, 1), vec![1.0]);
        let beta = t(Shape::new(1, 1, 1, 1), vec![0.0]);
        let stats = RunningStats::new(1);
        let y = batch_norm(&tape, &x, &gamma, &beta, &stats, true).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_rejects_empty_batch() {
        let tape = GradientTape::disabled();
        let x = Tensor::zeros(Shape::new(0, 2, 2, 2));
        let gamma = Tensor::filled(Shape::new(1, 2, 1, 1), 1.0f32);
        let beta = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let stats = RunningStats::new(2);
        assert!(batch_norm(&tape, &x, &gamma, &beta, &stats, true).is_err());
    }

    #[test]
    fn relu_matches_examples() {
        let tape = GradientTape::new();
        let x = Tensor::param(Shape::new(1, 1, 1, 3), vec![-1.0f32, 0.0, 2.0]).unwrap();
        let y = relu(&tape, &x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let loss = sum_all(&tape, &y);
        backward(&loss, tape).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_nonnegative_unchanged() {
        let tape = GradientTape::disabled();
        let x = t(Shape::new(1, 1, 2, 2), vec![0.0, 1.5, 2.0, 0.25]);
        let y = relu(&tape, &x);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn concat_slices_and_splits_gradient() {
        let tape = GradientTape::new();
        let a = Tensor::param(Shape::new(1, 1, 1, 2), vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::param(Shape::new(1, 1, 1, 2), vec![3.0f32, 4.0]).unwrap();
        let y = concat_channels(&tape, &[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 1, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let loss = sum_all(&tape, &scale_channels(&tape, &y, &[1.0, 10.0]).unwrap());
        backward(&loss, tape).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![10.0, 10.0]);
    }

    #[test]
    fn concat_single_input_is_identity() {
        let tape = GradientTape::disabled();
        let a = t(Shape::new(2, 3, 2, 2), (0..24).map(|v| v as f32).collect());
        let y = concat_channels(&tape, &[&a]).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn resize_same_dims_bit_identical() {
        let tape = GradientTape::disabled();
        let a = t(Shape::new(1, 2, 3, 3), (0..18).map(|v| v as f32 * 0.37).collect());
        let y = bilinear_resize(&tape, &a, 3, 3).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn resize_linear_midpoint() {
        let tape = GradientTape::disabled();
        let a = t(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 0.0, 1.0]);
        let y = bilinear_resize(&tape, &a, 2, 3).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn resize_matches_pointwise_oracle() {
        let tape = GradientTape::disabled();
        let (h, w, oh, ow) = (5, 7, 13, 11);
        let data: Vec<f32> = (0..h * w)
            .map(|i| ((i * 2654435761usize) % 1000) as f32 / 250.0 - 2.0)
            .collect();
        let a = t(Shape::new(1, 1, h, w), data.clone());
        let y = bilinear_resize(&tape, &a, oh, ow).unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = oy as f64 * (h - 1) as f64 / (oh - 1) as f64;
                let sx = ox as f64 * (w - 1) as f64 / (ow - 1) as f64;
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = |yy: usize, xx: usize| data[yy * w + xx] as f64;
                let want = v(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + v(y0, x1) * (1.0 - fy) * fx
                    + v(y1, x0) * fy * (1.0 - fx)
                    + v(y1, x1) * fy * fx;
                let got = y.data()[oy * ow + ox] as f64;
                assert!((got - want).abs() < 1e-6, "({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn l2_normalize_unit_and_zero_vectors() {
        let tape = GradientTape::disabled();
        let x = t(Shape::new(1, 2, 1, 2), vec![1.0, 0.0, 0.0, 0.0]);
        let y = l2_normalize_channels(&tape, &x, 1e-6).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_norms_bounded() {
        let tape = GradientTape::disabled();
        let eps = 1e-6f32;
        let data: Vec<f32> = (0..3 * 4 * 4)
            .map(|i| ((i * 48271) % 199) as f32 / 40.0 - 2.4)
            .collect();
        let x = t(Shape::new(1, 3, 4, 4), data);
        let y = l2_normalize_channels(&tape, &x, eps).unwrap();
        for p in 0..16 {
            let xn: f32 = (0..3).map(|c| x.data()[c * 16 + p].powi(2)).sum::<f32>().sqrt();
            let yn: f32 = (0..3).map(|c| y.data()[c * 16 + p].powi(2)).sum::<f32>().sqrt();
            assert!(yn <= 1.0 + 1e-5);
            if xn >= eps {
                assert!((yn - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let tape = GradientTape::new();
        let x = Tensor::param(Shape::new(1, 2, 2, 2), vec![0.5f32; 8]).unwrap();
        let loss = sum_all(&tape, &x);
        backward(&loss, tape).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = GradientTape::new();
        let x = Tensor::param(Shape::new(1, 1, 2, 1), vec![1.0f32, 2.0]).unwrap();
        let y = relu(&tape, &x);
        assert!(backward(&y, tape).is_err());
    }

    #[test]
    fn backward_without_requires_grad_is_noop() {
        let tape = GradientTape::new();
        let x = t(Shape::new(1, 1, 2, 2), vec![-1.0, 2.0, 3.0, -4.0]);
        let y = relu(&tape, &x);
        let loss = sum_all(&tape, &y);
        assert!(tape.is_empty());
        backward(&loss, tape).unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn conv2d_matches_direct_summation_oracle_f32() {
        // random 2x3x5x5 input against a 4-channel 3x3 kernel
        let tape = GradientTape::disabled();
        let mk = |len: usize, m: usize| -> Vec<f32> {
            (0..len)
                .map(|i| (((i * m + 7) * 2654435761usize) % 2000) as f32 / 500.0 - 2.0)
                .collect()
        };
        let x = t(Shape::new(2, 3, 5, 5), mk(150, 13));
        let w = t(Shape::new(4, 3, 3, 3), mk(108, 29));
        let b = t(Shape::new(1, 4, 1, 1), mk(4, 31));
        let y = conv2d(&tape, &x, &w, Some(&b), 1, 1, 1).unwrap();
        for bi in 0..2 {
            for oc in 0..4 {
                for oy in 0..5 {
                    for ox in 0..5 {
                        let mut acc = b.data()[oc];
                        for ic in 0..3 {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let iy = oy as isize + kh as isize - 1;
                                    let ix = ox as isize + kw as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                        continue;
                                    }
                                    acc += w.data()[((oc * 3 + ic) * 3 + kh) * 3 + kw]
                                        * x.data()
                                            [((bi * 3 + ic) * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                        let got = y.data()[((bi * 4 + oc) * 5 + oy) * 5 + ox];
                        assert!((got - acc).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
