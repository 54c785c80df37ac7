//! Convolution kernels shared by `conv2d` and `conv_transpose2d`.
//!
//! Three primitives cover forward and both gradients of each op:
//!   * [`conv_forward`]       — out[oc] += sum w[oc,ic] * x[ic]
//!   * [`conv_input_adjoint`] — x[ic]  += sum w[oc,ic] * y[oc]
//!   * [`conv_weight_grad`]   — gw[oc,ic] += sum y[oc] * x[ic]
//!
//! Each lowers to an im2col copy plus one GEMM per image (`ndarray`'s
//! register-blocked matmul); the column buffer is private to the image, so
//! batch images can run in parallel while every reduction keeps a fixed
//! order. All kernels accumulate into their output; callers zero or
//! pre-fill it.

use super::Scalar;
use crate::error::{DceError, Result};
use crate::parallel::par_chunks_mut;
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Geometry of one convolution application.
///
/// For `conv_transpose2d` the same struct is used with the roles reversed:
/// (`cin`, `hin`, `win`) describe the transpose *output* and
/// (`cout`, `hout`, `wout`) the transpose *input*.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub hin: usize,
    pub win: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        n: usize,
        cin: usize,
        hin: usize,
        win: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<Self> {
        if stride < 1 || dil < 1 {
            return Err(DceError::invalid(
                "conv2d",
                format!("stride {stride} and dilation {dil} must be >= 1"),
            ));
        }
        let eff = dil * (k - 1) + 1;
        let hn = (hin + 2 * pad).checked_sub(eff);
        let wn = (win + 2 * pad).checked_sub(eff);
        let (Some(hn), Some(wn)) = (hn, wn) else {
            return Err(DceError::invalid(
                "conv2d",
                format!("kernel span {eff} exceeds padded input {hin}x{win} (pad {pad})"),
            ));
        };
        Ok(ConvGeom {
            n,
            cin,
            hin,
            win,
            cout,
            k,
            stride,
            pad,
            dil,
            hout: hn / stride + 1,
            wout: wn / stride + 1,
        })
    }

    pub fn in_plane(&self) -> usize {
        self.hin * self.win
    }

    pub fn out_plane(&self) -> usize {
        self.hout * self.wout
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Valid output-column range `[lo, hi)` at stride 1 for input offset `off`.
#[inline]
fn stride1_range(win: usize, wout: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (win as isize - off).clamp(0, wout as isize) as usize;
    (lo, hi.max(lo))
}

/// Gather one image into a (cin*k*k, hout*wout) column matrix; padded
/// positions become zero.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let op = g.out_plane();
    for ic in 0..g.cin {
        let xc = &x[ic * g.in_plane()..][..g.in_plane()];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = &mut col[((ic * g.k + kh) * g.k + kw) * op..][..op];
                let off = (kw * g.dil) as isize - g.pad as isize;
                for oh in 0..g.hout {
                    let orow = &mut row[oh * g.wout..][..g.wout];
                    let ih = (oh * g.stride + kh * g.dil) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.hin as isize {
                        orow.fill(T::zero());
                        continue;
                    }
                    let xrow = &xc[ih as usize * g.win..][..g.win];
                    if g.stride == 1 {
                        let (lo, hi) = stride1_range(g.win, g.wout, off);
                        orow[..lo].fill(T::zero());
                        orow[hi..].fill(T::zero());
                        if lo < hi {
                            orow[lo..hi]
                                .copy_from_slice(&xrow[(lo as isize + off) as usize..][..hi - lo]);
                        }
                    } else {
                        for (ow, o) in orow.iter_mut().enumerate() {
                            let iw = (ow * g.stride) as isize + off;
                            *o = if iw >= 0 && iw < g.win as isize {
                                xrow[iw as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into one image.
fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    let op = g.out_plane();
    for ic in 0..g.cin {
        let xc = &mut x[ic * g.in_plane()..][..g.in_plane()];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = &col[((ic * g.k + kh) * g.k + kw) * op..][..op];
                let off = (kw * g.dil) as isize - g.pad as isize;
                for oh in 0..g.hout {
                    let crow = &row[oh * g.wout..][..g.wout];
                    let ih = (oh * g.stride + kh * g.dil) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.hin as isize {
                        continue;
                    }
                    let xrow = &mut xc[ih as usize * g.win..][..g.win];
                    if g.stride == 1 {
                        let (lo, hi) = stride1_range(g.win, g.wout, off);
                        if lo < hi {
                            let dst = &mut xrow[(lo as isize + off) as usize..][..hi - lo];
                            for (d, &s) in dst.iter_mut().zip(&crow[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ow, &s) in crow.iter().enumerate() {
                            let iw = (ow * g.stride) as isize + off;
                            if iw >= 0 && iw < g.win as isize {
                                xrow[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn view2<T: Scalar>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous matrix view")
}

/// out[b,oc,oh,ow] += sum_{ic,kh,kw} w[oc,ic,kh,kw] * x[b,ic,ih,iw]
/// with ih = oh*stride + kh*dil - pad.
pub fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (ip, op, ck) = (g.in_plane(), g.out_plane(), g.col_rows());
    par_chunks_mut(out, g.cout * op, |b, out_b| {
        let mut col = vec![T::zero(); ck * op];
        im2col(g, &x[b * g.cin * ip..][..g.cin * ip], &mut col);
        let mut ov = ArrayViewMut2::from_shape((g.cout, op), out_b).expect("out view");
        general_mat_mul(
            T::one(),
            &view2(w, g.cout, ck),
            &view2(&col, ck, op),
            T::one(),
            &mut ov,
        );
    });
}

/// x[b,ic,ih,iw] += sum_{oc,kh,kw} w[oc,ic,kh,kw] * y[b,oc,oh,ow]
/// over all (oh, ow) mapping onto (ih, iw). Adjoint of [`conv_forward`];
/// also the forward pass of the transposed convolution.
pub fn conv_input_adjoint<T: Scalar>(g: &ConvGeom, y: &[T], w: &[T], x: &mut [T]) {
    let (ip, op, ck) = (g.in_plane(), g.out_plane(), g.col_rows());
    let wv = view2(w, g.cout, ck);
    par_chunks_mut(x, g.cin * ip, |b, x_b| {
        let mut gcol = vec![T::zero(); ck * op];
        {
            let yv = view2(&y[b * g.cout * op..][..g.cout * op], g.cout, op);
            let mut gcv = ArrayViewMut2::from_shape((ck, op), &mut gcol[..]).expect("col view");
            general_mat_mul(T::one(), &wv.t(), &yv, T::zero(), &mut gcv);
        }
        col2im_add(g, &gcol, x_b);
    });
}

/// gw[oc,ic,kh,kw] += sum_{b,oh,ow} y[b,oc,oh,ow] * x[b,ic,ih,iw].
pub fn conv_weight_grad<T: Scalar>(g: &ConvGeom, x: &[T], y: &[T], gw: &mut [T]) {
    let (ip, op, ck) = (g.in_plane(), g.out_plane(), g.col_rows());
    let mut col = vec![T::zero(); ck * op];
    let mut gwv = ArrayViewMut2::from_shape((g.cout, ck), gw).expect("gw view");
    for b in 0..g.n {
        im2col(g, &x[b * g.cin * ip..][..g.cin * ip], &mut col);
        let yv = view2(&y[b * g.cout * op..][..g.cout * op], g.cout, op);
        general_mat_mul(T::one(), &yv, &view2(&col, ck, op).t(), T::one(), &mut gwv);
    }
}

/// gb[oc] += sum_{b,oh,ow} y[b,oc,oh,ow].
pub fn conv_bias_grad<T: Scalar>(g: &ConvGeom, y: &[T], gb: &mut [T]) {
    let op = g.out_plane();
    for (oc, gbo) in gb.iter_mut().enumerate().take(g.cout) {
        let mut acc = T::zero();
        for b in 0..g.n {
            acc += y[(b * g.cout + oc) * op..][..op].iter().copied().sum::<T>();
        }
        *gbo += acc;
    }
}
