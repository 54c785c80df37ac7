//! Flow-field algebra: warping by a flow, mapping/flow conversion, and
//! up/down-sampling with value rescaling.
//!
//! A flow value is a pixel displacement expressed in the pixel units of a
//! declared *frame* resolution, which may differ from the resolution of the
//! tensor holding it (coarse levels store flows in the units of a finer
//! frame). Warping converts to the feature's own units by the extent ratio.
//!
//! All sampling is align-corners bilinear; samples outside the image
//! contribute zero.

use crate::error::{DceError, Result};
use crate::parallel::par_chunks_mut;
use crate::tensor::{ops, GradientTape, Scalar, Shape, Tensor};

/// Per-pixel 2-D displacement field. Channel 0 is horizontal (x), channel 1
/// vertical (y); values are in pixel units of `frame` = (height, width).
#[derive(Clone, Debug)]
pub struct FlowField<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub frame: (usize, usize),
}

impl<T: Scalar> FlowField<T> {
    pub fn new(tensor: Tensor<T>, frame: (usize, usize)) -> Result<Self> {
        if tensor.shape().c != 2 {
            return Err(DceError::shape(
                "flow_field",
                format!("expected 2 channels, got {}", tensor.shape().c),
            ));
        }
        if frame.0 == 0 || frame.1 == 0 {
            return Err(DceError::invalid("flow_field", "frame extents must be positive"));
        }
        Ok(FlowField { tensor, frame })
    }

    /// Zero flow at the given resolution, frame = resolution.
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField {
            tensor: Tensor::zeros(Shape::new(n, 2, h, w)),
            frame: (h, w),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.tensor.shape();
        (s.h, s.w)
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape().n
    }

    /// Per-axis factors converting stored values to the units of the tensor's
    /// own grid: (x_factor, y_factor) = (w / frame_w, h / frame_h).
    pub fn level_unit_factors(&self) -> (f64, f64) {
        let (h, w) = self.dims();
        (
            w as f64 / self.frame.1 as f64,
            h as f64 / self.frame.0 as f64,
        )
    }

    /// Same flow expressed in a different frame (values rescaled by the
    /// frame extent ratio). Records on the tape.
    pub fn to_frame(&self, tape: &GradientTape<T>, frame: (usize, usize)) -> Result<FlowField<T>> {
        if frame == self.frame {
            return Ok(self.clone());
        }
        let fx = T::cast(frame.1 as f64 / self.frame.1 as f64);
        let fy = T::cast(frame.0 as f64 / self.frame.0 as f64);
        Ok(FlowField {
            tensor: ops::scale_channels(tape, &self.tensor, &[fx, fy])?,
            frame,
        })
    }
}

/// Map of absolute correspondences in normalized [-1, 1] coordinates
/// (align-corners: ±1 are the centers of the corner pixels). Values may
/// exceed ±1 for out-of-view matches.
#[derive(Clone, Debug)]
pub struct CorrespondenceMap<T: Scalar = f32> {
    pub tensor: Tensor<T>,
}

impl<T: Scalar> CorrespondenceMap<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().c != 2 {
            return Err(DceError::shape(
                "correspondence_map",
                format!("expected 2 channels, got {}", tensor.shape().c),
            ));
        }
        Ok(CorrespondenceMap { tensor })
    }
}

fn denorm_factor<T: Scalar>(size: usize) -> T {
    T::cast((size.max(1) - 1) as f64 / 2.0)
}

#[inline]
fn tap_at<T: Scalar>(plane: &[T], xi: isize, yi: isize, w: isize, h: isize) -> T {
    if xi < 0 || yi < 0 || xi >= w || yi >= h {
        T::zero()
    } else {
        plane[(yi * w + xi) as usize]
    }
}

/// Convert a normalized correspondence map to a flow at `(h, w)`:
/// pixel = (norm + 1) * (size - 1) / 2, minus the identity grid.
/// The result's frame is (h, w).
pub fn map_to_flow<T: Scalar>(
    tape: &GradientTape<T>,
    m: &CorrespondenceMap<T>,
    h: usize,
    w: usize,
) -> Result<FlowField<T>> {
    let s = m.tensor.shape();
    if (s.h, s.w) != (h, w) {
        return Err(DceError::shape(
            "map_to_flow",
            format!("map is {}x{}, level dims {}x{}", s.h, s.w, h, w),
        ));
    }
    let (fx, fy) = (denorm_factor::<T>(w), denorm_factor::<T>(h));
    let plane = s.plane();
    let md = m.tensor.data();
    let mut data = vec![T::zero(); s.numel()];
    par_chunks_mut(&mut data, plane, |pi, p| {
        let ch = pi % 2;
        let f = if ch == 0 { fx } else { fy };
        let src = &md[pi * plane..][..plane];
        for (i, (d, &v)) in p.iter_mut().zip(src).enumerate() {
            let coord = T::cast(if ch == 0 { (i % w) as f64 } else { (i / w) as f64 });
            *d = (v + T::one()) * f - coord;
        }
    });
    let track = tape.wants(&[&m.tensor]);
    let out = Tensor::output(s, data, track);
    if track {
        let (mi, o) = (m.tensor.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if mi.requires_grad() {
                    mi.accum_grad_with(|gm| {
                        par_chunks_mut(gm, plane, |pi, gp| {
                            let f = if pi % 2 == 0 { fx } else { fy };
                            for (d, &g) in gp.iter_mut().zip(&go[pi * plane..][..plane]) {
                                *d += g * f;
                            }
                        });
                    });
                }
            });
        }));
    }
    FlowField::new(out, (h, w))
}

/// Inverse of [`map_to_flow`]: normalized correspondence map from a flow.
/// Values are first converted to the tensor's own pixel units.
pub fn flow_to_map<T: Scalar>(
    tape: &GradientTape<T>,
    flow: &FlowField<T>,
) -> Result<CorrespondenceMap<T>> {
    let (h, w) = flow.dims();
    let level = flow.to_frame(tape, (h, w))?;
    let s = level.tensor.shape();
    let inv = |size: usize| -> T {
        if size > 1 {
            T::cast(2.0 / (size - 1) as f64)
        } else {
            T::zero()
        }
    };
    let (fx, fy) = (inv(w), inv(h));
    let plane = s.plane();
    let fd = level.tensor.data();
    let mut data = vec![T::zero(); s.numel()];
    par_chunks_mut(&mut data, plane, |pi, p| {
        let ch = pi % 2;
        let f = if ch == 0 { fx } else { fy };
        let src = &fd[pi * plane..][..plane];
        for (i, (d, &v)) in p.iter_mut().zip(src).enumerate() {
            let coord = T::cast(if ch == 0 { (i % w) as f64 } else { (i / w) as f64 });
            *d = (v + coord) * f - T::one();
        }
    });
    let track = tape.wants(&[&level.tensor]);
    let out = Tensor::output(s, data, track);
    if track {
        let (fi, o) = (level.tensor.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if fi.requires_grad() {
                    fi.accum_grad_with(|gf| {
                        par_chunks_mut(gf, plane, |pi, gp| {
                            let f = if pi % 2 == 0 { fx } else { fy };
                            for (d, &g) in gp.iter_mut().zip(&go[pi * plane..][..plane]) {
                                *d += g * f;
                            }
                        });
                    });
                }
            });
        }));
    }
    CorrespondenceMap::new(out)
}

/// Bilinear spatial resize of a flow with explicit per-axis value scaling
/// (x then y). The frame scales by the same factors.
pub fn upsample_flow<T: Scalar>(
    tape: &GradientTape<T>,
    flow: &FlowField<T>,
    out_h: usize,
    out_w: usize,
    value_scale: (f64, f64),
) -> Result<FlowField<T>> {
    let (sx, sy) = value_scale;
    if sx <= 0.0 || sy <= 0.0 {
        return Err(DceError::invalid("upsample_flow", "value scale must be positive"));
    }
    let resized = ops::bilinear_resize(tape, &flow.tensor, out_h, out_w)?;
    let tensor = if (sx, sy) == (1.0, 1.0) {
        resized
    } else {
        ops::scale_channels(tape, &resized, &[T::cast(sx), T::cast(sy)])?
    };
    let frame = (
        (flow.frame.0 as f64 * sy).round() as usize,
        (flow.frame.1 as f64 * sx).round() as usize,
    );
    FlowField::new(tensor, frame)
}

/// Bilinear downsample of a ground-truth flow to `(out_h, out_w)`.
/// When `rescale_values` is set, values are multiplied by the dimension
/// ratio (out/in per axis) and the frame follows; otherwise values and frame
/// are kept.
pub fn downsample_gt<T: Scalar>(
    tape: &GradientTape<T>,
    gt: &FlowField<T>,
    out_h: usize,
    out_w: usize,
    rescale_values: bool,
) -> Result<FlowField<T>> {
    let (h, w) = gt.dims();
    if out_h > h || out_w > w {
        return Err(DceError::invalid(
            "downsample_gt",
            format!("target {out_h}x{out_w} exceeds source {h}x{w}"),
        ));
    }
    if !rescale_values {
        let tensor = ops::bilinear_resize(tape, &gt.tensor, out_h, out_w)?;
        return FlowField::new(tensor, gt.frame);
    }
    upsample_flow(
        tape,
        gt,
        out_h,
        out_w,
        (out_w as f64 / w as f64, out_h as f64 / h as f64),
    )
}

/// Sample `feature` at x + w(x): align-corners bilinear, zero outside.
/// Flow values are converted to the feature's pixel units first.
/// Differentiable with respect to both the feature and the flow.
pub fn warp<T: Scalar>(
    tape: &GradientTape<T>,
    feature: &Tensor<T>,
    flow: &FlowField<T>,
) -> Result<Tensor<T>> {
    let s = feature.shape();
    let fs = flow.tensor.shape();
    if (fs.n, fs.h, fs.w) != (s.n, s.h, s.w) {
        return Err(DceError::shape(
            "warp",
            format!("flow {} does not match feature {}", fs, s),
        ));
    }
    let (ux, uy) = flow.level_unit_factors();
    let (ux, uy) = (T::cast(ux), T::cast(uy));
    let plane = s.plane();
    let (h, w) = (s.h as isize, s.w as isize);
    let fd = flow.tensor.data();
    let x = feature.data();

    // Sample coordinates per (batch, pixel), shared across channels.
    let coords: Vec<(T, T)> = (0..s.n * plane)
        .map(|l| {
            let (b, p) = (l / plane, l % plane);
            let u = fd[(b * 2) * plane + p];
            let v = fd[(b * 2 + 1) * plane + p];
            (
                T::cast((p % s.w) as f64) + u * ux,
                T::cast((p / s.w) as f64) + v * uy,
            )
        })
        .collect();

    let mut data = vec![T::zero(); s.numel()];
    par_chunks_mut(&mut data, plane, |pi, out_plane| {
        let b = pi / s.c;
        let xc = &x[pi * plane..][..plane];
        let cb = &coords[b * plane..][..plane];
        for (p, o) in out_plane.iter_mut().enumerate() {
            let (xs, ys) = cb[p];
            let x0 = xs.floor();
            let y0 = ys.floor();
            let fx = xs - x0;
            let fy = ys - y0;
            let (x0, y0) = (x0.as_f64() as isize, y0.as_f64() as isize);
            let v00 = tap_at(xc, x0, y0, w, h);
            let v01 = tap_at(xc, x0 + 1, y0, w, h);
            let v10 = tap_at(xc, x0, y0 + 1, w, h);
            let v11 = tap_at(xc, x0 + 1, y0 + 1, w, h);
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            *o = top + (bot - top) * fy;
        }
    });

    let track = tape.wants(&[feature, &flow.tensor]);
    let out = Tensor::output(s, data, track);
    if track {
        let (xi, fi, o) = (feature.clone(), flow.tensor.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if xi.requires_grad() {
                    xi.accum_grad_with(|gx| {
                        par_chunks_mut(gx, plane, |pi, gplane| {
                            let b = pi / s.c;
                            let gop = &go[pi * plane..][..plane];
                            let cb = &coords[b * plane..][..plane];
                            for (p, &g) in gop.iter().enumerate() {
                                let (xs, ys) = cb[p];
                                let x0f = xs.floor();
                                let y0f = ys.floor();
                                let fx = xs - x0f;
                                let fy = ys - y0f;
                                let (x0, y0) = (x0f.as_f64() as isize, y0f.as_f64() as isize);
                                let one = T::one();
                                let mut put = |xg: isize, yg: isize, wgt: T| {
                                    if xg >= 0 && yg >= 0 && xg < w && yg < h {
                                        gplane[(yg * w + xg) as usize] += g * wgt;
                                    }
                                };
                                put(x0, y0, (one - fx) * (one - fy));
                                put(x0 + 1, y0, fx * (one - fy));
                                put(x0, y0 + 1, (one - fx) * fy);
                                put(x0 + 1, y0 + 1, fx * fy);
                            }
                        });
                    });
                }
                if fi.requires_grad() {
                    let x = xi.data();
                    fi.accum_grad_with(|gf| {
                        for b in 0..s.n {
                            let cb = &coords[b * plane..][..plane];
                            for p in 0..plane {
                                let (xs, ys) = cb[p];
                                let x0f = xs.floor();
                                let y0f = ys.floor();
                                let fx = xs - x0f;
                                let fy = ys - y0f;
                                let (x0, y0) = (x0f.as_f64() as isize, y0f.as_f64() as isize);
                                let one = T::one();
                                let mut du = T::zero();
                                let mut dv = T::zero();
                                for c in 0..s.c {
                                    let g = go[(b * s.c + c) * plane + p];
                                    if g == T::zero() {
                                        continue;
                                    }
                                    let xc = &x[(b * s.c + c) * plane..][..plane];
                                    let v00 = tap_at(xc, x0, y0, w, h);
                                    let v01 = tap_at(xc, x0 + 1, y0, w, h);
                                    let v10 = tap_at(xc, x0, y0 + 1, w, h);
                                    let v11 = tap_at(xc, x0 + 1, y0 + 1, w, h);
                                    du += g * ((v01 - v00) * (one - fy) + (v11 - v10) * fy);
                                    dv += g * ((v10 - v00) * (one - fx) + (v11 - v01) * fx);
                                }
                                gf[(b * 2) * plane + p] += du * ux;
                                gf[(b * 2 + 1) * plane + p] += dv * uy;
                            }
                        }
                    });
                }
            });
        }));
    }
    Ok(out)
}
