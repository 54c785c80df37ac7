//! Global and local correlation volumes plus cost-volume post-processing.
//!
//! The global volume holds the dot product between every pair of target and
//! source feature vectors; its channel dimension is H*W (source locations,
//! row-major), hence the quadratic cost. The local volume restricts source
//! displacements to an l-infinity ball of radius R, with (2R+1)^2 channels
//! (displacements row-major from -R to +R) and zero padding at borders.

use crate::error::{DceError, Result};
use crate::parallel::par_chunks_mut;
use crate::tensor::{ops, GradientTape, Scalar, Shape, Tensor};

/// All-pairs cost volume of shape (batch, H*W, H, W); channel q corresponds
/// to source location (y', x') with q = y' * W + x'.
#[derive(Clone, Debug)]
pub struct GlobalCostVolume<T: Scalar = f32> {
    pub tensor: Tensor<T>,
}

impl<T: Scalar> GlobalCostVolume<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.c != s.h * s.w {
            return Err(DceError::shape(
                "global_cost_volume",
                format!("channels {} != {}x{}", s.c, s.h, s.w),
            ));
        }
        Ok(GlobalCostVolume { tensor })
    }
}

/// Windowed cost volume of shape (batch, (2R+1)^2, H, W); channel j
/// corresponds to displacement (dy, dx) with j = (dy+R)*(2R+1) + (dx+R).
#[derive(Clone, Debug)]
pub struct LocalCostVolume<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub radius: usize,
}

impl<T: Scalar> LocalCostVolume<T> {
    pub fn new(tensor: Tensor<T>, radius: usize) -> Result<Self> {
        let side = 2 * radius + 1;
        if tensor.shape().c != side * side {
            return Err(DceError::shape(
                "local_cost_volume",
                format!("channels {} != (2*{radius}+1)^2", tensor.shape().c),
            ));
        }
        Ok(LocalCostVolume { tensor, radius })
    }

    /// Channel index holding the zero-displacement similarity.
    pub fn center_channel(&self) -> usize {
        let side = 2 * self.radius + 1;
        (side * side - 1) / 2
    }
}

/// Multiply-accumulate count of a global correlation at one level.
pub fn global_correlation_macs(h: usize, w: usize, d: usize) -> u64 {
    let hw = (h * w) as u64;
    hw * hw * d as u64
}

/// Multiply-accumulate count of a local correlation at one level.
pub fn local_correlation_macs(h: usize, w: usize, d: usize, radius: usize) -> u64 {
    let side = (2 * radius + 1) as u64;
    (h * w) as u64 * side * side * d as u64
}

/// Valid target-column span [lo, hi) for a horizontal displacement `dx`.
#[inline]
fn col_span(dx: isize, w: usize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo, hi.max(lo))
}

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Shape> {
    if a.shape() != b.shape() {
        return Err(DceError::shape(
            op,
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    Ok(a.shape())
}

/// C(x, x') = F_t(x) . F_s(x') for every pair of locations.
pub fn global_correlation<T: Scalar>(
    tape: &GradientTape<T>,
    f_t: &Tensor<T>,
    f_s: &Tensor<T>,
) -> Result<GlobalCostVolume<T>> {
    let s = check_same_shape("global_correlation", f_t, f_s)?;
    let (d, plane) = (s.c, s.plane());
    let q_count = plane;
    let out_shape = Shape::new(s.n, q_count, s.h, s.w);
    let (ft, fs) = (f_t.data(), f_s.data());

    let mut data = vec![T::zero(); out_shape.numel()];
    par_chunks_mut(&mut data, plane, |pi, oplane| {
        let (b, q) = (pi / q_count, pi % q_count);
        for c in 0..d {
            let wv = fs[(b * d + c) * plane + q];
            let ftc = &ft[(b * d + c) * plane..][..plane];
            for (o, &t) in oplane.iter_mut().zip(ftc) {
                *o += wv * t;
            }
        }
    });

    let track = tape.wants(&[f_t, f_s]);
    let out = Tensor::output(out_shape, data, track);
    if track {
        let (ti, si, o) = (f_t.clone(), f_s.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if ti.requires_grad() {
                    let fs = si.data();
                    ti.accum_grad_with(|gt| {
                        par_chunks_mut(gt, plane, |pi, gp| {
                            let (b, c) = (pi / d, pi % d);
                            for q in 0..q_count {
                                let wv = fs[(b * d + c) * plane + q];
                                let gq = &go[(b * q_count + q) * plane..][..plane];
                                for (dst, &g) in gp.iter_mut().zip(gq) {
                                    *dst += wv * g;
                                }
                            }
                        });
                    });
                }
                if si.requires_grad() {
                    let ft = ti.data();
                    si.accum_grad_with(|gs| {
                        par_chunks_mut(gs, plane, |pi, gp| {
                            let (b, c) = (pi / d, pi % d);
                            let ftc = &ft[(b * d + c) * plane..][..plane];
                            for (q, dst) in gp.iter_mut().enumerate() {
                                let gq = &go[(b * q_count + q) * plane..][..plane];
                                let mut acc = T::zero();
                                for (&g, &t) in gq.iter().zip(ftc) {
                                    acc += g * t;
                                }
                                *dst += acc;
                            }
                        });
                    });
                }
            });
        }));
    }
    GlobalCostVolume::new(out)
}

/// c(x, d) = F_t(x) . F_s(x + d) for every displacement with max norm <= R.
/// Out-of-border source accesses contribute zero.
pub fn local_correlation<T: Scalar>(
    tape: &GradientTape<T>,
    f_t: &Tensor<T>,
    f_s: &Tensor<T>,
    radius: usize,
) -> Result<LocalCostVolume<T>> {
    if radius < 1 {
        return Err(DceError::invalid("local_correlation", "radius must be >= 1"));
    }
    let s = check_same_shape("local_correlation", f_t, f_s)?;
    let (d, plane) = (s.c, s.plane());
    let side = 2 * radius + 1;
    let ch = side * side;
    let out_shape = Shape::new(s.n, ch, s.h, s.w);
    let (ft, fs) = (f_t.data(), f_s.data());
    let r = radius as isize;
    let hh = s.h as isize;

    let mut data = vec![T::zero(); out_shape.numel()];
    par_chunks_mut(&mut data, plane, |pi, oplane| {
        let (b, j) = (pi / ch, pi % ch);
        let dy = (j / side) as isize - r;
        let dx = (j % side) as isize - r;
        let (lo, hi) = col_span(dx, s.w);
        if lo >= hi {
            return;
        }
        for c in 0..d {
            let ftc = &ft[(b * d + c) * plane..][..plane];
            let fsc = &fs[(b * d + c) * plane..][..plane];
            for y in 0..s.h {
                let ys = y as isize + dy;
                if ys < 0 || ys >= hh {
                    continue;
                }
                let orow = &mut oplane[y * s.w..][..s.w];
                let trow = &ftc[y * s.w..][..s.w];
                let srow = &fsc[ys as usize * s.w..][..s.w];
                let src = &srow[(lo as isize + dx) as usize..][..hi - lo];
                for ((o, &t), &sv) in orow[lo..hi].iter_mut().zip(&trow[lo..hi]).zip(src) {
                    *o += t * sv;
                }
            }
        }
    });

    let track = tape.wants(&[f_t, f_s]);
    let out = Tensor::output(out_shape, data, track);
    if track {
        let (ti, si, o) = (f_t.clone(), f_s.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if ti.requires_grad() {
                    let fs = si.data();
                    ti.accum_grad_with(|gt| {
                        par_chunks_mut(gt, plane, |pi, gp| {
                            let (b, c) = (pi / d, pi % d);
                            let fsc = &fs[(b * d + c) * plane..][..plane];
                            for j in 0..ch {
                                let dy = (j / side) as isize - r;
                                let dx = (j % side) as isize - r;
                                let (lo, hi) = col_span(dx, s.w);
                                if lo >= hi {
                                    continue;
                                }
                                let gj = &go[(b * ch + j) * plane..][..plane];
                                for y in 0..s.h {
                                    let ys = y as isize + dy;
                                    if ys < 0 || ys >= hh {
                                        continue;
                                    }
                                    let grow = &gj[y * s.w..][..s.w];
                                    let srow = &fsc[ys as usize * s.w..][..s.w];
                                    let src = &srow[(lo as isize + dx) as usize..][..hi - lo];
                                    for ((dst, &g), &sv) in
                                        gp[y * s.w + lo..y * s.w + hi].iter_mut().zip(&grow[lo..hi]).zip(src)
                                    {
                                        *dst += g * sv;
                                    }
                                }
                            }
                        });
                    });
                }
                if si.requires_grad() {
                    let ft = ti.data();
                    si.accum_grad_with(|gs| {
                        par_chunks_mut(gs, plane, |pi, gp| {
                            let (b, c) = (pi / d, pi % d);
                            let ftc = &ft[(b * d + c) * plane..][..plane];
                            for j in 0..ch {
                                let dy = (j / side) as isize - r;
                                let dx = (j % side) as isize - r;
                                let (lo, hi) = col_span(dx, s.w);
                                if lo >= hi {
                                    continue;
                                }
                                let gj = &go[(b * ch + j) * plane..][..plane];
                                for y in 0..s.h {
                                    let ys = y as isize + dy;
                                    if ys < 0 || ys >= hh {
                                        continue;
                                    }
                                    let grow = &gj[y * s.w..][..s.w];
                                    let trow = &ftc[y * s.w..][..s.w];
                                    let dst = &mut gp
                                        [ys as usize * s.w + (lo as isize + dx) as usize..]
                                        [..hi - lo];
                                    for ((dv, &g), &t) in
                                        dst.iter_mut().zip(&grow[lo..hi]).zip(&trow[lo..hi])
                                    {
                                        *dv += g * t;
                                    }
                                }
                            }
                        });
                    });
                }
            });
        }));
    }
    LocalCostVolume::new(out, radius)
}

/// Order of the two post-processing steps applied to a global volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeOrder {
    /// Channel-wise L2 normalization, then ReLU (default).
    NormThenRelu,
    /// ReLU first, then channel-wise L2 normalization.
    ReluThenNorm,
}

impl Default for NormalizeOrder {
    fn default() -> Self {
        NormalizeOrder::NormThenRelu
    }
}

/// Channel-wise L2 normalization combined with ReLU; output is non-negative.
pub fn normalize_cost_volume<T: Scalar>(
    tape: &GradientTape<T>,
    volume: &GlobalCostVolume<T>,
    order: NormalizeOrder,
) -> Result<GlobalCostVolume<T>> {
    let eps = T::cast(1e-6);
    let t = match order {
        NormalizeOrder::NormThenRelu => {
            ops::relu(tape, &ops::l2_normalize_channels(tape, &volume.tensor, eps)?)
        }
        NormalizeOrder::ReluThenNorm => {
            ops::l2_normalize_channels(tape, &ops::relu(tape, &volume.tensor), eps)?
        }
    };
    GlobalCostVolume::new(t)
}

/// Soft mutual nearest-neighbor filtering of a non-negative global volume.
///
/// Each entry is multiplied by its ratio to the maximum over target
/// positions (fixed source) and by its ratio to the maximum over source
/// positions (fixed target); a slice whose maximum is zero yields ratio 0.
/// Entries that are simultaneous maxima of both slices are unchanged.
pub fn cyclic_consistency_filter<T: Scalar>(
    tape: &GradientTape<T>,
    volume: &GlobalCostVolume<T>,
) -> Result<GlobalCostVolume<T>> {
    let s = volume.tensor.shape();
    let (q_count, plane) = (s.c, s.plane());
    let c = volume.tensor.data();
    if c.iter().any(|&v| v < T::zero()) {
        return Err(DceError::invalid(
            "cyclic_consistency_filter",
            "volume must be non-negative (normalize first)",
        ));
    }

    // Max over target positions for each (batch, source channel) ...
    let mut max_t = vec![T::zero(); s.n * q_count];
    let mut arg_t = vec![0usize; s.n * q_count];
    for (i, (mv, ai)) in max_t.iter_mut().zip(arg_t.iter_mut()).enumerate() {
        let sl = &c[i * plane..][..plane];
        let (mut best, mut bi) = (sl[0], 0usize);
        for (p, &v) in sl.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                bi = p;
            }
        }
        *mv = best;
        *ai = bi;
    }
    // ... and max over source channels for each (batch, target position).
    let mut max_s = vec![T::zero(); s.n * plane];
    let mut arg_s = vec![0usize; s.n * plane];
    for b in 0..s.n {
        for p in 0..plane {
            let (mut best, mut bi) = (c[(b * q_count) * plane + p], 0usize);
            for q in 1..q_count {
                let v = c[(b * q_count + q) * plane + p];
                if v > best {
                    best = v;
                    bi = q;
                }
            }
            max_s[b * plane + p] = best;
            arg_s[b * plane + p] = bi;
        }
    }

    let ratio = |v: T, m: T| if m > T::zero() { v / m } else { T::zero() };
    let mut data = vec![T::zero(); s.numel()];
    par_chunks_mut(&mut data, plane, |pi, op| {
        let (b, q) = (pi / q_count, pi % q_count);
        let mt = max_t[b * q_count + q];
        let cs = &c[pi * plane..][..plane];
        let msb = &max_s[b * plane..][..plane];
        for ((o, &v), &ms) in op.iter_mut().zip(cs).zip(msb) {
            *o = ratio(v, mt) * ratio(v, ms) * v;
        }
    });

    let track = tape.wants(&[&volume.tensor]);
    let out = Tensor::output(s, data, track);
    if track {
        let (ci, o) = (volume.tensor.clone(), out.clone());
        tape.push(Box::new(move || {
            o.with_grad(|go| {
                let Some(go) = go else { return };
                if !ci.requires_grad() {
                    return;
                }
                let c = ci.data();
                ci.accum_grad_with(|gc| {
                    let three = T::cast(3.0);
                    // Direct term: d/dC of C^3/(mt*ms) treating maxima fixed.
                    for b in 0..s.n {
                        for q in 0..q_count {
                            let mt = max_t[b * q_count + q];
                            if mt <= T::zero() {
                                continue;
                            }
                            let base = (b * q_count + q) * plane;
                            for p in 0..plane {
                                let ms = max_s[b * plane + p];
                                if ms <= T::zero() {
                                    continue;
                                }
                                let v = c[base + p];
                                gc[base + p] += go[base + p] * three * v * v / (mt * ms);
                            }
                        }
                    }
                    // Through the target-side maximum (one argmax per (b, q)).
                    for b in 0..s.n {
                        for q in 0..q_count {
                            let mt = max_t[b * q_count + q];
                            if mt <= T::zero() {
                                continue;
                            }
                            let base = (b * q_count + q) * plane;
                            let mut acc = T::zero();
                            for p in 0..plane {
                                let ms = max_s[b * plane + p];
                                if ms <= T::zero() {
                                    continue;
                                }
                                let v = c[base + p];
                                acc += go[base + p] * v * v * v / (mt * mt * ms);
                            }
                            gc[base + arg_t[b * q_count + q]] -= acc;
                        }
                    }
                    // Through the source-side maximum (one argmax per (b, p)).
                    for b in 0..s.n {
                        for p in 0..plane {
                            let ms = max_s[b * plane + p];
                            if ms <= T::zero() {
                                continue;
                            }
                            let mut acc = T::zero();
                            for q in 0..q_count {
                                let mt = max_t[b * q_count + q];
                                if mt <= T::zero() {
                                    continue;
                                }
                                let v = c[(b * q_count + q) * plane + p];
                                acc += go[(b * q_count + q) * plane + p] * v * v * v
                                    / (mt * ms * ms);
                            }
                            gc[(b * q_count + arg_s[b * plane + p]) * plane + p] -= acc;
                        }
                    }
                });
            });
        }));
    }
    GlobalCostVolume::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::seeded_tensor;

    #[test]
    fn global_one_hot_features_give_identity_pattern() {
        // F_t(x) = F_s(x) = e_idx(x) on a 2x2 grid with 4 channels
        let tape = GradientTape::disabled();
        let (h, w) = (2, 2);
        let plane = h * w;
        let mut data = vec![0.0f32; plane * plane];
        for p in 0..plane {
            data[p * plane + p] = 1.0;
        }
        let f = Tensor::from_vec(Shape::new(1, plane, h, w), data).unwrap();
        let cv = global_correlation(&tape, &f, &f).unwrap();
        for q in 0..plane {
            for p in 0..plane {
                let want = if p == q { 1.0 } else { 0.0 };
                assert_eq!(cv.tensor.data()[q * plane + p], want);
            }
        }
    }

    #[test]
    fn global_self_correlation_argmax_is_identity() {
        let tape = GradientTape::disabled();
        let raw = seeded_tensor::<f32>(Shape::new(1, 6, 3, 3), 17);
        let f = ops::l2_normalize_channels(&tape, &raw, 1e-6).unwrap();
        let cv = global_correlation(&tape, &f, &f).unwrap();
        let plane = 9;
        for p in 0..plane {
            let mut best = f32::MIN;
            let mut arg = 0;
            for q in 0..plane {
                let v = cv.tensor.data()[q * plane + p];
                if v > best {
                    best = v;
                    arg = q;
                }
            }
            assert_eq!(arg, p);
        }
    }

    #[test]
    fn global_matches_quadruple_loop_oracle() {
        let tape = GradientTape::disabled();
        let ft = seeded_tensor::<f32>(Shape::new(1, 3, 4, 4), 5);
        let fs = seeded_tensor::<f32>(Shape::new(1, 3, 4, 4), 6);
        let cv = global_correlation(&tape, &ft, &fs).unwrap();
        let (d, h, w) = (3, 4, 4);
        let plane = h * w;
        for yq in 0..h {
            for xq in 0..w {
                for y in 0..h {
                    for x in 0..w {
                        let mut want = 0.0f64;
                        for c in 0..d {
                            want += ft.data()[c * plane + y * w + x] as f64
                                * fs.data()[c * plane + yq * w + xq] as f64;
                        }
                        let got =
                            cv.tensor.data()[(yq * w + xq) * plane + y * w + x] as f64;
                        assert!((got - want).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn local_constant_fields_equal_squared_norm_in_interior() {
        let tape = GradientTape::disabled();
        let (h, w, d, radius) = (5, 5, 3, 1);
        let mut data = vec![0.0f32; d * h * w];
        for c in 0..d {
            data[c * h * w..][..h * w].fill((c + 1) as f32);
        }
        let f = Tensor::from_vec(Shape::new(1, d, h, w), data).unwrap();
        let cv = local_correlation(&tape, &f, &f, radius).unwrap();
        let norm_sq: f32 = (1..=d).map(|v| (v * v) as f32).sum();
        let plane = h * w;
        let center = 2 * w + 2;
        for j in 0..9 {
            assert!((cv.tensor.data()[j * plane + center] - norm_sq).abs() < 1e-5);
        }
    }

    #[test]
    fn local_corner_has_exactly_four_nonzero_channels() {
        let tape = GradientTape::disabled();
        let f = Tensor::filled(Shape::new(1, 2, 4, 4), 1.0f32);
        let cv = local_correlation(&tape, &f, &f, 1).unwrap();
        let plane = 16;
        let nonzero = (0..9)
            .filter(|j| cv.tensor.data()[j * plane].abs() > 0.0)
            .count();
        assert_eq!(nonzero, 4);
    }

    #[test]
    fn local_matches_brute_force_oracle() {
        let tape = GradientTape::disabled();
        let (h, w, d, radius) = (6usize, 6usize, 4usize, 2usize);
        let ft = seeded_tensor::<f32>(Shape::new(1, d, h, w), 21);
        let fs = seeded_tensor::<f32>(Shape::new(1, d, h, w), 22);
        let cv = local_correlation(&tape, &ft, &fs, radius).unwrap();
        let side = 2 * radius + 1;
        let plane = h * w;
        for dy in -(radius as isize)..=radius as isize {
            for dx in -(radius as isize)..=radius as isize {
                let j = (dy + radius as isize) as usize * side + (dx + radius as isize) as usize;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (ys, xs) = (y + dy, x + dx);
                        let mut want = 0.0f64;
                        if ys >= 0 && xs >= 0 && ys < h as isize && xs < w as isize {
                            for c in 0..d {
                                want += ft.data()[c * plane + (y * w as isize + x) as usize]
                                    as f64
                                    * fs.data()
                                        [c * plane + (ys * w as isize + xs) as usize]
                                        as f64;
                            }
                        }
                        let got =
                            cv.tensor.data()[j * plane + (y * w as isize + x) as usize] as f64;
                        assert!((got - want).abs() < 1e-6, "d=({dy},{dx}) at ({y},{x})");
                    }
                }
            }
        }
    }

    #[test]
    fn normalize_zero_volume_stays_zero() {
        let tape = GradientTape::<f32>::disabled();
        let cv = GlobalCostVolume::new(Tensor::zeros(Shape::new(1, 4, 2, 2))).unwrap();
        let out = normalize_cost_volume(&tape, &cv, NormalizeOrder::NormThenRelu).unwrap();
        assert!(out.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_single_positive_entry_becomes_one() {
        let tape = GradientTape::disabled();
        let mut data = vec![0.0f32; 4 * 4];
        for p in 0..4 {
            data[p * 4 + p] = 0.3 + p as f32; // one positive entry per location
        }
        let cv =
            GlobalCostVolume::new(Tensor::from_vec(Shape::new(1, 4, 2, 2), data).unwrap()).unwrap();
        let out = normalize_cost_volume(&tape, &cv, NormalizeOrder::NormThenRelu).unwrap();
        for p in 0..4 {
            assert!((out.tensor.data()[p * 4 + p] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_channel_norms_at_most_one() {
        let tape = GradientTape::disabled();
        let raw = seeded_tensor::<f32>(Shape::new(1, 9, 3, 3), 77);
        let cv = GlobalCostVolume::new(raw).unwrap();
        let out = normalize_cost_volume(&tape, &cv, NormalizeOrder::NormThenRelu).unwrap();
        for p in 0..9 {
            let norm: f32 = (0..9)
                .map(|q| out.tensor.data()[q * 9 + p].powi(2))
                .sum::<f32>()
                .sqrt();
            assert!(norm <= 1.0 + 1e-5);
        }
    }

    fn cc_oracle(c: &[f32], n: usize, q_count: usize, plane: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; c.len()];
        for b in 0..n {
            for q in 0..q_count {
                for p in 0..plane {
                    let v = c[(b * q_count + q) * plane + p];
                    let mut mt = 0.0f32;
                    for pp in 0..plane {
                        mt = mt.max(c[(b * q_count + q) * plane + pp]);
                    }
                    let mut ms = 0.0f32;
                    for qq in 0..q_count {
                        ms = ms.max(c[(b * q_count + qq) * plane + p]);
                    }
                    let rt = if mt > 0.0 { v / mt } else { 0.0 };
                    let rs = if ms > 0.0 { v / ms } else { 0.0 };
                    out[(b * q_count + q) * plane + p] = rt * rs * v;
                }
            }
        }
        out
    }

    #[test]
    fn cyclic_filter_keeps_lone_and_constant_volumes() {
        let tape = GradientTape::disabled();
        let mut data = vec![0.0f32; 4 * 4];
        data[2 * 4 + 3] = 0.7;
        let lone =
            GlobalCostVolume::new(Tensor::from_vec(Shape::new(1, 4, 2, 2), data).unwrap()).unwrap();
        let out = cyclic_consistency_filter(&tape, &lone).unwrap();
        assert_eq!(out.tensor.data(), lone.tensor.data());

        let constant =
            GlobalCostVolume::new(Tensor::filled(Shape::new(1, 4, 2, 2), 0.4f32)).unwrap();
        let out = cyclic_consistency_filter(&tape, &constant).unwrap();
        for &v in out.tensor.data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn cyclic_filter_matches_direct_formula() {
        let tape = GradientTape::disabled();
        let raw = seeded_tensor::<f32>(Shape::new(1, 9, 3, 3), 3);
        let nonneg: Vec<f32> = raw.data().iter().map(|&v| v.abs()).collect();
        let cv = GlobalCostVolume::new(
            Tensor::from_vec(Shape::new(1, 9, 3, 3), nonneg.clone()).unwrap(),
        )
        .unwrap();
        let out = cyclic_consistency_filter(&tape, &cv).unwrap();
        let want = cc_oracle(&nonneg, 1, 9, 9);
        for (a, b) in out.tensor.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
            // filtered volume never exceeds the input
        }
        for (a, b) in out.tensor.data().iter().zip(&nonneg) {
            assert!(a <= &(b + 1e-6));
        }
    }

    #[test]
    fn cyclic_filter_idempotent_on_binary_ratio_volumes() {
        // identity pattern: every nonzero entry is the max of both slices
        let tape = GradientTape::disabled();
        let plane = 4;
        let mut data = vec![0.0f32; plane * plane];
        for p in 0..plane {
            data[p * plane + p] = 0.5 + 0.1 * p as f32;
        }
        let cv = GlobalCostVolume::new(
            Tensor::from_vec(Shape::new(1, plane, 2, 2), data).unwrap(),
        )
        .unwrap();
        let once = cyclic_consistency_filter(&tape, &cv).unwrap();
        let twice = cyclic_consistency_filter(&tape, &once).unwrap();
        assert_eq!(once.tensor.data(), twice.tensor.data());
    }

    #[test]
    fn macs_formulas() {
        assert_eq!(global_correlation_macs(16, 16, 3), 256 * 256 * 3);
        assert_eq!(local_correlation_macs(8, 8, 4, 2), 64 * 25 * 4);
        // doubling spatial size multiplies global cost by exactly 16
        assert_eq!(
            global_correlation_macs(32, 32, 7),
            16 * global_correlation_macs(16, 16, 7)
        );
    }
}
