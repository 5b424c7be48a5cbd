//! Forward kernels and their backward (vector-Jacobian) rules.
//!
//! The forward functions here are usable on their own; [`super::Tape`]
//! records them together with whatever intermediates the backward rule needs.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor4;
use crate::error::{Error, Result};

/// Stride, dilation and zero padding of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Output length along one axis, or `None` when the dilated kernel does
    /// not fit in the padded input.
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::new(1, 1, 0)
    }
}

pub(crate) struct ConvPlan {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeometry,
}

impl ConvPlan {
    fn new(input: &Tensor4, kernel: &Tensor4, bias: &Tensor4, geom: ConvGeometry) -> Result<Self> {
        let [out_c, kin, kh, kw] = kernel.dims();
        if kin != input.c() {
            return Err(Error::shape("conv2d", "input channel", kin, input.c()));
        }
        if bias.len() != out_c {
            return Err(Error::shape("conv2d", "bias", out_c, bias.len()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::usage("conv2d: kernel height and width must be odd"));
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::usage("conv2d: stride and dilation must be at least 1"));
        }
        let oh = geom
            .output_len(input.h(), kh)
            .ok_or_else(|| Error::shape("conv2d", "height", geom.dilation * (kh - 1) + 1, input.h() + 2 * geom.padding))?;
        let ow = geom
            .output_len(input.w(), kw)
            .ok_or_else(|| Error::shape("conv2d", "width", geom.dilation * (kw - 1) + 1, input.w() + 2 * geom.padding))?;
        Ok(Self {
            in_c: kin,
            h: input.h(),
            w: input.w(),
            out_c,
            kh,
            kw,
            oh,
            ow,
            geom,
        })
    }

    #[inline]
    fn rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    #[inline]
    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one input item into a `(in_c·kh·kw, oh·ow)` patch matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        let ConvGeometry {
            stride,
            dilation,
            padding,
        } = self.geom;
        for ic in 0..self.in_c {
            let plane = &x[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ic * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                            *out = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back onto the input.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        let ConvGeometry {
            stride,
            dilation,
            padding,
        } = self.geom;
        for ic in 0..self.in_c {
            let plane = &mut dx[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ic * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-correlation with zero padding. `kernel` is `(out_c, in_c, kh, kw)`,
/// `bias` has `out_c` elements.
pub fn conv2d(input: &Tensor4, kernel: &Tensor4, bias: &Tensor4, geom: ConvGeometry) -> Result<Tensor4> {
    conv2d_with_cols(input, kernel, bias, geom).map(|(out, _)| out)
}

/// Forward pass that also returns the unfolded input for reuse by backward.
pub(crate) fn conv2d_with_cols(
    input: &Tensor4,
    kernel: &Tensor4,
    bias: &Tensor4,
    geom: ConvGeometry,
) -> Result<(Tensor4, Vec<f64>)> {
    let plan = ConvPlan::new(input, kernel, bias, geom)?;
    let (rows, p) = (plan.rows(), plan.positions());
    let n = input.n();
    let mut cols = vec![0.0; n * rows * p];
    let mut out = Tensor4::zeros([n, plan.out_c, plan.oh, plan.ow]);
    let weights = kernel.data();
    for item in 0..n {
        let cols_item = &mut cols[item * rows * p..(item + 1) * rows * p];
        plan.im2col(input.item(item), cols_item);
        let out_item = &mut out.data_mut()[item * plan.out_c * p..(item + 1) * plan.out_c * p];
        for oc in 0..plan.out_c {
            let dst = &mut out_item[oc * p..(oc + 1) * p];
            dst.fill(bias.data()[oc]);
            let wrow = &weights[oc * rows..(oc + 1) * rows];
            for (r, &wv) in wrow.iter().enumerate() {
                axpy(wv, &cols_item[r * p..(r + 1) * p], dst);
            }
        }
    }
    Ok((out, cols))
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor4>,
    pub kernel: Tensor4,
    pub bias: Tensor4,
}

pub(crate) fn conv2d_backward(
    input: &Tensor4,
    kernel: &Tensor4,
    bias: &Tensor4,
    geom: ConvGeometry,
    cols: &[f64],
    grad_out: &Tensor4,
    want_input: bool,
) -> Result<ConvGrads> {
    let plan = ConvPlan::new(input, kernel, bias, geom)?;
    let (rows, p) = (plan.rows(), plan.positions());
    let mut dk = Tensor4::zeros(kernel.dims());
    let mut db = Tensor4::zeros(bias.dims());
    let mut dx = want_input.then(|| Tensor4::zeros(input.dims()));
    let mut dcols = if want_input { vec![0.0; rows * p] } else { Vec::new() };
    let weights = kernel.data();
    for item in 0..input.n() {
        let cols_item = &cols[item * rows * p..(item + 1) * rows * p];
        let g_item = grad_out.item(item);
        for oc in 0..plan.out_c {
            let g = &g_item[oc * p..(oc + 1) * p];
            db.data_mut()[oc] += g.iter().sum::<f64>();
            let dk_row = &mut dk.data_mut()[oc * rows..(oc + 1) * rows];
            for (r, d) in dk_row.iter_mut().enumerate() {
                *d += dot(g, &cols_item[r * p..(r + 1) * p]);
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            for oc in 0..plan.out_c {
                let g = &g_item[oc * p..(oc + 1) * p];
                for r in 0..rows {
                    axpy(weights[oc * rows + r], g, &mut dcols[r * p..(r + 1) * p]);
                }
            }
            let len = dx.item_len();
            plan.col2im(&dcols, &mut dx.data_mut()[item * len..(item + 1) * len]);
        }
    }
    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    })
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes gradient where `x > 0`; the subgradient at zero is taken as zero.
pub(crate) fn relu_backward(x: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut g = grad_out.clone();
    for (gi, &xi) in g.data_mut().iter_mut().zip(x.data()) {
        if xi <= 0.0 {
            *gi = 0.0;
        }
    }
    g
}

pub fn tanh(x: &Tensor4) -> Tensor4 {
    x.map(libm::tanh)
}

pub(crate) fn tanh_backward(y: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut g = grad_out.clone();
    for (gi, &yi) in g.data_mut().iter_mut().zip(y.data()) {
        *gi *= 1.0 - yi * yi;
    }
    g
}

/// Softmax over all spatial positions of each single-channel item.
pub fn spatial_softmax(m: &Tensor4) -> Result<Tensor4> {
    if m.c() != 1 {
        return Err(Error::shape("spatial_softmax", "channel", 1, m.c()));
    }
    let mut out = m.clone();
    let len = m.plane_len();
    for item in out.data_mut().chunks_mut(len.max(1)) {
        let peak = item.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in item.iter_mut() {
            *v = libm::exp(*v - peak);
            total += *v;
        }
        for v in item.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

pub(crate) fn spatial_softmax_backward(y: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let len = y.plane_len().max(1);
    let mut g = Tensor4::zeros(y.dims());
    for ((dst, ys), gs) in g
        .data_mut()
        .chunks_mut(len)
        .zip(y.data().chunks(len))
        .zip(grad_out.data().chunks(len))
    {
        let inner = dot(ys, gs);
        for ((d, &yi), &gi) in dst.iter_mut().zip(ys).zip(gs) {
            *d = yi * (gi - inner);
        }
    }
    g
}

/// Sum over channels: `(n, c, h, w) -> (n, 1, h, w)`.
pub fn channel_sum(x: &Tensor4) -> Tensor4 {
    let plane = x.plane_len();
    let mut out = Tensor4::zeros([x.n(), 1, x.h(), x.w()]);
    for item in 0..x.n() {
        let dst = &mut out.data_mut()[item * plane..(item + 1) * plane];
        for ch in 0..x.c() {
            for (d, s) in dst.iter_mut().zip(x.plane(item, ch)) {
                *d += s;
            }
        }
    }
    out
}

pub(crate) fn channel_sum_backward(dims: [usize; 4], grad_out: &Tensor4) -> Tensor4 {
    Tensor4::from_fn(dims, |n, _, h, w| grad_out.at(n, 0, h, w))
}

/// Spatial mean: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool(x: &Tensor4) -> Result<Tensor4> {
    let plane = x.plane_len();
    if plane == 0 {
        return Err(Error::usage("global_avg_pool: empty spatial extent"));
    }
    let scale = 1.0 / plane as f64;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() * scale)
        .collect();
    Tensor4::new([x.n(), x.c(), 1, 1], data)
}

pub(crate) fn global_avg_pool_backward(dims: [usize; 4], grad_out: &Tensor4) -> Tensor4 {
    let scale = 1.0 / (dims[2] * dims[3]) as f64;
    Tensor4::from_fn(dims, |n, c, _, _| grad_out.at(n, c, 0, 0) * scale)
}

/// `x · weightᵀ + bias` with `x` flattened to `(n, d)` and `weight` `(k, d)`.
pub fn linear(x: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Result<Tensor4> {
    let (n, d) = (x.n(), x.item_len());
    let k = weight.n();
    if weight.item_len() != d {
        return Err(Error::shape("linear", "feature", weight.item_len(), d));
    }
    if bias.len() != k {
        return Err(Error::shape("linear", "bias", k, bias.len()));
    }
    let mut out = Tensor4::zeros([n, k, 1, 1]);
    for row in 0..n {
        let xr = x.item(row);
        for j in 0..k {
            out.data_mut()[row * k + j] = dot(xr, weight.item(j)) + bias.data()[j];
        }
    }
    Ok(out)
}

pub(crate) struct LinearGrads {
    pub x: Option<Tensor4>,
    pub weight: Tensor4,
    pub bias: Tensor4,
}

pub(crate) fn linear_backward(
    x: &Tensor4,
    weight: &Tensor4,
    bias: &Tensor4,
    grad_out: &Tensor4,
    want_x: bool,
) -> LinearGrads {
    let (n, d, k) = (x.n(), x.item_len(), weight.n());
    let mut dw = Tensor4::zeros(weight.dims());
    let mut db = Tensor4::zeros(bias.dims());
    let mut dx = want_x.then(|| Tensor4::zeros(x.dims()));
    for row in 0..n {
        let xr = x.item(row);
        for j in 0..k {
            let g = grad_out.data()[row * k + j];
            db.data_mut()[j] += g;
            axpy(g, xr, &mut dw.data_mut()[j * d..(j + 1) * d]);
            if let Some(dx) = dx.as_mut() {
                axpy(g, weight.item(j), &mut dx.data_mut()[row * d..(row + 1) * d]);
            }
        }
    }
    LinearGrads {
        x: dx,
        weight: dw,
        bias: db,
    }
}

fn check_spatial(op: &'static str, features: &Tensor4, map: &Tensor4) -> Result<()> {
    if map.n() != features.n() {
        return Err(Error::shape(op, "batch", features.n(), map.n()));
    }
    if map.c() != 1 {
        return Err(Error::shape(op, "channel", 1, map.c()));
    }
    if map.h() != features.h() {
        return Err(Error::shape(op, "height", features.h(), map.h()));
    }
    if map.w() != features.w() {
        return Err(Error::shape(op, "width", features.w(), map.w()));
    }
    Ok(())
}

/// Inner product of every channel with a single-channel map:
/// `(n, c, h, w) × (n, 1, h, w) -> (n, c, 1, 1)`. Produces `c` scalars per
/// item; no channel-by-channel matrix is formed.
pub fn channel_correspondence(features: &Tensor4, map: &Tensor4) -> Result<Tensor4> {
    check_spatial("channel_correspondence", features, map)?;
    let mut out = Tensor4::zeros([features.n(), features.c(), 1, 1]);
    for item in 0..features.n() {
        let s = map.plane(item, 0);
        for ch in 0..features.c() {
            let v = dot(features.plane(item, ch), s);
            out.set(item, ch, 0, 0, v);
        }
    }
    Ok(out)
}

pub(crate) fn channel_correspondence_backward(
    features: &Tensor4,
    map: &Tensor4,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4) {
    let plane = features.plane_len();
    let mut dx = Tensor4::zeros(features.dims());
    let mut ds = Tensor4::zeros(map.dims());
    for item in 0..features.n() {
        let s = map.plane(item, 0);
        for ch in 0..features.c() {
            let g = grad_out.at(item, ch, 0, 0);
            let start = dx.offset(item, ch, 0, 0);
            axpy(g, s, &mut dx.data_mut()[start..start + plane]);
            axpy(g, features.plane(item, ch), &mut ds.data_mut()[item * plane..(item + 1) * plane]);
        }
    }
    (dx, ds)
}

/// `(1/c) Σ_k gate_k · x_k`: `(n, c, h, w) × (n, c, 1, 1) -> (n, 1, h, w)`.
pub fn gated_average(features: &Tensor4, gates: &Tensor4) -> Result<Tensor4> {
    if gates.n() != features.n() {
        return Err(Error::shape("gated_average", "batch", features.n(), gates.n()));
    }
    if gates.item_len() != features.c() {
        return Err(Error::shape("gated_average", "channel", features.c(), gates.item_len()));
    }
    let plane = features.plane_len();
    let inv_c = 1.0 / features.c() as f64;
    let mut out = Tensor4::zeros([features.n(), 1, features.h(), features.w()]);
    for item in 0..features.n() {
        let dst = &mut out.data_mut()[item * plane..(item + 1) * plane];
        for ch in 0..features.c() {
            axpy(gates.at(item, ch, 0, 0), features.plane(item, ch), dst);
        }
        for v in dst.iter_mut() {
            *v *= inv_c;
        }
    }
    Ok(out)
}

pub(crate) fn gated_average_backward(
    features: &Tensor4,
    gates: &Tensor4,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4) {
    let plane = features.plane_len();
    let inv_c = 1.0 / features.c() as f64;
    let mut dx = Tensor4::zeros(features.dims());
    let mut dg = Tensor4::zeros(gates.dims());
    for item in 0..features.n() {
        let g = grad_out.plane(item, 0);
        for ch in 0..features.c() {
            let start = dx.offset(item, ch, 0, 0);
            axpy(
                gates.at(item, ch, 0, 0) * inv_c,
                g,
                &mut dx.data_mut()[start..start + plane],
            );
            dg.data_mut()[item * features.c() + ch] = dot(g, features.plane(item, ch)) * inv_c;
        }
    }
    (dx, dg)
}

/// Concatenation along the channel axis.
pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
    let first = parts
        .first()
        .ok_or_else(|| Error::usage("concat_channels: no inputs"))?;
    let (n, h, w) = (first.n(), first.h(), first.w());
    for p in parts {
        if p.n() != n {
            return Err(Error::shape("concat_channels", "batch", n, p.n()));
        }
        if p.h() != h {
            return Err(Error::shape("concat_channels", "height", h, p.h()));
        }
        if p.w() != w {
            return Err(Error::shape("concat_channels", "width", w, p.w()));
        }
    }
    let c = parts.iter().map(|p| p.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for item in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(item));
        }
    }
    Tensor4::new([n, c, h, w], data)
}

pub(crate) fn concat_channels_backward(part_dims: &[[usize; 4]], grad_out: &Tensor4) -> Vec<Tensor4> {
    let mut out: Vec<Tensor4> = part_dims.iter().map(|&d| Tensor4::zeros(d)).collect();
    for item in 0..grad_out.n() {
        let mut src = grad_out.item(item);
        for part in out.iter_mut() {
            let len = part.item_len();
            let (head, rest) = src.split_at(len);
            part.data_mut()[item * len..(item + 1) * len].copy_from_slice(head);
            src = rest;
        }
    }
    out
}

/// Source sampling taps for one output position along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre taps, clamped to `[0, src_len - 1]`.
fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    let last = (src_len - 1) as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = libm::floor(s) as usize;
            let hi = (lo + 1).min(src_len - 1);
            Tap {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resampling of every plane to `(out_h, out_w)` using the
/// half-pixel-centre convention. Equal sizes reproduce the input exactly.
pub fn resize_bilinear(x: &Tensor4, out_h: usize, out_w: usize) -> Result<Tensor4> {
    if x.h() == 0 || x.w() == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::usage("resize_bilinear: zero-sized source or target"));
    }
    let rows = bilinear_taps(x.h(), out_h);
    let cols = bilinear_taps(x.w(), out_w);
    let mut out = Tensor4::zeros([x.n(), x.c(), out_h, out_w]);
    let mut at = 0;
    for item in 0..x.n() {
        for ch in 0..x.c() {
            let src = x.plane(item, ch);
            for ry in &rows {
                let top = &src[ry.lo * x.w()..(ry.lo + 1) * x.w()];
                let bottom = &src[ry.hi * x.w()..(ry.hi + 1) * x.w()];
                for cx in &cols {
                    let t = top[cx.lo] + cx.frac * (top[cx.hi] - top[cx.lo]);
                    let b = bottom[cx.lo] + cx.frac * (bottom[cx.hi] - bottom[cx.lo]);
                    out.data_mut()[at] = t + ry.frac * (b - t);
                    at += 1;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn resize_bilinear_backward(dims: [usize; 4], grad_out: &Tensor4) -> Tensor4 {
    let (h, w) = (dims[2], dims[3]);
    let rows = bilinear_taps(h, grad_out.h());
    let cols = bilinear_taps(w, grad_out.w());
    let mut dx = Tensor4::zeros(dims);
    let mut at = 0;
    for item in 0..dims[0] {
        for ch in 0..dims[1] {
            let base = (item * dims[1] + ch) * h * w;
            for ry in &rows {
                for cx in &cols {
                    let g = grad_out.data()[at];
                    at += 1;
                    let d = dx.data_mut();
                    d[base + ry.lo * w + cx.lo] += g * (1.0 - ry.frac) * (1.0 - cx.frac);
                    d[base + ry.lo * w + cx.hi] += g * (1.0 - ry.frac) * cx.frac;
                    d[base + ry.hi * w + cx.lo] += g * ry.frac * (1.0 - cx.frac);
                    d[base + ry.hi * w + cx.hi] += g * ry.frac * cx.frac;
                }
            }
        }
    }
    dx
}

/// Softmax of a logit slice, stabilised by max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| libm::exp(v - peak)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `−log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::usage("cross_entropy: label out of range"));
    }
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = peak + libm::log(logits.iter().map(|&v| libm::exp(v - peak)).sum::<f64>());
    Ok(lse - logits[label])
}
