//! Per-pixel filter fields, their application to images, and the coordinate
//! flows they project onto.
//!
//! Kernel offsets are enumerated row-major from `(-r, -r)` to `(r, r)`; every
//! serialized logit buffer uses this order.

use crate::error::{Error, Result};
use crate::grid::{im2col, Image, PatchMatrix};

/// Per-pixel `k x k` kernel logits at one pyramid scale. Probabilities are the
/// per-pixel softmax of the logits and are materialized on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterFlowField {
    height: usize,
    width: usize,
    k: usize,
    scale_index: usize,
    logits: Vec<f64>,
}

impl FilterFlowField {
    pub fn from_logits(
        height: usize,
        width: usize,
        k: usize,
        scale_index: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        check_kernel(k)?;
        if height == 0 || width == 0 {
            return Err(Error::dim("filter field must have positive size"));
        }
        if logits.len() != height * width * k * k {
            return Err(Error::dim(format!(
                "expected {} logits for {}x{} field with k={}, got {}",
                height * width * k * k,
                height,
                width,
                k,
                logits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            k,
            scale_index,
            logits,
        })
    }

    /// All-zero logits: every kernel is the uniform box.
    pub fn uniform(height: usize, width: usize, k: usize) -> Result<Self> {
        Self::from_logits(height, width, k, 1, vec![0.0; height * width * k * k])
    }

    /// A field whose every kernel is a point mass at `offset = (d_row, d_col)`.
    pub fn delta(height: usize, width: usize, k: usize, offset: (isize, isize)) -> Result<Self> {
        check_kernel(k)?;
        let r = (k / 2) as isize;
        if offset.0.abs() > r || offset.1.abs() > r {
            return Err(Error::param(format!(
                "offset {offset:?} outside the {k}x{k} window"
            )));
        }
        let hot = offset_index(k, offset.0, offset.1);
        let mut logits = vec![0.0; height * width * k * k];
        for px in logits.chunks_mut(k * k) {
            px[hot] = 1000.0;
        }
        Self::from_logits(height, width, k, 1, logits)
    }

    pub fn with_scale_index(mut self, scale_index: usize) -> Self {
        self.scale_index = scale_index;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn radius(&self) -> usize {
        self.k / 2
    }

    pub fn scale_index(&self) -> usize {
        self.scale_index
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn pixel_logits(&self, row: usize, col: usize) -> &[f64] {
        let kk = self.k * self.k;
        let p = row * self.width + col;
        &self.logits[p * kk..(p + 1) * kk]
    }

    pub fn probabilities(&self) -> Result<Vec<f64>> {
        softmax_filters(self)
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::param(format!("kernel size must be odd and >= 1, got {k}")));
    }
    Ok(())
}

/// Position of offset `(dr, dc)` inside a row-major `k x k` kernel.
pub fn offset_index(k: usize, dr: isize, dc: isize) -> usize {
    let r = (k / 2) as isize;
    ((dr + r) as usize) * k + (dc + r) as usize
}

/// The `(d_row, d_col)` offsets of a `k x k` window in kernel order.
pub fn kernel_offsets(k: usize) -> Vec<(f64, f64)> {
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(k * k);
    for dr in -r..=r {
        for dc in -r..=r {
            out.push((dr as f64, dc as f64));
        }
    }
    out
}

/// Per-pixel pull displacements `(d_row, d_col)`: target pixel `p` samples the
/// source at `p + d(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateFlow {
    height: usize,
    width: usize,
    data: Vec<[f64; 2]>,
}

impl CoordinateFlow {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, [0.0, 0.0])
    }

    pub fn constant(height: usize, width: usize, d: [f64; 2]) -> Self {
        assert!(height > 0 && width > 0, "flow must have positive size");
        Self {
            height,
            width,
            data: vec![d; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(format!(
                "flow buffer of {} vectors does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 2]) -> Self {
        assert!(height > 0 && width > 0, "flow must have positive size");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 2] {
        self.data[row * self.width + col]
    }

    pub fn same_size(&self, other: &CoordinateFlow) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Largest absolute component over the field.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|d| d.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.data
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt())
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Mean endpoint error against `truth` over pixels at least `margin`
    /// pixels from every border.
    pub fn epe_interior(&self, truth: &CoordinateFlow, margin: usize) -> Result<f64> {
        if !self.same_size(truth) {
            return Err(Error::dim("EPE needs flows of equal size"));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in margin..self.height.saturating_sub(margin) {
            for c in margin..self.width.saturating_sub(margin) {
                let a = self.get(r, c);
                let b = truth.get(r, c);
                sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::dim(format!(
                "margin {margin} leaves no interior in {}x{} flow",
                self.height, self.width
            )));
        }
        Ok(sum / n as f64)
    }

    /// Crops to the top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<CoordinateFlow> {
        if height > self.height || width > self.width {
            return Err(Error::dim("flow crop larger than flow"));
        }
        Ok(CoordinateFlow::from_fn(height, width, |r, c| self.get(r, c)))
    }
}

/// Bilinear sampling stencil at a clamped real-valued location, together with
/// the derivatives of its four weights with respect to the location.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTap {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dw_drow: [f64; 4],
    pub dw_dcol: [f64; 4],
}

impl BilinearTap {
    pub fn new(height: usize, width: usize, row: f64, col: f64) -> Self {
        let (y, in_y) = clamp_coord(row, height);
        let (x, in_x) = clamp_coord(col, width);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let x1 = (x0 + 1).min(width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let gy = if in_y { 1.0 } else { 0.0 };
        let gx = if in_x { 1.0 } else { 0.0 };
        Self {
            idx: [
                y0 * width + x0,
                y0 * width + x1,
                y1 * width + x0,
                y1 * width + x1,
            ],
            w: [
                (1.0 - fy) * (1.0 - fx),
                (1.0 - fy) * fx,
                fy * (1.0 - fx),
                fy * fx,
            ],
            dw_drow: [-(1.0 - fx) * gy, -fx * gy, (1.0 - fx) * gy, fx * gy],
            dw_dcol: [-(1.0 - fy) * gx, (1.0 - fy) * gx, -fy * gx, fy * gx],
        }
    }
}

/// Clamps a coordinate into `[0, n-1]`, reporting whether it was inside.
fn clamp_coord(v: f64, n: usize) -> (f64, bool) {
    let hi = (n - 1) as f64;
    if v < 0.0 {
        (0.0, false)
    } else if v > hi {
        (hi, false)
    } else {
        (v, true)
    }
}

/// Numerically stable per-pixel softmax of the field's logits.
pub fn softmax_filters(t: &FilterFlowField) -> Result<Vec<f64>> {
    let kk = t.k * t.k;
    let mut out = vec![0.0; t.logits.len()];
    for (src, dst) in t.logits.chunks(kk).zip(out.chunks_mut(kk)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || src.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite filter logit".into()));
        }
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(out)
}

/// Applies precomputed probability kernels to `src` through its patch matrix.
pub(crate) fn apply_probabilities(
    probs: &[f64],
    k: usize,
    src: &Image,
) -> Result<Image> {
    let patches = im2col(src, k)?;
    apply_patches(probs, k, &patches, src)
}

/// Like [`apply_probabilities`] with the patch matrix of `src` already built.
pub(crate) fn apply_patches(probs: &[f64], k: usize, patches: &PatchMatrix, src: &Image) -> Result<Image> {
    let (h, w, ch) = src.dims();
    let kk = k * k;
    let mut out = Image::new(h, w, ch)?;
    let data = out.data_mut();
    for p in 0..h * w {
        let kernel = &probs[p * kk..(p + 1) * kk];
        let row = patches.row(p);
        for c in 0..ch {
            let seg = &row[c * kk..(c + 1) * kk];
            data[p * ch + c] = kernel.iter().zip(seg).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// `output(p) = sum_o P(p)[o] * src(p + o)` with replicate padding, the same
/// kernel applied to every channel.
pub fn apply_filter_flow(t: &FilterFlowField, src: &Image) -> Result<Image> {
    if src.height() != t.height || src.width() != t.width {
        return Err(Error::dim(format!(
            "filter field is {}x{} but source image is {}x{}",
            t.height,
            t.width,
            src.height(),
            src.width()
        )));
    }
    let probs = softmax_filters(t)?;
    apply_probabilities(&probs, t.k, src)
}

/// Expected offset of every kernel treated as a distribution over its window.
pub fn filters_to_flow(t: &FilterFlowField) -> Result<CoordinateFlow> {
    let probs = softmax_filters(t)?;
    Ok(probabilities_to_flow(&probs, t.height, t.width, t.k))
}

pub(crate) fn probabilities_to_flow(
    probs: &[f64],
    height: usize,
    width: usize,
    k: usize,
) -> CoordinateFlow {
    let offsets = kernel_offsets(k);
    let kk = k * k;
    let data = probs
        .chunks(kk)
        .map(|kernel| {
            // offsets i and kk - 1 - i are opposite; pairing them keeps
            // symmetric kernels at exactly zero
            let mut d = [0.0, 0.0];
            for (i, o) in offsets.iter().take(kk / 2).enumerate() {
                let w = kernel[i] - kernel[kk - 1 - i];
                d[0] += w * o.0;
                d[1] += w * o.1;
            }
            d
        })
        .collect();
    CoordinateFlow {
        height,
        width,
        data,
    }
}

/// Bilinear backward warp: `output(p) = src(p + flow(p))`, sample locations
/// clamped to the image.
pub fn warp_with_flow(src: &Image, flow: &CoordinateFlow) -> Result<Image> {
    if src.height() != flow.height || src.width() != flow.width {
        return Err(Error::dim(format!(
            "flow is {}x{} but image is {}x{}",
            flow.height,
            flow.width,
            src.height(),
            src.width()
        )));
    }
    let (h, w, ch) = src.dims();
    let s = src.data();
    let mut out = Image::new(h, w, ch)?;
    let o = out.data_mut();
    for r in 0..h {
        for c in 0..w {
            let d = flow.get(r, c);
            let tap = BilinearTap::new(h, w, r as f64 + d[0], c as f64 + d[1]);
            let p = r * w + c;
            for k in 0..ch {
                o[p * ch + k] = (0..4).map(|i| tap.w[i] * s[tap.idx[i] * ch + k]).sum();
            }
        }
    }
    Ok(out)
}

/// Samples `flow` bilinearly at a real-valued location (clamped).
pub fn sample_flow(flow: &CoordinateFlow, row: f64, col: f64) -> [f64; 2] {
    let tap = BilinearTap::new(flow.height, flow.width, row, col);
    let mut d = [0.0, 0.0];
    for i in 0..4 {
        let v = flow.data[tap.idx[i]];
        d[0] += tap.w[i] * v[0];
        d[1] += tap.w[i] * v[1];
    }
    d
}

/// Pull composition `result(p) = g(p) + h(p + g(p))`: warping by the result
/// approximates warping by `h` and then by `g`.
pub fn compose_flows(g: &CoordinateFlow, h: &CoordinateFlow) -> Result<CoordinateFlow> {
    if !g.same_size(h) {
        return Err(Error::dim(format!(
            "cannot compose {}x{} flow with {}x{} flow",
            g.height, g.width, h.height, h.width
        )));
    }
    Ok(CoordinateFlow::from_fn(g.height, g.width, |r, c| {
        let gd = g.get(r, c);
        let hd = sample_flow(h, r as f64 + gd[0], c as f64 + gd[1]);
        [gd[0] + hd[0], gd[1] + hd[1]]
    }))
}

/// Nearest-neighbour 2x upsampling with displacements doubled.
pub fn upscale_flow_2x(flow: &CoordinateFlow) -> CoordinateFlow {
    CoordinateFlow::from_fn(2 * flow.height, 2 * flow.width, |r, c| {
        let d = flow.get(r / 2, c / 2);
        [2.0 * d[0], 2.0 * d[1]]
    })
}
