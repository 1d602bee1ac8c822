//! Photometric and flow losses on filter fields, the combined two-direction
//! objective, and its exact gradient with respect to the filter logits.
//!
//! Every grid loss is a mean, so values are comparable across pyramid levels.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filter_flow::{
    apply_patches, apply_probabilities, filters_to_flow, kernel_offsets, probabilities_to_flow, softmax_filters,
    warp_with_flow,
    BilinearTap, CoordinateFlow, FilterFlowField,
};
use crate::grid::{im2col, Image, PatchMatrix};

/// Charbonnier smoothing constant.
pub const CHARBONNIER_EPS: f64 = 0.001;

#[inline]
pub fn charbonnier(s: f64) -> f64 {
    (s * s + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt()
}

#[inline]
fn charbonnier_grad(s: f64) -> f64 {
    s / charbonnier(s)
}

/// Elementwise Charbonnier of a grid.
pub fn charbonnier_image(img: &Image) -> Image {
    img.map(charbonnier)
}

/// Mean Charbonnier penalty of `a - b`.
pub fn charbonnier_mean(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!(
            "cannot compare {:?} with {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| charbonnier(x - y))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_fl: f64,
    pub lambda_fb: f64,
    pub lambda_sm: f64,
    pub lambda_sp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fl: 1.0,
            lambda_fb: 0.1,
            lambda_sm: 0.01,
            lambda_sp: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_fl", self.lambda_fl),
            ("lambda_fb", self.lambda_fb),
            ("lambda_sm", self.lambda_sm),
            ("lambda_sp", self.lambda_sp),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self {
            lambda_fl: 0.0,
            lambda_fb: 0.0,
            lambda_sm: 0.0,
            lambda_sp: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Source frame B reconstructs target frame A.
    BToA,
    AToB,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::BToA => write!(f, "B->A"),
            Direction::AToB => write!(f, "A->B"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub fl: f64,
    pub fb: f64,
    pub sm: f64,
    pub sp: f64,
    pub total: f64,
    pub direction: Direction,
}

impl LossBreakdown {
    fn new(rec: f64, fl: f64, fb: f64, sm: f64, sp: f64, w: &LossWeights, direction: Direction) -> Self {
        let total = rec + w.lambda_fl * fl + w.lambda_fb * fb + w.lambda_sm * sm + w.lambda_sp * sp;
        Self {
            rec,
            fl,
            fb,
            sm,
            sp,
            total,
            direction,
        }
    }

    pub const CSV_HEADER: &'static str = "iteration,scale,direction,rec,fl,fb,sm,sp,total";

    pub fn csv_row(&self, iteration: usize, scale: usize) -> String {
        format!(
            "{iteration},{scale},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.direction, self.rec, self.fl, self.fb, self.sm, self.sp, self.total
        )
    }
}

fn check_pair(t: &FilterFlowField, src: &Image, tgt: &Image) -> Result<()> {
    if src.dims() != tgt.dims() {
        return Err(Error::dim(format!(
            "source {:?} and target {:?} differ",
            src.dims(),
            tgt.dims()
        )));
    }
    if src.height() != t.height() || src.width() != t.width() {
        return Err(Error::dim(format!(
            "filter field {}x{} does not match images {}x{}",
            t.height(),
            t.width(),
            src.height(),
            src.width()
        )));
    }
    Ok(())
}

/// Reconstruction loss: mean Charbonnier of `tgt - T * src`.
pub fn loss_rec(t: &FilterFlowField, src: &Image, tgt: &Image) -> Result<f64> {
    check_pair(t, src, tgt)?;
    let probs = softmax_filters(t)?;
    let recon = apply_probabilities(&probs, t.k(), src)?;
    charbonnier_mean(tgt, &recon)
}

/// Reconstruction loss when `src` is warped by the expected-offset flow of `t`.
pub fn loss_flow_warp(t: &FilterFlowField, src: &Image, tgt: &Image) -> Result<f64> {
    check_pair(t, src, tgt)?;
    let probs = softmax_filters(t)?;
    let flow = probabilities_to_flow(&probs, t.height(), t.width(), t.k());
    let warped = warp_with_flow(src, &flow)?;
    charbonnier_mean(tgt, &warped)
}

/// Round-trip residual `f(p) + b(p + f(p))`, sampled bilinearly.
fn fb_residual(f: &CoordinateFlow, b: &CoordinateFlow, row: usize, col: usize) -> ([f64; 2], BilinearTap) {
    let d = f.get(row, col);
    let tap = BilinearTap::new(b.height(), b.width(), row as f64 + d[0], col as f64 + d[1]);
    let mut r = d;
    for i in 0..4 {
        let v = b.data()[tap.idx[i]];
        r[0] += tap.w[i] * v[0];
        r[1] += tap.w[i] * v[1];
    }
    (r, tap)
}

/// Forward-backward consistency: mean over pixels and both components of the
/// Charbonnier of the round-trip residual.
pub fn loss_fb(f: &CoordinateFlow, b: &CoordinateFlow) -> Result<f64> {
    if !f.same_size(b) {
        return Err(Error::dim("forward and backward flows differ in size"));
    }
    let mut sum = 0.0;
    for r in 0..f.height() {
        for c in 0..f.width() {
            let (res, _) = fb_residual(f, b, r, c);
            sum += charbonnier(res[0]) + charbonnier(res[1]);
        }
    }
    Ok(sum / (2 * f.height() * f.width()) as f64)
}

/// L1 norm of the forward-difference flow gradient. Within each orientation
/// the absolute differences of both components are summed and averaged over
/// difference positions; the two orientations are then averaged. An
/// orientation with no difference positions contributes zero.
pub fn loss_smooth(f: &CoordinateFlow) -> f64 {
    let (h, w) = (f.height(), f.width());
    let mut col_sum = 0.0;
    let mut row_sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let d = f.get(r, c);
            if c + 1 < w {
                let e = f.get(r, c + 1);
                col_sum += (e[0] - d[0]).abs() + (e[1] - d[1]).abs();
            }
            if r + 1 < h {
                let e = f.get(r + 1, c);
                row_sum += (e[0] - d[0]).abs() + (e[1] - d[1]).abs();
            }
        }
    }
    let col_terms = h * (w - 1);
    let row_terms = (h - 1) * w;
    let col_mean = if col_terms > 0 { col_sum / col_terms as f64 } else { 0.0 };
    let row_mean = if row_terms > 0 { row_sum / row_terms as f64 } else { 0.0 };
    0.5 * (col_mean + row_mean)
}

/// Mean absolute flow, averaged over the two components.
pub fn loss_sparse(f: &CoordinateFlow) -> f64 {
    f.data().iter().map(|d| d[0].abs() + d[1].abs()).sum::<f64>() / (2 * f.data().len()) as f64
}

/// Both directional breakdowns for the frame pair. `t_ba` reconstructs `i_a`
/// from `i_b`; `t_ab` reconstructs `i_b` from `i_a`.
pub fn total_loss(
    t_ba: &FilterFlowField,
    t_ab: &FilterFlowField,
    i_b: &Image,
    i_a: &Image,
    w: &LossWeights,
) -> Result<(LossBreakdown, LossBreakdown)> {
    let eval = evaluate(t_ba, t_ab, i_b, i_a, w, false)?;
    Ok(eval.breakdowns)
}

/// Gradients of `total(B->A) + total(A->B)` with respect to both logit grids.
#[derive(Debug, Clone)]
pub struct LogitGradients {
    pub ba: Vec<f64>,
    pub ab: Vec<f64>,
    pub breakdowns: (LossBreakdown, LossBreakdown),
}

impl LogitGradients {
    pub fn objective(&self) -> f64 {
        self.breakdowns.0.total + self.breakdowns.1.total
    }
}

pub fn grad_total_wrt_logits(
    t_ba: &FilterFlowField,
    t_ab: &FilterFlowField,
    i_b: &Image,
    i_a: &Image,
    w: &LossWeights,
) -> Result<LogitGradients> {
    let eval = evaluate(t_ba, t_ab, i_b, i_a, w, true)?;
    let (ba, ab) = eval.grads.expect("requested gradients");
    Ok(LogitGradients {
        ba,
        ab,
        breakdowns: eval.breakdowns,
    })
}

struct Evaluation {
    breakdowns: (LossBreakdown, LossBreakdown),
    grads: Option<(Vec<f64>, Vec<f64>)>,
}

/// Per-direction quantities shared between the loss value and its gradient.
struct DirectionState<'a> {
    field: &'a FilterFlowField,
    src: &'a Image,
    tgt: &'a Image,
    probs: Vec<f64>,
    flow: CoordinateFlow,
    patches: PatchMatrix,
}

impl<'a> DirectionState<'a> {
    fn new(field: &'a FilterFlowField, src: &'a Image, tgt: &'a Image) -> Result<Self> {
        check_pair(field, src, tgt)?;
        let probs = softmax_filters(field)?;
        let flow = probabilities_to_flow(&probs, field.height(), field.width(), field.k());
        let patches = im2col(src, field.k())?;
        Ok(Self {
            field,
            src,
            tgt,
            probs,
            flow,
            patches,
        })
    }

    /// Reconstruction loss and its gradient with respect to the probabilities.
    fn rec(&self, grad_p: Option<&mut [f64]>, weight: f64) -> Result<f64> {
        let k = self.field.k();
        let kk = k * k;
        let ch = self.src.channels();
        let recon = apply_patches(&self.probs, k, &self.patches, self.src)?;
        let value = charbonnier_mean(self.tgt, &recon)?;
        if let Some(gp) = grad_p {
            let n = recon.data().len() as f64;
            for p in 0..self.field.height() * self.field.width() {
                let row = self.patches.row(p);
                for c in 0..ch {
                    let i = p * ch + c;
                    let g = -weight * charbonnier_grad(self.tgt.data()[i] - recon.data()[i]) / n;
                    let seg = &row[c * kk..(c + 1) * kk];
                    for (o, s) in seg.iter().enumerate() {
                        gp[p * kk + o] += g * s;
                    }
                }
            }
        }
        Ok(value)
    }

    /// Flow-warp loss and its gradient with respect to the flow field.
    fn flow_warp(&self, grad_f: Option<&mut [[f64; 2]]>, weight: f64) -> Result<f64> {
        let warped = warp_with_flow(self.src, &self.flow)?;
        let value = charbonnier_mean(self.tgt, &warped)?;
        if let Some(gf) = grad_f {
            let (h, w, ch) = self.src.dims();
            let n = warped.data().len() as f64;
            let s = self.src.data();
            for r in 0..h {
                for c in 0..w {
                    let p = r * w + c;
                    let d = self.flow.get(r, c);
                    let tap = BilinearTap::new(h, w, r as f64 + d[0], c as f64 + d[1]);
                    for k in 0..ch {
                        let i = p * ch + k;
                        let g = -weight * charbonnier_grad(self.tgt.data()[i] - warped.data()[i]) / n;
                        for j in 0..4 {
                            let v = s[tap.idx[j] * ch + k];
                            gf[p][0] += g * tap.dw_drow[j] * v;
                            gf[p][1] += g * tap.dw_dcol[j] * v;
                        }
                    }
                }
            }
        }
        Ok(value)
    }

    /// Chains a flow gradient and a probability gradient through the
    /// expectation and the softmax into a logit gradient.
    fn to_logit_grad(&self, mut grad_p: Vec<f64>, grad_f: &[[f64; 2]]) -> Vec<f64> {
        let k = self.field.k();
        let kk = k * k;
        let offsets = kernel_offsets(k);
        for (p, gf) in grad_f.iter().enumerate() {
            for (o, off) in offsets.iter().enumerate() {
                grad_p[p * kk + o] += gf[0] * off.0 + gf[1] * off.1;
            }
        }
        let mut out = vec![0.0; grad_p.len()];
        for ((gp, pr), g) in grad_p
            .chunks(kk)
            .zip(self.probs.chunks(kk))
            .zip(out.chunks_mut(kk))
        {
            let dot: f64 = gp.iter().zip(pr).map(|(a, b)| a * b).sum();
            for o in 0..kk {
                g[o] = pr[o] * (gp[o] - dot);
            }
        }
        out
    }
}

/// Adds the gradient of `weight * loss_fb(f, b)` into `gf` and `gb`.
fn fb_grad(f: &CoordinateFlow, b: &CoordinateFlow, weight: f64, gf: &mut [[f64; 2]], gb: &mut [[f64; 2]]) {
    let n = (2 * f.height() * f.width()) as f64;
    let bd = b.data();
    for r in 0..f.height() {
        for c in 0..f.width() {
            let p = r * f.width() + c;
            let (res, tap) = fb_residual(f, b, r, c);
            let g = [
                weight * charbonnier_grad(res[0]) / n,
                weight * charbonnier_grad(res[1]) / n,
            ];
            // d residual_m / d f_j = delta_mj + d b_m(q) / d q_j
            let mut jac = [[0.0; 2]; 2];
            for i in 0..4 {
                let v = bd[tap.idx[i]];
                for m in 0..2 {
                    jac[m][0] += tap.dw_drow[i] * v[m];
                    jac[m][1] += tap.dw_dcol[i] * v[m];
                }
                gb[tap.idx[i]][0] += tap.w[i] * g[0];
                gb[tap.idx[i]][1] += tap.w[i] * g[1];
            }
            for j in 0..2 {
                gf[p][j] += g[j] + g[0] * jac[0][j] + g[1] * jac[1][j];
            }
        }
    }
}

/// Adds the subgradient of `weight * loss_smooth(f)` into `gf`, with
/// `sign(0) = 0`.
fn smooth_grad(f: &CoordinateFlow, weight: f64, gf: &mut [[f64; 2]]) {
    let (h, w) = (f.height(), f.width());
    let col_terms = h * (w - 1);
    let row_terms = (h - 1) * w;
    let cs = if col_terms > 0 { 0.5 * weight / col_terms as f64 } else { 0.0 };
    let rs = if row_terms > 0 { 0.5 * weight / row_terms as f64 } else { 0.0 };
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let d = f.get(r, c);
            for m in 0..2 {
                if c + 1 < w {
                    let s = sign(f.get(r, c + 1)[m] - d[m]) * cs;
                    gf[p + 1][m] += s;
                    gf[p][m] -= s;
                }
                if r + 1 < h {
                    let s = sign(f.get(r + 1, c)[m] - d[m]) * rs;
                    gf[p + w][m] += s;
                    gf[p][m] -= s;
                }
            }
        }
    }
}

fn sparse_grad(f: &CoordinateFlow, weight: f64, gf: &mut [[f64; 2]]) {
    let scale = weight / (2 * f.data().len()) as f64;
    for (g, d) in gf.iter_mut().zip(f.data()) {
        g[0] += scale * sign(d[0]);
        g[1] += scale * sign(d[1]);
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn evaluate(
    t_ba: &FilterFlowField,
    t_ab: &FilterFlowField,
    i_b: &Image,
    i_a: &Image,
    w: &LossWeights,
    want_grad: bool,
) -> Result<Evaluation> {
    w.validate()?;
    if t_ba.height() != t_ab.height() || t_ba.width() != t_ab.width() {
        return Err(Error::dim("the two directional filter fields differ in size"));
    }
    let ba = DirectionState::new(t_ba, i_b, i_a)?;
    let ab = DirectionState::new(t_ab, i_a, i_b)?;

    let fb_ba = loss_fb(&ba.flow, &ab.flow)?;
    let fb_ab = loss_fb(&ab.flow, &ba.flow)?;

    if !want_grad {
        let breakdown = |d: &DirectionState, fb: f64, dir| -> Result<LossBreakdown> {
            Ok(LossBreakdown::new(
                d.rec(None, 0.0)?,
                d.flow_warp(None, 0.0)?,
                fb,
                loss_smooth(&d.flow),
                loss_sparse(&d.flow),
                w,
                dir,
            ))
        };
        return Ok(Evaluation {
            breakdowns: (
                breakdown(&ba, fb_ba, Direction::BToA)?,
                breakdown(&ab, fb_ab, Direction::AToB)?,
            ),
            grads: None,
        });
    }

    let n = t_ba.height() * t_ba.width();
    let kk = t_ba.k() * t_ba.k();
    let mut gf_ba = vec![[0.0; 2]; n];
    let mut gf_ab = vec![[0.0; 2]; n];
    fb_grad(&ba.flow, &ab.flow, w.lambda_fb, &mut gf_ba, &mut gf_ab);
    fb_grad(&ab.flow, &ba.flow, w.lambda_fb, &mut gf_ab, &mut gf_ba);

    let run = |d: &DirectionState, gf: &mut Vec<[f64; 2]>, fb: f64, dir, k: usize| -> Result<(LossBreakdown, Vec<f64>)> {
        let mut gp = vec![0.0; n * k * k];
        let rec = d.rec(Some(&mut gp), 1.0)?;
        let fl = d.flow_warp(Some(gf), w.lambda_fl)?;
        smooth_grad(&d.flow, w.lambda_sm, gf);
        sparse_grad(&d.flow, w.lambda_sp, gf);
        let b = LossBreakdown::new(rec, fl, fb, loss_smooth(&d.flow), loss_sparse(&d.flow), w, dir);
        Ok((b, d.to_logit_grad(gp, gf)))
    };
    let (b_ba, g_ba) = run(&ba, &mut gf_ba, fb_ba, Direction::BToA, t_ba.k())?;
    let (b_ab, g_ab) = run(&ab, &mut gf_ab, fb_ab, Direction::AToB, t_ab.k())?;
    debug_assert_eq!(g_ba.len(), n * kk);
    Ok(Evaluation {
        breakdowns: (b_ba, b_ab),
        grads: Some((g_ba, g_ab)),
    })
}

/// Every additive contribution to `total(B->A) + total(A->B)`, one entry per
/// pixel (and channel or component) per weighted term. The entries sum to the
/// objective; finite differences taken entry by entry avoid cancelling two
/// nearly equal totals.
pub fn total_loss_terms(
    t_ba: &FilterFlowField,
    t_ab: &FilterFlowField,
    i_b: &Image,
    i_a: &Image,
    w: &LossWeights,
) -> Result<Vec<f64>> {
    w.validate()?;
    let ba = DirectionState::new(t_ba, i_b, i_a)?;
    let ab = DirectionState::new(t_ab, i_a, i_b)?;
    let mut terms = Vec::new();
    for (d, other) in [(&ba, &ab), (&ab, &ba)] {
        let recon = apply_patches(&d.probs, d.field.k(), &d.patches, d.src)?;
        let n = recon.data().len() as f64;
        for (t, r) in d.tgt.data().iter().zip(recon.data()) {
            terms.push(charbonnier(t - r) / n);
        }
        let warped = warp_with_flow(d.src, &d.flow)?;
        for (t, r) in d.tgt.data().iter().zip(warped.data()) {
            terms.push(w.lambda_fl * charbonnier(t - r) / n);
        }
        let (h, wd) = (d.flow.height(), d.flow.width());
        let px = (h * wd) as f64;
        for r in 0..h {
            for c in 0..wd {
                let (res, _) = fb_residual(&d.flow, &other.flow, r, c);
                terms.push(w.lambda_fb * charbonnier(res[0]) / (2.0 * px));
                terms.push(w.lambda_fb * charbonnier(res[1]) / (2.0 * px));
            }
        }
        let col_terms = h * (wd - 1);
        let row_terms = (h - 1) * wd;
        for r in 0..h {
            for c in 0..wd {
                let v = d.flow.get(r, c);
                for m in 0..2 {
                    if c + 1 < wd {
                        let e = d.flow.get(r, c + 1)[m] - v[m];
                        terms.push(w.lambda_sm * 0.5 * e.abs() / col_terms as f64);
                    }
                    if r + 1 < h {
                        let e = d.flow.get(r + 1, c)[m] - v[m];
                        terms.push(w.lambda_sm * 0.5 * e.abs() / row_terms as f64);
                    }
                    terms.push(w.lambda_sp * v[m].abs() / (2.0 * px));
                }
            }
        }
    }
    Ok(terms)
}

/// Compares `analytic` with fourth-order central differences of `loss` at `x`
/// (probes at `x +- step` and `x +- 2 step`) on a random
/// subsample of `min(max(samples, 200), x.len())` coordinates and returns the
/// largest relative error, using `max(|a|, |n|, 1e-8)` as denominator.
///
/// `loss` returns the objective as a list of additive terms. The difference
/// between mirrored probes is accumulated term by term, so terms that do not
/// depend on the probed coordinate cancel exactly. A scalar objective can be
/// passed as a one-element list.
pub fn finite_diff_check(
    loss: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    if x.len() != analytic.len() {
        return Err(Error::dim("analytic gradient length differs from parameter length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = samples.max(200).min(x.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in sample(&mut rng, x.len(), count).into_iter() {
        let orig = probe[i];
        let mut at = |offset: f64| {
            probe[i] = orig + offset;
            loss(&probe)
        };
        let (up, down, up2, down2) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step));
        probe[i] = orig;
        if [down.len(), up2.len(), down2.len()].iter().any(|&n| n != up.len()) {
            return Err(Error::dim("loss returned a different number of terms between probes"));
        }
        let near: f64 = up.iter().zip(&down).map(|(u, d)| u - d).sum();
        let far: f64 = up2.iter().zip(&down2).map(|(u, d)| u - d).sum();
        let numeric = (8.0 * near - far) / (12.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Default probe step for [`check_total_gradient`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Finite-difference check of [`grad_total_wrt_logits`] over both logit
/// grids, concatenated `[ba, ab]`.
pub fn check_total_gradient(
    t_ba: &FilterFlowField,
    t_ab: &FilterFlowField,
    i_b: &Image,
    i_a: &Image,
    w: &LossWeights,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let g = grad_total_wrt_logits(t_ba, t_ab, i_b, i_a, w)?;
    let split = t_ba.logits().len();
    let x: Vec<f64> = t_ba.logits().iter().chain(t_ab.logits()).copied().collect();
    let analytic: Vec<f64> = g.ba.iter().chain(&g.ab).copied().collect();
    let mut f = |v: &[f64]| {
        let ba = FilterFlowField::from_logits(t_ba.height(), t_ba.width(), t_ba.k(), 1, v[..split].to_vec())
            .expect("shape preserved");
        let ab = FilterFlowField::from_logits(t_ab.height(), t_ab.width(), t_ab.k(), 1, v[split..].to_vec())
            .expect("shape preserved");
        total_loss_terms(&ba, &ab, i_b, i_a, w).expect("validated inputs")
    };
    finite_diff_check(&mut f, &x, &analytic, step, 200, seed)
}

/// True when the objective has a kink within `1e-3` of the field's flow: a
/// sample position `p + f(p)` on a grid line or the border, a flow component
/// at zero, or two neighbouring components equal.
fn near_kink(t: &FilterFlowField) -> Result<bool> {
    const GAP: f64 = 1e-3;
    let flow = filters_to_flow(t)?;
    let (h, w) = (flow.height(), flow.width());
    for r in 0..h {
        for c in 0..w {
            let d = flow.get(r, c);
            for (x, limit) in [(r as f64 + d[0], (h - 1) as f64), (c as f64 + d[1], (w - 1) as f64)] {
                let frac = x - x.floor();
                if frac.min(1.0 - frac) < GAP || (x - limit).abs() < GAP {
                    return Ok(true);
                }
            }
            for m in 0..2 {
                let right = (c + 1 < w).then(|| flow.get(r, c + 1)[m]);
                let down = (r + 1 < h).then(|| flow.get(r + 1, c)[m]);
                if d[m].abs() < GAP || [right, down].into_iter().flatten().any(|n| (n - d[m]).abs() < GAP) {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

/// Runs [`check_total_gradient`] on `instances` random 8x8 pairs with `k = 3`
/// for every loss term in isolation (each alongside the always-on
/// reconstruction term) and for the full objective. Instances near a kink of
/// the objective are redrawn. Returns the worst relative
/// error per term.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let z = LossWeights::zero();
    let suites = [
        ("rec", z),
        ("fl", LossWeights { lambda_fl: 1.0, ..z }),
        ("fb", LossWeights { lambda_fb: 1.0, ..z }),
        ("sm", LossWeights { lambda_sm: 1.0, ..z }),
        ("sp", LossWeights { lambda_sp: 1.0, ..z }),
        ("total", LossWeights::default()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(suites.len());
    for (name, w) in suites {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let mut image = || Image::from_fn(8, 8, 2, |_, _, _| rng.gen::<f64>());
            let (b, a) = (image()?, image()?);
            let mut field = || {
                let logits = (0..8 * 8 * 9).map(|_| rng.gen_range(-2.0..2.0)).collect();
                FilterFlowField::from_logits(8, 8, 3, 1, logits)
            };
            let (mut t1, mut t2) = (field()?, field()?);
            while near_kink(&t1)? || near_kink(&t2)? {
                (t1, t2) = (field()?, field()?);
            }
            worst = worst.max(check_total_gradient(&t1, &t2, &b, &a, &w, GRADCHECK_STEP, rng.gen())?);
        }
        out.push((name, worst));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;


    fn random_image(h: usize, w: usize, ch: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, ch, |_, _, _| rng.gen::<f64>()).unwrap()
    }

    fn random_field(h: usize, w: usize, k: usize, seed: u64) -> FilterFlowField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..h * w * k * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        FilterFlowField::from_logits(h, w, k, 1, logits).unwrap()
    }

    #[test]
    fn charbonnier_values() {
        assert_eq!(charbonnier(0.0), 0.001);
        assert_eq!(charbonnier(-0.37), charbonnier(0.37));
        assert!((charbonnier(0.003) - 1e-5f64.sqrt()).abs() < 1e-15);
        assert!((charbonnier(0.003) - 0.0031623).abs() < 1e-7);
    }

    #[test]
    fn rec_floor_for_identity() {
        let img = random_image(6, 6, 3, 1);
        let t = FilterFlowField::delta(6, 6, 3, (0, 0)).unwrap();
        assert!((loss_rec(&t, &img, &img).unwrap() - 0.001).abs() < 1e-15);
        assert!((loss_flow_warp(&t, &img, &img).unwrap() - 0.001).abs() < 1e-12);
    }

    #[test]
    fn rec_floor_for_exact_shift_on_interior() {
        let img = random_image(6, 8, 1, 2);
        let t = FilterFlowField::delta(6, 8, 3, (0, 1)).unwrap();
        let shifted = Image::from_fn(6, 8, 1, |r, c, _| img.get(r, (c + 1).min(7), 0)).unwrap();
        // Replicate padding makes the border column exact too.
        assert!((loss_rec(&t, &img, &shifted).unwrap() - 0.001).abs() < 1e-15);
        assert!((loss_flow_warp(&t, &img, &shifted).unwrap() - 0.001).abs() < 1e-12);
    }

    #[test]
    fn rec_matches_brute_force_for_uniform() {
        let src = random_image(5, 5, 2, 3);
        let tgt = random_image(5, 5, 2, 4);
        let t = FilterFlowField::uniform(5, 5, 3).unwrap();
        let mut sum = 0.0;
        for r in 0..5isize {
            for c in 0..5isize {
                for ch in 0..2 {
                    let mut box_sum = 0.0;
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            box_sum += src.get_clamped(r + dr, c + dc, ch);
                        }
                    }
                    sum += charbonnier(tgt.get(r as usize, c as usize, ch) - box_sum / 9.0);
                }
            }
        }
        assert!((loss_rec(&t, &src, &tgt).unwrap() - sum / 50.0).abs() < 1e-14);
    }

    #[test]
    fn flow_warp_matches_pipeline() {
        let src = random_image(8, 8, 1, 5);
        let tgt = random_image(8, 8, 1, 6);
        let t = random_field(8, 8, 3, 7);
        let flow = crate::filter_flow::filters_to_flow(&t).unwrap();
        let warped = warp_with_flow(&src, &flow).unwrap();
        let direct = charbonnier_mean(&tgt, &warped).unwrap();
        assert!((loss_flow_warp(&t, &src, &tgt).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn fb_cases() {
        let z = CoordinateFlow::zeros(5, 5);
        assert!((loss_fb(&z, &z).unwrap() - 0.001).abs() < 1e-15);

        let f = CoordinateFlow::constant(5, 5, [0.0, 2.0]);
        let b = CoordinateFlow::constant(5, 5, [0.0, -2.0]);
        assert!((loss_fb(&f, &b).unwrap() - 0.001).abs() < 1e-15);

        let expected = (charbonnier(0.0) + charbonnier(2.0)) / 2.0;
        assert!((loss_fb(&f, &z).unwrap() - expected).abs() < 1e-15);
        assert!((expected - (0.001 + 2.00000025) / 2.0).abs() < 1e-9);

        assert!(loss_fb(&f, &CoordinateFlow::zeros(4, 5)).is_err());
    }

    #[test]
    fn smooth_cases() {
        assert_eq!(loss_smooth(&CoordinateFlow::constant(4, 6, [0.3, -1.0])), 0.0);

        // A single +1 step in d_col between columns 2 and 3: H edges among
        // H*(W-1) column differences; row differences are all zero.
        let (h, w) = (4, 6);
        let step = CoordinateFlow::from_fn(h, w, |_, c| [0.0, if c >= 3 { 1.0 } else { 0.0 }]);
        let edges = h as f64;
        let col_terms = (h * (w - 1)) as f64;
        assert!((loss_smooth(&step) - 0.5 * edges / col_terms).abs() < 1e-15);

        let ramp = CoordinateFlow::from_fn(5, 5, |_, c| [0.0, c as f64]);
        assert!((loss_smooth(&ramp) - 0.5).abs() < 1e-15);

        // Degenerate single row has no row differences.
        let one_row = CoordinateFlow::from_fn(1, 3, |_, c| [c as f64, 0.0]);
        assert!((loss_smooth(&one_row) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sparse_cases() {
        assert_eq!(loss_sparse(&CoordinateFlow::zeros(3, 3)), 0.0);
        assert_eq!(loss_sparse(&CoordinateFlow::constant(3, 3, [1.0, -1.0])), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = CoordinateFlow::from_fn(4, 4, |_, _| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
        let mut s = 0.0;
        for d in f.data() {
            s += d[0].abs();
            s += d[1].abs();
        }
        assert!((loss_sparse(&f) - s / 32.0).abs() < 1e-15);
    }

    #[test]
    fn total_identity_pair() {
        let img = random_image(6, 6, 3, 9);
        let t = FilterFlowField::delta(6, 6, 3, (0, 0)).unwrap();
        let w = LossWeights::default();
        let (ba, ab) = total_loss(&t, &t, &img, &img, &w).unwrap();
        for b in [ba, ab] {
            assert!((b.rec - 0.001).abs() < 1e-12);
            assert!((b.fl - 0.001).abs() < 1e-12);
            assert!((b.fb - 0.001).abs() < 1e-12);
            assert!(b.sm.abs() < 1e-12 && b.sp.abs() < 1e-12);
            assert!((b.total - (0.001 + w.lambda_fl * 0.001 + w.lambda_fb * 0.001)).abs() < 1e-12);
        }
        assert_eq!(ba.direction, Direction::BToA);
        assert_eq!(ab.direction, Direction::AToB);
    }

    #[test]
    fn total_translation_pair() {
        // A(p) = B(p + (0, 1)): the B->A kernel points right, A->B points left.
        let b_img = random_image(6, 8, 1, 10);
        let a_img = Image::from_fn(6, 8, 1, |r, c, _| b_img.get(r, (c + 1).min(7), 0)).unwrap();
        let t_ba = FilterFlowField::delta(6, 8, 3, (0, 1)).unwrap();
        let t_ab = FilterFlowField::delta(6, 8, 3, (0, -1)).unwrap();
        let (ba, ab) = total_loss(&t_ba, &t_ab, &b_img, &a_img, &LossWeights::default()).unwrap();
        assert!(ba.sm.abs() < 1e-12 && ab.sm.abs() < 1e-12);
        assert!((ba.sp - 0.5).abs() < 1e-12 && (ab.sp - 0.5).abs() < 1e-12);
        // Constant flows are exact inverses, clamping included.
        assert!((ba.fb - 0.001).abs() < 1e-12 && (ab.fb - 0.001).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_rec() {
        let (b, a) = (random_image(5, 5, 1, 1), random_image(5, 5, 1, 2));
        let (t1, t2) = (random_field(5, 5, 3, 3), random_field(5, 5, 3, 4));
        let (x, y) = total_loss(&t1, &t2, &b, &a, &LossWeights::zero()).unwrap();
        assert_eq!(x.total, x.rec);
        assert_eq!(y.total, y.rec);
    }

    #[test]
    fn negative_weight_rejected() {
        let img = random_image(3, 3, 1, 1);
        let t = FilterFlowField::uniform(3, 3, 3).unwrap();
        let w = LossWeights {
            lambda_sm: -1.0,
            ..LossWeights::default()
        };
        assert!(total_loss(&t, &t, &img, &img, &w).is_err());
    }

    #[test]
    fn gradient_degenerate_cases() {
        let c = Image::filled(6, 6, 1, 0.4).unwrap();
        let t = random_field(6, 6, 3, 11);
        let w = LossWeights {
            lambda_fl: 0.0,
            lambda_fb: 0.0,
            lambda_sm: 0.0,
            lambda_sp: 0.0,
        };
        let g = grad_total_wrt_logits(&t, &t, &c, &c, &w).unwrap();
        assert!(g.ba.iter().chain(&g.ab).all(|v| v.abs() < 1e-15));

        let one = Image::filled(1, 1, 1, 0.2).unwrap();
        let other = Image::filled(1, 1, 1, 0.9).unwrap();
        let t = FilterFlowField::from_logits(1, 1, 1, 1, vec![0.7]).unwrap();
        let g = grad_total_wrt_logits(&t, &t, &one, &other, &LossWeights::default()).unwrap();
        assert_eq!(g.ba, vec![0.0]);
        assert_eq!(g.ab, vec![0.0]);
    }

    #[test]
    fn fd_check_on_quadratic() {
        let x: Vec<f64> = (0..300).map(|i| 1.0 + 0.5 * (i as f64 * 0.37).sin()).collect();
        let coef = |i: usize| 0.5 + (i % 7) as f64 * 0.25;
        let analytic: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * coef(i) * v).collect();
        let mut f = |v: &[f64]| vec![v.iter().enumerate().map(|(i, a)| coef(i) * a * a).sum()];
        let err = finite_diff_check(&mut f, &x, &analytic, 1e-2, 200, 1).unwrap();
        assert!(err < 1e-8, "{err}");
        assert!(finite_diff_check(&mut f, &x, &analytic, 0.0, 200, 1).is_err());
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        for seed in 0..4u64 {
            let b = random_image(8, 8, 2, 100 + seed);
            let a = random_image(8, 8, 2, 200 + seed);
            let t1 = random_field(8, 8, 3, 300 + seed);
            let t2 = random_field(8, 8, 3, 400 + seed);
            let err = check_total_gradient(&t1, &t2, &b, &a, &LossWeights::default(), GRADCHECK_STEP, seed).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn sparse_gradient_away_from_kink() {
        let w = LossWeights {
            lambda_fl: 0.0,
            lambda_fb: 0.0,
            lambda_sm: 0.0,
            lambda_sp: 1.0,
        };
        let b = random_image(6, 6, 1, 1);
        let a = random_image(6, 6, 1, 2);
        let t1 = random_field(6, 6, 5, 3);
        let t2 = random_field(6, 6, 5, 4);
        let err = check_total_gradient(&t1, &t2, &b, &a, &w, GRADCHECK_STEP, 9).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn terms_sum_to_objective() {
        let b = random_image(6, 7, 2, 21);
        let a = random_image(6, 7, 2, 22);
        let t1 = random_field(6, 7, 3, 23);
        let t2 = random_field(6, 7, 3, 24);
        let w = LossWeights::default();
        let (x, y) = total_loss(&t1, &t2, &b, &a, &w).unwrap();
        let terms: f64 = total_loss_terms(&t1, &t2, &b, &a, &w).unwrap().iter().sum();
        assert!((terms - x.total - y.total).abs() < 1e-12);
    }

    #[test]
    fn csv_row_layout() {
        let b = LossBreakdown::new(1.0, 2.0, 3.0, 4.0, 5.0, &LossWeights::zero(), Direction::AToB);
        let row = b.csv_row(7, 2);
        assert!(row.starts_with("7,2,A->B,"));
        assert_eq!(row.split(',').count(), LossBreakdown::CSV_HEADER.split(',').count());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn terms_nonnegative_and_identity_holds(seed in 0u64..5000) {
                let b = random_image(5, 6, 1, seed);
                let a = random_image(5, 6, 1, seed + 1);
                let t1 = random_field(5, 6, 3, seed + 2);
                let t2 = random_field(5, 6, 3, seed + 3);
                let w = LossWeights::default();
                let (x, y) = total_loss(&t1, &t2, &b, &a, &w).unwrap();
                for br in [x, y] {
                    prop_assert!(br.rec >= 0.001 && br.fl >= 0.001 && br.fb >= 0.001);
                    prop_assert!(br.sm >= 0.0 && br.sp >= 0.0);
                    let sum = br.rec + w.lambda_fl * br.fl + w.lambda_fb * br.fb + w.lambda_sm * br.sm + w.lambda_sp * br.sp;
                    prop_assert!((br.total - sum).abs() < 1e-9);
                }
                // Swapping the roles of the frames swaps the breakdowns.
                let (sx, sy) = total_loss(&t2, &t1, &a, &b, &w).unwrap();
                prop_assert!((sx.total - y.total).abs() < 1e-12);
                prop_assert!((sy.total - x.total).abs() < 1e-12);
            }

            #[test]
            fn dropping_a_weight_removes_its_term(seed in 0u64..5000) {
                let b = random_image(4, 4, 1, seed);
                let a = random_image(4, 4, 1, seed + 7);
                let t1 = random_field(4, 4, 3, seed + 2);
                let t2 = random_field(4, 4, 3, seed + 3);
                let w = LossWeights::default();
                let (full, _) = total_loss(&t1, &t2, &b, &a, &w).unwrap();
                let no_sm = LossWeights { lambda_sm: 0.0, ..w };
                let (x, _) = total_loss(&t1, &t2, &b, &a, &no_sm).unwrap();
                prop_assert!((full.total - w.lambda_sm * full.sm - x.total).abs() < 1e-12);
            }
        }
    }
}
