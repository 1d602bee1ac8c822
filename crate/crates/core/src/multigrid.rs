//! Coarse-to-fine estimation: small residual kernels predicted at each level
//! of an image pyramid, accumulated into one coordinate flow.

use crate::error::{Error, Result};
use crate::filter_flow::{compose_flows, filters_to_flow, upscale_flow_2x, warp_with_flow};
use crate::filter_flow::{CoordinateFlow, FilterFlowField};
use crate::grid::{build_pyramid, pad_to_multiple, CropRecord, Image};
use crate::losses::{grad_total_wrt_logits, total_loss, LossBreakdown, LossWeights};
use crate::predictor::adam::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidConfig {
    pub levels: usize,
    pub k: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { levels: 3, k: 7 }
    }
}

impl PyramidConfig {
    pub fn new(levels: usize, k: usize) -> Result<Self> {
        let cfg = Self { levels, k };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::param("pyramid needs at least one level"));
        }
        if self.levels > 16 {
            return Err(Error::param(format!("{} pyramid levels is unreasonable", self.levels)));
        }
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::param(format!("kernel size must be odd, got {}", self.k)));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.k / 2
    }

    /// Inputs are padded to a multiple of this before building the pyramid.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Largest full-resolution displacement reachable by summing per-level
    /// reach: `r * (2^L - 1)`.
    pub fn max_displacement(&self) -> usize {
        self.radius() * ((1 << self.levels) - 1)
    }

    /// Filter coefficients predicted over the whole pyramid for an
    /// `height x width` input (after padding).
    pub fn coefficient_count(&self, height: usize, width: usize) -> usize {
        let m = self.size_multiple();
        let (mut h, mut w) = (height.div_ceil(m) * m, width.div_ceil(m) * m);
        let mut total = 0;
        for _ in 0..self.levels {
            total += h * w * self.k * self.k;
            h /= 2;
            w /= 2;
        }
        total
    }
}

/// Everything produced at one pyramid level.
#[derive(Debug, Clone)]
pub struct ScaleResult {
    /// 0 is full resolution.
    pub scale_index: usize,
    /// Reconstructs the target from the warped source.
    pub t_ba: FilterFlowField,
    /// Reconstructs the warped source from the target.
    pub t_ab: FilterFlowField,
    pub residual: CoordinateFlow,
    /// Accumulated flow at this level after adding the residual.
    pub flow: CoordinateFlow,
    /// Source warped by `flow`.
    pub reconstruction: Image,
    pub losses: (LossBreakdown, LossBreakdown),
}

#[derive(Debug, Clone)]
pub struct MultigridResult {
    /// Coarse to fine.
    pub scales: Vec<ScaleResult>,
    /// Accumulated pull flow at the padded input size.
    pub flow: CoordinateFlow,
    pub crop: CropRecord,
    /// Source warped by the accumulated flow, at the original size.
    pub reconstruction: Image,
}

impl MultigridResult {
    /// Accumulated flow cropped to the original input size.
    pub fn cropped_flow(&self) -> CoordinateFlow {
        self.flow
            .crop(self.crop.height, self.crop.width)
            .expect("crop record never exceeds the padded size")
    }

    pub fn coefficient_count(&self) -> usize {
        self.scales
            .iter()
            .map(|s| s.t_ba.logits().len())
            .sum()
    }

    /// Sum of both directional totals over every scale.
    pub fn total_loss(&self) -> f64 {
        self.scales
            .iter()
            .map(|s| s.losses.0.total + s.losses.1.total)
            .sum()
    }
}

/// Runs the pyramid from the coarsest level to full resolution. `predict`
/// receives `(warped source, target, scale_index)` and returns the residual
/// pair `(T_ba, T_ab)` at that resolution.
pub fn coarse_to_fine<P>(
    mut predict: P,
    i_b: &Image,
    i_a: &Image,
    cfg: &PyramidConfig,
    weights: &LossWeights,
) -> Result<MultigridResult>
where
    P: FnMut(&Image, &Image, usize) -> Result<(FilterFlowField, FilterFlowField)>,
{
    cfg.validate()?;
    weights.validate()?;
    if i_b.dims() != i_a.dims() {
        return Err(Error::dim(format!(
            "frames differ in size: {:?} vs {:?}",
            i_b.dims(),
            i_a.dims()
        )));
    }
    let m = cfg.size_multiple();
    let (b_pad, crop) = pad_to_multiple(i_b, m)?;
    let (a_pad, _) = pad_to_multiple(i_a, m)?;
    let b_pyr = build_pyramid(&b_pad, cfg.levels)?;
    let a_pyr = build_pyramid(&a_pad, cfg.levels)?;

    let coarsest = &b_pyr[cfg.levels - 1];
    let mut flow = CoordinateFlow::zeros(coarsest.height(), coarsest.width());
    let mut scales = Vec::with_capacity(cfg.levels);
    for level in (0..cfg.levels).rev() {
        let (b_l, a_l) = (&b_pyr[level], &a_pyr[level]);
        let warped = warp_with_flow(b_l, &flow)?;
        let (t_ba, t_ab) = predict(&warped, a_l, level)?;
        for t in [&t_ba, &t_ab] {
            if t.height() != a_l.height() || t.width() != a_l.width() || t.k() != cfg.k {
                return Err(Error::dim(format!(
                    "predictor returned {}x{} k={} filters for a {}x{} k={} level",
                    t.height(),
                    t.width(),
                    t.k(),
                    a_l.height(),
                    a_l.width(),
                    cfg.k
                )));
            }
        }
        let losses = total_loss(&t_ba, &t_ab, &warped, a_l, weights)?;
        let residual = filters_to_flow(&t_ba)?;
        flow = compose_flows(&residual, &flow)?;
        let reconstruction = warp_with_flow(b_l, &flow)?;
        scales.push(ScaleResult {
            scale_index: level,
            t_ba: t_ba.with_scale_index(level),
            t_ab: t_ab.with_scale_index(level),
            residual,
            flow: flow.clone(),
            reconstruction,
            losses,
        });
        if level > 0 {
            flow = upscale_flow_2x(&flow);
        }
    }
    let reconstruction = crop.apply(&warp_with_flow(&b_pad, &flow)?)?;
    Ok(MultigridResult {
        scales,
        flow,
        crop,
        reconstruction,
    })
}

/// Settings of the per-level logit optimization used when no network is
/// available.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Upper bound on `H * W * k * k` at full resolution.
    pub max_coefficients: usize,
    pub weights: LossWeights,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            adam: AdamConfig::with_lr(0.05),
            max_coefficients: 1 << 22,
            weights: LossWeights::default(),
        }
    }
}

/// Optimizes both logit grids of one frame pair from uniform kernels.
pub fn solve_scale(
    src: &Image,
    tgt: &Image,
    k: usize,
    opts: &SolverOptions,
) -> Result<(FilterFlowField, FilterFlowField)> {
    opts.adam.validate()?;
    let (h, w) = (src.height(), src.width());
    let mut ba = FilterFlowField::uniform(h, w, k)?;
    let mut ab = FilterFlowField::uniform(h, w, k)?;
    let n = ba.logits().len();
    let mut state = AdamState::<f64>::new([n, n]);
    for _ in 0..opts.iterations {
        let g = grad_total_wrt_logits(&ba, &ab, src, tgt, &opts.weights)?;
        let (lb, la) = (ba.logits_mut(), ab.logits_mut());
        adam_step(&mut [(lb, &g.ba[..]), (la, &g.ab[..])], &mut state, &opts.adam)?;
    }
    Ok((ba, ab))
}

/// Coarse-to-fine estimation where every level is solved directly by
/// optimizing its logits.
pub fn solve_direct(
    i_b: &Image,
    i_a: &Image,
    cfg: &PyramidConfig,
    opts: &SolverOptions,
) -> Result<MultigridResult> {
    cfg.validate()?;
    let m = cfg.size_multiple();
    let h = i_b.height().div_ceil(m) * m;
    let w = i_b.width().div_ceil(m) * m;
    let finest = h * w * cfg.k * cfg.k;
    if finest > opts.max_coefficients {
        return Err(Error::Budget(format!(
            "{h}x{w} with k={} needs {finest} coefficients per direction, limit is {}; \
             reduce the resolution or the kernel size",
            cfg.k, opts.max_coefficients
        )));
    }
    let k = cfg.k;
    coarse_to_fine(
        |src, tgt, _| solve_scale(src, tgt, k, opts),
        i_b,
        i_a,
        cfg,
        &opts.weights,
    )
}

/// Composes adjacent-pair pull flows `flows[t]` (frame `t` as source, frame
/// `t + 1` as target) into the pull flow from the last target back to the
/// first source.
pub fn compose_chain(flows: &[CoordinateFlow]) -> Result<CoordinateFlow> {
    let (first, rest) = flows
        .split_first()
        .ok_or_else(|| Error::param("cannot compose an empty flow chain"))?;
    rest.iter()
        .try_fold(first.clone(), |acc, f| compose_flows(f, &acc))
}

/// Pull flow mapping frame `j` pixels to their sources in frame `i`, built
/// from `flow_fn(frame_t, frame_t+1)` for every adjacent pair in between.
pub fn long_range_flow<F>(frames: &[Image], i: usize, j: usize, mut flow_fn: F) -> Result<CoordinateFlow>
where
    F: FnMut(&Image, &Image) -> Result<CoordinateFlow>,
{
    if i >= j {
        return Err(Error::param(format!("need i < j, got i={i}, j={j}")));
    }
    if j >= frames.len() {
        return Err(Error::param(format!(
            "frame index {j} out of range for {} frames",
            frames.len()
        )));
    }
    let flows = (i..j)
        .map(|t| flow_fn(&frames[t], &frames[t + 1]))
        .collect::<Result<Vec<_>>>()?;
    compose_chain(&flows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::charbonnier_mean;

    /// Smooth texture with enough structure at every pyramid level.
    fn texture(h: usize, w: usize, dr: f64, dc: f64) -> Image {
        Image::from_fn(h, w, 1, |r, c, _| {
            let (y, x) = (r as f64 - dr, c as f64 - dc);
            0.5 + 0.2 * (0.31 * x + 0.17 * y).sin()
                + 0.15 * (0.23 * y - 0.11 * x).cos()
                + 0.1 * (0.57 * x).sin() * (0.41 * y).cos()
        })
        .unwrap()
    }

    fn fast_opts(iterations: usize) -> SolverOptions {
        SolverOptions {
            iterations,
            ..SolverOptions::default()
        }
    }

    #[test]
    fn config_capacity_and_budget() {
        let cfg = PyramidConfig::new(3, 7).unwrap();
        assert_eq!(cfg.max_displacement(), 21);
        assert_eq!(PyramidConfig::new(5, 11).unwrap().max_displacement(), 155);
        let count = cfg.coefficient_count(64, 64);
        assert_eq!(count, (64 * 64 + 32 * 32 + 16 * 16) * 49);
        assert!(count as f64 <= 4.0 / 3.0 * (64 * 64 * 49) as f64);
        assert!(PyramidConfig::new(0, 7).is_err());
        assert!(PyramidConfig::new(3, 6).is_err());
    }

    #[test]
    fn zero_predictor_keeps_identity() {
        let cfg = PyramidConfig::new(3, 5).unwrap();
        let a = texture(20, 28, 0.0, 0.0);
        let b = texture(20, 28, 0.0, 1.0);
        let res = coarse_to_fine(
            |s, _, _| {
                let u = FilterFlowField::uniform(s.height(), s.width(), 5)?;
                Ok((u.clone(), u))
            },
            &b,
            &a,
            &cfg,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(res.scales.len(), 3);
        assert_eq!((res.flow.height(), res.flow.width()), (20, 28));
        assert_eq!(res.scales[0].scale_index, 2);
        assert_eq!((res.scales[0].t_ba.height(), res.scales[0].t_ba.width()), (5, 7));
        assert!(res.flow.max_abs() < 1e-12);
        for (x, y) in res.reconstruction.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_is_recorded_and_cropped() {
        let cfg = PyramidConfig::new(3, 3).unwrap();
        let a = texture(13, 10, 0.0, 0.0);
        let res = coarse_to_fine(
            |s, _, _| {
                let u = FilterFlowField::uniform(s.height(), s.width(), 3)?;
                Ok((u.clone(), u))
            },
            &a,
            &a,
            &cfg,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!((res.flow.height(), res.flow.width()), (16, 12));
        assert_eq!(res.crop.pad_bottom, 3);
        assert_eq!(res.cropped_flow().height(), 13);
        assert_eq!(res.reconstruction.dims(), (13, 10, 1));
    }

    #[test]
    fn delta_predictor_accumulates_geometric_reach() {
        // Each level contributes a one-pixel residual, worth 2^level pixels
        // at full resolution.
        let cfg = PyramidConfig::new(3, 3).unwrap();
        let a = texture(16, 16, 0.0, 0.0);
        let res = coarse_to_fine(
            |s, _, _| {
                let d = FilterFlowField::delta(s.height(), s.width(), 3, (0, 1))?;
                Ok((d.clone(), d))
            },
            &a,
            &a,
            &cfg,
            &LossWeights::default(),
        )
        .unwrap();
        let f = res.flow.get(8, 2);
        assert!(f[0].abs() < 1e-9);
        assert!((f[1] - 7.0).abs() < 1e-9, "{f:?}");
        for s in &res.scales {
            assert!(s.residual.max_abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn predictor_size_mismatch_is_rejected() {
        let cfg = PyramidConfig::new(2, 3).unwrap();
        let a = texture(8, 8, 0.0, 0.0);
        let err = coarse_to_fine(
            |_, _, _| {
                let u = FilterFlowField::uniform(3, 3, 3)?;
                Ok((u.clone(), u))
            },
            &a,
            &a,
            &cfg,
            &LossWeights::default(),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn identical_frames_converge_to_zero_flow() {
        let a = texture(16, 16, 0.0, 0.0);
        let (ba, ab) = solve_scale(&a, &a, 5, &fast_opts(200)).unwrap();
        assert!(filters_to_flow(&ba).unwrap().mean_magnitude() < 0.05);
        assert!(filters_to_flow(&ab).unwrap().mean_magnitude() < 0.05);
    }

    #[test]
    fn single_level_is_a_single_solve() {
        let cfg = PyramidConfig::new(1, 5).unwrap();
        let a = texture(16, 16, 0.0, 0.0);
        let b = texture(16, 16, 0.0, 1.0);
        let opts = fast_opts(50);
        let res = solve_direct(&b, &a, &cfg, &opts).unwrap();
        let (ba, _) = solve_scale(&b, &a, 5, &opts).unwrap();
        assert_eq!(res.scales.len(), 1);
        assert_eq!(res.flow, filters_to_flow(&ba).unwrap());
    }

    #[test]
    fn shift_recovered_at_one_scale() {
        // a(p) = b(p + (0, 1))
        let a = texture(24, 24, 0.0, 0.0);
        let b = texture(24, 24, 0.0, 1.0);
        let (ba, _) = solve_scale(&b, &a, 5, &fast_opts(300)).unwrap();
        let flow = filters_to_flow(&ba).unwrap();
        let epe = flow.epe_interior(&CoordinateFlow::constant(24, 24, [0.0, 1.0]), 4).unwrap();
        assert!(epe < 0.5, "{epe}");
    }

    #[test]
    fn heavy_smoothness_gives_near_constant_flow() {
        let a = texture(16, 16, 0.0, 0.0);
        let b = texture(16, 16, 0.0, -1.0);
        let mut opts = fast_opts(200);
        opts.weights.lambda_sm = 100.0;
        let (ba, _) = solve_scale(&b, &a, 3, &opts).unwrap();
        let flow = filters_to_flow(&ba).unwrap();
        let n = flow.data().len() as f64;
        for comp in 0..2 {
            let mean = flow.data().iter().map(|d| d[comp]).sum::<f64>() / n;
            let var = flow.data().iter().map(|d| (d[comp] - mean).powi(2)).sum::<f64>() / n;
            assert!(var < 0.01, "component {comp}: {var}");
        }
    }

    #[test]
    fn refinement_does_not_worsen_reconstruction() {
        let cfg = PyramidConfig::new(2, 5).unwrap();
        let a = texture(32, 32, 0.0, 0.0);
        let b = texture(32, 32, 0.0, -4.0);
        let res = solve_direct(&b, &a, &cfg, &fast_opts(150)).unwrap();
        let coarse_only = warp_with_flow(&b, &upscale_flow_2x(&res.scales[0].flow)).unwrap();
        let e_coarse = charbonnier_mean(&coarse_only, &a).unwrap();
        let e_final = charbonnier_mean(&res.reconstruction, &a).unwrap();
        assert!(e_final <= e_coarse + 1e-12, "{e_final} vs {e_coarse}");
    }

    #[test]
    fn budget_guard() {
        let a = texture(64, 64, 0.0, 0.0);
        let opts = SolverOptions {
            max_coefficients: 1000,
            ..fast_opts(1)
        };
        let err = solve_direct(&a, &a, &PyramidConfig::default(), &opts);
        assert!(matches!(err, Err(Error::Budget(_))));
    }

    #[test]
    fn chain_of_constant_shifts_adds_up() {
        let flows = vec![CoordinateFlow::constant(20, 20, [0.0, 2.0]); 5];
        let total = compose_chain(&flows).unwrap();
        let d = total.get(10, 2);
        assert!((d[1] - 10.0).abs() < 1e-12 && d[0].abs() < 1e-12);
        assert!(compose_chain(&[]).is_err());
    }

    #[test]
    fn long_range_base_case_and_ranges() {
        let frames: Vec<Image> = (0..3).map(|t| texture(8, 8, 0.0, t as f64)).collect();
        let f = CoordinateFlow::constant(8, 8, [0.5, -1.0]);
        let one = long_range_flow(&frames, 0, 1, |_, _| Ok(f.clone())).unwrap();
        assert_eq!(one, f);
        assert!(long_range_flow(&frames, 1, 1, |_, _| Ok(f.clone())).is_err());
        assert!(long_range_flow(&frames, 0, 3, |_, _| Ok(f.clone())).is_err());
    }
}
