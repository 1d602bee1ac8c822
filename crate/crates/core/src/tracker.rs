//! Consumers of accumulated flows: mask and joint propagation, shot
//! boundaries from reconstruction error spikes, and evaluation metrics.

use crate::error::{Error, Result};
use crate::filter_flow::{sample_flow, warp_with_flow, CoordinateFlow};
use crate::grid::Image;
use crate::losses::charbonnier_mean;
use crate::multigrid::compose_chain;

/// Per-pixel object labels, 0 for background and `1..=n` for objects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col]
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of one object (`label >= 1`).
    pub fn object_mask(&self, label: usize) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.labels.iter().map(|&l| l == label).collect(),
        }
    }

    /// Binary mask of every non-background pixel.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::dim(format!(
                "masks are {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Soft per-object masks, one single-channel grid in `[0, 1]` per object.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    height: usize,
    width: usize,
    objects: Vec<Image>,
}

impl MaskStack {
    pub fn from_labels(labels: &LabelMap, num_objects: usize) -> Self {
        let objects = (1..=num_objects)
            .map(|i| {
                Image::from_fn(labels.height, labels.width, 1, |r, c, _| {
                    if labels.get(r, c) == i {
                        1.0
                    } else {
                        0.0
                    }
                })
                .expect("label map has a valid size")
            })
            .collect();
        Self {
            height: labels.height,
            width: labels.width,
            objects,
        }
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn object(&self, i: usize) -> &Image {
        &self.objects[i]
    }

    /// Thresholds each object and resolves overlaps by the largest
    /// probability; ties go to the lower object index.
    pub fn to_labels(&self, threshold: f64) -> LabelMap {
        let n = self.height * self.width;
        let mut labels = vec![0usize; n];
        for (p, label) in labels.iter_mut().enumerate() {
            let mut best = 0.0;
            for (i, obj) in self.objects.iter().enumerate() {
                let v = obj.data()[p];
                if v >= threshold && v > best {
                    best = v;
                    *label = i + 1;
                }
            }
        }
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Number of previous frames fused for each target.
    pub window: usize,
    pub threshold: f64,
    pub joint_radius: f64,
    pub use_first_frame: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            window: 3,
            threshold: 0.8,
            joint_radius: 3.0,
            use_first_frame: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::param("tracker window must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::param(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.joint_radius >= 0.0) {
            return Err(Error::param("joint radius must be >= 0"));
        }
        Ok(())
    }
}

/// Warps every source stack to the target with its pull flow, averages the
/// warped probabilities and thresholds them into labels.
pub fn fuse_masks(sources: &[(&MaskStack, &CoordinateFlow)], cfg: &TrackerConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let (first, _) = sources
        .first()
        .ok_or_else(|| Error::param("mask propagation needs at least one source"))?;
    let (h, w, n) = (first.height, first.width, first.num_objects());
    let mut sum: Vec<Image> = (0..n).map(|_| Image::new(h, w, 1).expect("valid size")).collect();
    for (stack, flow) in sources {
        if stack.height != h || stack.width != w || stack.num_objects() != n {
            return Err(Error::dim("mask stacks differ in size or object count"));
        }
        for (acc, obj) in sum.iter_mut().zip(&stack.objects) {
            let warped = warp_with_flow(obj, flow)?;
            for (a, v) in acc.data_mut().iter_mut().zip(warped.data()) {
                *a += v;
            }
        }
    }
    let scale = 1.0 / sources.len() as f64;
    let objects = sum.into_iter().map(|img| img.map(|v| v * scale)).collect();
    Ok(MaskStack {
        height: h,
        width: w,
        objects,
    }
    .to_labels(cfg.threshold))
}

/// Propagates the masks of the last `K` frames (consecutive, oldest first)
/// and optionally a distant anchor frame to `target`. `flow_fn(src, tgt)`
/// returns the pull flow reconstructing `tgt` from `src`.
pub fn propagate_masks<F>(
    history: &[(&Image, &MaskStack)],
    target: &Image,
    mut flow_fn: F,
    cfg: &TrackerConfig,
    anchor: Option<(&Image, &MaskStack)>,
) -> Result<LabelMap>
where
    F: FnMut(&Image, &Image) -> Result<CoordinateFlow>,
{
    cfg.validate()?;
    if history.is_empty() {
        return Err(Error::param("mask propagation needs a non-empty history"));
    }
    let used = &history[history.len().saturating_sub(cfg.window)..];
    let mut adjacent = Vec::with_capacity(used.len());
    for i in 0..used.len() {
        let next = used.get(i + 1).map(|h| h.0).unwrap_or(target);
        adjacent.push(flow_fn(used[i].0, next)?);
    }
    let mut flows = Vec::with_capacity(used.len() + 1);
    for i in 0..used.len() {
        flows.push(compose_chain(&adjacent[i..])?);
    }
    if let Some((frame, _)) = anchor {
        flows.push(flow_fn(frame, target)?);
    }
    let mut sources: Vec<(&MaskStack, &CoordinateFlow)> = used.iter().map(|h| h.1).zip(&flows).collect();
    if let Some((_, stack)) = anchor {
        sources.push((stack, flows.last().expect("anchor flow pushed")));
    }
    fuse_masks(&sources, cfg)
}

/// Tracks the first frame's labels through the sequence. Adjacent-pair flows
/// are computed once and composed for every history and anchor frame.
pub fn track_sequence<F>(
    frames: &[Image],
    first: &LabelMap,
    num_objects: usize,
    cfg: &TrackerConfig,
    mut flow_fn: F,
) -> Result<Vec<LabelMap>>
where
    F: FnMut(&Image, &Image) -> Result<CoordinateFlow>,
{
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::param("no frames to track"));
    }
    if first.height != frames[0].height() || first.width != frames[0].width() {
        return Err(Error::dim("first-frame labels do not match the frame size"));
    }
    let mut adjacent = Vec::with_capacity(frames.len() - 1);
    for t in 0..frames.len() - 1 {
        adjacent.push(flow_fn(&frames[t], &frames[t + 1])?);
    }
    let mut labels = vec![first.clone()];
    let mut stacks = vec![MaskStack::from_labels(first, num_objects)];
    for t in 1..frames.len() {
        let start = t.saturating_sub(cfg.window);
        let mut flows = Vec::new();
        let mut used = Vec::new();
        for h in start..t {
            flows.push(compose_chain(&adjacent[h..t])?);
            used.push(h);
        }
        if cfg.use_first_frame && start > 0 {
            flows.push(compose_chain(&adjacent[..t])?);
            used.push(0);
        }
        let sources: Vec<(&MaskStack, &CoordinateFlow)> = used.iter().map(|&h| &stacks[h]).zip(&flows).collect();
        let next = fuse_masks(&sources, cfg)?;
        stacks.push(MaskStack::from_labels(&next, num_objects));
        labels.push(next);
    }
    Ok(labels)
}

/// Joint positions `[row, col]` with visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMap {
    pub height: usize,
    pub width: usize,
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl JointMap {
    pub fn new(height: usize, width: usize, points: Vec<[f64; 2]>) -> Self {
        let visible = vec![true; points.len()];
        Self {
            height,
            width,
            points,
            visible,
        }
    }

    /// Tapered disk around one joint: `max(0, 1 - d / (radius + 1))`.
    pub fn heatmap(&self, joint: usize, radius: f64) -> Image {
        let p = self.points[joint];
        Image::from_fn(self.height, self.width, 1, |r, c, _| {
            let d = (r as f64 - p[0]).hypot(c as f64 - p[1]);
            (1.0 - d / (radius + 1.0)).max(0.0)
        })
        .expect("joint map has a valid size")
    }
}

/// Moves every visible joint along the pull flow: its heatmap is warped and
/// the maximum votes for the new location, which is then refined below the
/// pixel level by inverting the flow locally.
pub fn propagate_pose(joints: &JointMap, flow: &CoordinateFlow, cfg: &TrackerConfig) -> Result<JointMap> {
    cfg.validate()?;
    if flow.height() != joints.height || flow.width() != joints.width {
        return Err(Error::dim(format!(
            "flow {}x{} does not match joint map {}x{}",
            flow.height(),
            flow.width(),
            joints.height,
            joints.width
        )));
    }
    let mut out = joints.clone();
    for j in 0..joints.points.len() {
        if !joints.visible[j] {
            continue;
        }
        let heat = joints.heatmap(j, cfg.joint_radius);
        let peak = heat.data().iter().cloned().fold(0.0, f64::max);
        let warped = warp_with_flow(&heat, flow)?;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, &v) in warped.data().iter().enumerate() {
            if v > best.0 {
                best = (v, i);
            }
        }
        if best.0 < 0.5 * peak {
            out.visible[j] = false;
            continue;
        }
        // The vote picks the pixel; a few fixed-point steps of q = p - flow(q)
        // then recover the sub-pixel position the joint was pulled to.
        let p = joints.points[j];
        let mut q = [(best.1 / joints.width) as f64, (best.1 % joints.width) as f64];
        for _ in 0..3 {
            let d = sample_flow(flow, q[0], q[1]);
            q = [p[0] - d[0], p[1] - d[1]];
        }
        let max_r = (joints.height - 1) as f64;
        let max_c = (joints.width - 1) as f64;
        out.points[j] = [q[0].clamp(0.0, max_r), q[1].clamp(0.0, max_c)];
    }
    Ok(out)
}

/// Propagates joints frame by frame with adjacent-pair flows.
pub fn track_pose<F>(frames: &[Image], first: &JointMap, cfg: &TrackerConfig, mut flow_fn: F) -> Result<Vec<JointMap>>
where
    F: FnMut(&Image, &Image) -> Result<CoordinateFlow>,
{
    let mut out = vec![first.clone()];
    for t in 1..frames.len() {
        let flow = flow_fn(&frames[t - 1], &frames[t])?;
        let next = propagate_pose(out.last().expect("non-empty"), &flow, cfg)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShotConfig {
    /// Trailing pairs used for the robust statistics.
    pub window: usize,
    /// Pairs that must precede a flag.
    pub min_history: usize,
    pub mad_factor: f64,
    /// Lower bound on the spread as a fraction of the median, so that an
    /// almost constant error series does not turn jitter into boundaries.
    pub min_relative_spread: f64,
}

impl Default for ShotConfig {
    fn default() -> Self {
        Self {
            window: 20,
            min_history: 5,
            mad_factor: 3.0,
            min_relative_spread: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShotReport {
    /// Reconstruction error of every adjacent pair.
    pub errors: Vec<f64>,
    /// First frame of each new shot.
    pub boundaries: Vec<usize>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Flags pair `t` when its error exceeds `median + mad_factor * spread` of the
/// preceding `window` pairs, where the spread is the MAD floored at
/// `min_relative_spread * median`. Returned indices are the frames that start
/// a new shot, `t + 1`.
pub fn shot_boundaries(errors: &[f64], cfg: &ShotConfig) -> Vec<usize> {
    let mut out = Vec::new();
    for t in cfg.min_history.max(1)..errors.len() {
        let mut hist: Vec<f64> = errors[t.saturating_sub(cfg.window)..t].to_vec();
        let med = median(&mut hist);
        let mut dev: Vec<f64> = hist.iter().map(|e| (e - med).abs()).collect();
        let spread = median(&mut dev).max(cfg.min_relative_spread * med);
        if errors[t] > med + cfg.mad_factor * spread {
            out.push(t + 1);
        }
    }
    out
}

/// Reconstruction error of every adjacent pair followed by
/// [`shot_boundaries`]. `recon_fn(src, tgt)` reconstructs `tgt` from `src`.
pub fn detect_shots<F>(frames: &[Image], mut recon_fn: F, cfg: &ShotConfig) -> Result<ShotReport>
where
    F: FnMut(&Image, &Image) -> Result<Image>,
{
    if frames.len() < 3 {
        return Err(Error::param(format!(
            "shot detection needs at least 3 frames, got {}",
            frames.len()
        )));
    }
    let mut errors = Vec::with_capacity(frames.len() - 1);
    for t in 0..frames.len() - 1 {
        let recon = recon_fn(&frames[t], &frames[t + 1])?;
        errors.push(charbonnier_mean(&recon, &frames[t + 1])?);
    }
    let boundaries = shot_boundaries(&errors, cfg);
    Ok(ShotReport { errors, boundaries })
}

/// Intersection over union; 1 when both masks are empty.
pub fn eval_jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a background 4-neighbour; outside the image
/// counts as background.
pub fn mask_boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

fn matched_fraction(from: &[(usize, usize)], to: &[(usize, usize)], tol: f64) -> f64 {
    if from.is_empty() {
        return 0.0;
    }
    let tol2 = tol * tol;
    let hits = from
        .iter()
        .filter(|a| {
            to.iter().any(|b| {
                let dr = a.0 as f64 - b.0 as f64;
                let dc = a.1 as f64 - b.1 as f64;
                dr * dr + dc * dc <= tol2
            })
        })
        .count();
    hits as f64 / from.len() as f64
}

/// Contour F-measure with a distance tolerance in pixels.
pub fn eval_boundary_f(pred: &BinaryMask, gt: &BinaryMask, tolerance: f64) -> Result<f64> {
    pred.check_same(gt)?;
    if !(tolerance >= 0.0) {
        return Err(Error::param("boundary tolerance must be >= 0"));
    }
    let bp = mask_boundary(pred);
    let bg = mask_boundary(gt);
    if bp.is_empty() && bg.is_empty() {
        return Ok(1.0);
    }
    let precision = matched_fraction(&bp, &bg, tolerance);
    let recall = matched_fraction(&bg, &bp, tolerance);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Fraction of visible ground-truth joints predicted within
/// `tau * max(bbox height, bbox width)`.
pub fn eval_pck(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    visible: &[bool],
    tau: f64,
    bbox: (f64, f64),
) -> Result<f64> {
    if pred.len() != gt.len() || visible.len() != gt.len() {
        return Err(Error::dim(format!(
            "{} predicted joints, {} ground-truth joints, {} visibility flags",
            pred.len(),
            gt.len(),
            visible.len()
        )));
    }
    let size = bbox.0.max(bbox.1);
    if !(size > 0.0) {
        return Err(Error::param("bounding box size must be positive"));
    }
    let radius = tau * size;
    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, g), &v) in pred.iter().zip(gt).zip(visible) {
        if !v {
            continue;
        }
        total += 1;
        if (p[0] - g[0]).hypot(p[1] - g[1]) <= radius {
            hit += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// Bounding box `(height, width)` spanned by a set of points.
pub fn joint_bbox(points: &[[f64; 2]]) -> (f64, f64) {
    let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for p in points {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].max(p[0]);
        b[2] = b[2].min(p[1]);
        b[3] = b[3].max(p[1]);
    }
    if points.is_empty() {
        return (0.0, 0.0);
    }
    (b[1] - b[0], b[3] - b[2])
}

/// Mean absolute difference on the 8-bit scale after clamping to `[0, 1]`.
pub fn recon_l1(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::dim(format!("images {:?} and {:?} differ", a.dims(), b.dims())));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (255.0 * x.clamp(0.0, 1.0) - 255.0 * y.clamp(0.0, 1.0)).abs())
        .sum();
    Ok(sum / a.data().len() as f64)
}
