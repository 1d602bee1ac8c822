//! Training the predictor on frame pairs with the multi-scale objective.
//!
//! Every scale of the pyramid is run with the same parameters. The flow
//! accumulated from coarser scales only enters as a warp of the source frame
//! and is treated as a constant when differentiating.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{flip_horizontal, flip_vertical, rotate90, Image};
use crate::losses::{grad_total_wrt_logits, LossBreakdown, LossWeights};
use crate::multigrid::{coarse_to_fine, MultigridResult, PyramidConfig};
use crate::predictor::adam::{adam_step, AdamConfig, AdamState};
use crate::predictor::net::{backward, forward, init_params, NetConfig, PredictorParams, Tape};
use crate::predictor::tensor::Real;

/// Frame sequences of one common size.
#[derive(Debug, Clone)]
pub struct Corpus {
    sequences: Vec<Vec<Image>>,
}

impl Corpus {
    pub fn new(sequences: Vec<Vec<Image>>) -> Result<Self> {
        let first = sequences
            .iter()
            .flat_map(|s| s.first())
            .next()
            .ok_or_else(|| Error::param("corpus is empty"))?
            .dims();
        for (i, seq) in sequences.iter().enumerate() {
            if seq.len() < 2 {
                return Err(Error::param(format!("sequence {i} has fewer than 2 frames")));
            }
            if let Some(f) = seq.iter().find(|f| f.dims() != first) {
                return Err(Error::dim(format!(
                    "sequence {i} has a {:?} frame, corpus frames are {:?}",
                    f.dims(),
                    first
                )));
            }
        }
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[Vec<Image>] {
        &self.sequences
    }

    /// Number of distinct ordered pairs `(i, j)` with `0 < j - i <= window`.
    pub fn pair_count(&self, window: usize) -> usize {
        self.sequences
            .iter()
            .map(|s| (1..s.len()).map(|i| (s.len() - i).min(window)).sum::<usize>())
            .sum()
    }

    fn sample_pair(&self, window: usize, rng: &mut ChaCha8Rng) -> (&Image, &Image) {
        let seq = &self.sequences[rng.gen_range(0..self.sequences.len())];
        let i = rng.gen_range(0..seq.len() - 1);
        let d = rng.gen_range(1..=window.min(seq.len() - 1 - i));
        (&seq[i], &seq[i + d])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub iterations: usize,
    /// Pairs are drawn at most this many frames apart.
    pub pair_window: usize,
    pub batch_size: usize,
    pub flip: bool,
    pub rotate90: bool,
    pub weights: LossWeights,
    /// Global L2 norm the gradient is clipped to; 0 disables clipping.
    pub clip_norm: f64,
    /// Iterations between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            iterations: 500,
            pair_window: 5,
            batch_size: 1,
            flip: true,
            rotate90: true,
            weights: LossWeights::default(),
            clip_norm: 10.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.weights.validate()?;
        if self.pair_window == 0 {
            return Err(Error::param("pair_window must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::param(format!("clip_norm must be >= 0, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Batch-averaged losses of one iteration, per scale (coarse to fine) and
/// direction.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub scales: Vec<(usize, LossBreakdown, LossBreakdown)>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl IterationLog {
    /// Sum over scales and both directions.
    pub fn total(&self) -> f64 {
        self.scales.iter().map(|(_, ba, ab)| ba.total + ab.total).sum()
    }

    pub fn csv_rows(&self) -> impl Iterator<Item = String> + '_ {
        self.scales.iter().flat_map(move |(s, ba, ab)| {
            [ba.csv_row(self.iteration, *s), ab.csv_row(self.iteration, *s)]
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: PredictorParams<T>,
    pub log: Vec<IterationLog>,
}

impl<T> TrainOutcome<T> {
    /// Training log in the loss CSV format, with a header line.
    pub fn log_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for it in &self.log {
            for row in it.csv_rows() {
                out.push_str(&row);
                out.push('\n');
            }
        }
        out
    }

    /// Mean per-iteration total over `range` of the log.
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.log[range];
        slice.iter().map(|l| l.total()).sum::<f64>() / slice.len().max(1) as f64
    }
}

fn augment(b: &Image, a: &Image, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (Image, Image) {
    let (mut b, mut a) = (b.clone(), a.clone());
    if cfg.flip {
        if rng.gen::<bool>() {
            b = flip_horizontal(&b);
            a = flip_horizontal(&a);
        }
        if rng.gen::<bool>() {
            b = flip_vertical(&b);
            a = flip_vertical(&a);
        }
    }
    if cfg.rotate90 {
        for _ in 0..rng.gen_range(0..4) {
            b = rotate90(&b);
            a = rotate90(&a);
        }
    }
    (b, a)
}

/// Multi-scale objective of one pair and its gradient with respect to every
/// parameter tensor.
pub fn pair_gradient<T: Real>(
    params: &PredictorParams<T>,
    i_b: &Image,
    i_a: &Image,
    pyramid: &PyramidConfig,
    weights: &LossWeights,
) -> Result<(MultigridResult, Vec<Vec<f64>>)> {
    check_kernel(params, pyramid)?;
    let mut grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    let mut tape_ba = Tape::default();
    let mut tape_ab = Tape::default();
    let result = coarse_to_fine(
        |warped, a_l, _| {
            let t_ba = forward(params, warped, a_l, Some(&mut tape_ba))?;
            let t_ab = forward(params, a_l, warped, Some(&mut tape_ab))?;
            let g = grad_total_wrt_logits(&t_ba, &t_ab, warped, a_l, weights)?;
            for (tape, up) in [(&tape_ba, &g.ba), (&tape_ab, &g.ab)] {
                for (acc, d) in grads.iter_mut().zip(backward(params, tape, up)?) {
                    for (x, y) in acc.iter_mut().zip(d) {
                        *x += y.as_f64();
                    }
                }
            }
            Ok((t_ba, t_ab))
        },
        i_b,
        i_a,
        pyramid,
        weights,
    )?;
    Ok((result, grads))
}

/// Flow from `i_b` to `i_a` predicted by the network at every scale.
pub fn infer<T: Real>(
    params: &PredictorParams<T>,
    i_b: &Image,
    i_a: &Image,
    pyramid: &PyramidConfig,
    weights: &LossWeights,
) -> Result<MultigridResult> {
    check_kernel(params, pyramid)?;
    coarse_to_fine(
        |warped, a_l, _| Ok((forward(params, warped, a_l, None)?, forward(params, a_l, warped, None)?)),
        i_b,
        i_a,
        pyramid,
        weights,
    )
}

fn check_kernel<T>(params: &PredictorParams<T>, pyramid: &PyramidConfig) -> Result<()> {
    if params.config.k != pyramid.k {
        return Err(Error::param(format!(
            "network emits k={} filters but the pyramid uses k={}",
            params.config.k, pyramid.k
        )));
    }
    Ok(())
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        rec: mean(|b| b.rec),
        fl: mean(|b| b.fl),
        fb: mean(|b| b.fb),
        sm: mean(|b| b.sm),
        sp: mean(|b| b.sp),
        total: mean(|b| b.total),
        direction: items[0].direction,
    }
}

/// Trains freshly initialized parameters.
pub fn train<T: Real>(
    corpus: &Corpus,
    net: &NetConfig,
    cfg: &TrainConfig,
    pyramid: &PyramidConfig,
) -> Result<TrainOutcome<T>> {
    train_from(init_params(net)?, corpus, cfg, pyramid, |_, _| Ok(()))
}

/// Continues training `params`. `checkpoint(iteration, params)` runs every
/// `cfg.checkpoint_every` iterations and after the last one.
pub fn train_from<T, C>(
    mut params: PredictorParams<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    pyramid: &PyramidConfig,
    mut checkpoint: C,
) -> Result<TrainOutcome<T>>
where
    T: Real,
    C: FnMut(usize, &PredictorParams<T>) -> Result<()>,
{
    cfg.validate()?;
    pyramid.validate()?;
    check_kernel(&params, pyramid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::<T>::new(params.tensors.iter().map(|t| t.data.len()));
    let mut log = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mut grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        let mut per_scale: Vec<(usize, Vec<LossBreakdown>, Vec<LossBreakdown>)> = Vec::new();
        for _ in 0..cfg.batch_size {
            let (b, a) = corpus.sample_pair(cfg.pair_window, &mut rng);
            let (b, a) = augment(b, a, cfg, &mut rng);
            let (result, g) = pair_gradient(&params, &b, &a, pyramid, &cfg.weights)?;
            for (acc, d) in grads.iter_mut().zip(g) {
                for (x, y) in acc.iter_mut().zip(d) {
                    *x += y;
                }
            }
            if per_scale.is_empty() {
                per_scale = result.scales.iter().map(|s| (s.scale_index, Vec::new(), Vec::new())).collect();
            }
            for (slot, s) in per_scale.iter_mut().zip(&result.scales) {
                slot.1.push(s.losses.0);
                slot.2.push(s.losses.1);
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut norm_sq = 0.0;
        for g in grads.iter_mut().flatten() {
            *g *= inv;
            norm_sq += *g * *g;
        }
        let grad_norm = norm_sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at iteration {iteration}")));
        }
        if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
            let s = cfg.clip_norm / grad_norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        let grads_t: Vec<Vec<T>> = grads.iter().map(|g| g.iter().map(|&v| T::lit(v)).collect()).collect();
        let mut groups: Vec<(&mut [T], &[T])> = params
            .tensors
            .iter_mut()
            .zip(&grads_t)
            .map(|(p, g)| (p.data.as_mut_slice(), g.as_slice()))
            .collect();
        adam_step(&mut groups, &mut state, &cfg.adam)?;
        log.push(IterationLog {
            iteration,
            scales: per_scale
                .iter()
                .map(|(s, ba, ab)| (*s, mean_breakdown(ba), mean_breakdown(ab)))
                .collect(),
            grad_norm,
        });
        let last = iteration + 1 == cfg.iterations;
        if last || (cfg.checkpoint_every > 0 && (iteration + 1) % cfg.checkpoint_every == 0) {
            checkpoint(iteration + 1, &params)?;
        }
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::BlobTexture;

    fn small_net() -> NetConfig {
        NetConfig {
            in_channels: 3,
            embed_channels: vec![4, 4],
            full_res_channels: 2,
            head_channels: vec![6, 9],
            k: 3,
            seed: 5,
        }
    }

    fn corpus(n: usize, size: usize) -> Corpus {
        let tex = BlobTexture::new(size, 8.0, 9);
        let seqs = (0..n)
            .map(|s| {
                (0..3)
                    .map(|t| tex.render(size, size, [0.0, (s + t) as f64 * 0.5]))
                    .collect()
            })
            .collect();
        Corpus::new(seqs).unwrap()
    }

    fn quick_cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            pair_window: 2,
            adam: AdamConfig::with_lr(0.01),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn corpus_validation() {
        assert!(Corpus::new(vec![]).is_err());
        let a = Image::filled(4, 4, 3, 0.1).unwrap();
        let b = Image::filled(4, 6, 3, 0.1).unwrap();
        assert!(Corpus::new(vec![vec![a.clone()]]).is_err());
        assert!(Corpus::new(vec![vec![a.clone(), b]]).is_err());
        let c = Corpus::new(vec![vec![a.clone(); 6], vec![a; 2]]).unwrap();
        assert_eq!(c.pair_count(1), 6);
        assert_eq!(c.pair_count(5), 15 + 1);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.pair_window = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.adam.beta1 = 1.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let pyr = PyramidConfig::new(2, 5).unwrap();
        assert!(train::<f64>(&corpus(1, 8), &small_net(), &quick_cfg(1), &pyr).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise() {
        let params = init_params::<f32>(&small_net()).unwrap();
        let mut cfg = quick_cfg(3);
        cfg.adam.learning_rate = 0.0;
        let pyr = PyramidConfig::new(2, 3).unwrap();
        let out = train_from(params.clone(), &corpus(2, 8), &cfg, &pyr, |_, _| Ok(())).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let pyr = PyramidConfig::new(2, 3).unwrap();
        let run = || train::<f32>(&corpus(3, 8), &small_net(), &quick_cfg(4), &pyr).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.log_csv(), b.log_csv());
        assert_eq!(a.params, b.params);
        assert!(a.log_csv().starts_with(LossBreakdown::CSV_HEADER));
        // Two scales, two directions per iteration.
        assert_eq!(a.log_csv().lines().count(), 1 + 4 * 4);
    }

    #[test]
    fn checkpoints_follow_interval() {
        let pyr = PyramidConfig::new(1, 3).unwrap();
        let mut cfg = quick_cfg(5);
        cfg.checkpoint_every = 2;
        let mut seen = Vec::new();
        let params = init_params::<f32>(&small_net()).unwrap();
        train_from(params, &corpus(1, 8), &cfg, &pyr, |i, _| {
            seen.push(i);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2, 4, 5]);
    }

    #[test]
    fn single_scale_gradient_matches_finite_differences() {
        let mut params = init_params::<f64>(&small_net()).unwrap();
        // Zero biases leave dead-feature pixels with exactly uniform filters,
        // i.e. flow sampled on the grid where bilinear warping has a kink.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let last = params.tensors.len() - 1;
        for v in params.tensors[last].data.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let c = corpus(1, 8);
        let (b, a) = (&c.sequences()[0][0], &c.sequences()[0][1]);
        let pyr = PyramidConfig::new(1, 3).unwrap();
        let w = LossWeights::default();
        let (res, grads) = pair_gradient(&params, b, a, &pyr, &w).unwrap();
        let objective = |p: &PredictorParams<f64>| infer(p, b, a, &pyr, &w).unwrap().total_loss();
        assert!((objective(&params) - res.total_loss()).abs() < 1e-12);
        let mut worst: f64 = 0.0;
        for _ in 0..40 {
            let ti = rng.gen_range(0..params.tensors.len());
            let j = rng.gen_range(0..params.tensors[ti].data.len());
            let h = 1e-6;
            let mut plus = params.clone();
            plus.tensors[ti].data[j] += h;
            let mut minus = params.clone();
            minus.tensors[ti].data[j] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grads[ti][j];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn short_training_lowers_loss() {
        let pyr = PyramidConfig::new(2, 3).unwrap();
        let mut cfg = quick_cfg(40);
        cfg.pair_window = 1;
        let out = train::<f32>(&corpus(2, 8), &small_net(), &cfg, &pyr).unwrap();
        assert!(out.mean_total(30..40) < out.mean_total(0..10));
        assert!(out.params.is_finite());
    }
}
