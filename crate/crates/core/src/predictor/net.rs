//! The filter predictor: a small U-shaped per-frame encoder plus a shallow
//! full-resolution stream produce a pixel embedding for each frame; the two
//! embeddings are concatenated `(source, target)` and a convolutional head
//! emits `k * k` filter logits per pixel.
//!
//! A single parameter set serves every pyramid scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filter_flow::FilterFlowField;
use crate::grid::{pad_to_multiple, Image};
use crate::predictor::tensor::{self, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Encoder widths per level; the last entry is the embedding width.
    pub embed_channels: Vec<usize>,
    pub full_res_channels: usize,
    /// Widths after concatenation; the last entry must equal `k * k`.
    pub head_channels: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl NetConfig {
    pub fn new(k: usize) -> Self {
        Self {
            in_channels: 3,
            embed_channels: vec![16, 32, 32, 16],
            full_res_channels: 8,
            head_channels: vec![32, k * k],
            k,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::param(format!("kernel size must be odd, got {}", self.k)));
        }
        if self.embed_channels.len() < 2 {
            return Err(Error::param("embed_channels needs at least two entries"));
        }
        if self.head_channels.last() != Some(&(self.k * self.k)) {
            return Err(Error::param(format!(
                "final head width must equal k*k = {}",
                self.k * self.k
            )));
        }
        let widths = self
            .embed_channels
            .iter()
            .chain(&self.head_channels)
            .chain([&self.in_channels, &self.full_res_channels]);
        if widths.into_iter().any(|&c| c == 0) {
            return Err(Error::param("channel counts must be positive"));
        }
        Ok(())
    }

    /// Number of resolution levels in the per-frame encoder.
    pub fn encoder_depth(&self) -> usize {
        self.embed_channels.len() - 1
    }

    /// Inputs are padded internally to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.encoder_depth() - 1)
    }

    fn embed_width(&self) -> usize {
        *self.embed_channels.last().expect("validated")
    }

    fn layers(&self) -> Vec<LayerSpec> {
        let enc = &self.embed_channels[..self.encoder_depth()];
        let mut out = Vec::new();
        for (i, &c) in enc.iter().enumerate() {
            let input = if i == 0 { self.in_channels } else { enc[i - 1] };
            out.push(LayerSpec::new(format!("enc{i}"), input, c, 3));
        }
        for i in (0..enc.len() - 1).rev() {
            out.push(LayerSpec::new(format!("dec{i}"), enc[i + 1], enc[i], 3));
        }
        out.push(LayerSpec::new("embed".into(), enc[0], self.embed_width(), 1));
        out.push(LayerSpec::new("full".into(), self.in_channels, self.full_res_channels, 3));
        out.push(LayerSpec::new("full_proj".into(), self.full_res_channels, self.embed_width(), 1));
        let mut prev = 2 * self.embed_width();
        let last = self.head_channels.len() - 1;
        for (i, &c) in self.head_channels.iter().enumerate() {
            let k = if i == last { 1 } else { 3 };
            out.push(LayerSpec::new(format!("head{i}"), prev, c, k));
            prev = c;
        }
        out
    }
}

#[derive(Debug, Clone)]
struct LayerSpec {
    name: String,
    input: usize,
    output: usize,
    k: usize,
}

impl LayerSpec {
    fn new(name: String, input: usize, output: usize, k: usize) -> Self {
        Self {
            name,
            input,
            output,
            k,
        }
    }
}

/// A named weight grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Convolution kernels (`out x in x k x k`) and biases of every layer, in
/// layer order, weight before bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams<T> {
    pub config: NetConfig,
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> PredictorParams<T> {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Zero-valued tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Real>(&self) -> PredictorParams<U> {
        PredictorParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    fn layer(&self, idx: usize) -> (&[T], &[T]) {
        (&self.tensors[2 * idx].data, &self.tensors[2 * idx + 1].data)
    }
}

/// Fan-in scaled uniform weights in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`,
/// zero biases. Deterministic given `cfg.seed`.
pub fn init_params<T: Real>(cfg: &NetConfig) -> Result<PredictorParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = Vec::new();
    for layer in cfg.layers() {
        let fan_in = layer.input * layer.k * layer.k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = layer.output * fan_in;
        tensors.push(ParamTensor {
            name: format!("{}.weight", layer.name),
            shape: vec![layer.output, layer.input, layer.k, layer.k],
            data: (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect(),
        });
        tensors.push(ParamTensor {
            name: format!("{}.bias", layer.name),
            shape: vec![layer.output],
            data: vec![T::zero(); layer.output],
        });
    }
    Ok(PredictorParams {
        config: cfg.clone(),
        tensors,
    })
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Conv {
        x: usize,
        layer: usize,
        k: usize,
        cols: Option<Vec<T>>,
    },
    Relu {
        x: usize,
    },
    Pool {
        x: usize,
    },
    Upsample {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Every intermediate of one forward pass, in evaluation order.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    height: usize,
    width: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new(0, 0)
    }
}

impl<T: Real> Tape<T> {
    fn new(height: usize, width: usize) -> Self {
        Self {
            nodes: Vec::new(),
            height,
            width,
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> usize {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn value(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn conv(&mut self, params: &PredictorParams<T>, x: usize, layer: usize) -> usize {
        let (w, b) = params.layer(layer);
        let shape = &params.tensors[2 * layer].shape;
        let (out_c, k) = (shape[0], shape[2]);
        let (value, cols) = tensor::conv2d(self.value(x), w, b, out_c, k);
        self.push(Op::Conv { x, layer, k, cols }, value)
    }

    fn relu(&mut self, x: usize) -> usize {
        let v = tensor::relu(self.value(x));
        self.push(Op::Relu { x }, v)
    }

    fn conv_relu(&mut self, params: &PredictorParams<T>, x: usize, layer: usize) -> usize {
        let c = self.conv(params, x, layer);
        self.relu(c)
    }

    fn pool(&mut self, x: usize) -> usize {
        let v = tensor::pool2(self.value(x));
        self.push(Op::Pool { x }, v)
    }

    fn upsample(&mut self, x: usize) -> usize {
        let v = tensor::upsample2(self.value(x));
        self.push(Op::Upsample { x }, v)
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let v = tensor::add(self.value(a), self.value(b));
        self.push(Op::Add { a, b }, v)
    }

    fn concat(&mut self, a: usize, b: usize) -> usize {
        let v = tensor::concat(self.value(a), self.value(b));
        self.push(Op::Concat { a, b }, v)
    }

    /// Height and width of the (unpadded) frames this tape was built for.
    pub fn frame_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn output(&self) -> &Tensor<T> {
        &self.nodes.last().expect("non-empty tape").value
    }
}

fn to_tensor<T: Real>(img: &Image) -> Tensor<T> {
    let (h, w, c) = img.dims();
    let mut t = Tensor::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                t.data[(ch * h + y) * w + x] = T::lit(img.get(y, x, ch) - 0.5);
            }
        }
    }
    t
}

/// Runs the network on one encoder stream and returns the embedding node.
fn embed<T: Real>(tape: &mut Tape<T>, params: &PredictorParams<T>, input: usize) -> usize {
    let cfg = &params.config;
    let depth = cfg.encoder_depth();
    let mut layer = 0;
    let mut skips = Vec::with_capacity(depth);
    let mut cur = input;
    for level in 0..depth {
        if level > 0 {
            cur = tape.pool(cur);
        }
        cur = tape.conv_relu(params, cur, layer);
        layer += 1;
        skips.push(cur);
    }
    for level in (0..depth - 1).rev() {
        let up = tape.upsample(cur);
        let d = tape.conv_relu(params, up, layer);
        layer += 1;
        cur = tape.add(d, skips[level]);
    }
    let proj = tape.conv(params, cur, layer);
    let full = tape.conv_relu(params, input, layer + 1);
    let full_proj = tape.conv(params, full, layer + 2);
    tape.add(proj, full_proj)
}

fn head_start(cfg: &NetConfig) -> usize {
    cfg.encoder_depth() * 2 - 1 + 3
}

/// Predicts filter logits reconstructing `tgt` from `src` at the frames'
/// resolution. When `tape` is given it receives every intermediate for
/// [`backward`].
pub fn forward<T: Real>(
    params: &PredictorParams<T>,
    src: &Image,
    tgt: &Image,
    tape: Option<&mut Tape<T>>,
) -> Result<FilterFlowField> {
    if src.dims() != tgt.dims() {
        return Err(Error::dim(format!(
            "frames differ in size: {:?} vs {:?}",
            src.dims(),
            tgt.dims()
        )));
    }
    let cfg = &params.config;
    if src.channels() != cfg.in_channels {
        return Err(Error::dim(format!(
            "network expects {} channels, frames have {}",
            cfg.in_channels,
            src.channels()
        )));
    }
    let (h, w) = (src.height(), src.width());
    let m = cfg.size_multiple();
    let (src_p, _) = pad_to_multiple(src, m)?;
    let (tgt_p, _) = pad_to_multiple(tgt, m)?;

    let mut local = Tape::new(h, w);
    let t = match tape {
        Some(t) => {
            *t = Tape::new(h, w);
            t
        }
        None => &mut local,
    };
    let s_in = t.push(Op::Input, to_tensor(&src_p));
    let t_in = t.push(Op::Input, to_tensor(&tgt_p));
    let s_emb = embed(t, params, s_in);
    let t_emb = embed(t, params, t_in);
    let mut cur = t.concat(s_emb, t_emb);
    let first = head_start(cfg);
    let n_head = cfg.head_channels.len();
    for i in 0..n_head {
        cur = if i + 1 == n_head {
            t.conv(params, cur, first + i)
        } else {
            t.conv_relu(params, cur, first + i)
        };
    }

    let out = t.output();
    let kk = cfg.k * cfg.k;
    let pw = out.w;
    let plane = out.h * out.w;
    let mut logits = Vec::with_capacity(h * w * kk);
    for y in 0..h {
        for x in 0..w {
            for o in 0..kk {
                logits.push(out.data[o * plane + y * pw + x].as_f64());
            }
        }
    }
    FilterFlowField::from_logits(h, w, cfg.k, 1, logits)
}

/// Reverse pass: given `dL/dlogits` in the field's layout (pixel-major, `k*k`
/// values per pixel), returns `dL/dparam` for every tensor of `params`.
pub fn backward<T: Real>(
    params: &PredictorParams<T>,
    tape: &Tape<T>,
    upstream: &[f64],
) -> Result<Vec<Vec<T>>> {
    let cfg = &params.config;
    let kk = cfg.k * cfg.k;
    let (h, w) = tape.frame_size();
    if tape.nodes.is_empty() {
        return Err(Error::dim("empty tape"));
    }
    if upstream.len() != h * w * kk {
        return Err(Error::dim(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            h * w * kk
        )));
    }
    let out = tape.output();
    let mut seed = Tensor::zeros(out.c, out.h, out.w);
    let plane = out.h * out.w;
    for y in 0..h {
        for x in 0..w {
            for o in 0..kk {
                seed.data[o * plane + y * out.w + x] = T::lit(upstream[(y * w + x) * kk + o]);
            }
        }
    }

    let mut grads = params.zeros_like();
    let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; tape.nodes.len()];
    *node_grads.last_mut().expect("non-empty") = Some(seed);

    fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
        match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    for i in (0..tape.nodes.len()).rev() {
        let Some(g) = node_grads[i].take() else { continue };
        match &tape.nodes[i].op {
            Op::Input => {}
            Op::Conv { x, layer, k, cols } => {
                let (wt, _) = params.layer(*layer);
                let (gw, rest) = grads.split_at_mut(2 * layer + 1);
                let input_grad = tensor::conv2d_backward(
                    tape.value(*x),
                    cols.as_deref(),
                    wt,
                    &g,
                    *k,
                    &mut gw[2 * layer],
                    &mut rest[0],
                    !matches!(tape.nodes[*x].op, Op::Input),
                );
                if let Some(dx) = input_grad {
                    accumulate(&mut node_grads[*x], dx);
                }
            }
            Op::Relu { x } => {
                let dx = tensor::relu_backward(&tape.nodes[i].value, &g);
                accumulate(&mut node_grads[*x], dx);
            }
            Op::Pool { x } => accumulate(&mut node_grads[*x], tensor::pool2_backward(&g)),
            Op::Upsample { x } => accumulate(&mut node_grads[*x], tensor::upsample2_backward(&g)),
            Op::Add { a, b } => {
                accumulate(&mut node_grads[*b], g.clone());
                accumulate(&mut node_grads[*a], g);
            }
            Op::Concat { a, b } => {
                let ca = tape.value(*a).c;
                let split = ca * g.h * g.w;
                let ga = Tensor {
                    c: ca,
                    h: g.h,
                    w: g.w,
                    data: g.data[..split].to_vec(),
                };
                let gb = Tensor {
                    c: g.c - ca,
                    h: g.h,
                    w: g.w,
                    data: g.data[split..].to_vec(),
                };
                accumulate(&mut node_grads[*a], ga);
                accumulate(&mut node_grads[*b], gb);
            }
        }
    }
    Ok(grads)
}

/// Probe step used by [`check_network_gradient`].
pub const NET_GRADCHECK_STEP: f64 = 1e-6;

/// Compares [`backward`] run in `T` against central differences of a double
/// precision forward pass at the same weights, for the scalar
/// `sum(u * logits)` with a random fixed `u`. Returns the worst relative
/// error over `samples` randomly chosen weights.
pub fn check_network_gradient<T: Real>(
    params: &PredictorParams<T>,
    src: &Image,
    tgt: &Image,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new(0, 0);
    let out = forward(params, src, tgt, Some(&mut tape))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let upstream: Vec<f64> = (0..out.logits().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads = backward(params, &tape, &upstream)?;
    let analytic: Vec<f64> = grads.iter().flatten().map(|g| g.as_f64()).collect();

    let reference: PredictorParams<f64> = params.cast();
    let x: Vec<f64> = reference.tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
    let kk = out.k() * out.k();
    let mut probe = reference.clone();
    let mut loss = |v: &[f64]| -> Vec<f64> {
        let mut off = 0;
        for t in &mut probe.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        let logits = forward(&probe, src, tgt, None).expect("validated inputs");
        logits
            .logits()
            .chunks(kk)
            .zip(upstream.chunks(kk))
            .map(|(l, u)| l.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    };
    crate::losses::finite_diff_check(&mut loss, &x, &analytic, NET_GRADCHECK_STEP, samples, seed)
}
