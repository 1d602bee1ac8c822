//! Synthetic scenes with analytic ground truth: moving shapes over a
//! background, rendered frame by frame together with pull flows, object
//! labels and joint positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filter_flow::CoordinateFlow;
use crate::grid::Image;
use crate::tracker::LabelMap;

/// Smooth random texture: a sum of isotropic Gaussian blobs whose sizes are
/// spread log-uniformly, with amplitudes growing with size so every pyramid
/// level sees structure.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobTexture {
    base: [f64; 3],
    blobs: Vec<Blob>,
}

#[derive(Debug, Clone, PartialEq)]
struct Blob {
    row: f64,
    col: f64,
    inv_two_var: f64,
    reach_sq: f64,
    amp: [f64; 3],
}

impl BlobTexture {
    /// Covers the window `[-margin, extent + margin)` in both axes with about
    /// one blob per 12 square pixels.
    pub fn new(extent: usize, margin: f64, seed: u64) -> Self {
        Self::with_sigma_range(extent, margin, (1.5, 10.0), seed)
    }

    /// Like [`BlobTexture::new`] with blob widths drawn from `sigma`.
    pub fn with_sigma_range(extent: usize, margin: f64, sigma: (f64, f64), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = extent as f64 + 2.0 * margin;
        let count = ((span * span) / 12.0).ceil() as usize;
        let (lo, hi) = (sigma.0.ln(), sigma.1.ln());
        let blobs = (0..count)
            .map(|_| {
                let sigma = rng.gen_range(lo..hi).exp();
                let a = 0.12 * (sigma / 4.0).sqrt();
                Blob {
                    row: rng.gen_range(-margin..extent as f64 + margin),
                    col: rng.gen_range(-margin..extent as f64 + margin),
                    inv_two_var: 1.0 / (2.0 * sigma * sigma),
                    reach_sq: (4.0 * sigma).powi(2),
                    amp: [rng.gen_range(-a..a), rng.gen_range(-a..a), rng.gen_range(-a..a)],
                }
            })
            .collect();
        Self {
            base: [0.5; 3],
            blobs,
        }
    }

    /// Texture value at a real-valued location, not clamped.
    pub fn sample(&self, row: f64, col: f64) -> [f64; 3] {
        let mut v = self.base;
        for b in &self.blobs {
            let d2 = (row - b.row).powi(2) + (col - b.col).powi(2);
            if d2 > b.reach_sq {
                continue;
            }
            let g = (-d2 * b.inv_two_var).exp();
            for c in 0..3 {
                v[c] += b.amp[c] * g;
            }
        }
        v
    }

    pub fn render(&self, height: usize, width: usize, offset: [f64; 2]) -> Image {
        let mut img = Image::new(height, width, 3).expect("positive size");
        for r in 0..height {
            for c in 0..width {
                let v = self.sample(r as f64 - offset[0], c as f64 - offset[1]);
                for (ch, x) in v.iter().enumerate() {
                    img.set(r, c, ch, *x);
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rectangle { half_height: f64, half_width: f64 },
    Disk { radius: f64 },
    /// Thick segment whose endpoints are tracked as joints.
    Stick { half_length: f64, radius: f64 },
}

impl ShapeKind {
    /// Half height and half width of the axis-aligned box around the shape
    /// when rotated by `angle` radians.
    fn half_extents(&self, angle: f64) -> (f64, f64) {
        let (sn, cs) = (angle.sin().abs(), angle.cos().abs());
        match *self {
            ShapeKind::Rectangle {
                half_height,
                half_width,
            } => (half_height * cs + half_width * sn, half_height * sn + half_width * cs),
            ShapeKind::Disk { radius } => (radius, radius),
            ShapeKind::Stick { half_length, radius } => (half_length * sn + radius, half_length * cs + radius),
        }
    }

    /// Whether the shape-local point `(y, x)` (axis aligned, centered) lies
    /// inside.
    fn covers(&self, y: f64, x: f64) -> bool {
        match *self {
            ShapeKind::Rectangle {
                half_height,
                half_width,
            } => y.abs() <= half_height && x.abs() <= half_width,
            ShapeKind::Disk { radius } => y * y + x * x <= radius * radius,
            ShapeKind::Stick { half_length, radius } => {
                let xc = x.clamp(-half_length, half_length);
                y * y + (x - xc).powi(2) <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill {
    Flat,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    /// Displacement per frame `[rows, cols]`.
    Translation { velocity: [f64; 2] },
    /// `center(t) = center(0) + amplitude * sin(2 pi t / period)`.
    Sinusoidal { amplitude: [f64; 2], period: f64 },
    /// Rigid rotation about the canvas center, counter-clockwise on screen.
    Rotation { degrees_per_frame: f64 },
}

impl Motion {
    /// Maps a point given at frame 0 to its position at frame `t`.
    fn forward(&self, p: [f64; 2], t: f64, center: [f64; 2]) -> [f64; 2] {
        match *self {
            Motion::Translation { velocity } => [p[0] + velocity[0] * t, p[1] + velocity[1] * t],
            Motion::Sinusoidal { amplitude, period } => {
                let s = (2.0 * std::f64::consts::PI * t / period).sin();
                [p[0] + amplitude[0] * s, p[1] + amplitude[1] * s]
            }
            Motion::Rotation { degrees_per_frame } => rotate(p, center, degrees_per_frame.to_radians() * t),
        }
    }

    /// Inverse of [`Motion::forward`].
    fn backward(&self, p: [f64; 2], t: f64, center: [f64; 2]) -> [f64; 2] {
        match *self {
            Motion::Translation { velocity } => [p[0] - velocity[0] * t, p[1] - velocity[1] * t],
            Motion::Sinusoidal { amplitude, period } => {
                let s = (2.0 * std::f64::consts::PI * t / period).sin();
                [p[0] - amplitude[0] * s, p[1] - amplitude[1] * s]
            }
            Motion::Rotation { degrees_per_frame } => rotate(p, center, -degrees_per_frame.to_radians() * t),
        }
    }

}

/// Counter-clockwise on screen (rows grow downward).
fn rotate(p: [f64; 2], center: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    let (y, x) = (p[0] - center[0], p[1] - center[1]);
    [center[0] + c * y - s * x, center[1] + s * y + c * x]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Position at frame 0, `[row, col]`.
    pub center: [f64; 2],
    /// Orientation at frame 0 in degrees.
    pub angle: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Later shapes are drawn on top.
    pub shapes: Vec<ShapeSpec>,
    pub motion: Motion,
    pub fill: Fill,
    pub background: Fill,
    /// When set the background follows `motion` too (a camera pan).
    pub background_moves: bool,
    pub seed: u64,
}

impl SynthSceneConfig {
    /// A scene with `num_shapes` random shapes of the given kinds, placed so
    /// they stay inside the canvas under `motion`.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        height: usize,
        width: usize,
        frames: usize,
        num_shapes: usize,
        kinds: &[&str],
        motion: Motion,
        fill: Fill,
        background: Fill,
        seed: u64,
    ) -> Result<Self> {
        if kinds.is_empty() && num_shapes > 0 {
            return Err(Error::Config("no shape kinds given".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let min_side = height.min(width) as f64;
        let mut shapes = Vec::with_capacity(num_shapes);
        let center = [(height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0];
        for i in 0..num_shapes {
            let size = rng.gen_range(0.08..0.16) * min_side;
            let kind = match kinds[i % kinds.len()] {
                "rectangle" | "rect" => ShapeKind::Rectangle {
                    half_height: size,
                    half_width: size * rng.gen_range(0.7..1.3),
                },
                "disk" => ShapeKind::Disk { radius: size },
                "stick" => ShapeKind::Stick {
                    half_length: 2.0 * size,
                    radius: 0.35 * size,
                },
                other => return Err(Error::Config(format!("unknown shape kind '{other}'"))),
            };
            let color = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let angle = match kind {
                ShapeKind::Stick { .. } => rng.gen_range(0.0..180.0),
                _ => 0.0,
            };
            // Rejection-sample a start position that keeps the shape inside.
            let mut placed = None;
            for _ in 0..200 {
                let c = [rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64)];
                let spec = ShapeSpec {
                    kind,
                    center: c,
                    angle,
                    color,
                };
                if shape_stays_inside(&spec, &motion, frames, height, width, center) {
                    placed = Some(spec);
                    break;
                }
            }
            shapes.push(placed.ok_or_else(|| {
                Error::Config(format!(
                    "cannot place shape {i} so that it stays inside a {height}x{width} canvas for {frames} frames"
                ))
            })?);
        }
        Ok(Self {
            height,
            width,
            frames,
            shapes,
            motion,
            fill,
            background,
            background_moves: false,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!("canvas {}x{} is too small", self.height, self.width)));
        }
        if self.frames == 0 {
            return Err(Error::Config("scene needs at least one frame".into()));
        }
        if let Motion::Sinusoidal { period, .. } = self.motion {
            if !(period > 0.0) {
                return Err(Error::Config("sinusoidal period must be positive".into()));
            }
        }
        let center = self.canvas_center();
        for (i, s) in self.shapes.iter().enumerate() {
            if !shape_stays_inside(s, &self.motion, self.frames, self.height, self.width, center) {
                return Err(Error::Config(format!(
                    "shape {i} leaves the canvas (must stay at least 1 px inside)"
                )));
            }
        }
        Ok(())
    }

    fn canvas_center(&self) -> [f64; 2] {
        [(self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0]
    }
}

fn shape_stays_inside(
    s: &ShapeSpec,
    motion: &Motion,
    frames: usize,
    height: usize,
    width: usize,
    canvas_center: [f64; 2],
) -> bool {
    (0..frames).all(|t| {
        let c = motion.forward(s.center, t as f64, canvas_center);
        let spin = match *motion {
            Motion::Rotation { degrees_per_frame } => degrees_per_frame * t as f64,
            _ => 0.0,
        };
        let (ey, ex) = s.kind.half_extents((s.angle + spin).to_radians());
        c[0] - ey >= 1.0 && c[0] + ey <= height as f64 - 2.0 && c[1] - ex >= 1.0 && c[1] + ex <= width as f64 - 2.0
    })
}

/// A rendered scene.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub frames: Vec<Image>,
    /// `flows[t]` pulls frame `t + 1` from frame `t`.
    pub flows: Vec<CoordinateFlow>,
    pub labels: Vec<LabelMap>,
    /// Per frame, the two endpoints of every stick shape in shape order.
    pub joints: Vec<Vec<[f64; 2]>>,
    pub num_objects: usize,
}

/// Renders every frame of the scene with its ground truth.
pub fn render_scene(cfg: &SynthSceneConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let center = cfg.canvas_center();
    let extent = h.max(w);
    let margin = match cfg.motion {
        Motion::Translation { velocity } => velocity[0].abs().max(velocity[1].abs()) * cfg.frames as f64 + 16.0,
        Motion::Sinusoidal { amplitude, .. } => amplitude[0].abs().max(amplitude[1].abs()) + 16.0,
        Motion::Rotation { .. } => extent as f64 / 2.0 + 16.0,
    };
    let bg_texture = BlobTexture::new(extent, margin, cfg.seed ^ 0xb6);
    let shape_textures: Vec<BlobTexture> = (0..cfg.shapes.len())
        .map(|i| BlobTexture::with_sigma_range(extent, 4.0, (1.0, 4.0), cfg.seed ^ (0x5a00 + i as u64)))
        .collect();
    let bg_flat = [0.5, 0.5, 0.5];

    // Shape-local coordinates of a canvas point at frame t, for shape s.
    let local = |s: &ShapeSpec, p: [f64; 2], t: f64| -> [f64; 2] {
        let q = cfg.motion.backward(p, t, center);
        let rel = [q[0] - s.center[0], q[1] - s.center[1]];
        let a = -s.angle.to_radians();
        let (sn, cs) = a.sin_cos();
        [cs * rel[0] - sn * rel[1], sn * rel[0] + cs * rel[1]]
    };
    let owner = |p: [f64; 2], t: f64| -> Option<usize> {
        (0..cfg.shapes.len()).rev().find(|&i| {
            let s = &cfg.shapes[i];
            let l = local(s, p, t);
            s.kind.covers(l[0], l[1])
        })
    };

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut labels = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let tf = t as f64;
        let mut img = Image::new(h, w, 3)?;
        let mut lab = vec![0usize; h * w];
        for r in 0..h {
            for c in 0..w {
                let p = [r as f64, c as f64];
                let v = match owner(p, tf) {
                    Some(i) => {
                        lab[r * w + c] = i + 1;
                        let s = &cfg.shapes[i];
                        match cfg.fill {
                            Fill::Flat => s.color,
                            Fill::Noise => {
                                let l = local(s, p, tf);
                                let n = shape_textures[i].sample(l[0] + extent as f64 / 2.0, l[1] + extent as f64 / 2.0);
                                [
                                    s.color[0] + n[0] - 0.5,
                                    s.color[1] + n[1] - 0.5,
                                    s.color[2] + n[2] - 0.5,
                                ]
                            }
                        }
                    }
                    None => match cfg.background {
                        Fill::Flat => bg_flat,
                        Fill::Noise => {
                            let q = if cfg.background_moves {
                                cfg.motion.backward(p, tf, center)
                            } else {
                                p
                            };
                            bg_texture.sample(q[0], q[1])
                        }
                    },
                };
                for (ch, x) in v.iter().enumerate() {
                    img.set(r, c, ch, *x);
                }
            }
        }
        frames.push(img);
        labels.push(LabelMap::new(h, w, lab)?);
    }

    let mut flows = Vec::with_capacity(cfg.frames.saturating_sub(1));
    for t in 1..cfg.frames {
        let tf = t as f64;
        let flow = CoordinateFlow::from_fn(h, w, |r, c| {
            let p = [r as f64, c as f64];
            let moves = owner(p, tf).is_some() || cfg.background_moves;
            if !moves {
                return [0.0, 0.0];
            }
            let origin = cfg.motion.backward(p, tf, center);
            let src = cfg.motion.forward(origin, tf - 1.0, center);
            [src[0] - p[0], src[1] - p[1]]
        });
        flows.push(flow);
    }

    let joints = (0..cfg.frames)
        .map(|t| {
            let mut out = Vec::new();
            for s in &cfg.shapes {
                if let ShapeKind::Stick { half_length, .. } = s.kind {
                    let a = s.angle.to_radians();
                    for sign in [-1.0, 1.0] {
                        let p0 = rotate([s.center[0], s.center[1] + sign * half_length], s.center, a);
                        out.push(cfg.motion.forward(p0, t as f64, center));
                    }
                }
            }
            out
        })
        .collect();

    Ok(SynthScene {
        frames,
        flows,
        labels,
        joints,
        num_objects: cfg.shapes.len(),
    })
}
