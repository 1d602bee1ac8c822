use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use filterflow::config::Settings;
use filterflow::filter_flow::warp_with_flow;
use filterflow::io::{
    read_checkpoint, read_flo, read_image, read_joints, read_labels, write_checkpoint, write_filters, write_flo,
    write_image, write_joints, write_labels,
};
use filterflow::losses::gradient_suite;
use filterflow::manifest::RunManifest;
use filterflow::multigrid::{long_range_flow, solve_direct, MultigridResult, PyramidConfig, SolverOptions};
use filterflow::predictor::{
    check_network_gradient, infer, init_params, train_from, AdamConfig, Corpus, NetConfig, PredictorParams,
    TrainConfig,
};
use filterflow::toolkit::{scene_config_from_settings, synth_corpus};
use filterflow::tracker::{
    detect_shots, eval_boundary_f, eval_jaccard, eval_pck, joint_bbox, recon_l1, track_pose, track_sequence,
    ShotConfig, TrackerConfig,
};
use filterflow::{CoordinateFlow, Error, Image, LossWeights, Result};

#[derive(Parser)]
#[command(name = "filterflow", version, about = "Multigrid filter-flow estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` settings file, or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    /// Direct-solver ADAM iterations per level.
    #[arg(long)]
    solver_iterations: Option<usize>,
    #[arg(long)]
    solver_lr: Option<f64>,
    /// Use a trained network instead of the direct solver.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    lambda_fl: Option<f64>,
    #[arg(long)]
    lambda_fb: Option<f64>,
    #[arg(long)]
    lambda_sm: Option<f64>,
    #[arg(long)]
    lambda_sp: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene with ground-truth flow, masks and joints.
    Synth(SynthArgs),
    /// Direct-solver flow between two images.
    Solve(PairArgs),
    /// Train the filter predictor.
    Train(TrainArgs),
    /// Learned-model flow between two images.
    Infer(PairArgs),
    /// Propagate first-frame object masks through a frame directory.
    Track(TrackArgs),
    /// Propagate first-frame joints through a frame directory.
    Pose(PoseArgs),
    /// Detect shot boundaries from reconstruction errors.
    Shots(ShotsArgs),
    /// Flow and reconstruction from frame `i` to frame `j`.
    Longflow(LongflowArgs),
    /// Compare predictions against a ground-truth directory.
    Eval(EvalArgs),
    /// Finite-difference checks of every loss term and the network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    shapes: Option<usize>,
    /// Comma-separated shape kinds: rectangle, disk, stick.
    #[arg(long)]
    kinds: Option<String>,
    /// translation, sinusoidal or rotation.
    #[arg(long)]
    motion: Option<String>,
    /// `row,col` pixels per frame.
    #[arg(long, allow_hyphen_values = true)]
    velocity: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    amplitude: Option<String>,
    #[arg(long)]
    period: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    degrees_per_frame: Option<f64>,
    /// flat or noise.
    #[arg(long)]
    fill: Option<String>,
    #[arg(long)]
    background: Option<String>,
    #[arg(long)]
    background_moves: Option<bool>,
}

#[derive(Args)]
struct PairArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineArgs,
    /// Source frame (B).
    source: Option<PathBuf>,
    /// Target frame (A).
    target: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of frames, or of sequence subdirectories.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pair_window: Option<usize>,
    #[arg(long)]
    flip: Option<bool>,
    #[arg(long)]
    rotate90: Option<bool>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    /// Comma-separated encoder widths.
    #[arg(long)]
    embed_channels: Option<String>,
    #[arg(long)]
    full_res_channels: Option<usize>,
    /// Comma-separated head widths before the final `k * k` layer.
    #[arg(long)]
    head_hidden: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineArgs,
    frames: Option<PathBuf>,
    /// First-frame label mask.
    mask: Option<PathBuf>,
    /// Number of objects encoded in the mask.
    #[arg(long)]
    objects: Option<usize>,
    /// Previous frames fused per target.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    use_first_frame: bool,
}

#[derive(Args)]
struct PoseArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineArgs,
    frames: Option<PathBuf>,
    /// Joint table; rows of frame 0 are used.
    joints: Option<PathBuf>,
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(Args)]
struct ShotsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineArgs,
    frames: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    min_history: Option<usize>,
    #[arg(long)]
    mad_factor: Option<f64>,
    #[arg(long)]
    min_relative_spread: Option<f64>,
}

#[derive(Args)]
struct LongflowArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    engine: EngineArgs,
    frames: Option<PathBuf>,
    #[arg(long)]
    from: Option<usize>,
    #[arg(long)]
    to: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    pred: Option<PathBuf>,
    gt: Option<PathBuf>,
    /// Border excluded from flow EPE.
    #[arg(long)]
    margin: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    /// PCK radius as a fraction of the joint bounding box.
    #[arg(long)]
    tau: Option<f64>,
    /// Boundary-F matching tolerance in pixels.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Random instances per loss term.
    #[arg(long)]
    instances: Option<usize>,
    /// Network weights probed.
    #[arg(long)]
    samples: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 2,
        _ => 1,
    }
}

/// Settings from `--config` (a plain settings file or a manifest) with the
/// common flags layered on top.
fn settings(common: &Common) -> Result<Settings> {
    let mut s = match &common.config {
        None => Settings::new(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            if text.lines().any(|l| l.trim_start().starts_with("manifest_version")) {
                Settings::from_text(&RunManifest::parse(&text)?.config_text())?
            } else {
                Settings::from_text(&text)?
            }
        }
    };
    s.set_override("seed", common.seed);
    s.get("seed", 0u64)?;
    Ok(s)
}

fn path_override(s: &mut Settings, key: &str, p: &Option<PathBuf>) {
    s.set_override(key, p.as_ref().map(|p| p.display().to_string()));
}

fn required_path(s: &mut Settings, key: &str) -> Result<PathBuf> {
    s.require::<String>(key).map(PathBuf::from)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn check_unused(s: &Settings) -> Result<()> {
    let unused = s.unused();
    if unused.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown settings: {}", unused.join(", "))))
    }
}

/// Writes `manifest.txt` recording the resolved settings and `files`.
fn finish(command: &str, s: &mut Settings, out: &Path, files: &[PathBuf], start: Instant) -> Result<()> {
    let seed = s.get("seed", 0u64)?;
    check_unused(s)?;
    let mut m = RunManifest::new(command, s, seed);
    m.record_artifacts(out, files)?;
    m.duration = start.elapsed();
    m.write(out.join("manifest.txt"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Images in `dir` sorted by name; `frames_*` files only when any exist.
fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "pgm")
            )
        })
        .collect();
    let name = |p: &PathBuf| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if files.iter().any(|p| name(p).starts_with("frames_")) {
        files.retain(|p| name(p).starts_with("frames_"));
    } else {
        files.retain(|p| !name(p).starts_with("mask_") && !name(p).starts_with("recon"));
    }
    files.sort();
    Ok(files)
}

fn load_frames(dir: &Path, min: usize) -> Result<Vec<Image>> {
    let frames = list_frames(dir)?
        .iter()
        .map(read_image)
        .collect::<Result<Vec<_>>>()?;
    if frames.len() < min {
        return Err(Error::Config(format!(
            "{} holds {} frames, need at least {min}",
            dir.display(),
            frames.len()
        )));
    }
    Ok(frames)
}

/// Flow estimator: the direct solver or a trained network.
enum Engine {
    Direct(PyramidConfig, SolverOptions),
    Learned(PyramidConfig, Box<PredictorParams<f32>>, LossWeights),
}

impl Engine {
    fn from_settings(s: &mut Settings, args: &EngineArgs, require_checkpoint: bool) -> Result<Self> {
        s.set_override("levels", args.levels);
        s.set_override("kernel", args.kernel);
        s.set_override("solver_iterations", args.solver_iterations);
        s.set_override("solver_lr", args.solver_lr);
        path_override(s, "checkpoint", &args.checkpoint);
        s.set_override("lambda_fl", args.lambda_fl);
        s.set_override("lambda_fb", args.lambda_fb);
        s.set_override("lambda_sm", args.lambda_sm);
        s.set_override("lambda_sp", args.lambda_sp);
        let weights = weights_from(s)?;
        let checkpoint: String = if require_checkpoint {
            s.require("checkpoint")?
        } else {
            s.get("checkpoint", String::new())?
        };
        if checkpoint.is_empty() {
            let pyramid = PyramidConfig::new(s.get("levels", 3)?, s.get("kernel", 7)?)?;
            let opts = SolverOptions {
                iterations: s.get("solver_iterations", 500)?,
                adam: AdamConfig::with_lr(s.get("solver_lr", 0.05)?),
                weights,
                ..SolverOptions::default()
            };
            Ok(Engine::Direct(pyramid, opts))
        } else {
            let params = read_checkpoint::<f32>(&checkpoint)?;
            let pyramid = PyramidConfig::new(s.get("levels", 3)?, params.config.k)?;
            Ok(Engine::Learned(pyramid, Box::new(params), weights))
        }
    }

    fn estimate(&self, src: &Image, tgt: &Image) -> Result<MultigridResult> {
        match self {
            Engine::Direct(p, o) => solve_direct(src, tgt, p, o),
            Engine::Learned(p, params, w) => infer(params, src, tgt, p, w),
        }
    }

    fn flow(&self, src: &Image, tgt: &Image) -> Result<CoordinateFlow> {
        Ok(self.estimate(src, tgt)?.cropped_flow())
    }
}

fn weights_from(s: &mut Settings) -> Result<LossWeights> {
    let d = LossWeights::default();
    let w = LossWeights {
        lambda_fl: s.get("lambda_fl", d.lambda_fl)?,
        lambda_fb: s.get("lambda_fb", d.lambda_fb)?,
        lambda_sm: s.get("lambda_sm", d.lambda_sm)?,
        lambda_sp: s.get("lambda_sp", d.lambda_sp)?,
    };
    w.validate()?;
    Ok(w)
}

fn parse_list(text: &str, key: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` must be a comma-separated list of integers")))
        })
        .collect()
}

fn run(command: Command) -> Result<()> {
    let start = Instant::now();
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Solve(a) => cmd_pair("solve", a, false, start),
        Command::Infer(a) => cmd_pair("infer", a, true, start),
        Command::Train(a) => cmd_train(a, start),
        Command::Track(a) => cmd_track(a, start),
        Command::Pose(a) => cmd_pose(a, start),
        Command::Shots(a) => cmd_shots(a, start),
        Command::Longflow(a) => cmd_longflow(a, start),
        Command::Eval(a) => cmd_eval(a, start),
        Command::Gradcheck(a) => cmd_gradcheck(a, start),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut s = settings(&a.common)?;
    s.set_override("height", a.height);
    s.set_override("width", a.width);
    s.set_override("frames", a.frames);
    s.set_override("shapes", a.shapes);
    s.set_override("kinds", a.kinds);
    s.set_override("motion", a.motion);
    s.set_override("velocity", a.velocity);
    s.set_override("amplitude", a.amplitude);
    s.set_override("period", a.period);
    s.set_override("degrees_per_frame", a.degrees_per_frame);
    s.set_override("fill", a.fill);
    s.set_override("background", a.background);
    s.set_override("background_moves", a.background_moves);
    let mut probe = s.clone();
    scene_config_from_settings(&mut probe)?;
    check_unused(&probe)?;
    let out = out_dir(&a.common)?;
    let m = synth_corpus(&mut s, &out)?;
    println!("wrote {} files to {}", m.artifacts.len(), out.display());
    Ok(())
}

fn cmd_pair(command: &str, a: PairArgs, learned: bool, start: Instant) -> Result<()> {
    let mut s = settings(&a.common)?;
    path_override(&mut s, "source", &a.source);
    path_override(&mut s, "target", &a.target);
    let engine = Engine::from_settings(&mut s, &a.engine, learned)?;
    let src = read_image(required_path(&mut s, "source")?)?;
    let tgt = read_image(required_path(&mut s, "target")?)?;
    check_unused(&s)?;
    let out = out_dir(&a.common)?;
    let r = engine.estimate(&src, &tgt)?;
    let mut files = vec![out.join("flow.flo"), out.join("recon.png")];
    write_flo(&r.cropped_flow(), &files[0])?;
    write_image(&r.reconstruction, &files[1])?;
    for sc in &r.scales {
        let p = out.join(format!("filters_l{}.mgpf", sc.scale_index));
        write_filters(&sc.t_ba, &p)?;
        files.push(p);
    }
    println!(
        "total loss {:.6}, recon_l1 {:.4}, mean |flow| {:.4}",
        r.total_loss(),
        recon_l1(&r.reconstruction, &tgt)?,
        r.cropped_flow().mean_magnitude()
    );
    finish(command, &mut s, &out, &files, start)
}

/// Sequences under `dir`: its subdirectories when it has any, else `dir`.
fn load_corpus(dir: &Path) -> Result<Corpus> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let sequences = if subdirs.is_empty() {
        vec![load_frames(dir, 2)?]
    } else {
        subdirs.iter().map(|d| load_frames(d, 2)).collect::<Result<Vec<_>>>()?
    };
    Corpus::new(sequences)
}

fn cmd_train(a: TrainArgs, start: Instant) -> Result<()> {
    let mut s = settings(&a.common)?;
    path_override(&mut s, "data", &a.data);
    s.set_override("iterations", a.iterations);
    s.set_override("lr", a.lr);
    s.set_override("batch_size", a.batch_size);
    s.set_override("pair_window", a.pair_window);
    s.set_override("flip", a.flip);
    s.set_override("rotate90", a.rotate90);
    s.set_override("clip_norm", a.clip_norm);
    s.set_override("checkpoint_every", a.checkpoint_every);
    s.set_override("levels", a.levels);
    s.set_override("kernel", a.kernel);
    s.set_override("embed_channels", a.embed_channels);
    s.set_override("full_res_channels", a.full_res_channels);
    s.set_override("head_hidden", a.head_hidden);
    path_override(&mut s, "init", &a.init);

    let seed: u64 = s.get("seed", 0)?;
    let pyramid = PyramidConfig::new(s.get("levels", 3)?, s.get("kernel", 7)?)?;
    let cfg = TrainConfig {
        adam: AdamConfig::with_lr(s.get("lr", 0.0005)?),
        iterations: s.get("iterations", 500)?,
        pair_window: s.get("pair_window", 5)?,
        batch_size: s.get("batch_size", 1)?,
        flip: s.get("flip", true)?,
        rotate90: s.get("rotate90", true)?,
        weights: weights_from(&mut s)?,
        clip_norm: s.get("clip_norm", 10.0)?,
        checkpoint_every: s.get("checkpoint_every", 0)?,
        seed,
    };
    let defaults = NetConfig::new(pyramid.k);
    let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let embed = parse_list(&s.get("embed_channels", list(&defaults.embed_channels))?, "embed_channels")?;
    let hidden = parse_list(&s.get("head_hidden", list(&defaults.head_channels[..1]))?, "head_hidden")?;
    let net = NetConfig {
        embed_channels: embed,
        full_res_channels: s.get("full_res_channels", defaults.full_res_channels)?,
        head_channels: hidden.into_iter().chain([pyramid.k * pyramid.k]).collect(),
        seed,
        ..defaults
    };
    let init: String = s.get("init", String::new())?;
    let params = if init.is_empty() {
        init_params::<f32>(&net)?
    } else {
        read_checkpoint::<f32>(&init)?
    };
    let corpus = load_corpus(&required_path(&mut s, "data")?)?;
    check_unused(&s)?;
    let out = out_dir(&a.common)?;
    let mut files = Vec::new();
    let total = cfg.iterations;
    let outcome = train_from(params, &corpus, &cfg, &pyramid, |it, p| {
        let path = out.join(format!("checkpoint_{it:06}.ckpt"));
        write_checkpoint(p, &path)?;
        println!("iteration {it}/{total}: wrote {}", path.display());
        files.push(path);
        Ok(())
    })?;
    let report = (total / 10).max(1);
    for l in outcome.log.iter().filter(|l| l.iteration % report == 0 || l.iteration + 1 == total) {
        println!("iteration {}: loss {:.6}, grad norm {:.4}", l.iteration, l.total(), l.grad_norm);
    }
    let model = out.join("model.ckpt");
    write_checkpoint(&outcome.params, &model)?;
    let log = out.join("train_log.csv");
    write_text(&log, &outcome.log_csv())?;
    files.extend([model, log]);
    finish("train", &mut s, &out, &files, start)
}

fn cmd_track(a: TrackArgs, start: Instant) -> Result<()> {
    let mut s = settings(&a.common)?;
    path_override(&mut s, "frames", &a.frames);
    path_override(&mut s, "mask", &a.mask);
    s.set_override("objects", a.objects);
    s.set_override("k", a.k);
    s.set_override("threshold", a.threshold);
    if a.use_first_frame {
        s.set_override("use_first_frame", Some(true));
    }
    let engine = Engine::from_settings(&mut s, &a.engine, false)?;
    let d = TrackerConfig::default();
    let cfg = TrackerConfig {
        window: s.get("k", d.window)?,
        threshold: s.get("threshold", d.threshold)?,
        use_first_frame: s.get("use_first_frame", false)?,
        ..d
    };
    let objects: usize = s.get("objects", 1)?;
    let frames = load_frames(&required_path(&mut s, "frames")?, 2)?;
    let first = read_labels(required_path(&mut s, "mask")?, objects)?;
    check_unused(&s)?;
    let out = out_dir(&a.common)?;
    let labels = track_sequence(&frames, &first, objects, &cfg, |x, y| engine.flow(x, y))?;
    let mut files = Vec::new();
    for (t, l) in labels.iter().enumerate() {
        let p = out.join(format!("mask_{t:04}.png"));
        write_labels(l, objects, &p)?;
        files.push(p);
    }
    println!("tracked {objects} object(s) over {} frames", frames.len());
    finish("track", &mut s, &out, &files, start)
}

fn cmd_pose(a: PoseArgs, start: Instant) -> Result<()> {
    let mut s = settings(&a.common)?;
    path_override(&mut s, "frames", &a.frames);
    path_override(&mut s, "joints", &a.joints);
    s.set_override("radius", a.radius);
    let engine = Engine::from_settings(&mut s, &a.engine, false)?;
    let cfg = TrackerConfig {
        joint_radius: s.get("radius", TrackerConfig::default().joint_radius)?,
        ..TrackerConfig::default()
    };
    let frames = load_frames(&required_path(&mut s, "frames")?, 2)?;
    let (h, w) = (frames[0].height(), frames[0].width());
    let table = read_joints(required_path(&mut s, "joints")?, h, w)?;
    check_unused(&s)?;
    let out = out_dir(&a.common)?;
    let tracks = track_pose(&frames, &table[0], &cfg, |x, y| engine.flow(x, y))?;
    let path = out.join("joints.csv");
    write_joints(&tracks, &path)?;
    println!("tracked {} joint(s) over {} frames", table[0].points.len(), frames.len());
    finish("pose", &mut s, &out, &[path], start)
}

fn cmd_shots(a: ShotsArgs, start: Instant) -> Result<()> {
    let mut s = settings(&a.common)?;
    path_override(&mut s, "frames", &a.frames);
    s.set_override("window", a.window);
    s.set_override("min_history", a.min_history);
    s.set_override("mad_factor", a.mad_factor);
    s.set_override("min_relative_spread", a.min_relative_spread);
    let engine = Engine::from_settings(&mut s, &a.engine, false)?;
    let d = ShotConfig::default();
    let cfg = ShotConfig {
        window: s.get("window", d.window)?,
        min_history: s.get("min_history", d.min_history)?,
        mad_factor: s.get("mad_factor", d.mad_factor)?,
        min_relative_spread: s.get("min_relative_spread", d.min_relative_spread)?,
    };
    let frames = load_frames(&required_path(&mut s, "frames")?, 3)?;
    check_unused(&s)?;
    let out = out_dir(&a.common)?;
    let report = detect_shots(&frames, |x, y| Ok(engine.estimate(x, y)?.reconstruction), &cfg)?;
    let mut csv = String::from("pair,error,boundary\n");
    for (t, e) in report.errors.iter().enumerate() {
        csv.push_str(&format!("{t},{e},{}\n", report.boundaries.contains(&(t + 1)) as u8));
    }
    let path = out.join("shots.csv");
    write_text(&path, &csv)?;
    println!("boundaries: {:?}", report.boundaries);
    finish("shots", &mut s, &out, &[path], start)
}

fn cmd_longflow(a: LongflowArgs, start: Instant) -> Result<()> {
    let mut s = settings(&a.common)?;
    path_override(&mut s, "frames", &a.frames);
    s.set_override("from", a.from);
    s.set_override("to", a.to);
    let engine = Engine::from_settings(&mut s, &a.engine, false)?;
    let frames = load_frames(&required_path(&mut s, "frames")?, 2)?;
    let i: usize = s.get("from", 0)?;
    let j: usize = s.get("to", frames.len() - 1)?;
    check_unused(&s)?;
    let out = out_dir(&a.common)?;
    let flow = long_range_flow(&frames, i, j, |x, y| engine.flow(x, y))?;
    let recon = warp_with_flow(&frames[i], &flow)?;
    let l1 = recon_l1(&recon, &frames[j])?;
    let identity = recon_l1(&frames[i], &frames[j])?;
    let files = [out.join("flow.flo"), out.join("recon.png"), out.join("metrics.csv")];
    write_flo(&flow, &files[0])?;
    write_image(&recon, &files[1])?;
    write_text(&files[2], &format!("metric,value\nrecon_l1,{l1}\nidentity_l1,{identity}\n"))?;
    println!("recon_l1 {l1:.4} (identity {identity:.4}) for frame {i} -> {j}");
    finish("longflow", &mut s, &out, &files, start)
}

fn numbered(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut v: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(ext))
        })
        .collect();
    v.sort();
    Ok(v)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cmd_eval(a: EvalArgs, start: Instant) -> Result<()> {
    let mut s = settings(&a.common)?;
    path_override(&mut s, "pred", &a.pred);
    path_override(&mut s, "gt", &a.gt);
    s.set_override("margin", a.margin);
    s.set_override("objects", a.objects);
    s.set_override("tau", a.tau);
    s.set_override("tolerance", a.tolerance);
    let pred = required_path(&mut s, "pred")?;
    let gt = required_path(&mut s, "gt")?;
    let margin: usize = s.get("margin", 0)?;
    let objects: usize = s.get("objects", 1)?;
    let tau: f64 = s.get("tau", 0.2)?;
    let tolerance: f64 = s.get("tolerance", 2.0)?;
    check_unused(&s)?;
    let mut rows: Vec<(String, f64)> = Vec::new();

    let flows = numbered(&pred, "flow_", ".flo")?;
    if !flows.is_empty() {
        let mut epe = Vec::new();
        for p in &flows {
            let truth = read_flo(gt.join(p.file_name().expect("listed file")))?;
            epe.push(read_flo(p)?.epe_interior(&truth, margin)?);
        }
        rows.push(("flow_epe".into(), mean(&epe)));
    }
    let masks = numbered(&pred, "mask_", ".png")?;
    if !masks.is_empty() {
        let (mut jac, mut bf) = (Vec::new(), Vec::new());
        for p in &masks {
            let truth = read_labels(gt.join(p.file_name().expect("listed file")), objects)?;
            let guess = read_labels(p, objects)?;
            for o in 1..=objects {
                jac.push(eval_jaccard(&guess.object_mask(o), &truth.object_mask(o))?);
                bf.push(eval_boundary_f(&guess.object_mask(o), &truth.object_mask(o), tolerance)?);
            }
        }
        rows.push(("jaccard".into(), mean(&jac)));
        rows.push(("boundary_f".into(), mean(&bf)));
    }
    let joints = pred.join("joints.csv");
    if joints.exists() {
        let truth_path = gt.join("joints.csv");
        let probe = read_image(numbered(&gt, "frames_", ".png")?.first().ok_or_else(|| {
            Error::Config(format!("{} has no frames to size the joint maps", gt.display()))
        })?)?;
        let (h, w) = (probe.height(), probe.width());
        let guess = read_joints(&joints, h, w)?;
        let truth = read_joints(&truth_path, h, w)?;
        if guess.len() != truth.len() {
            return Err(Error::Config("joint tables cover different frame counts".into()));
        }
        let mut pck = Vec::new();
        for (g, t) in guess.iter().zip(&truth) {
            pck.push(eval_pck(&g.points, &t.points, &t.visible, tau, joint_bbox(&t.points))?);
        }
        rows.push((format!("pck@{tau}"), mean(&pck)));
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no flow_*.flo, mask_*.png or joints.csv",
            pred.display()
        )));
    }
    let out = out_dir(&a.common)?;
    let mut csv = String::from("metric,value\n");
    for (k, v) in &rows {
        println!("{k}: {v:.6}");
        csv.push_str(&format!("{k},{v}\n"));
    }
    let path = out.join("metrics.csv");
    write_text(&path, &csv)?;
    finish("eval", &mut s, &out, &[path], start)
}

fn cmd_gradcheck(a: GradcheckArgs, start: Instant) -> Result<()> {
    let mut s = settings(&a.common)?;
    s.set_override("instances", a.instances);
    s.set_override("samples", a.samples);
    let seed: u64 = s.get("seed", 0)?;
    let instances: usize = s.get("instances", 20)?;
    let samples: usize = s.get("samples", 200)?;
    check_unused(&s)?;
    let out = out_dir(&a.common)?;
    let mut rows = gradient_suite(instances, seed)?
        .into_iter()
        .map(|(n, e)| (n.to_string(), e, 1e-4))
        .collect::<Vec<_>>();
    let mut net = NetConfig::new(3);
    net.embed_channels = vec![4, 8, 8];
    net.full_res_channels = 4;
    net.head_channels = vec![8, 9];
    net.seed = seed;
    let frame = |salt: u64| {
        Image::from_fn(16, 16, 3, |r, c, ch| {
            let v = (r as u64 * 31 + c as u64 * 17 + ch as u64 * 7 + salt).wrapping_mul(2654435761) % 1000;
            v as f64 / 1000.0
        })
    };
    let (src, tgt) = (frame(seed)?, frame(seed + 1)?);
    let p64 = init_params::<f64>(&net)?;
    rows.push(("network_f64".into(), check_network_gradient(&p64, &src, &tgt, samples, seed)?, 1e-4));
    let p32: PredictorParams<f32> = p64.cast();
    rows.push(("network_f32".into(), check_network_gradient(&p32, &src, &tgt, samples, seed)?, 1e-3));
    let mut csv = String::from("check,max_rel_err,tolerance,pass\n");
    let mut failed = Vec::new();
    for (name, err, tol) in &rows {
        let pass = *err < *tol;
        println!("{name:<12} max rel err {err:.3e} (< {tol:e}: {})", if pass { "ok" } else { "FAIL" });
        csv.push_str(&format!("{name},{err},{tol},{}\n", pass as u8));
        if !pass {
            failed.push(name.clone());
        }
    }
    let path = out.join("gradcheck.csv");
    write_text(&path, &csv)?;
    finish("gradcheck", &mut s, &out, &[path], start)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient checks failed: {}", failed.join(", "))))
    }
}
