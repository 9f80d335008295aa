//! `lhm` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! `LHM_THREADS` caps the worker pool used by the renderer.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use lhm::autodiff::{set_gradient_fault, NdArray};
use lhm::body::{parse_motion, BodyTemplate, Pose, Region};
use lhm::config::RunConfig;
use lhm::gaussian::{read_avatar, write_avatar, AvatarSkinning, GaussianSet};
use lhm::network::NetworkWeights;
use lhm::render::{render, Camera, Image};
use lhm::skinning::{build_skin_field, pose_set};
use lhm::train::{
    evaluate, evaluate_avatar, fit, head_rect, make_synthetic_scene, parse_anchors, predict_avatar,
    AdamState, Checkpoint, SyntheticScene, TrainContext, TrainError,
};
use lhm::verify::{run_suite, SUITES};

#[derive(Parser)]
#[command(name = "lhm", version, about = "Animatable Gaussian avatars from a single image")]
struct Cli {
    /// Configuration file (`key = value` lines under [scene], [network], [train], [loss]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one entry, e.g. `--set train.lr=1e-4`. Repeatable; applied after --config.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Print the merged configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    cmd: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a self-rendered synthetic scene directory.
    MakeData(MakeData),
    /// Fit the network on a scene.
    Train(Train),
    /// One inference pass from an image to an `.lha` avatar.
    Reconstruct(Reconstruct),
    /// Render an avatar along a motion sequence.
    Animate(Animate),
    /// Render an avatar in its canonical pose.
    Render(RenderCmd),
    /// Finite-difference gradient checks.
    Gradcheck(Gradcheck),
    /// PSNR/SSIM on held-out views.
    Eval(Eval),
}

#[derive(Args)]
struct MakeData {
    /// Body model (`.lbm`); the bundled template when omitted.
    #[arg(long)]
    body: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    gaussians: Option<usize>,
    /// Number of training views.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Loss log; defaults to the checkpoint path with a `.log` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint, appending to the log.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Args)]
struct Reconstruct {
    /// Source image (`.png` or `.raw`) at the network's body resolution.
    #[arg(long)]
    image: PathBuf,
    /// Head crop at the network's head resolution. Without it the crop is cut from the
    /// image around the projected head anchors, which needs --camera.
    #[arg(long)]
    head_crop: Option<PathBuf>,
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Pose of the subject in the image, used only for the head-crop fallback.
    #[arg(long)]
    pose: Option<PathBuf>,
    #[arg(long)]
    body: Option<PathBuf>,
    /// Anchor file (`x y z head|body` lines); sampled from the body with the scene seed when omitted.
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_avatar: PathBuf,
}

#[derive(Args)]
struct Animate {
    #[arg(long)]
    avatar: PathBuf,
    /// Text motion file: one frame per line, root translation then J axis-angles.
    #[arg(long)]
    motion: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    body: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write each frame as a lossless `.raw` float image.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct RenderCmd {
    #[arg(long)]
    avatar: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// `.png`, or `.raw` for float output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    /// One of ops, network, renderer, losses, end2end; all when omitted.
    #[arg(long)]
    suite: Option<String>,
    /// Corrupt the backward rule of the named tape op (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, required_unless_present = "gt")]
    checkpoint: Option<PathBuf>,
    /// Comma-separated view indices; the scene's holdout views when omitted.
    #[arg(long, value_delimiter = ',')]
    holdout: Option<Vec<usize>>,
    /// Score the scene's ground-truth avatar instead of a prediction.
    #[arg(long)]
    gt: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Network(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("LHM_THREADS").ok().and_then(|v| v.parse().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for s in &cli.sets {
        cfg.set_dotted(s).map_err(usage)?;
    }
    match &cli.cmd {
        Some(Command::MakeData(a)) => {
            if let Some(n) = a.gaussians {
                cfg.scene.gaussians = n;
            }
            if let Some(n) = a.views {
                cfg.scene.train_views = n;
            }
            if let Some(s) = a.seed {
                cfg.scene.seed = s;
            }
        }
        Some(Command::Train(a)) => {
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
        }
        _ => {}
    }
    cfg.scene.validate()?;
    cfg.network.validate().map_err(|e| usage(e.to_string()))?;
    cfg.train.validate()?;
    if cli.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let Some(cmd) = cli.cmd else {
        return Err(usage("no command given; see --help"));
    };
    match cmd {
        Command::MakeData(a) => make_data(&cfg, &a),
        Command::Train(a) => train(&cfg, &a),
        Command::Reconstruct(a) => reconstruct(&cfg, &a),
        Command::Animate(a) => animate(&a),
        Command::Render(a) => render_cmd(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn load_body(path: Option<&Path>) -> CliResult<BodyTemplate> {
    match path {
        Some(p) => {
            require(p, "body model")?;
            BodyTemplate::load(p).map_err(|e| runtime(format!("{}: {e}", p.display())))
        }
        None => Ok(BodyTemplate::bundled()),
    }
}

fn load_camera(path: &Path) -> CliResult<Camera> {
    require(path, "camera")?;
    let text = fs::read_to_string(path).map_err(runtime)?;
    let cam = Camera::from_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    cam.validate().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(cam)
}

/// `.raw` float images load exactly; anything else goes through the `image` crate as 8-bit RGB.
fn load_image(path: &Path) -> CliResult<Image> {
    require(path, "image")?;
    if path.extension().is_some_and(|e| e == "raw") {
        let bytes = fs::read(path).map_err(runtime)?;
        return Image::from_raw(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())));
    }
    let img = image::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Image { width: w as usize, height: h as usize, channels: 3, data })
}

fn save_image(img: &Image, path: &Path) -> CliResult<()> {
    if path.extension().is_some_and(|e| e == "raw") {
        fs::write(path, img.to_raw()).map_err(|e| runtime(format!("{}: {e}", path.display())))
    } else {
        img.save_png(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
    }
}

fn make_data(cfg: &RunConfig, a: &MakeData) -> CliResult<()> {
    let body = load_body(a.body.as_deref())?;
    let scene = make_synthetic_scene(&body, &cfg.scene)?;
    scene.save(&a.out).map_err(|e| runtime(format!("cannot write scene to {}: {e}", a.out.display())))?;
    println!(
        "wrote {} views ({} train, {} holdout) of {} gaussians to {}",
        scene.views.len(),
        scene.config.train_views,
        scene.config.holdout_views,
        scene.gt.len(),
        a.out.display()
    );
    Ok(())
}

fn load_scene(dir: &Path) -> CliResult<SyntheticScene> {
    require(&dir.join("scene.txt"), "scene")?;
    Ok(SyntheticScene::load(dir)?)
}

fn train(cfg: &RunConfig, a: &Train) -> CliResult<()> {
    let scene = load_scene(&a.scene)?;
    let (mut weights, mut state) = match &a.resume {
        Some(p) => {
            require(p, "checkpoint")?;
            let ck = Checkpoint::load(p)?;
            ck.weights.check_against(&cfg.network).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            (ck.weights, ck.state)
        }
        None => {
            let w = NetworkWeights::init(&cfg.network, cfg.train.init_seed).map_err(|e| usage(e.to_string()))?;
            let s = AdamState::new(&w.tensors);
            (w, s)
        }
    };
    let ctx = TrainContext::new(&scene, &cfg.network, &cfg.train)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out_checkpoint.with_extension("log"));
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| runtime(format!("{}: {e}", log_path.display())))?;
    let start = Instant::now();
    let mut last = None;
    fit(&ctx, &mut weights, &mut state, cfg.train.iterations, |step, out, _, _| {
        writeln!(log, "{}", out.log_line(step))?;
        if step % 50 == 0 {
            eprintln!("step {step} total {:.6} ({:.1}s)", out.report.total, start.elapsed().as_secs_f64());
        }
        last = Some(out.report);
        Ok(())
    })?;
    let ck = Checkpoint { config: cfg.to_text(), weights, state };
    ck.save(&a.out_checkpoint)?;
    match last {
        Some(r) => println!("{}", r.log_line(ck.state.step.saturating_sub(1) as usize)),
        None => println!("no steps run; checkpoint at step {}", ck.state.step),
    }
    Ok(())
}

fn reconstruct(cfg: &RunConfig, a: &Reconstruct) -> CliResult<()> {
    require(&a.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let run = RunConfig::from_text(&ck.config).map_err(|e| usage(format!("checkpoint config: {e}")))?;
    let net = &run.network;
    ck.weights.check_against(net).map_err(|e| usage(e.to_string()))?;
    let body = load_body(a.body.as_deref())?;
    let (anchors, regions) = match &a.anchors {
        Some(p) => {
            require(p, "anchors")?;
            parse_anchors(&fs::read_to_string(p).map_err(runtime)?)?
        }
        None => {
            let s = body
                .sample_surface_points(&body.vertices, cfg.scene.gaussians, cfg.scene.seed)
                .map_err(|e| usage(e.to_string()))?;
            (s.positions, s.regions)
        }
    };
    let image = load_image(&a.image)?;
    if image.width != net.body_res || image.height != net.body_res || image.channels != 3 {
        return Err(usage(format!(
            "image is {}x{}x{}, the network expects {r}x{r}x3",
            image.width,
            image.height,
            image.channels,
            r = net.body_res
        )));
    }
    let field = build_skin_field(&body, &body.vertices, &run.scene.skin).map_err(usage)?;
    let crop = match (&a.head_crop, &a.camera) {
        (Some(p), _) => {
            let c = load_image(p)?;
            if c.width != net.head_res || c.height != net.head_res || c.channels != 3 {
                return Err(usage(format!(
                    "head crop is {}x{}x{}, the network expects {r}x{r}x3",
                    c.width,
                    c.height,
                    c.channels,
                    r = net.head_res
                )));
            }
            c
        }
        (None, Some(cam_path)) => {
            let cam = load_camera(cam_path)?;
            let pose = match &a.pose {
                Some(p) => {
                    require(p, "pose")?;
                    let text = fs::read_to_string(p).map_err(runtime)?;
                    Pose::from_line(text.trim()).map_err(|e| usage(format!("{}: {e}", p.display())))?
                }
                None => Pose::identity(body.num_joints()),
            };
            let head: Vec<[f64; 3]> =
                anchors.iter().zip(&regions).filter(|(_, &r)| r == Region::Head).map(|(p, _)| *p).collect();
            let posed = pose_points(&body, &field, &head, &pose)?;
            image.crop_resize(head_rect(&cam, &posed), net.head_res, net.head_res)
        }
        (None, None) => return Err(usage("without --head-crop the fallback crop needs --camera")),
    };
    let start = Instant::now();
    let g = predict_avatar(net, &ck.weights, &image, &crop, &anchors, &regions)?;
    let at = if run.train.anchor_skinning { &anchors } else { &g.positions };
    let w = NdArray::new(vec![g.len(), field.joints], field.query(at)).map_err(runtime)?;
    let elapsed = start.elapsed();
    let skin = AvatarSkinning { weights: Some((w, (0..field.joints as u32).collect())), field: None };
    write_avatar(&a.out_avatar, &g, &skin).map_err(|e| runtime(format!("{}: {e}", a.out_avatar.display())))?;
    println!("reconstructed {} gaussians in {:.3}s -> {}", g.len(), elapsed.as_secs_f64(), a.out_avatar.display());
    Ok(())
}

fn pose_points(body: &BodyTemplate, field: &lhm::skinning::SkinField, pts: &[[f64; 3]], pose: &Pose) -> CliResult<Vec<[f64; 3]>> {
    let n = pts.len();
    let g = GaussianSet {
        positions: pts.to_vec(),
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; n],
        scales: vec![[0.01; 3]; n],
        opacities: vec![1.0; n],
        sh: vec![0.0; n * 3],
        sh_degree: 0,
    };
    let w = NdArray::new(vec![n, field.joints], field.query(pts)).map_err(runtime)?;
    let transforms = body.forward_kinematics(pose).map_err(|e| usage(e.to_string()))?;
    Ok(pose_set(&g, &w, &transforms).map_err(runtime)?.positions)
}

/// Per-Gaussian weights of an avatar, from its stored rows or its skin field.
fn avatar_weights(g: &GaussianSet, skin: &AvatarSkinning) -> CliResult<NdArray> {
    if let Some((w, _)) = &skin.weights {
        return Ok(w.clone());
    }
    match &skin.field {
        Some(f) => NdArray::new(vec![g.len(), f.joints], f.query(&g.positions)).map_err(runtime),
        None => Err(usage("avatar carries no skinning data")),
    }
}

fn load_avatar(path: &Path) -> CliResult<(GaussianSet, AvatarSkinning)> {
    require(path, "avatar")?;
    read_avatar(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn animate(a: &Animate) -> CliResult<()> {
    let (g, skin) = load_avatar(&a.avatar)?;
    require(&a.motion, "motion")?;
    let cam = load_camera(&a.camera)?;
    let body = load_body(a.body.as_deref())?;
    let frames = parse_motion(&fs::read_to_string(&a.motion).map_err(runtime)?)
        .map_err(|e| usage(format!("{}: {e}", a.motion.display())))?;
    let w = avatar_weights(&g, &skin)?;
    let j = w.cols();
    let jm = frames[0].axis_angle.len();
    if jm != j {
        return Err(usage(format!("motion has {jm} joints but the avatar is skinned to {j}")));
    }
    if body.num_joints() != j {
        return Err(usage(format!("body model has {} joints but the avatar is skinned to {j}", body.num_joints())));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| runtime(format!("{}: {e}", a.out_dir.display())))?;
    let start = Instant::now();
    for (i, pose) in frames.iter().enumerate() {
        let transforms = body.forward_kinematics(pose).map_err(|e| usage(e.to_string()))?;
        let posed = pose_set(&g, &w, &transforms).map_err(runtime)?;
        let (rgb, _) = render(&posed, &cam, &[0.0; 3]).map_err(runtime)?;
        save_image(&rgb, &a.out_dir.join(format!("frame_{i:04}.png")))?;
        if a.raw {
            save_image(&rgb, &a.out_dir.join(format!("frame_{i:04}.raw")))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    println!("rendered {} frames in {secs:.3}s ({:.2} fps)", frames.len(), frames.len() as f64 / secs.max(1e-9));
    Ok(())
}

fn render_cmd(a: &RenderCmd) -> CliResult<()> {
    let (g, _) = load_avatar(&a.avatar)?;
    let cam = load_camera(&a.camera)?;
    let (rgb, _) = render(&g, &cam, &[0.0; 3]).map_err(runtime)?;
    save_image(&rgb, &a.out)
}

fn gradcheck(a: &Gradcheck) -> CliResult<()> {
    let suites: Vec<&str> = match &a.suite {
        Some(s) if SUITES.contains(&s.as_str()) => vec![s.as_str()],
        Some(s) => return Err(usage(format!("unknown suite `{s}`, expected one of {}", SUITES.join(", ")))),
        None => SUITES.to_vec(),
    };
    set_gradient_fault(a.inject_fault.as_deref());
    let mut failed = Vec::new();
    for name in suites {
        let start = Instant::now();
        let rows = run_suite(name).map_err(usage)?;
        for r in &rows {
            println!("{}", r.line());
            if !r.passed() {
                failed.push(format!("{}/{}", r.suite, r.component));
            }
        }
        println!("suite {name}: {:.2}s", start.elapsed().as_secs_f64());
    }
    set_gradient_fault(None);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn eval(a: &Eval) -> CliResult<()> {
    let scene = load_scene(&a.scene)?;
    let views = a.holdout.clone().unwrap_or_else(|| scene.holdout_views().collect());
    if views.is_empty() {
        return Err(usage("no holdout views to evaluate"));
    }
    for &v in &views {
        if v >= scene.views.len() {
            return Err(usage(format!("scene has {} views, no view {v}", scene.views.len())));
        }
        if scene.train_views().contains(&v) {
            return Err(usage(format!("view {v} is a training view and cannot be held out")));
        }
    }
    let report = if a.gt {
        evaluate_avatar(&scene, &scene.gt, &scene.gt_weights, &views)?
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires --checkpoint without --gt");
        require(path, "checkpoint")?;
        let ck = Checkpoint::load(path)?;
        let run = RunConfig::from_text(&ck.config).map_err(|e| usage(format!("checkpoint config: {e}")))?;
        ck.weights.check_against(&run.network).map_err(|e| usage(e.to_string()))?;
        let ctx = TrainContext::new(&scene, &run.network, &run.train)?;
        evaluate(&ctx, &ck.weights, &views)?
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, &text).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

