//! Command-line front end: dataset synthesis, the fitting stages, rendering,
//! evaluation, ablations and benchmarks. Every run leaves a manifest in
//! `--out` recording the full flag set.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use vasplat::geometry::{CameraModel, PoseMode, PoseW2C};
use vasplat::io::{self, Checkpoint, IoError};
use vasplat::model::Model;
use vasplat::objectives::{self, LossConfig, PerceptualKind};
use vasplat::synth::{self, CameraRig, Dataset, RigSpec, RigView, SceneSpec, Split};
use vasplat::train::{self, AblationRow, BaseCache, Frame, PoseObjective, TrainConfig, TrainError, TrainOutcome, Variant};
use vasplat::view_adapt::{ColorOffsetMode, HyperInit, OffsetComponents};

pub const MANIFEST_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Model(#[from] vasplat::model::ModelError),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Invalid(m) => Self::Validation(m),
            other => Self::Train(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Diverged(_) => EXIT_DIVERGED,
            _ => EXIT_VALIDATION,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser, Serialize)]
#[command(name = "vasplat", version, about = "View-adaptive Gaussian splatting experiments")]
pub struct Cli {
    /// Seed for scene generation, camera rigs and training.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Fit the static base scene.
    FitStatic(FitStaticArgs),
    /// Fit the view-adaptive head on a frozen base.
    FitView(FitViewArgs),
    /// Fine-tune base and head together at reduced learning rates.
    FitJoint(FitJointArgs),
    /// Recover perturbed camera poses against a frozen lifted scene.
    RecoverPoses(RecoverArgs),
    /// Render a checkpoint at the cameras of a cameras.json.
    Render(RenderArgs),
    /// Metrics CSV of a checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Run the ablation matrix.
    Ablate(AblateArgs),
    /// Time weight generation and per-frame refine+render.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Desk,
    Lambertian,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ColorModeArg {
    AllBands,
    DcOnly,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    ZeroOutput,
    FullZero,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SceneKind::Desk)]
    pub scene: SceneKind,
    /// Surfels per surface.
    #[arg(long, default_value_t = 150)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 48)]
    pub train_views: usize,
    #[arg(long, default_value_t = 24)]
    pub test_views: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 48)]
    pub size: u32,
    #[arg(long)]
    pub specular_strength: Option<f64>,
    #[arg(long)]
    pub specular_exponent: Option<f64>,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Views per step; 0 uses every training view.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 4)]
    pub sh_degree: usize,
    /// Learning rate of the view-adaptive head.
    #[arg(long, default_value_t = 3e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr_finetune_scale: f64,
    #[arg(long, default_value_t = 16)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub gen_hidden: usize,
    #[arg(long, value_enum, default_value_t = ColorModeArg::AllBands)]
    pub color_mode: ColorModeArg,
    #[arg(long, value_enum, default_value_t = InitArg::ZeroOutput)]
    pub init: InitArg,
    #[arg(long, default_value_t = objectives::DEFAULT_LAMBDA_PERCEPTUAL)]
    pub lambda_perceptual: f64,
    #[arg(long, default_value_t = objectives::DEFAULT_LAMBDA_REPROJ)]
    pub lambda_reproj: f64,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct HeadArgs {
    /// Enabled offsets, comma separated (mu,alpha,rot,scale,sh | all | none).
    #[arg(long, default_value = "all", value_parser = parse_offsets)]
    pub offsets: OffsetComponents,
    #[arg(long, default_value = "log")]
    pub pose_param: PoseMode,
}

impl Default for HeadArgs {
    fn default() -> Self {
        Self {
            offsets: OffsetComponents::all(),
            pose_param: PoseMode::Log,
        }
    }
}

fn parse_offsets(s: &str) -> std::result::Result<OffsetComponents, String> {
    s.parse().map_err(|e: vasplat::view_adapt::ViewAdaptError| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct FitStaticArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Start from a splat PLY instead of the dataset's ground-truth surfels.
    #[arg(long)]
    pub init_ply: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitViewArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub head: HeadArgs,
    /// Static checkpoint from `fit-static`.
    #[arg(long)]
    pub base: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitJointArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub head: HeadArgs,
    /// View-adaptive checkpoint from `fit-view`.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RecoverArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of training views whose poses are recovered.
    #[arg(long, default_value_t = 3)]
    pub views: usize,
    /// Rotation perturbation in degrees.
    #[arg(long, default_value_t = 5.0)]
    pub rot_deg: f64,
    /// Translation perturbation as a fraction of the scene scale.
    #[arg(long, default_value_t = 0.05)]
    pub trans_frac: f64,
    /// Pixel stride of the lifted scene.
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long, default_value_t = 400)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub render_weight: f64,
    #[arg(long)]
    pub no_reprojection: bool,
    #[arg(long, default_value_t = 0.01)]
    pub lambda_reproj: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda_perceptual: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub lr_start: f64,
    #[arg(long, default_value_t = 2e-5)]
    pub lr_end: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    /// Bypass the view-adaptive head.
    #[arg(long)]
    pub static_only: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub static_only: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Steps of each static base fit.
    #[arg(long, default_value_t = 1000)]
    pub static_steps: usize,
    /// Reuse this static checkpoint as the base of its SH degree.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Offset-subset variant (repeatable), e.g. `mu+alpha` or `none`.
    /// `table` expands to the six component rows.
    #[arg(long = "offsets")]
    pub offset_variants: Vec<String>,
    /// Static vs dynamic rows for each SH degree.
    #[arg(long, num_args = 0.., value_delimiter = ',', default_missing_value = "0,2,4,8")]
    pub sh_degree_sweep: Option<Vec<usize>>,
    /// Distance encodings to compare (`log`, `linear` or both).
    #[arg(long = "pose-param", num_args = 0.., value_delimiter = ',', default_missing_value = "log,linear")]
    pub pose_sweep: Option<Vec<PoseMode>>,
    #[arg(long, num_args = 0.., value_delimiter = ',', default_missing_value = "4,8,16")]
    pub hidden_dim_sweep: Option<Vec<usize>>,
    /// Scene label written to the CSV.
    #[arg(long, default_value = "desk")]
    pub scene_name: String,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Checkpoints to time (repeatable).
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    tool_version: &'static str,
    checkpoint_version: u32,
    command: &'a str,
    argv: Vec<String>,
    cli: &'a Cli,
    status: &'a str,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::FitStatic(_) => "fit-static",
        Command::FitView(_) => "fit-view",
        Command::FitJoint(_) => "fit-joint",
        Command::RecoverPoses(_) => "recover-poses",
        Command::Render(_) => "render",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
        Command::Bench(_) => "bench",
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.deterministic {
        // the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let result = dispatch(&cli);
    let status = match &result {
        Ok(()) => "ok",
        Err(CliError::Diverged(_)) => "diverged",
        Err(_) => "error",
    };
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        checkpoint_version: io::CHECKPOINT_VERSION,
        command: command_name(&cli.command),
        // the output directory is where the manifest lives, not part of the run
        argv: strip_out(&argv),
        cli: &cli,
        status,
    };
    let manifest_result = serde_json::to_string_pretty(&manifest)
        .map_err(IoError::from)
        .and_then(|m| io::write_atomic(&cli.out.join("manifest.json"), m.as_bytes()));
    match (result, manifest_result) {
        (Ok(()), Ok(())) => EXIT_OK,
        (Err(e), _) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        (Ok(()), Err(e)) => {
            eprintln!("error: {e}");
            EXIT_VALIDATION
        }
    }
}

fn strip_out(argv: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv.iter().skip(1) {
        let s = a.to_string_lossy().into_owned();
        if skip {
            skip = false;
            continue;
        }
        if s == "--out" {
            skip = true;
            continue;
        }
        if s.starts_with("--out=") {
            continue;
        }
        out.push(s);
    }
    out
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::FitStatic(a) => cmd_fit_static(cli, a),
        Command::FitView(a) => cmd_fit_view(cli, a),
        Command::FitJoint(a) => cmd_fit_joint(cli, a),
        Command::RecoverPoses(a) => cmd_recover(cli, a),
        Command::Render(a) => cmd_render(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Ablate(a) => cmd_ablate(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
    }
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

// ---------------------------------------------------------------- synth

pub fn scene_spec(kind: SceneKind, seed: u64, a: &SynthArgs) -> SceneSpec {
    let mut spec = match kind {
        SceneKind::Desk => SceneSpec::desk(seed),
        SceneKind::Lambertian => SceneSpec::lambertian(seed),
    };
    spec.gaussian_count = a.gaussians;
    if let Some(s) = a.specular_strength {
        spec.specular.strength = s;
    }
    if let Some(e) = a.specular_exponent {
        spec.specular.exponent = e;
    }
    spec
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    if a.size == 0 || a.train_views < 2 || a.test_views == 0 {
        return Err(validation("--size must be ≥ 1, --train-views ≥ 2 and --test-views ≥ 1"));
    }
    let spec = scene_spec(a.scene, cli.seed, a);
    let rig = RigSpec::desk(a.train_views, a.test_views, a.size, cli.seed);
    let (ds, _) = Dataset::generate(&spec, &rig)?;
    io::write_dataset(&cli.out, &ds)?;
    println!("wrote {} views to {}", ds.images.len(), cli.out.display());
    Ok(())
}

// ---------------------------------------------------------------- fitting

fn frames(ds: &Dataset, split: Split) -> Vec<Frame<'_>> {
    ds.indices(split)
        .into_iter()
        .map(|i| Frame {
            pose: &ds.rig.views[i].pose,
            cam: &ds.rig.views[i].cam,
            image: &ds.images[i],
        })
        .collect()
}

pub fn train_config(a: &TrainArgs, h: &HeadArgs, seed: u64, default_steps: usize) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        lr: a.lr,
        lr_finetune_scale: a.lr_finetune_scale,
        steps: a.steps.unwrap_or(default_steps),
        batch: (a.batch > 0).then_some(a.batch),
        enabled_offsets: h.offsets,
        pose_mode: h.pose_param,
        color_mode: match a.color_mode {
            ColorModeArg::AllBands => ColorOffsetMode::AllBands,
            ColorModeArg::DcOnly => ColorOffsetMode::DcOnly,
        },
        hyper_init: match a.init {
            InitArg::ZeroOutput => HyperInit::ZeroOutput,
            InitArg::FullZero => HyperInit::FullZero,
        },
        hidden_dim: a.hidden_dim,
        feature_dim: a.feature_dim,
        gen_hidden: a.gen_hidden,
        sh_degree: a.sh_degree,
        seed,
        loss: LossConfig {
            lambda_perceptual: a.lambda_perceptual,
            lambda_reproj: a.lambda_reproj,
            perceptual_kind: if a.lambda_perceptual > 0.0 {
                PerceptualKind::SsimBased
            } else {
                PerceptualKind::None
            },
            ..Default::default()
        },
        ..Default::default()
    };
    if a.sh_degree > vasplat::splat::MAX_SH_DEGREE {
        return Err(validation(format!("--sh-degree must be ≤ {}", vasplat::splat::MAX_SH_DEGREE)));
    }
    if a.hidden_dim == 0 || a.feature_dim == 0 || a.gen_hidden == 0 {
        return Err(validation("--hidden-dim, --feature-dim and --gen-hidden must be ≥ 1"));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Write the fit artefacts; on divergence the best state is written and the
/// run reports exit code 2.
fn finish_fit(cli: &Cli, ds: &Dataset, result: std::result::Result<TrainOutcome, TrainError>) -> Result<()> {
    let (model, history, diverged) = match result {
        Ok(o) => (o.model, o.history, None),
        Err(TrainError::Diverged { step, reason, best, .. }) => (*best, Vec::new(), Some(format!("step {step}: {reason}"))),
        Err(e) => return Err(e.into()),
    };
    io::write_checkpoint(
        &cli.out.join("model.ckpt"),
        &Checkpoint {
            model: model.clone(),
            seed: cli.seed,
            optimizer: None,
        },
    )?;
    io::write_ply(&cli.out.join("scene.ply"), &model.scene)?;
    if !history.is_empty() {
        let mut csv = String::from("step,loss,psnr\n");
        for h in &history {
            csv.push_str(&format!("{},{:.10e},{:.6}\n", h.step, h.loss, h.psnr));
        }
        io::write_atomic(&cli.out.join("history.csv"), csv.as_bytes())?;
    }
    let test = frames(ds, Split::Test);
    if !test.is_empty() {
        let rows = eval_rows(&model, &test, false)?;
        io::write_atomic(&cli.out.join("metrics.csv"), rows.as_bytes())?;
        let m = train::evaluate(&model, &test, ds.spec.background)?;
        println!("test psnr {:.4} ssim {:.4} mse {:.6e}", m.psnr, m.ssim, m.mse);
    }
    match diverged {
        Some(msg) => Err(CliError::Diverged(format!("training diverged at {msg}; best state written"))),
        None => Ok(()),
    }
}

fn cmd_fit_static(cli: &Cli, a: &FitStaticArgs) -> Result<()> {
    let ds = io::read_dataset(&a.train.data)?;
    let cfg = train_config(&a.train, &HeadArgs::default(), cli.seed, 1000)?;
    let init = match &a.init_ply {
        Some(p) => io::read_ply(p, Some(cfg.sh_degree))?,
        None => synth::init_scene(&synth::make_scene(&ds.spec)?, cfg.sh_degree),
    };
    let cfg = TrainConfig {
        background: ds.spec.background,
        ..cfg
    };
    let tr = frames(&ds, Split::Train);
    let result = train::fit_static(&init, &tr, &cfg);
    finish_fit(cli, &ds, result)
}

fn cmd_fit_view(cli: &Cli, a: &FitViewArgs) -> Result<()> {
    let ds = io::read_dataset(&a.train.data)?;
    let cfg = TrainConfig {
        background: ds.spec.background,
        ..train_config(&a.train, &a.head, cli.seed, 1000)?
    };
    let base = io::read_checkpoint(&a.base, Some(cfg.sh_degree))?;
    let tr = frames(&ds, Split::Train);
    let result = train::fit_view(&base.model.scene, &tr, &cfg);
    finish_fit(cli, &ds, result)
}

fn cmd_fit_joint(cli: &Cli, a: &FitJointArgs) -> Result<()> {
    let ds = io::read_dataset(&a.train.data)?;
    let cfg = TrainConfig {
        background: ds.spec.background,
        ..train_config(&a.train, &a.head, cli.seed, 200)?
    };
    let ck = io::read_checkpoint(&a.model, Some(cfg.sh_degree))?;
    if ck.model.hyper.is_none() {
        return Err(validation(format!("{} has no view-adaptive head", a.model.display())));
    }
    let tr = frames(&ds, Split::Train);
    let result = train::fit_joint(&ck.model, &tr, &cfg);
    finish_fit(cli, &ds, result)
}

// ---------------------------------------------------------------- poses

/// Bounding-box diagonal of the ground-truth surfels.
pub fn scene_scale(gt: &synth::GtScene) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in &gt.surfels {
        for k in 0..3 {
            lo[k] = lo[k].min(s.position[k]);
            hi[k] = hi[k].max(s.position[k]);
        }
    }
    (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct PoseErrorRow {
    pub view: usize,
    pub initial_rot_deg: f64,
    pub initial_trans: f64,
    pub rot_deg: f64,
    pub trans: f64,
}

fn trans_err(a: &PoseW2C, b: &PoseW2C) -> f64 {
    (0..3).map(|k| (a.translation()[k] - b.translation()[k]).powi(2)).sum::<f64>().sqrt()
}

fn cmd_recover(cli: &Cli, a: &RecoverArgs) -> Result<()> {
    let ds = io::read_dataset(&a.data)?;
    let gt = synth::make_scene(&ds.spec)?;
    let train_idx = ds.indices(Split::Train);
    if a.views == 0 || a.views > train_idx.len() {
        return Err(validation(format!("--views must be in 1..={}", train_idx.len())));
    }
    if !(a.rot_deg >= 0.0) || !(a.trans_frac >= 0.0) || a.stride == 0 {
        return Err(validation("perturbations must be ≥ 0 and --stride ≥ 1"));
    }
    let chosen: Vec<usize> = train_idx.into_iter().take(a.views).collect();
    let views: Vec<(PoseW2C, CameraModel)> = chosen.iter().map(|&i| (ds.rig.views[i].pose, ds.rig.views[i].cam)).collect();
    let (scene, images) = synth::pose_problem(&gt, &views, a.stride, 1.5, ds.spec.background)?;
    let model = Model::static_only(scene);
    let trans = a.trans_frac * scene_scale(&gt);
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed ^ 0x706f_7365);
    let starts: Vec<PoseW2C> = views
        .iter()
        .map(|(p, _)| synth::perturb_pose(p, a.rot_deg, trans, &mut rng))
        .collect::<std::result::Result<_, _>>()?;
    let fr: Vec<Frame<'_>> = starts
        .iter()
        .zip(&views)
        .zip(&images)
        .map(|((p, (_, c)), img)| Frame {
            pose: p,
            cam: c,
            image: img,
        })
        .collect();
    let cfg = TrainConfig {
        steps: a.steps,
        pose_lr: [a.lr_start, a.lr_end],
        seed: cli.seed,
        background: ds.spec.background,
        loss: LossConfig {
            lambda_reproj: a.lambda_reproj,
            lambda_perceptual: a.lambda_perceptual,
            perceptual_kind: if a.lambda_perceptual > 0.0 {
                PerceptualKind::SsimBased
            } else {
                PerceptualKind::None
            },
            ..Default::default()
        },
        ..Default::default()
    };
    let obj = PoseObjective {
        render_weight: a.render_weight,
        reprojection: !a.no_reprojection,
    };
    let (poses, diverged) = match train::recover_poses(&model, &fr, &cfg, &obj) {
        Ok(o) => (o.poses.unwrap_or_default(), None),
        Err(TrainError::Diverged { step, reason, best_poses, .. }) => {
            (best_poses.unwrap_or_default(), Some(format!("step {step}: {reason}")))
        }
        Err(e) => return Err(e.into()),
    };
    let mut rig = CameraRig { views: Vec::new() };
    let mut csv = String::from("view,initial_rot_deg,initial_trans,rot_deg,trans\n");
    let mut worst = (0.0f64, 0.0f64);
    for (j, p) in poses.iter().enumerate() {
        let rec = p.to_pose().map_err(|e| CliError::Validation(e.to_string()))?;
        let g = &views[j].0;
        let row = PoseErrorRow {
            view: chosen[j],
            initial_rot_deg: g.rotation_error_deg(&starts[j]),
            initial_trans: trans_err(g, &starts[j]),
            rot_deg: g.rotation_error_deg(&rec),
            trans: trans_err(g, &rec),
        };
        worst = (worst.0.max(row.rot_deg), worst.1.max(row.trans));
        csv.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e}\n",
            row.view, row.initial_rot_deg, row.initial_trans, row.rot_deg, row.trans
        ));
        rig.views.push(RigView {
            pose: rec,
            cam: views[j].1,
            split: Split::Train,
        });
    }
    io::write_atomic(&cli.out.join("pose_errors.csv"), csv.as_bytes())?;
    io::write_atomic(&cli.out.join("cameras.json"), io::cameras_to_json(&rig).as_bytes())?;
    println!("max rotation error {:.3e} deg, max translation error {:.3e}", worst.0, worst.1);
    match diverged {
        Some(m) => Err(CliError::Diverged(format!("pose recovery diverged at {m}"))),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------- render / eval

fn static_view(model: &Model, static_only: bool) -> Model {
    if static_only {
        Model::static_only(model.scene.clone())
    } else {
        model.clone()
    }
}

fn cmd_render(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let ck = io::read_checkpoint(&a.model, None)?;
    let rig = io::cameras_from_json(&String::from_utf8_lossy(&io::read_bytes(&a.cameras)?))?;
    let model = static_view(&ck.model, a.static_only);
    let weights = model.generate();
    let dir = cli.out.join("images");
    let mut clamped = 0;
    for (i, v) in rig.views.iter().enumerate() {
        let img = model.render_with(weights.as_ref(), &v.pose, &v.cam, [0.0; 3])?.image;
        let (png, c) = io::png_to_bytes(&img)?;
        clamped += c;
        io::write_atomic(&dir.join(format!("{}.png", io::image_stem(i))), &png)?;
        io::write_atomic(&dir.join(format!("{}.fimg", io::image_stem(i))), &io::float_image_to_bytes(&img))?;
    }
    if clamped > 0 {
        eprintln!("warning: {clamped} samples outside [0,1] were clamped in the PNG output");
    }
    println!("rendered {} views", rig.views.len());
    Ok(())
}

fn variant_label(model: &Model) -> String {
    if model.is_adaptive() {
        "view_adaptive".into()
    } else {
        "static".into()
    }
}

/// Per-view rows plus a mean row over `frames`.
fn eval_rows(model: &Model, frames: &[Frame<'_>], _static_only: bool) -> Result<String> {
    let weights = model.generate();
    let mut csv = String::from("view,psnr,ssim,mse\n");
    let mut all = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let img = model.render_with(weights.as_ref(), f.pose, f.cam, [0.0; 3])?.image;
        let m = objectives::metrics(&img, f.image).map_err(|e| validation(e.to_string()))?;
        csv.push_str(&format!("{i},{:.10},{:.10},{:.10e}\n", m.psnr, m.ssim, m.mse));
        all.push(m);
    }
    let m = objectives::mean_metrics(&all);
    csv.push_str(&format!("mean,{:.10},{:.10},{:.10e}\n", m.psnr, m.ssim, m.mse));
    Ok(csv)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ck = io::read_checkpoint(&a.model, None)?;
    let ds = io::read_dataset(&a.data)?;
    let model = static_view(&ck.model, a.static_only);
    let split: Split = a.split.into();
    let fr = frames(&ds, split);
    if fr.is_empty() {
        return Err(validation("the requested split is empty"));
    }
    let m = train::evaluate(&model, &fr, ds.spec.background)?;
    let fps = if cli.deterministic {
        0.0
    } else {
        train::render_fps(&model, &fr, ds.spec.background)?
    };
    let h = model.hyper.as_ref();
    let row = AblationRow {
        scene: "dataset".into(),
        variant: variant_label(&model),
        sh_degree: model.scene.sh_degree(),
        hidden_dim: h.map_or(0, |h| h.config.view_hidden),
        pose_mode: model.refine.pose_mode,
        offsets: model.is_adaptive().then_some(model.refine.enabled),
        split: match split {
            Split::Train => "train".into(),
            Split::Test => "test".into(),
        },
        psnr: m.psnr,
        ssim: m.ssim,
        mse: m.mse,
        fit_seconds: 0.0,
        render_fps: fps,
        status: "ok".into(),
    };
    io::write_atomic(&cli.out.join("metrics.csv"), train::rows_to_csv(&[row]).as_bytes())?;
    io::write_atomic(&cli.out.join("per_view.csv"), eval_rows(&model, &fr, a.static_only)?.as_bytes())?;
    println!("{} psnr {:.4} ssim {:.4} mse {:.6e}", match a.split {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
    }, m.psnr, m.ssim, m.mse);
    Ok(())
}

// ---------------------------------------------------------------- ablate

pub fn ablation_variants(a: &AblateArgs, cfg: &TrainConfig) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for v in &a.offset_variants {
        if v == "table" {
            out.extend(Variant::offset_rows(cfg));
        } else {
            let c = parse_offsets(&v.replace('+', ",")).map_err(validation)?;
            out.push(if c.any() {
                Variant::adaptive(&format!("offsets_{}", c.to_string().replace(',', "+")), c, cfg)
            } else {
                Variant {
                    offsets: None,
                    ..Variant::adaptive("baseline", c, cfg)
                }
            });
        }
    }
    if let Some(d) = &a.sh_degree_sweep {
        if let Some(bad) = d.iter().find(|&&d| d > vasplat::splat::MAX_SH_DEGREE) {
            return Err(validation(format!("--sh-degree-sweep: degree {bad} exceeds {}", vasplat::splat::MAX_SH_DEGREE)));
        }
        out.extend(Variant::sh_sweep(d, cfg));
    }
    if let Some(modes) = &a.pose_sweep {
        let mut v = Variant::pose_modes(cfg);
        v.retain(|x| modes.contains(&x.pose_mode));
        out.extend(v);
    }
    if let Some(dims) = &a.hidden_dim_sweep {
        if dims.contains(&0) {
            return Err(validation("--hidden-dim-sweep values must be ≥ 1"));
        }
        out.extend(Variant::hidden_dims(dims, cfg));
    }
    if out.is_empty() {
        out.extend(Variant::offset_rows(cfg));
    }
    Ok(out)
}

/// Variants with equal keys are fitted once and share results.
#[derive(Debug, Clone, Copy, PartialEq)]
struct VariantKey {
    offsets: Option<OffsetComponents>,
    sh_degree: usize,
    hidden_dim: usize,
    pose_mode: PoseMode,
}

impl VariantKey {
    fn of(v: &Variant) -> Self {
        // static rows ignore the head settings
        match v.offsets {
            None => Self {
                offsets: None,
                sh_degree: v.sh_degree,
                hidden_dim: 0,
                pose_mode: PoseMode::Log,
            },
            Some(_) => Self {
                offsets: v.offsets,
                sh_degree: v.sh_degree,
                hidden_dim: v.hidden_dim,
                pose_mode: v.pose_mode,
            },
        }
    }
}

fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let ds = io::read_dataset(&a.train.data)?;
    let cfg = TrainConfig {
        background: ds.spec.background,
        ..train_config(&a.train, &HeadArgs::default(), cli.seed, 1000)?
    };
    let static_cfg = TrainConfig {
        steps: a.static_steps,
        ..cfg
    };
    let variants = ablation_variants(a, &cfg)?;
    let gt = synth::make_scene(&ds.spec)?;
    let max_degree = variants.iter().map(|v| v.sh_degree).max().unwrap_or(cfg.sh_degree);
    let init = synth::init_scene(&gt, max_degree);
    let mut cache = BaseCache::new(&init);
    if let Some(p) = &a.base {
        let ck = io::read_checkpoint(p, None)?;
        cache.insert(ck.model.scene, 0.0);
    }
    let tr = frames(&ds, Split::Train);
    let te = frames(&ds, Split::Test);
    let mut rows: Vec<AblationRow> = Vec::with_capacity(variants.len());
    let mut fitted: Vec<(VariantKey, AblationRow, Model)> = Vec::new();
    let dir = cli.out.join("variants");
    for v in &variants {
        let start = Instant::now();
        let key = VariantKey::of(v);
        let (mut row, model) = match fitted.iter().find(|(k, ..)| *k == key) {
            Some((_, r, m)) => (r.clone(), m.clone()),
            None => {
                let (r, m) = train::ablation_row(&a.scene_name, &tr, &te, &mut cache, v, &static_cfg, &cfg)?;
                fitted.push((key, r.clone(), m.clone()));
                (r, m)
            }
        };
        row.variant = v.name.clone();
        if cli.deterministic {
            row.fit_seconds = 0.0;
            row.render_fps = 0.0;
        }
        println!(
            "{:<20} psnr {:.4} ssim {:.4} ({:.1}s) {}",
            row.variant,
            row.psnr,
            row.ssim,
            start.elapsed().as_secs_f64(),
            row.status
        );
        io::write_checkpoint(
            &dir.join(format!("{}.ckpt", row.variant)),
            &Checkpoint {
                model,
                seed: cli.seed,
                optimizer: None,
            },
        )?;
        rows.push(row);
        // keep partial results on disk while the matrix runs
        io::write_atomic(&cli.out.join("ablation.csv"), train::rows_to_csv(&rows).as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub model: String,
    pub hidden_dim: usize,
    pub gaussians: usize,
    pub frames: usize,
    pub weight_gen_ms: f64,
    pub frame_ms: f64,
    pub fps: f64,
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median weight-generation time and median per-frame refine+render time per
/// model. Repetitions run round-robin across models so drift affects all alike.
pub fn bench_models(models: &[Model], views: &[RigView], reps: usize, warmup: usize) -> Result<Vec<(f64, f64)>> {
    let mut gen = vec![Vec::with_capacity(reps); models.len()];
    let mut frame = vec![Vec::with_capacity(reps); models.len()];
    for rep in 0..warmup + reps {
        for (k, model) in models.iter().enumerate() {
            let t0 = Instant::now();
            let weights = model.generate();
            let t1 = Instant::now();
            for v in views {
                std::hint::black_box(model.render_with(weights.as_ref(), &v.pose, &v.cam, [0.0; 3])?);
            }
            let t2 = Instant::now();
            if rep >= warmup {
                gen[k].push((t1 - t0).as_secs_f64());
                frame[k].push((t2 - t1).as_secs_f64() / views.len().max(1) as f64);
            }
        }
    }
    Ok(gen.iter_mut().zip(frame.iter_mut()).map(|(g, f)| (median(g), median(f))).collect())
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    if a.reps < 20 || a.warmup < 3 {
        return Err(validation("--reps must be ≥ 20 and --warmup ≥ 3"));
    }
    let rig = io::cameras_from_json(&String::from_utf8_lossy(&io::read_bytes(&a.cameras)?))?;
    let views: Vec<RigView> = rig.split(Split::Test).copied().collect();
    let views = if views.is_empty() { rig.views.clone() } else { views };
    let models = a.model.iter().map(|p| Ok(io::read_checkpoint(p, None)?.model)).collect::<Result<Vec<_>>>()?;
    let timings = bench_models(&models, &views, a.reps, a.warmup)?;
    let mut rows = Vec::new();
    for ((path, model), (g, f)) in a.model.iter().zip(&models).zip(timings) {
        let row = BenchRow {
            model: path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
            hidden_dim: model.hyper.as_ref().map_or(0, |h| h.config.view_hidden),
            gaussians: model.scene.len(),
            frames: views.len(),
            weight_gen_ms: g * 1e3,
            frame_ms: f * 1e3,
            fps: 1.0 / f,
        };
        println!(
            "{:<20} D={:<3} weights {:.3} ms  frame {:.3} ms  ({:.1} fps)",
            row.model, row.hidden_dim, row.weight_gen_ms, row.frame_ms, row.fps
        );
        rows.push(row);
    }
    let mut csv = String::from("model,hidden_dim,gaussians,frames,weight_gen_ms,frame_ms,fps\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.3}\n",
            r.model, r.hidden_dim, r.gaussians, r.frames, r.weight_gen_ms, r.frame_ms, r.fps
        ));
    }
    io::write_atomic(&cli.out.join("bench.csv"), csv.as_bytes())?;
    Ok(())
}

/// Read an ablation CSV back into (variant, psnr) pairs.
pub fn read_ablation_psnr(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = String::from_utf8_lossy(&io::read_bytes(path)?).into_owned();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| validation(format!("missing column {name}")));
    let (vi, pi) = (col("variant")?, col("psnr")?);
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let psnr = f.get(pi).and_then(|s| s.parse().ok()).ok_or_else(|| validation(format!("bad row '{l}'")))?;
            Ok((f.get(vi).copied().unwrap_or_default().to_string(), psnr))
        })
        .collect()
}
