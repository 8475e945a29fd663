//! Optimisation loops: static base fit, view-adaptive head fit with the base
//! frozen, joint fine-tuning, pose recovery and the ablation matrix.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, PoseMode, PoseW2C};
use crate::gradients::{self, GradError, GradRequest, LeafGroup, Objective, ParamSet, View};
use crate::image::Image;
use crate::linalg::Vec3;
use crate::model::{Model, ModelError, PoseParams};
use crate::objectives::{self, LossConfig, Metrics};
use crate::splat::SplatScene;
use crate::view_adapt::{
    ColorAnchor, ColorOffsetMode, HyperInit, HyperNet, HyperNetConfig, OffsetComponents, OffsetSpace, RefineConfig,
    DEFAULT_FEATURE_DIM, DEFAULT_GEN_HIDDEN, DEFAULT_VIEW_HIDDEN,
};

/// Smoothed loss above this multiple of its best counts as blown up.
pub const DIVERGENCE_LOSS_FACTOR: f64 = 10.0;
/// Losses below this level never count as blown up.
pub const DIVERGENCE_LOSS_FLOOR: f64 = 1e-4;
/// Consecutive blown-up steps that count as divergence.
pub const DIVERGENCE_PATIENCE: usize = 5;

#[derive(Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        /// Best state seen before divergence.
        best: Box<Model>,
        best_poses: Option<Vec<PoseParams>>,
    },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl std::fmt::Debug for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TrainError({self})")
    }
}

/// Per-attribute learning rates of the static fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticRates {
    pub mu: f64,
    pub rot: f64,
    pub log_scale: f64,
    pub logit_opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

impl Default for StaticRates {
    fn default() -> Self {
        Self {
            mu: 2e-4,
            rot: 1e-3,
            log_scale: 5e-3,
            logit_opacity: 2.5e-2,
            sh_dc: 1e-2,
            sh_rest: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate of the view-adaptive head.
    pub lr: f64,
    pub lr_finetune_scale: f64,
    pub static_rates: StaticRates,
    /// Pose learning rate at the first and last step (exponential schedule).
    pub pose_lr: [f64; 2],
    pub steps: usize,
    /// Linear ramp of the head learning rate over the first steps.
    pub warmup_steps: usize,
    /// Views per step; `None` uses every training view.
    pub batch: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub freeze_base: bool,
    pub enabled_offsets: OffsetComponents,
    pub pose_mode: PoseMode,
    pub offset_space: OffsetSpace,
    pub color_anchor: ColorAnchor,
    pub color_mode: ColorOffsetMode,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub gen_hidden: usize,
    pub hyper_init: HyperInit,
    pub sh_degree: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub background: Vec3,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            lr_finetune_scale: 0.1,
            static_rates: StaticRates::default(),
            pose_lr: [2e-3, 2e-5],
            steps: 500,
            warmup_steps: 100,
            batch: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            freeze_base: true,
            enabled_offsets: OffsetComponents::all(),
            pose_mode: PoseMode::Log,
            offset_space: OffsetSpace::PreActivation,
            color_anchor: ColorAnchor::Refined,
            color_mode: ColorOffsetMode::AllBands,
            hidden_dim: DEFAULT_VIEW_HIDDEN,
            feature_dim: DEFAULT_FEATURE_DIM,
            gen_hidden: DEFAULT_GEN_HIDDEN,
            hyper_init: HyperInit::ZeroOutput,
            sh_degree: 4,
            seed: 0,
            loss: LossConfig::default(),
            background: [0.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || !(self.lr_finetune_scale > 0.0) {
            return Err(TrainError::Invalid("learning rates must be > 0".into()));
        }
        if self.batch == Some(0) {
            return Err(TrainError::Invalid("batch must be ≥ 1".into()));
        }
        if self.loss.lambda_perceptual < 0.0 || self.loss.lambda_reproj < 0.0 {
            return Err(TrainError::Invalid("loss weights must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn refine(&self) -> RefineConfig {
        RefineConfig {
            enabled: self.enabled_offsets,
            pose_mode: self.pose_mode,
            offset_space: self.offset_space,
            color_anchor: self.color_anchor,
        }
    }

    pub fn hyper_config(&self) -> HyperNetConfig {
        HyperNetConfig {
            feature_dim: self.feature_dim,
            gen_hidden: self.gen_hidden,
            view_hidden: self.hidden_dim,
            sh_degree: self.sh_degree,
            color_mode: self.color_mode,
            init: self.hyper_init,
        }
    }

    fn objective(&self) -> Objective {
        Objective {
            loss: self.loss,
            background: self.background,
            ..Default::default()
        }
    }
}

/// Adam with bias correction; state stored per leaf group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(like: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    /// One update; `lr(group, index)` gives the rate of every scalar.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: impl Fn(LeafGroup, usize) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (gi, (group, p)) in params.groups.iter_mut().enumerate() {
            let g = &grads.groups[gi].1;
            let m = &mut self.m.groups[gi].1;
            let v = &mut self.v.groups[gi].1;
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr(*group, k) * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Supervised views borrowed from a dataset.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub pose: &'a PoseW2C,
    pub cam: &'a CameraModel,
    pub image: &'a Image,
}

impl<'a> Frame<'a> {
    fn view(&self) -> View<'a> {
        View {
            pose: self.pose,
            cam: self.cam,
            gt: self.image,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub poses: Option<Vec<PoseParams>>,
    pub history: Vec<StepLog>,
    pub seconds: f64,
}

/// Mean metrics of `model` over `frames`.
pub fn evaluate(model: &Model, frames: &[Frame<'_>], background: Vec3) -> Result<Metrics, TrainError> {
    let weights = model.generate();
    let mut items = Vec::with_capacity(frames.len());
    for f in frames {
        let img = model.render_with(weights.as_ref(), f.pose, f.cam, background)?;
        items.push(objectives::metrics(&img.image, f.image).map_err(GradError::from)?);
    }
    Ok(objectives::mean_metrics(&items))
}

fn static_lr(rates: &StaticRates, sh_coeffs: usize) -> impl Fn(LeafGroup, usize) -> f64 + '_ {
    move |group, k| match group {
        LeafGroup::Mu => rates.mu,
        LeafGroup::Rot => rates.rot,
        LeafGroup::LogScale => rates.log_scale,
        LeafGroup::LogitOpacity => rates.logit_opacity,
        // coefficient-major within a Gaussian: first three scalars are the DC term
        LeafGroup::Sh => {
            if (k / 3) % sh_coeffs.max(1) == 0 {
                rates.sh_dc
            } else {
                rates.sh_rest
            }
        }
        _ => 0.0,
    }
}

struct LoopSpec<'s> {
    req: GradRequest,
    steps: usize,
    objective: Objective,
    lr: &'s dyn Fn(LeafGroup, usize, usize) -> f64,
}

/// Shared Adam loop. Tracks the best training state and stops on divergence.
fn run_loop(
    model: &mut Model,
    mut poses: Option<&mut Vec<PoseParams>>,
    frames: &[Frame<'_>],
    cfg: &TrainConfig,
    spec: &LoopSpec<'_>,
) -> Result<Vec<StepLog>, TrainError> {
    let n_frames = frames.len();
    let mut params = ParamSet::gather(model, poses.as_deref().map(|p| p.as_slice()), &spec.req);
    let mut adam = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e);
    let mut history = Vec::with_capacity(spec.steps);
    let mut best: Option<(f64, Model, Option<Vec<PoseParams>>)> = None;
    let mut best_loss = f64::INFINITY;
    let mut smoothed_loss = f64::NAN;
    let mut streak = 0usize;
    let smoothing = if cfg.batch.is_some_and(|b| b < n_frames) { 0.1 } else { 1.0 };
    for step in 0..spec.steps {
        let batch: Vec<usize> = match cfg.batch {
            Some(b) if b < n_frames => {
                let mut idx = sample(&mut rng, n_frames, b).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n_frames).collect(),
        };
        let views: Vec<View<'_>> = batch.iter().map(|&i| frames[i].view()).collect();
        let evaluated = (|| -> Result<_, GradError> {
            let pose_slice: Option<Vec<PoseParams>> =
                poses.as_deref().map(|p| batch.iter().map(|&i| p[i]).collect());
            let loss = gradients::forward(model, &views, pose_slice.as_deref(), &spec.objective, true)?;
            let psnr: Vec<f64> = loss
                .images
                .iter()
                .zip(&views)
                .map(|(img, v)| objectives::psnr_from_mse(objectives::mse(img, v.gt).unwrap_or(f64::NAN)))
                .collect();
            let mut grads = gradients::backward(&loss, &spec.req)?;
            // pose gradients come back per batch entry; widen to all frames
            if let (Some(all), true) = (poses.as_deref(), spec.req.poses) {
                widen_pose_grads(&mut grads, &batch, all.len());
            }
            Ok((loss.value, psnr, grads))
        })();
        // after the first step a raster failure means the optimiser produced a degenerate state
        let (value, frame_psnr, grads) = match evaluated {
            Ok(v) => v,
            Err(e) if step > 0 => {
                let (_, m, p) = best.unwrap_or_else(|| (f64::NAN, model.clone(), poses.as_deref().cloned()));
                return Err(TrainError::Diverged {
                    step,
                    reason: e.to_string(),
                    best: Box::new(m),
                    best_poses: p,
                });
            }
            Err(e) => return Err(e.into()),
        };
        let psnr = frame_psnr.iter().sum::<f64>() / frame_psnr.len().max(1) as f64;
        history.push(StepLog { step, loss: value, psnr });
        smoothed_loss = if smoothed_loss.is_nan() { value } else { smoothing * value + (1.0 - smoothing) * smoothed_loss };
        let blown = smoothed_loss > DIVERGENCE_LOSS_FACTOR * best_loss && smoothed_loss > DIVERGENCE_LOSS_FLOOR;
        streak = if blown { streak + 1 } else { 0 };
        let diverged = if !value.is_finite() || !grads.is_finite() {
            Some("non-finite loss or gradient".to_string())
        } else {
            (streak >= DIVERGENCE_PATIENCE).then(|| format!("loss {smoothed_loss:.3e} stayed above {DIVERGENCE_LOSS_FACTOR}x its best {best_loss:.3e}"))
        };
        if let Some(reason) = diverged {
            let (_, m, p) = best.unwrap_or_else(|| (f64::NAN, model.clone(), poses.as_deref().cloned()));
            return Err(TrainError::Diverged {
                step,
                reason,
                best: Box::new(m),
                best_poses: p,
            });
        }
        if smoothed_loss < best_loss {
            best_loss = smoothed_loss;
            best = Some((smoothed_loss, model.clone(), poses.as_deref().cloned()));
        }
        adam.step(&mut params, &grads, |g, k| (spec.lr)(g, k, step));
        params.scatter(model, poses.as_deref_mut().map(|p| p.as_mut_slice()));
    }
    Ok(history)
}

fn widen_pose_grads(grads: &mut ParamSet, batch: &[usize], total: usize) {
    for (group, width) in [(LeafGroup::PoseRot6d, 6), (LeafGroup::PoseTrans, 3)] {
        if let Some(g) = grads.get_mut(group) {
            let mut full = vec![0.0; total * width];
            for (j, &i) in batch.iter().enumerate() {
                full[i * width..(i + 1) * width].copy_from_slice(&g[j * width..(j + 1) * width]);
            }
            *g = full;
        }
    }
}

fn check_frames(frames: &[Frame<'_>], min: usize) -> Result<(), TrainError> {
    if frames.len() < min {
        return Err(TrainError::Invalid(format!("need at least {min} training views, got {}", frames.len())));
    }
    Ok(())
}

/// Fit the static base scene (Gaussian attributes only).
pub fn fit_static(init: &SplatScene, frames: &[Frame<'_>], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_frames(frames, 2)?;
    let start = Instant::now();
    let mut model = Model::static_only(init.clone().with_sh_degree(cfg.sh_degree));
    let k = model.scene.primitives.first().map_or(1, |g| g.sh.len());
    let lr = static_lr(&cfg.static_rates, k);
    let lr = move |g: LeafGroup, i: usize, _: usize| lr(g, i);
    let history = run_loop(
        &mut model,
        None,
        frames,
        cfg,
        &LoopSpec {
            req: GradRequest {
                gaussians: true,
                ..Default::default()
            },
            steps: cfg.steps,
            objective: cfg.objective(),
            lr: &lr,
        },
    )?;
    Ok(TrainOutcome {
        model,
        poses: None,
        history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn warmup(steps: usize, step: usize) -> f64 {
    if step >= steps {
        1.0
    } else {
        (step + 1) as f64 / (steps + 1) as f64
    }
}

/// Revert to `initial` unless training improved the mean training-view
/// PSNR. Head fits start at the static rendering, so a head that only adds
/// noise is dropped.
fn keep_if_better(model: &mut Model, initial: &Model, frames: &[Frame<'_>], cfg: &TrainConfig) -> Result<(), TrainError> {
    if model == initial {
        return Ok(());
    }
    let before = evaluate(initial, frames, cfg.background)?.psnr;
    let after = evaluate(model, frames, cfg.background)?.psnr;
    if !(after > before) {
        *model = initial.clone();
    }
    Ok(())
}

/// Fresh view-adaptive head for `base` under `cfg`.
pub fn new_head(base: &SplatScene, cfg: &TrainConfig) -> HyperNet {
    HyperNet::new(base.len(), cfg.hyper_config(), cfg.seed)
}

/// Fit the context features and generator with the base frozen.
pub fn fit_view(base: &SplatScene, frames: &[Frame<'_>], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    fit_view_from(base, new_head(base, cfg), frames, cfg)
}

/// As [`fit_view`] but starting from a given head.
pub fn fit_view_from(
    base: &SplatScene,
    head: HyperNet,
    frames: &[Frame<'_>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_frames(frames, 2)?;
    if base.sh_degree() != cfg.sh_degree || head.config.sh_degree != cfg.sh_degree {
        return Err(TrainError::Invalid(format!(
            "base degree {} / head degree {} differ from configured degree {}",
            base.sh_degree(),
            head.config.sh_degree,
            cfg.sh_degree
        )));
    }
    let start = Instant::now();
    let mut model = Model::with_hyper(base.clone(), head, cfg.refine()).map_err(ModelError::from)?;
    let initial = model.clone();
    let lr = |_: LeafGroup, _: usize, step: usize| cfg.lr * warmup(cfg.warmup_steps, step);
    let history = run_loop(
        &mut model,
        None,
        frames,
        cfg,
        &LoopSpec {
            req: GradRequest {
                hyper: true,
                ..Default::default()
            },
            steps: cfg.steps,
            objective: cfg.objective(),
            lr: &lr,
        },
    )?;
    keep_if_better(&mut model, &initial, frames, cfg)?;
    Ok(TrainOutcome {
        model,
        poses: None,
        history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Unfreeze the base and fine-tune everything at reduced rates.
pub fn fit_joint(model: &Model, frames: &[Frame<'_>], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_frames(frames, 2)?;
    if model.hyper.is_none() {
        return Err(TrainError::Invalid("joint fine-tuning needs a view-adaptive head".into()));
    }
    let start = Instant::now();
    let mut m = model.clone();
    let k = m.scene.primitives.first().map_or(1, |g| g.sh.len());
    let s = cfg.lr_finetune_scale;
    let stat = static_lr(&cfg.static_rates, k);
    let lr = move |g: LeafGroup, i: usize, step: usize| {
        let base = if LeafGroup::HYPER.contains(&g) { cfg.lr } else { stat(g, i) };
        base * s * warmup(cfg.warmup_steps, step)
    };
    let history = run_loop(
        &mut m,
        None,
        frames,
        cfg,
        &LoopSpec {
            req: GradRequest {
                gaussians: true,
                hyper: true,
                poses: false,
            },
            steps: cfg.steps,
            objective: cfg.objective(),
            lr: &lr,
        },
    )?;
    keep_if_better(&mut m, model, frames, cfg)?;
    Ok(TrainOutcome {
        model: m,
        poses: None,
        history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// How pose recovery weighs its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseObjective {
    pub render_weight: f64,
    pub reprojection: bool,
}

impl Default for PoseObjective {
    fn default() -> Self {
        Self {
            render_weight: 1.0,
            reprojection: true,
        }
    }
}

/// Optimise per-frame poses with the scene frozen. `frames[i].pose` is the
/// starting guess; the scene's provenance indexes into `frames`.
pub fn recover_poses(
    model: &Model,
    frames: &[Frame<'_>],
    cfg: &TrainConfig,
    obj: &PoseObjective,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_frames(frames, 1)?;
    let start = Instant::now();
    let mut m = model.clone();
    let mut poses: Vec<PoseParams> = frames.iter().map(|f| PoseParams::from_pose(f.pose)).collect();
    let steps = cfg.steps;
    let [lr0, lr1] = cfg.pose_lr;
    let lr = move |_: LeafGroup, _: usize, step: usize| {
        let frac = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 0.0 };
        lr0 * (lr1 / lr0).powf(frac)
    };
    let objective = Objective {
        render_weight: obj.render_weight,
        reprojection: obj.reprojection,
        ..cfg.objective()
    };
    let history = run_loop(
        &mut m,
        Some(&mut poses),
        frames,
        cfg,
        &LoopSpec {
            req: GradRequest {
                poses: true,
                ..Default::default()
            },
            steps,
            objective,
            lr: &lr,
        },
    )?;
    Ok(TrainOutcome {
        model: m,
        poses: Some(poses),
        history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One row of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// `None` evaluates the static base only.
    pub offsets: Option<OffsetComponents>,
    pub sh_degree: usize,
    pub hidden_dim: usize,
    pub pose_mode: PoseMode,
}

impl Variant {
    pub fn adaptive(name: &str, offsets: OffsetComponents, cfg: &TrainConfig) -> Self {
        Self {
            name: name.to_string(),
            offsets: Some(offsets),
            sh_degree: cfg.sh_degree,
            hidden_dim: cfg.hidden_dim,
            pose_mode: cfg.pose_mode,
        }
    }

    /// The six offset-subset rows.
    pub fn offset_rows(cfg: &TrainConfig) -> Vec<Self> {
        OffsetComponents::ablation_rows()
            .into_iter()
            .map(|(name, c)| {
                if c.any() {
                    Self::adaptive(name, c, cfg)
                } else {
                    Self {
                        offsets: None,
                        ..Self::adaptive(name, c, cfg)
                    }
                }
            })
            .collect()
    }

    /// Static and dynamic rows for each degree.
    /// Static rows at every swept degree plus one dynamic row at the
    /// configured degree.
    pub fn sh_sweep(degrees: &[usize], cfg: &TrainConfig) -> Vec<Self> {
        let mut rows: Vec<Self> = degrees
            .iter()
            .map(|&d| Self {
                name: format!("static_sh{d}"),
                offsets: None,
                sh_degree: d,
                hidden_dim: cfg.hidden_dim,
                pose_mode: cfg.pose_mode,
            })
            .collect();
        rows.push(Self {
            name: format!("dynamic_sh{}", cfg.sh_degree),
            offsets: Some(OffsetComponents::all()),
            sh_degree: cfg.sh_degree,
            hidden_dim: cfg.hidden_dim,
            pose_mode: cfg.pose_mode,
        });
        rows
    }

    pub fn pose_modes(cfg: &TrainConfig) -> Vec<Self> {
        [PoseMode::Log, PoseMode::Linear]
            .into_iter()
            .map(|m| Self {
                name: format!("pose_{m}"),
                pose_mode: m,
                ..Self::adaptive("", OffsetComponents::all(), cfg)
            })
            .collect()
    }

    pub fn hidden_dims(dims: &[usize], cfg: &TrainConfig) -> Vec<Self> {
        dims.iter()
            .map(|&d| Self {
                name: format!("hidden_{d}"),
                hidden_dim: d,
                ..Self::adaptive("", OffsetComponents::all(), cfg)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scene: String,
    pub variant: String,
    pub sh_degree: usize,
    pub hidden_dim: usize,
    pub pose_mode: PoseMode,
    pub offsets: Option<OffsetComponents>,
    pub split: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub fit_seconds: f64,
    pub render_fps: f64,
    /// `ok`, or `diverged@<step>` when the best pre-divergence state was scored.
    pub status: String,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "scene,variant,sh_degree,hidden_dim,pose_mode,offsets,split,psnr,ssim,mse,fit_seconds,render_fps,mu,alpha,rot,scale,sh,status";

    pub fn to_csv(&self) -> String {
        let c = self.offsets.unwrap_or(OffsetComponents::none());
        let b = |x: bool| if x { "1" } else { "0" };
        let offsets = c.to_string().replace(',', "+");
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.8},{:.3},{:.3},{},{},{},{},{},{}",
            self.scene,
            self.variant,
            self.sh_degree,
            self.hidden_dim,
            self.pose_mode,
            offsets,
            self.split,
            self.psnr,
            self.ssim,
            self.mse,
            self.fit_seconds,
            self.render_fps,
            b(c.mu),
            b(c.alpha),
            b(c.rot),
            b(c.scale),
            b(c.sh),
            self.status
        )
    }
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(AblationRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Fitted static bases keyed by SH degree, fitted lazily from one init.
pub struct BaseCache<'a> {
    init: &'a SplatScene,
    bases: BTreeMap<usize, (SplatScene, f64)>,
}

impl<'a> BaseCache<'a> {
    pub fn new(init: &'a SplatScene) -> Self {
        Self {
            init,
            bases: BTreeMap::new(),
        }
    }

    /// Seed the cache with an already fitted base.
    pub fn insert(&mut self, base: SplatScene, seconds: f64) {
        self.bases.insert(base.sh_degree(), (base, seconds));
    }

    pub fn get(&mut self, degree: usize, frames: &[Frame<'_>], cfg: &TrainConfig) -> Result<(SplatScene, f64), TrainError> {
        if let Some(b) = self.bases.get(&degree) {
            return Ok(b.clone());
        }
        let c = TrainConfig {
            sh_degree: degree,
            ..*cfg
        };
        let fitted = match fit_static(self.init, frames, &c) {
            Ok(o) => (o.model.scene, o.seconds),
            Err(TrainError::Diverged { best, .. }) => (best.scene, 0.0),
            Err(e) => return Err(e),
        };
        self.bases.insert(degree, fitted.clone());
        Ok(fitted)
    }
}

/// Refine+render throughput over `frames` (frames per second, single pass,
/// weight generation excluded).
pub fn render_fps(model: &Model, frames: &[Frame<'_>], background: Vec3) -> Result<f64, TrainError> {
    let weights = model.generate();
    let start = Instant::now();
    for f in frames {
        model.render_with(weights.as_ref(), f.pose, f.cam, background)?;
    }
    let dt = start.elapsed().as_secs_f64();
    Ok(frames.len() as f64 / dt.max(1e-9))
}

/// Fit and score one variant. Divergence is recorded in the row status and
/// the best retained state is returned.
pub fn ablation_row(
    scene_name: &str,
    train: &[Frame<'_>],
    test: &[Frame<'_>],
    bases: &mut BaseCache<'_>,
    v: &Variant,
    static_cfg: &TrainConfig,
    cfg: &TrainConfig,
) -> Result<(AblationRow, Model), TrainError> {
    let (base, base_secs) = bases.get(v.sh_degree, train, static_cfg)?;
    let (model, secs, status) = match v.offsets {
        None => (Model::static_only(base), base_secs, "ok".to_string()),
        Some(offsets) => {
            let c = TrainConfig {
                sh_degree: v.sh_degree,
                hidden_dim: v.hidden_dim,
                pose_mode: v.pose_mode,
                enabled_offsets: offsets,
                ..*cfg
            };
            match fit_view(&base, train, &c) {
                Ok(o) => (o.model, o.seconds, "ok".to_string()),
                Err(TrainError::Diverged { step, best, .. }) => (*best, 0.0, format!("diverged@{step}")),
                Err(e) => return Err(e),
            }
        }
    };
    let m = evaluate(&model, test, cfg.background)?;
    let row = AblationRow {
        scene: scene_name.to_string(),
        variant: v.name.clone(),
        sh_degree: v.sh_degree,
        hidden_dim: v.hidden_dim,
        pose_mode: v.pose_mode,
        offsets: v.offsets,
        split: "test".into(),
        psnr: m.psnr,
        ssim: m.ssim,
        mse: m.mse,
        fit_seconds: secs,
        render_fps: render_fps(&model, test, cfg.background)?,
        status,
    };
    Ok((row, model))
}

/// Run every variant in order; see [`ablation_row`].
pub fn ablation_matrix(
    scene_name: &str,
    train: &[Frame<'_>],
    test: &[Frame<'_>],
    bases: &mut BaseCache<'_>,
    variants: &[Variant],
    static_cfg: &TrainConfig,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>, TrainError> {
    variants
        .iter()
        .map(|v| ablation_row(scene_name, train, test, bases, v, static_cfg, cfg).map(|(r, _)| r))
        .collect()
}
