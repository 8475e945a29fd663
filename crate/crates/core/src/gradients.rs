//! Reverse-mode gradients of the render/reprojection objective with respect
//! to Gaussian attributes, the hypernetwork and camera poses.
//!
//! The forward pass renders every view with plain `f64`. The backward pass
//! runs the compositor adjoint, then for every visible (Gaussian, view) pair
//! re-records the short per-Gaussian chain on a [`Tape`]:
//!
//! ```text
//! leaves ─► pose feature ─┐                    ┌─► refine ─► EWA ─► (mean, conic, rgb, α)
//!                         └─► view MLP (manual) ┘
//! ```
//!
//! The view MLP and the weight generator have hand-written adjoints. The tape
//! sweep is split at the MLP so its input adjoint can be injected.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adjoints, Real, Tape, Var};
use crate::geometry::{self, CameraModel, GeometryError, PoseW2C};
use crate::image::Image;
use crate::linalg::{Mat3, Vec3};
use crate::model::{Model, ModelError, PoseParams};
use crate::objectives::{self, LossConfig, ObjectiveError};
use crate::raster::{self, ProjectedGaussian, ProjectedGrad, RasterError, TileBins};
use crate::view_adapt::{
    apply_offsets_generic, mlp_backward_raw, mlp_forward_raw, ColorAnchor, GeneratedWeights, PrimVars, INPUT_DIM,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("loss was not produced under recording")]
    NotRecorded,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Shape(String),
}

/// Named groups of optimisable scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafGroup {
    Mu,
    Rot,
    LogScale,
    LogitOpacity,
    Sh,
    Context,
    GenW1,
    GenB1,
    GenW2,
    GenB2,
    PoseRot6d,
    PoseTrans,
}

impl LeafGroup {
    pub const GAUSSIAN: [LeafGroup; 5] = [Self::Mu, Self::Rot, Self::LogScale, Self::LogitOpacity, Self::Sh];
    pub const HYPER: [LeafGroup; 5] = [Self::Context, Self::GenW1, Self::GenB1, Self::GenW2, Self::GenB2];
    pub const POSE: [LeafGroup; 2] = [Self::PoseRot6d, Self::PoseTrans];
    pub const ALL: [LeafGroup; 12] = [
        Self::Mu,
        Self::Rot,
        Self::LogScale,
        Self::LogitOpacity,
        Self::Sh,
        Self::Context,
        Self::GenW1,
        Self::GenB1,
        Self::GenW2,
        Self::GenB2,
        Self::PoseRot6d,
        Self::PoseTrans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mu => "mu",
            Self::Rot => "rot",
            Self::LogScale => "log_scale",
            Self::LogitOpacity => "logit_opacity",
            Self::Sh => "sh",
            Self::Context => "context",
            Self::GenW1 => "gen_w1",
            Self::GenB1 => "gen_b1",
            Self::GenW2 => "gen_w2",
            Self::GenB2 => "gen_b2",
            Self::PoseRot6d => "pose_rot6d",
            Self::PoseTrans => "pose_trans",
        }
    }
}

/// Which leaf families receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GradRequest {
    pub gaussians: bool,
    pub hyper: bool,
    pub poses: bool,
}

impl GradRequest {
    pub fn groups(&self) -> Vec<LeafGroup> {
        let mut g = Vec::new();
        if self.gaussians {
            g.extend(LeafGroup::GAUSSIAN);
        }
        if self.hyper {
            g.extend(LeafGroup::HYPER);
        }
        if self.poses {
            g.extend(LeafGroup::POSE);
        }
        g
    }
}

/// Flat storage for a set of leaf groups, used both for parameter values and
/// for their gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub groups: Vec<(LeafGroup, Vec<f64>)>,
}

impl ParamSet {
    /// Current values of the requested groups. Pose groups need `poses`.
    pub fn gather(model: &Model, poses: Option<&[PoseParams]>, req: &GradRequest) -> Self {
        let mut out = Self::default();
        let prims = &model.scene.primitives;
        for group in req.groups() {
            let values: Vec<f64> = match group {
                LeafGroup::Mu => prims.iter().flat_map(|g| g.mu).collect(),
                LeafGroup::Rot => prims.iter().flat_map(|g| g.rot).collect(),
                LeafGroup::LogScale => prims.iter().flat_map(|g| g.log_scale).collect(),
                LeafGroup::LogitOpacity => prims.iter().map(|g| g.logit_opacity).collect(),
                LeafGroup::Sh => prims.iter().flat_map(|g| g.sh.iter().flatten().copied()).collect(),
                LeafGroup::PoseRot6d => poses.unwrap_or(&[]).iter().flat_map(|p| p.rot6d).collect(),
                LeafGroup::PoseTrans => poses.unwrap_or(&[]).iter().flat_map(|p| p.t).collect(),
                hyper_group => match &model.hyper {
                    Some(h) => match hyper_group {
                        LeafGroup::Context => h.context.clone(),
                        LeafGroup::GenW1 => h.gen_w1.clone(),
                        LeafGroup::GenB1 => h.gen_b1.clone(),
                        LeafGroup::GenW2 => h.gen_w2.clone(),
                        _ => h.gen_b2.clone(),
                    },
                    None => Vec::new(),
                },
            };
            out.groups.push((group, values));
        }
        out
    }

    /// Write values back into the model and poses.
    pub fn scatter(&self, model: &mut Model, mut poses: Option<&mut [PoseParams]>) {
        for (group, values) in &self.groups {
            let prims = &mut model.scene.primitives;
            match group {
                LeafGroup::Mu => prims.iter_mut().zip(values.chunks_exact(3)).for_each(|(g, v)| g.mu.copy_from_slice(v)),
                LeafGroup::Rot => prims.iter_mut().zip(values.chunks_exact(4)).for_each(|(g, v)| g.rot.copy_from_slice(v)),
                LeafGroup::LogScale => prims
                    .iter_mut()
                    .zip(values.chunks_exact(3))
                    .for_each(|(g, v)| g.log_scale.copy_from_slice(v)),
                LeafGroup::LogitOpacity => prims.iter_mut().zip(values).for_each(|(g, v)| g.logit_opacity = *v),
                LeafGroup::Sh => {
                    let mut it = values.chunks_exact(3);
                    for g in prims.iter_mut() {
                        for c in g.sh.iter_mut() {
                            c.copy_from_slice(it.next().unwrap_or(&[0.0; 3]));
                        }
                    }
                }
                LeafGroup::PoseRot6d => {
                    if let Some(p) = poses.as_deref_mut() {
                        p.iter_mut().zip(values.chunks_exact(6)).for_each(|(p, v)| p.rot6d.copy_from_slice(v));
                    }
                }
                LeafGroup::PoseTrans => {
                    if let Some(p) = poses.as_deref_mut() {
                        p.iter_mut().zip(values.chunks_exact(3)).for_each(|(p, v)| p.t.copy_from_slice(v));
                    }
                }
                hyper_group => {
                    if let Some(h) = model.hyper.as_mut() {
                        let dst = match hyper_group {
                            LeafGroup::Context => &mut h.context,
                            LeafGroup::GenW1 => &mut h.gen_w1,
                            LeafGroup::GenB1 => &mut h.gen_b1,
                            LeafGroup::GenW2 => &mut h.gen_w2,
                            _ => &mut h.gen_b2,
                        };
                        dst.copy_from_slice(values);
                    }
                }
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self.groups.iter().map(|(g, v)| (*g, vec![0.0; v.len()])).collect(),
        }
    }

    pub fn get(&self, group: LeafGroup) -> Option<&[f64]> {
        self.groups.iter().find(|(g, _)| *g == group).map(|(_, v)| v.as_slice())
    }

    pub fn get_mut(&mut self, group: LeafGroup) -> Option<&mut Vec<f64>> {
        self.groups.iter_mut().find(|(g, _)| *g == group).map(|(_, v)| v)
    }

    pub fn scalar_count(&self) -> usize {
        self.groups.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|((a, x), (b, y))| a == b && x.len() == y.len())
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for ((_, a), (_, b)) in self.groups.iter_mut().zip(&other.groups) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.groups.iter().flat_map(|(_, v)| v.iter()).fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// One supervised view.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub pose: &'a PoseW2C,
    pub cam: &'a CameraModel,
    pub gt: &'a Image,
}

/// Weights of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub loss: LossConfig,
    /// Multiplier of the mean per-view render loss.
    pub render_weight: f64,
    /// Adds `λ_reproj·reprojection` when set (requires provenance).
    pub reprojection: bool,
    pub background: Vec3,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            render_weight: 1.0,
            reprojection: false,
            background: [0.0; 3],
        }
    }
}

struct ViewRecord {
    pose: PoseW2C,
    projected: Vec<ProjectedGaussian>,
    bins: TileBins,
    d_image: Vec<f64>,
}

/// State kept from a recorded forward pass.
pub struct Recording<'a> {
    model: &'a Model,
    views: Vec<View<'a>>,
    pose_params: Option<&'a [PoseParams]>,
    objective: Objective,
    weights: Option<GeneratedWeights>,
    records: Vec<ViewRecord>,
    reproj: Option<objectives::ReprojGrad>,
}

/// A scalar loss, optionally carrying a recording for [`backward`].
pub struct LossValue<'a> {
    pub value: f64,
    /// Mean per-view render loss before weighting.
    pub render: f64,
    /// Reprojection loss before weighting (0 when disabled).
    pub reprojection: f64,
    /// Per-view renders.
    pub images: Vec<Image>,
    record: Option<Recording<'a>>,
}

impl LossValue<'_> {
    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }
}

fn effective_poses(views: &[View<'_>], pose_params: Option<&[PoseParams]>) -> Result<Vec<PoseW2C>, GradError> {
    match pose_params {
        Some(p) => {
            if p.len() != views.len() {
                return Err(GradError::Shape(format!("{} pose leaves for {} views", p.len(), views.len())));
            }
            p.iter().map(|q| Ok(q.to_pose()?)).collect()
        }
        None => Ok(views.iter().map(|v| *v.pose).collect()),
    }
}

/// Evaluate the objective. With `record`, keeps what [`backward`] needs.
/// When `pose_params` is given it replaces the views' poses and becomes
/// differentiable.
pub fn forward<'a>(
    model: &'a Model,
    views: &[View<'a>],
    pose_params: Option<&'a [PoseParams]>,
    objective: &Objective,
    record: bool,
) -> Result<LossValue<'a>, GradError> {
    let poses = effective_poses(views, pose_params)?;
    let weights = model.generate();
    let anchors = model.color_anchors();
    let nv = views.len().max(1) as f64;
    let mut render_sum = 0.0;
    let mut records = Vec::with_capacity(views.len());
    let mut images = Vec::with_capacity(views.len());
    for (view, pose) in views.iter().zip(&poses) {
        let prims = model.refined(weights.as_ref(), pose)?;
        let projected = raster::project_all(&prims, pose, view.cam, anchors.as_deref());
        let (img, bins) = raster::rasterize(&projected, view.cam, &objective.background)?;
        let (l, mut d_image) = if record {
            objectives::render_loss_with_grad(&img.image, view.gt, &objective.loss)?
        } else {
            (objectives::render_loss(&img.image, view.gt, &objective.loss)?, Vec::new())
        };
        render_sum += l;
        if record {
            let k = objective.render_weight / nv;
            d_image.iter_mut().for_each(|d| *d *= k);
            records.push(ViewRecord {
                pose: *pose,
                projected,
                bins,
                d_image,
            });
        }
        images.push(img.image);
    }
    let render = render_sum / nv;
    let mut value = objective.render_weight * render;
    let mut reproj_value = 0.0;
    let mut reproj = None;
    if objective.reprojection {
        let cams: Vec<CameraModel> = views.iter().map(|v| *v.cam).collect();
        if record {
            let r = objectives::reprojection_loss_with_grad(&model.scene, &poses, &cams, &objective.loss)?;
            reproj_value = r.value;
            reproj = Some(r);
        } else {
            reproj_value = objectives::reprojection_loss(&model.scene, &poses, &cams, &objective.loss)?;
        }
        value += objective.loss.lambda_reproj * reproj_value;
    }
    Ok(LossValue {
        value,
        render,
        reprojection: reproj_value,
        images,
        record: record.then(|| Recording {
            model,
            views: views.to_vec(),
            pose_params,
            objective: *objective,
            weights,
            records,
            reproj,
        }),
    })
}

/// Per-Gaussian gradient accumulated over views.
struct GaussGrad {
    mu: Vec3,
    rot: [f64; 4],
    log_scale: Vec3,
    logit_opacity: f64,
    sh: Vec<[f64; 3]>,
    theta: Vec<f64>,
    /// `(view, dR, dt)` contributions in view order.
    pose: Vec<(usize, Mat3, Vec3)>,
}

/// Tape handles of one (Gaussian, view) chain.
struct ChainVars<'t> {
    base: PrimVars<Var<'t>>,
    r: [[Var<'t>; 3]; 3],
    t: [Var<'t>; 3],
    /// Pose feature, when refining.
    x: Option<[Var<'t>; INPUT_DIM]>,
    /// MLP output slots and the tape position where they start.
    out: Vec<Var<'t>>,
    split: usize,
}

fn leaf<'t>(tape: &'t Tape, v: f64, want: bool) -> Var<'t> {
    if want {
        tape.var(v)
    } else {
        tape.constant(v)
    }
}

/// Backpropagate a recorded loss into the requested leaf groups.
pub fn backward(loss: &LossValue<'_>, req: &GradRequest) -> Result<ParamSet, GradError> {
    let rec = loss.record.as_ref().ok_or(GradError::NotRecorded)?;
    let model = rec.model;
    let n = model.scene.len();
    let adaptive = model.is_adaptive() && rec.weights.is_some();
    let layout = model.hyper.as_ref().map(|h| h.layout());
    let p_count = if adaptive { layout.map_or(0, |l| l.param_count()) } else { 0 };
    let mut grads = ParamSet::gather(model, rec.pose_params, req).zeros_like();
    let want_pose = req.poses && rec.pose_params.is_some();

    // compositor adjoints, scattered to Gaussian index per view
    let per_view: Vec<Vec<Option<ProjectedGrad>>> = rec
        .records
        .iter()
        .zip(&rec.views)
        .map(|(r, v)| {
            let g = raster::rasterize_backward(&r.projected, &r.bins, v.cam, &rec.objective.background, &r.d_image);
            let mut dense = vec![None; n];
            for (p, g) in r.projected.iter().zip(g) {
                dense[p.index] = Some(g);
            }
            dense
        })
        .collect();

    let need_chain = req.gaussians || want_pose || (req.hyper && adaptive);
    let gauss: Vec<GaussGrad> = if need_chain {
        (0..n)
            .into_par_iter()
            .map_init(
                || Tape::with_capacity(4096),
                |tape, i| gaussian_backward(tape, rec, &per_view, i, req.gaussians, want_pose, adaptive, p_count),
            )
            .collect()
    } else {
        Vec::new()
    };

    let mut d_rot_views: Vec<Mat3> = vec![[[0.0; 3]; 3]; rec.views.len()];
    let mut d_t_views: Vec<Vec3> = vec![[0.0; 3]; rec.views.len()];
    for g in &gauss {
        for (v, dr, dt) in &g.pose {
            for a in 0..3 {
                for b in 0..3 {
                    d_rot_views[*v][a][b] += dr[a][b];
                }
                d_t_views[*v][a] += dt[a];
            }
        }
    }

    if req.gaussians {
        let lam = rec.objective.loss.lambda_reproj;
        let reproj_mu = rec.reproj.as_ref().map(|r| &r.d_mu);
        for (group, dst) in grads.groups.iter_mut() {
            match group {
                LeafGroup::Mu => {
                    for (i, g) in gauss.iter().enumerate() {
                        for a in 0..3 {
                            dst[3 * i + a] = g.mu[a] + reproj_mu.map_or(0.0, |m| lam * m[i][a]);
                        }
                    }
                }
                LeafGroup::Rot => gauss.iter().enumerate().for_each(|(i, g)| dst[4 * i..4 * i + 4].copy_from_slice(&g.rot)),
                LeafGroup::LogScale => {
                    gauss.iter().enumerate().for_each(|(i, g)| dst[3 * i..3 * i + 3].copy_from_slice(&g.log_scale))
                }
                LeafGroup::LogitOpacity => gauss.iter().enumerate().for_each(|(i, g)| dst[i] = g.logit_opacity),
                LeafGroup::Sh => {
                    let mut k = 0;
                    for g in &gauss {
                        for c in &g.sh {
                            dst[k..k + 3].copy_from_slice(c);
                            k += 3;
                        }
                    }
                }
                _ => {}
            }
        }
    }

    if req.hyper && adaptive {
        if let (Some(h), Some(w)) = (model.hyper.as_ref(), rec.weights.as_ref()) {
            hyper_backward(h, w, &gauss, &mut grads);
        }
    }

    if want_pose {
        if let Some(r) = &rec.reproj {
            let lam = rec.objective.loss.lambda_reproj;
            for v in 0..rec.views.len() {
                for a in 0..3 {
                    for b in 0..3 {
                        d_rot_views[v][a][b] += lam * r.d_rotation[v][a][b];
                    }
                    d_t_views[v][a] += lam * r.d_translation[v][a];
                }
            }
        }
        let params = rec.pose_params.unwrap_or(&[]);
        let tape = Tape::with_capacity(256);
        let mut d6 = Vec::with_capacity(6 * params.len());
        for (p, dr) in params.iter().zip(&d_rot_views) {
            d6.extend(rot6d_backward(&tape, &p.rot6d, dr));
        }
        if let Some(dst) = grads.get_mut(LeafGroup::PoseRot6d) {
            dst.copy_from_slice(&d6);
        }
        if let Some(dst) = grads.get_mut(LeafGroup::PoseTrans) {
            dst.copy_from_slice(&d_t_views.concat());
        }
    }
    Ok(grads)
}

/// Chain `∂L/∂R` through the 6D parameterisation.
fn rot6d_backward(tape: &Tape, v6: &[f64; 6], d_r: &Mat3) -> [f64; 6] {
    tape.clear();
    let vars: [Var<'_>; 6] = v6.map(|v| tape.var(v));
    let Some(r) = geometry::rotation_from_6d_generic(&vars) else {
        return [0.0; 6];
    };
    let mut adj = tape.adjoints();
    for a in 0..3 {
        for b in 0..3 {
            adj.seed(r[a][b], d_r[a][b]);
        }
    }
    tape.sweep_all(&mut adj);
    vars.map(|v| adj.get(v))
}

#[allow(clippy::too_many_arguments)]
fn gaussian_backward(
    tape: &mut Tape,
    rec: &Recording<'_>,
    per_view: &[Vec<Option<ProjectedGrad>>],
    i: usize,
    want_gauss: bool,
    want_pose: bool,
    adaptive: bool,
    p_count: usize,
) -> GaussGrad {
    let model = rec.model;
    let g = &model.scene.primitives[i];
    let mut out = GaussGrad {
        mu: [0.0; 3],
        rot: [0.0; 4],
        log_scale: [0.0; 3],
        logit_opacity: 0.0,
        sh: vec![[0.0; 3]; g.sh.len()],
        theta: vec![0.0; p_count],
        pose: Vec::new(),
    };
    let layout = model.hyper.as_ref().map(|h| h.layout());
    let theta = rec.weights.as_ref().map(|w| w.theta(i));
    let mut hidden = vec![0.0; layout.map_or(0, |l| l.hidden)];
    let mut out_vals = vec![0.0; layout.map_or(0, |l| l.out_dim())];
    let mut d_out = vec![0.0; out_vals.len()];

    for (v, rv) in rec.records.iter().enumerate() {
        let Some(pg) = per_view[v][i] else {
            continue;
        };
        let cam = rec.views[v].cam;
        tape.clear();
        let tape: &Tape = tape;
        let r: [[Var<'_>; 3]; 3] = rv.pose.rotation().map(|row| row.map(|x| leaf(tape, x, want_pose)));
        let t: [Var<'_>; 3] = rv.pose.translation().map(|x| leaf(tape, x, want_pose));
        let base = PrimVars {
            mu: g.mu.map(|x| leaf(tape, x, want_gauss)),
            rot: g.rot.map(|x| leaf(tape, x, want_gauss)),
            log_scale: g.log_scale.map(|x| leaf(tape, x, want_gauss)),
            logit_opacity: leaf(tape, g.logit_opacity, want_gauss),
            sh: g.sh.iter().map(|c| c.map(|x| leaf(tape, x, want_gauss))).collect(),
        };
        let center = geometry::center_generic(&r, &t);
        let mut cv = ChainVars {
            base,
            r,
            t,
            x: None,
            out: Vec::new(),
            split: 0,
        };
        let refined = match (adaptive, layout, theta) {
            (true, Some(layout), Some(theta)) => {
                let (u, l) = geometry::pose_feature_generic(&cv.base.mu, &center, model.refine.pose_mode);
                let x = [u[0], u[1], u[2], l];
                let xv = x.map(|v| v.value());
                mlp_forward_raw(theta, &layout, &xv, &mut hidden, &mut out_vals);
                cv.split = tape.len();
                cv.out = out_vals
                    .iter()
                    .enumerate()
                    .map(|(slot, &val)| {
                        if model.refine.enabled.slot_enabled(slot) {
                            tape.var(val)
                        } else {
                            tape.constant(0.0)
                        }
                    })
                    .collect();
                cv.x = Some(x);
                apply_offsets_generic(&cv.base, &cv.out, &layout, model.refine.offset_space, false)
            }
            _ => cv.base.clone(),
        };
        let sh_point = if adaptive && model.refine.color_anchor == ColorAnchor::Base {
            cv.base.mu
        } else {
            refined.mu
        };
        let Some(proj) = raster::project_chain(&refined, &sh_point, &center, &cv.r, &cv.t, cam) else {
            continue;
        };
        let mut adj: Adjoints = tape.adjoints();
        for k in 0..2 {
            adj.seed(proj.mean2d[k], pg.mean2d[k]);
        }
        for k in 0..3 {
            adj.seed(proj.conic[k], pg.conic[k]);
            adj.seed(proj.rgb[k], pg.rgb[k]);
        }
        adj.seed(proj.alpha, pg.alpha);
        let end = tape.len();
        tape.sweep(&mut adj, cv.split, end);
        if let (Some(x), Some(layout), Some(theta)) = (cv.x.as_ref(), layout, theta) {
            for (d, o) in d_out.iter_mut().zip(&cv.out) {
                *d = adj.get(*o);
            }
            let xv = x.map(|v| v.value());
            let mut d_x = [0.0; INPUT_DIM];
            mlp_backward_raw(theta, &layout, &xv, &hidden, &d_out, &mut out.theta, &mut d_x);
            for k in 0..INPUT_DIM {
                adj.seed(x[k], d_x[k]);
            }
            tape.sweep(&mut adj, 0, cv.split);
        }
        if want_gauss {
            for k in 0..3 {
                out.mu[k] += adj.get(cv.base.mu[k]);
                out.log_scale[k] += adj.get(cv.base.log_scale[k]);
            }
            for k in 0..4 {
                out.rot[k] += adj.get(cv.base.rot[k]);
            }
            out.logit_opacity += adj.get(cv.base.logit_opacity);
            for (dst, src) in out.sh.iter_mut().zip(&cv.base.sh) {
                for c in 0..3 {
                    dst[c] += adj.get(src[c]);
                }
            }
        }
        if want_pose {
            let dr = cv.r.map(|row| row.map(|x| adj.get(x)));
            let dt = cv.t.map(|x| adj.get(x));
            out.pose.push((v, dr, dt));
        }
    }
    out
}

fn hyper_backward(
    h: &crate::view_adapt::HyperNet,
    w: &GeneratedWeights,
    gauss: &[GaussGrad],
    grads: &mut ParamSet,
) {
    let f = h.config.feature_dim;
    let hd = h.config.gen_hidden;
    // d hidden (post-ReLU gated) per Gaussian
    let d_hidden: Vec<Vec<f64>> = gauss
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let hid = &w.gen_hidden[i * hd..(i + 1) * hd];
            let mut d = vec![0.0; hd];
            for (r, &dt) in g.theta.iter().enumerate() {
                if dt == 0.0 {
                    continue;
                }
                let row = &h.gen_w2[r * hd..(r + 1) * hd];
                for j in 0..hd {
                    d[j] += dt * row[j];
                }
            }
            for j in 0..hd {
                if hid[j] <= 0.0 {
                    d[j] = 0.0;
                }
            }
            d
        })
        .collect();
    // row-parallel outer-product sums keep a fixed reduction order
    if let Some(dst) = grads.get_mut(LeafGroup::GenW2) {
        dst.par_chunks_mut(hd.max(1)).enumerate().for_each(|(r, row)| {
            for (i, g) in gauss.iter().enumerate() {
                let dt = g.theta[r];
                if dt != 0.0 {
                    let hid = &w.gen_hidden[i * hd..(i + 1) * hd];
                    row.iter_mut().zip(hid).for_each(|(a, b)| *a += dt * b);
                }
            }
        });
    }
    if let Some(dst) = grads.get_mut(LeafGroup::GenB2) {
        for g in gauss {
            dst.iter_mut().zip(&g.theta).for_each(|(a, b)| *a += b);
        }
    }
    if let Some(dst) = grads.get_mut(LeafGroup::GenW1) {
        dst.par_chunks_mut(f.max(1)).enumerate().for_each(|(j, row)| {
            for (i, d) in d_hidden.iter().enumerate() {
                if d[j] != 0.0 {
                    row.iter_mut().zip(h.feature(i)).for_each(|(a, b)| *a += d[j] * b);
                }
            }
        });
    }
    if let Some(dst) = grads.get_mut(LeafGroup::GenB1) {
        for d in &d_hidden {
            dst.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
    }
    if let Some(dst) = grads.get_mut(LeafGroup::Context) {
        dst.par_chunks_mut(f.max(1)).enumerate().for_each(|(i, row)| {
            let d = &d_hidden[i];
            for j in 0..hd {
                if d[j] != 0.0 {
                    let w1 = &h.gen_w1[j * f..(j + 1) * f];
                    row.iter_mut().zip(w1).for_each(|(a, b)| *a += d[j] * b);
                }
            }
        });
    }
}

/// Worst agreement between analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<FdLeaf>,
    /// Worst error per group that had at least one checked leaf.
    pub per_group: Vec<(LeafGroup, f64)>,
    /// Leaves where both gradients vanish (flagged, not failed).
    pub zero_gradient: Vec<(LeafGroup, usize)>,
    pub checked: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdLeaf {
    pub group: LeafGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub h: f64,
    /// Check at most this many leaves per group (evenly spaced); `None` checks all.
    pub per_group: Option<usize>,
    /// `|g| < zero_tol` on both sides counts as a zero-gradient leaf.
    pub zero_tol: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            per_group: None,
            zero_tol: 1e-14,
        }
    }
}

/// Central differences of `loss_fn` around `params` against `analytic`.
/// Relative error is `|g − ĝ| / max(1, |g|, |ĝ|)`.
pub fn fd_check<F>(loss_fn: F, params: &ParamSet, analytic: &ParamSet, opts: &FdOptions) -> FdReport
where
    F: Fn(&ParamSet) -> f64,
{
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        per_group: Vec::new(),
        zero_gradient: Vec::new(),
        checked: 0,
    };
    let mut probe = params.clone();
    for (gi, (group, values)) in params.groups.iter().enumerate() {
        let len = values.len();
        if len == 0 {
            continue;
        }
        let picks: Vec<usize> = match opts.per_group {
            Some(k) if k < len => (0..k).map(|j| j * len / k).collect(),
            _ => (0..len).collect(),
        };
        let mut worst_group: f64 = 0.0;
        for idx in picks {
            let orig = values[idx];
            probe.groups[gi].1[idx] = orig + opts.h;
            let lp = loss_fn(&probe);
            probe.groups[gi].1[idx] = orig - opts.h;
            let lm = loss_fn(&probe);
            probe.groups[gi].1[idx] = orig;
            let numeric = (lp - lm) / (2.0 * opts.h);
            let a = analytic.get(*group).map_or(0.0, |v| v[idx]);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if a.abs() < opts.zero_tol && numeric.abs() < opts.zero_tol {
                report.zero_gradient.push((*group, idx));
            }
            worst_group = worst_group.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(FdLeaf {
                    group: *group,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
        report.per_group.push((*group, worst_group));
    }
    report
}

/// Objective value with every leaf taken from `params`; the usual companion
/// of [`fd_check`].
pub fn loss_at(
    model: &Model,
    views: &[View<'_>],
    poses: Option<&[PoseParams]>,
    objective: &Objective,
    params: &ParamSet,
) -> Result<f64, GradError> {
    let mut m = model.clone();
    let mut p: Option<Vec<PoseParams>> = poses.map(<[PoseParams]>::to_vec);
    params.scatter(&mut m, p.as_deref_mut());
    Ok(forward(&m, views, p.as_deref(), objective, false)?.value)
}
