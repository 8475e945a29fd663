//! Losses and image metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Real, Tape};
use crate::geometry::{self, CameraModel, PoseW2C};
use crate::image::Image;
use crate::linalg::{self, Mat3, Vec3};
use crate::splat::SplatScene;

pub const DEFAULT_LAMBDA_PERCEPTUAL: f64 = 0.05;
pub const DEFAULT_LAMBDA_REPROJ: f64 = 0.001;
pub const PSNR_CAP: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("image shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("scene has no provenance for primitive {index}")]
    MissingProvenance { index: usize },
    #[error("primitive {index} projects behind camera {view}")]
    PrimBehindCamera { index: usize, view: usize },
    #[error("provenance of primitive {index} names view {view}, but only {views} poses were given")]
    UnknownView { index: usize, view: usize, views: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualKind {
    None,
    #[default]
    SsimBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_perceptual: f64,
    pub lambda_reproj: f64,
    pub perceptual_kind: PerceptualKind,
    pub reproj_reduction: Reduction,
    /// Use `‖·‖²` instead of `‖·‖` per reprojection term.
    pub reproj_squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_perceptual: DEFAULT_LAMBDA_PERCEPTUAL,
            lambda_reproj: DEFAULT_LAMBDA_REPROJ,
            perceptual_kind: PerceptualKind::SsimBased,
            reproj_reduction: Reduction::Mean,
            reproj_squared: false,
        }
    }
}

fn check_shape(a: &Image, b: &Image) -> Result<(), ObjectiveError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(ObjectiveError::ShapeMismatch {
            a: (a.width, a.height),
            b: (b.width, b.height),
        })
    }
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64, ObjectiveError> {
    check_shape(pred, gt)?;
    let n = pred.data.len().max(1) as f64;
    Ok(pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP
    } else {
        -10.0 * mse.log10()
    }
}

/// Truncated Gaussian window renormalised at image borders, as a banded
/// `n × n` averaging operator acting along one axis.
struct Window {
    n: usize,
    /// `taps[p]` = (first index, weights) for output position `p`.
    taps: Vec<(usize, Vec<f64>)>,
}

impl Window {
    fn new(n: usize) -> Self {
        let g: Vec<f64> = (0..=2 * SSIM_RADIUS)
            .map(|k| {
                let d = k as f64 - SSIM_RADIUS as f64;
                (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
            })
            .collect();
        let taps = (0..n)
            .map(|p| {
                let lo = p.saturating_sub(SSIM_RADIUS);
                let hi = (p + SSIM_RADIUS).min(n - 1);
                let w: Vec<f64> = (lo..=hi).map(|i| g[i + SSIM_RADIUS - p]).collect();
                let s: f64 = w.iter().sum();
                (lo, w.into_iter().map(|v| v / s).collect())
            })
            .collect();
        Self { n, taps }
    }

    /// `out[p] = Σ_i A[p][i]·x[i·stride]`.
    fn apply(&self, x: &[f64], stride: usize, out: &mut [f64], out_stride: usize) {
        for p in 0..self.n {
            let (lo, w) = &self.taps[p];
            out[p * out_stride] = w.iter().enumerate().map(|(k, wk)| wk * x[(lo + k) * stride]).sum();
        }
    }

    /// `out[i] += Σ_p A[p][i]·x[p]` (transpose).
    fn apply_t(&self, x: &[f64], stride: usize, out: &mut [f64], out_stride: usize) {
        for p in 0..self.n {
            let (lo, w) = &self.taps[p];
            let v = x[p * stride];
            for (k, wk) in w.iter().enumerate() {
                out[(lo + k) * out_stride] += wk * v;
            }
        }
    }
}

struct Blur {
    w: usize,
    h: usize,
    rows: Window,
    cols: Window,
}

impl Blur {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            rows: Window::new(h),
            cols: Window::new(w),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for r in 0..h {
            self.cols.apply(&x[r * w..], 1, &mut tmp[r * w..], 1);
        }
        let mut out = vec![0.0; w * h];
        for c in 0..w {
            self.rows.apply(&tmp[c..], w, &mut out[c..], w);
        }
        out
    }

    fn backward(&self, d: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for c in 0..w {
            self.rows.apply_t(&d[c..], w, &mut tmp[c..], w);
        }
        let mut out = vec![0.0; w * h];
        for r in 0..h {
            self.cols.apply_t(&tmp[r * w..], 1, &mut out[r * w..], 1);
        }
        out
    }
}

/// Mean SSIM over pixels and channels, optionally with `∂SSIM/∂a`
/// (interleaved like the image).
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h) = (a.width as usize, a.height as usize);
    let n = w * h;
    if n == 0 {
        return (1.0, want_grad.then(Vec::new));
    }
    let blur = Blur::new(w, h);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let norm = 1.0 / (3 * n) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; 3 * n]);
    for ch in 0..3 {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur.forward(&x), blur.forward(&y));
        let (exx, eyy, exy) = (blur.forward(&xx), blur.forward(&yy), blur.forward(&xy));
        let mut d_mx = vec![0.0; n];
        let mut d_sxx = vec![0.0; n];
        let mut d_sxy = vec![0.0; n];
        for p in 0..n {
            let (ux, uy) = (mx[p], my[p]);
            let sxx = exx[p] - ux * ux;
            let syy = eyy[p] - uy * uy;
            let sxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + c1;
            let a2 = 2.0 * sxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = sxx + syy + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                // ∂s/∂μx, ∂s/∂σx², ∂s/∂σxy, each scaled by the mean normaliser
                let ds_dux = (2.0 * uy * a2) / (b1 * b2) - s * 2.0 * ux / b1;
                let ds_dsxx = -s / b2;
                let ds_dsxy = 2.0 * a1 / (b1 * b2);
                // σxx = E[x²] − μx², σxy = E[xy] − μxμy
                d_mx[p] = norm * (ds_dux - 2.0 * ux * ds_dsxx - uy * ds_dsxy);
                d_sxx[p] = norm * ds_dsxx;
                d_sxy[p] = norm * ds_dsxy;
            }
        }
        if let Some(g) = grad.as_mut() {
            let gm = blur.backward(&d_mx);
            let gxx = blur.backward(&d_sxx);
            let gxy = blur.backward(&d_sxy);
            for p in 0..n {
                g[3 * p + ch] = gm[p] + 2.0 * x[p] * gxx[p] + y[p] * gxy[p];
            }
        }
    }
    (total * norm, grad)
}

/// Mean SSIM (K1 = 0.01, K2 = 0.03, 11-tap Gaussian window, σ = 1.5).
/// The window is truncated and renormalised at the borders so tiny images
/// are supported.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, ObjectiveError> {
    check_shape(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>), ObjectiveError> {
    check_shape(a, b)?;
    if a.data == b.data {
        // SSIM is maximal here; return the exact zero the rounding would miss
        return Ok((ssim_impl(a, b, false).0, vec![0.0; a.data.len()]));
    }
    let (s, g) = ssim_impl(a, b, true);
    Ok((s, g.unwrap_or_default()))
}

/// `MSE + λ·(1 − SSIM)/2`.
pub fn render_loss(pred: &Image, gt: &Image, cfg: &LossConfig) -> Result<f64, ObjectiveError> {
    let m = mse(pred, gt)?;
    Ok(match cfg.perceptual_kind {
        PerceptualKind::None => m,
        PerceptualKind::SsimBased => m + cfg.lambda_perceptual * 0.5 * (1.0 - ssim_impl(pred, gt, false).0),
    })
}

/// Render loss and `∂L/∂pred`.
pub fn render_loss_with_grad(pred: &Image, gt: &Image, cfg: &LossConfig) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let m = mse(pred, gt)?;
    let n = pred.data.len().max(1) as f64;
    let mut grad: Vec<f64> = pred.data.iter().zip(&gt.data).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let mut loss = m;
    if cfg.perceptual_kind == PerceptualKind::SsimBased && cfg.lambda_perceptual != 0.0 {
        let (s, gs) = ssim_with_grad(pred, gt)?;
        loss += cfg.lambda_perceptual * 0.5 * (1.0 - s);
        let k = -0.5 * cfg.lambda_perceptual;
        for (g, d) in grad.iter_mut().zip(gs) {
            *g += k * d;
        }
    }
    Ok((loss, grad))
}

/// `render + λ_reproj·reprojection`.
pub fn total_loss(render: f64, reprojection: f64, cfg: &LossConfig) -> f64 {
    render + cfg.lambda_reproj * reprojection
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn metrics(pred: &Image, gt: &Image) -> Result<Metrics, ObjectiveError> {
    let m = mse(pred, gt)?;
    Ok(Metrics {
        mse: m,
        psnr: psnr_from_mse(m),
        ssim: ssim_impl(pred, gt, false).0,
    })
}

/// Mean of per-view metrics.
pub fn mean_metrics(items: &[Metrics]) -> Metrics {
    let n = items.len().max(1) as f64;
    Metrics {
        mse: items.iter().map(|m| m.mse).sum::<f64>() / n,
        psnr: items.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: items.iter().map(|m| m.ssim).sum::<f64>() / n,
    }
}

/// Centre of pixel `index = row·W + col`.
pub fn pixel_center(cam: &CameraModel, index: usize) -> [f64; 2] {
    let w = cam.width as usize;
    [(index % w) as f64 + 0.5, (index / w) as f64 + 0.5]
}

/// One reprojection term: distance (or squared distance) between `target`
/// and the projection of `mu`. `None` behind the camera.
/// Pixel distances below this count as exact hits of the unsquared term.
pub const REPROJ_CUSP: f64 = 1e-9;

pub(crate) fn reproj_term<T: Real>(
    mu: &[T; 3],
    r: &[[T; 3]; 3],
    t: &[T; 3],
    cam: &CameraModel,
    target: [f64; 2],
    squared: bool,
) -> Option<T> {
    let pc = linalg::add(&linalg::mat_vec(r, mu), t);
    if pc[2].value() <= geometry::MIN_PROJECT_DEPTH {
        return None;
    }
    let p = geometry::project_camera_space(cam, &pc);
    let dx = p[0] - target[0];
    let dy = p[1] - target[1];
    let d2 = dx * dx + dy * dy;
    Some(if squared {
        d2
    } else if d2.value() > REPROJ_CUSP * REPROJ_CUSP {
        d2.sqrt()
    } else {
        // subgradient 0 at the cusp; residuals this small are rounding noise
        d2.lift(d2.value().sqrt())
    })
}

fn reduction_scale(cfg: &LossConfig, count: usize) -> f64 {
    match cfg.reproj_reduction {
        Reduction::Mean => 1.0 / count.max(1) as f64,
        Reduction::Sum => 1.0,
    }
}

fn provenance_checked<'a>(
    scene: &'a SplatScene,
    views: usize,
) -> Result<&'a [crate::splat::Provenance], ObjectiveError> {
    let prov = scene
        .provenance
        .as_deref()
        .ok_or(ObjectiveError::MissingProvenance { index: 0 })?;
    if prov.len() != scene.len() {
        return Err(ObjectiveError::MissingProvenance { index: prov.len() });
    }
    if let Some((index, p)) = prov.iter().enumerate().find(|(_, p)| p.view >= views) {
        return Err(ObjectiveError::UnknownView {
            index,
            view: p.view,
            views,
        });
    }
    Ok(prov)
}

/// Reprojection loss of every primitive against the pixel it was lifted from.
pub fn reprojection_loss(
    scene: &SplatScene,
    poses: &[PoseW2C],
    cams: &[CameraModel],
    cfg: &LossConfig,
) -> Result<f64, ObjectiveError> {
    let prov = provenance_checked(scene, poses.len().min(cams.len()))?;
    let mut total = 0.0;
    for (index, (g, p)) in scene.primitives.iter().zip(prov).enumerate() {
        let pose = &poses[p.view];
        let cam = &cams[p.view];
        total += reproj_term(&g.mu, pose.rotation(), pose.translation(), cam, pixel_center(cam, p.pixel), cfg.reproj_squared)
            .ok_or(ObjectiveError::PrimBehindCamera { index, view: p.view })?;
    }
    Ok(total * reduction_scale(cfg, scene.len()))
}

/// Gradient of the reprojection loss with respect to `(R, t)` of every view
/// and to every primitive centre.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprojGrad {
    pub value: f64,
    pub d_rotation: Vec<Mat3>,
    pub d_translation: Vec<Vec3>,
    pub d_mu: Vec<Vec3>,
}

pub fn reprojection_loss_with_grad(
    scene: &SplatScene,
    poses: &[PoseW2C],
    cams: &[CameraModel],
    cfg: &LossConfig,
) -> Result<ReprojGrad, ObjectiveError> {
    let views = poses.len().min(cams.len());
    let prov = provenance_checked(scene, views)?;
    let k = reduction_scale(cfg, scene.len());
    let mut out = ReprojGrad {
        value: 0.0,
        d_rotation: vec![[[0.0; 3]; 3]; views],
        d_translation: vec![[0.0; 3]; views],
        d_mu: vec![[0.0; 3]; scene.len()],
    };
    let tape = Tape::with_capacity(128);
    for (index, (g, p)) in scene.primitives.iter().zip(prov).enumerate() {
        tape.clear();
        let pose = &poses[p.view];
        let cam = &cams[p.view];
        let r = pose.rotation().map(|row| row.map(|v| tape.var(v)));
        let t = pose.translation().map(|v| tape.var(v));
        let mu = g.mu.map(|v| tape.var(v));
        let term = reproj_term(&mu, &r, &t, cam, pixel_center(cam, p.pixel), cfg.reproj_squared)
            .ok_or(ObjectiveError::PrimBehindCamera { index, view: p.view })?;
        out.value += term.value() * k;
        let mut adj = tape.adjoints();
        adj.seed(term, k);
        tape.sweep_all(&mut adj);
        for i in 0..3 {
            for j in 0..3 {
                out.d_rotation[p.view][i][j] += adj.get(r[i][j]);
            }
            out.d_translation[p.view][i] += adj.get(t[i]);
            out.d_mu[index][i] = adj.get(mu[i]);
        }
    }
    Ok(out)
}
