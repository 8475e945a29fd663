//! Forward splatting: EWA projection, depth ordering and front-to-back
//! alpha compositing.
//!
//! Two compositors share one per-pixel kernel: [`composite_reference`]
//! evaluates every Gaussian at every pixel, and the tiled path used by
//! [`render`] bins Gaussians into 16×16 tiles by the exact extent outside of
//! which their weight falls under the skip threshold. Both visit Gaussians
//! in the same `(depth, index)` order and skip the same terms, so their
//! outputs agree bit for bit.

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::Real;
use crate::geometry::{self, CameraModel, PoseW2C};
use crate::image::Image;
use crate::linalg::{self, Vec3};
use crate::splat::{covariance_generic, sh_eval_generic, GaussianPrimitive};
use crate::view_adapt::PrimVars;

/// Screen-space dilation added to every projected covariance.
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
pub const NEAR_PLANE: f64 = 0.01;
pub const TILE_SIZE: usize = 16;
const CULL_SIGMA: f64 = 3.0;
const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("projected covariance of Gaussian {index} is singular (det {det:e})")]
    SingularCovariance { index: usize, det: f64 },
}

/// A Gaussian in screen space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    /// Index of the source primitive.
    pub index: usize,
    pub mean2d: [f64; 2],
    /// `(xx, xy, yy)`, dilation included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub rgb: Vec3,
    pub alpha: f64,
}

impl ProjectedGaussian {
    /// Compositing weight at pixel centre `(px, py)`, or `None` below the skip threshold.
    #[inline]
    pub fn weight_at(&self, px: f64, py: f64) -> Option<f64> {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let q = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        let w = (self.alpha * (-0.5 * q).exp()).min(ALPHA_MAX);
        (w >= ALPHA_SKIP).then_some(w)
    }

    /// Pixel-space half extents beyond which [`Self::weight_at`] is always `None`.
    fn extent(&self) -> Option<[f64; 2]> {
        let a = self.alpha.min(ALPHA_MAX);
        if a * 255.0 <= 1.0 {
            return None;
        }
        let q = 2.0 * (255.0 * a).ln();
        Some([(q * self.cov2d[0]).sqrt() + 1.0, (q * self.cov2d[2]).sqrt() + 1.0])
    }
}

/// Result of projecting one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible(ProjectedGaussian),
    Culled,
}

impl Projection {
    pub fn visible(self) -> Option<ProjectedGaussian> {
        match self {
            Self::Visible(p) => Some(p),
            Self::Culled => None,
        }
    }
}

/// Differentiable screen-space quantities of one Gaussian.
pub(crate) struct ProjVars<T> {
    pub mean2d: [T; 2],
    pub cov2d: [T; 3],
    pub conic: [T; 3],
    pub depth: T,
    pub rgb: [T; 3],
    pub alpha: T,
}

/// Shared EWA chain. The SH viewing direction is `normalize(sh_point − center)`.
/// Returns `None` when culled.
pub(crate) fn project_chain<T: Real>(
    g: &PrimVars<T>,
    sh_point: &[T; 3],
    center: &[T; 3],
    r: &[[T; 3]; 3],
    t: &[T; 3],
    cam: &CameraModel,
) -> Option<ProjVars<T>> {
    let pc = linalg::add(&linalg::mat_vec(r, &g.mu), t);
    let z = pc[2];
    if !(z.value() > NEAR_PLANE) {
        return None;
    }
    let mean2d = geometry::project_camera_space(cam, &pc);

    let sigma = covariance_generic(&g.rot, &g.log_scale);
    // camera-frame covariance W Σ Wᵀ
    let ws = linalg::mat_mul(r, &sigma);
    let cov_cam = linalg::mat_mul(&ws, &linalg::transpose(r));
    let inv_z = z.lift(1.0) / z;
    let inv_z2 = inv_z * inv_z;
    let zero = z.lift(0.0);
    let j = [
        [inv_z * cam.fx, zero, -(pc[0] * inv_z2) * cam.fx],
        [zero, inv_z * cam.fy, -(pc[1] * inv_z2) * cam.fy],
    ];
    let jc = |row: usize| -> [T; 3] {
        std::array::from_fn(|c| j[row][0] * cov_cam[0][c] + j[row][1] * cov_cam[1][c] + j[row][2] * cov_cam[2][c])
    };
    let j0 = jc(0);
    let j1 = jc(1);
    let a = linalg::dot(&j0, &j[0]) + LOW_PASS;
    let b = linalg::dot(&j0, &j[1]);
    let c = linalg::dot(&j1, &j[1]) + LOW_PASS;

    let (w, h) = (cam.width as f64, cam.height as f64);
    let (mx, my) = (mean2d[0].value(), mean2d[1].value());
    let rx = CULL_SIGMA * a.value().sqrt();
    let ry = CULL_SIGMA * c.value().sqrt();
    if mx + rx < 0.0 || mx - rx > w || my + ry < 0.0 || my - ry > h {
        return None;
    }

    let det = a * c - b * b;
    let inv_det = det.lift(1.0) / det;
    let conic = [c * inv_det, -(b * inv_det), a * inv_det];

    let dir = linalg::sub(sh_point, center);
    let n = linalg::norm(&dir);
    let dir = linalg::scale(&dir, n.lift(1.0) / n);
    let degree = crate::splat::sh_degree_for(g.sh.len()).unwrap_or(0);
    let rgb = sh_eval_generic(&g.sh, &dir, degree).map(|v| v.clamp_to(0.0, 1.0));
    let alpha = g.logit_opacity.sigmoid();
    Some(ProjVars {
        mean2d,
        cov2d: [a, b, c],
        conic,
        depth: z,
        rgb,
        alpha,
    })
}

/// EWA projection of a (refined) Gaussian; the SH direction starts at the camera centre.
pub fn ewa_project(g: &GaussianPrimitive, index: usize, pose: &PoseW2C, cam: &CameraModel) -> Projection {
    ewa_project_anchored(g, index, &g.mu, pose, cam)
}

/// As [`ewa_project`] but the SH viewing direction is `normalize(anchor − C)`.
pub fn ewa_project_anchored(
    g: &GaussianPrimitive,
    index: usize,
    anchor: &Vec3,
    pose: &PoseW2C,
    cam: &CameraModel,
) -> Projection {
    let vars = PrimVars::from_primitive(g);
    let center = geometry::camera_center(pose);
    match project_chain(&vars, anchor, &center, pose.rotation(), pose.translation(), cam) {
        Some(p) => Projection::Visible(ProjectedGaussian {
            index,
            mean2d: p.mean2d,
            cov2d: p.cov2d,
            conic: p.conic,
            depth: p.depth,
            rgb: p.rgb,
            alpha: p.alpha,
        }),
        None => Projection::Culled,
    }
}

/// Rendered colour plus accumulated opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub image: Image,
    pub alpha: Vec<f64>,
}

/// Depth order with index tie-break.
pub fn depth_order(projected: &[ProjectedGaussian]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| {
        projected[a]
            .depth
            .total_cmp(&projected[b].depth)
            .then(projected[a].index.cmp(&projected[b].index))
    });
    order
}

fn check_covariances(projected: &[ProjectedGaussian]) -> Result<(), RasterError> {
    for p in projected {
        let det = p.cov2d[0] * p.cov2d[2] - p.cov2d[1] * p.cov2d[1];
        if !(det >= SINGULAR_DET) {
            return Err(RasterError::SingularCovariance { index: p.index, det });
        }
    }
    Ok(())
}

/// Front-to-back compositing of one pixel over `list` (positions into `projected`).
#[inline]
fn composite_pixel(
    projected: &[ProjectedGaussian],
    list: &[usize],
    px: f64,
    py: f64,
    background: &Vec3,
) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for &k in list {
        let p = &projected[k];
        if let Some(w) = p.weight_at(px, py) {
            let wt = w * t;
            for c in 0..3 {
                color[c] += p.rgb[c] * wt;
            }
            t *= 1.0 - w;
        }
    }
    for c in 0..3 {
        color[c] = (color[c] + background[c] * t).clamp(0.0, 1.0);
    }
    (color, 1.0 - t)
}

/// Brute-force compositor: every Gaussian at every pixel.
pub fn composite_reference(
    projected: &[ProjectedGaussian],
    cam: &CameraModel,
    background: &Vec3,
) -> Result<RenderedImage, RasterError> {
    check_covariances(projected)?;
    let order = depth_order(projected);
    let (w, h) = (cam.width, cam.height);
    let mut image = Image::new(w, h);
    let mut alpha = vec![0.0; cam.pixel_count()];
    for row in 0..h {
        for col in 0..w {
            let (rgb, a) = composite_pixel(projected, &order, col as f64 + 0.5, row as f64 + 0.5, background);
            image.set_pixel(col, row, rgb);
            alpha[row as usize * w as usize + col as usize] = a;
        }
    }
    Ok(RenderedImage { image, alpha })
}

/// Per-tile lists of positions into the projected array, depth ordered.
#[derive(Debug, Clone)]
pub struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<usize>>,
}

impl TileBins {
    pub fn build(projected: &[ProjectedGaussian], cam: &CameraModel) -> Self {
        let tiles_x = (cam.width as usize).div_ceil(TILE_SIZE);
        let tiles_y = (cam.height as usize).div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for k in depth_order(projected) {
            let p = &projected[k];
            let Some([hx, hy]) = p.extent() else {
                continue;
            };
            // pixel centres at col + 0.5
            let c0 = (p.mean2d[0] - hx - 0.5).ceil().max(0.0);
            let c1 = (p.mean2d[0] + hx - 0.5).floor().min(cam.width as f64 - 1.0);
            let r0 = (p.mean2d[1] - hy - 0.5).ceil().max(0.0);
            let r1 = (p.mean2d[1] + hy - 0.5).floor().min(cam.height as f64 - 1.0);
            if !(c0 <= c1 && r0 <= r1) {
                continue;
            }
            let (tx0, tx1) = (c0 as usize / TILE_SIZE, c1 as usize / TILE_SIZE);
            let (ty0, ty1) = (r0 as usize / TILE_SIZE, r1 as usize / TILE_SIZE);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * tiles_x + tx].push(k);
                }
            }
        }
        Self {
            tiles_x,
            tiles_y,
            lists,
        }
    }

    pub(crate) fn tile_pixels(&self, tile: usize, cam: &CameraModel) -> impl Iterator<Item = (u32, u32)> {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let c0 = (tx * TILE_SIZE) as u32;
        let r0 = (ty * TILE_SIZE) as u32;
        let c1 = ((tx + 1) * TILE_SIZE).min(cam.width as usize) as u32;
        let r1 = ((ty + 1) * TILE_SIZE).min(cam.height as usize) as u32;
        (r0..r1).flat_map(move |r| (c0..c1).map(move |c| (c, r)))
    }
}

/// Tiled compositor; returns the bins for reuse by the backward pass.
pub fn rasterize(
    projected: &[ProjectedGaussian],
    cam: &CameraModel,
    background: &Vec3,
) -> Result<(RenderedImage, TileBins), RasterError> {
    check_covariances(projected)?;
    let bins = TileBins::build(projected, cam);
    let tiles: Vec<Vec<(u32, u32, [f64; 3], f64)>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &bins.lists[tile];
            bins.tile_pixels(tile, cam)
                .map(|(col, row)| {
                    let (rgb, a) = composite_pixel(projected, list, col as f64 + 0.5, row as f64 + 0.5, background);
                    (col, row, rgb, a)
                })
                .collect()
        })
        .collect();
    let mut image = Image::new(cam.width, cam.height);
    let mut alpha = vec![0.0; cam.pixel_count()];
    for (col, row, rgb, a) in tiles.into_iter().flatten() {
        image.set_pixel(col, row, rgb);
        alpha[row as usize * cam.width as usize + col as usize] = a;
    }
    Ok((RenderedImage { image, alpha }, bins))
}

/// Options for [`render`].
#[derive(Debug, Clone, Default)]
pub struct RenderOptions {
    pub background: Vec3,
    /// Per-primitive origin of the SH viewing direction; defaults to each
    /// primitive's own centre.
    pub color_anchors: Option<Vec<Vec3>>,
}

pub fn project_all(
    prims: &[GaussianPrimitive],
    pose: &PoseW2C,
    cam: &CameraModel,
    anchors: Option<&[Vec3]>,
) -> Vec<ProjectedGaussian> {
    prims
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let anchor = anchors.map_or(&g.mu, |a| &a[i]);
            ewa_project_anchored(g, i, anchor, pose, cam).visible()
        })
        .collect()
}

/// Project, bin and composite a list of (refined) Gaussians.
pub fn render(
    prims: &[GaussianPrimitive],
    pose: &PoseW2C,
    cam: &CameraModel,
    opts: &RenderOptions,
) -> Result<RenderedImage, RasterError> {
    let projected = project_all(prims, pose, cam, opts.color_anchors.as_deref());
    Ok(rasterize(&projected, cam, &opts.background)?.0)
}

/// Adjoint of the compositor with respect to one projected Gaussian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProjectedGrad {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub rgb: [f64; 3],
    pub alpha: f64,
}

impl ProjectedGrad {
    fn add(&mut self, o: &ProjectedGrad) {
        for i in 0..2 {
            self.mean2d[i] += o.mean2d[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.rgb[i] += o.rgb[i];
        }
        self.alpha += o.alpha;
    }
}

/// Backward pass of [`rasterize`] given `d_image = ∂L/∂colour` (interleaved
/// RGB). Returns one gradient per entry of `projected`. Per-tile partial sums
/// are reduced in tile order, so the result does not depend on scheduling.
pub fn rasterize_backward(
    projected: &[ProjectedGaussian],
    bins: &TileBins,
    cam: &CameraModel,
    background: &Vec3,
    d_image: &[f64],
) -> Vec<ProjectedGrad> {
    let width = cam.width as usize;
    let partials: Vec<Vec<(usize, ProjectedGrad)>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &bins.lists[tile];
            let mut local = vec![ProjectedGrad::default(); list.len()];
            let mut stack: Vec<(usize, f64, f64)> = Vec::with_capacity(list.len());
            for (col, row) in bins.tile_pixels(tile, cam) {
                let px = col as f64 + 0.5;
                let py = row as f64 + 0.5;
                let pix = row as usize * width + col as usize;
                let g = [d_image[3 * pix], d_image[3 * pix + 1], d_image[3 * pix + 2]];
                if g == [0.0; 3] {
                    continue;
                }
                // forward replay: (slot in list, w, T before this Gaussian)
                stack.clear();
                let mut t = 1.0;
                for (slot, &k) in list.iter().enumerate() {
                    if let Some(w) = projected[k].weight_at(px, py) {
                        stack.push((slot, w, t));
                        t *= 1.0 - w;
                    }
                }
                // behind-colour normalised at T_{i+1}
                let mut behind = *background;
                for &(slot, w, t_i) in stack.iter().rev() {
                    let p = &projected[list[slot]];
                    let gl = &mut local[slot];
                    let mut d_w = 0.0;
                    for c in 0..3 {
                        gl.rgb[c] += g[c] * w * t_i;
                        d_w += g[c] * t_i * (p.rgb[c] - behind[c]);
                    }
                    for c in 0..3 {
                        behind[c] = w * p.rgb[c] + (1.0 - w) * behind[c];
                    }
                    let dx = px - p.mean2d[0];
                    let dy = py - p.mean2d[1];
                    let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
                    let gauss = (-0.5 * q).exp();
                    if p.alpha * gauss >= ALPHA_MAX {
                        continue;
                    }
                    gl.alpha += d_w * gauss;
                    let d_q = d_w * p.alpha * gauss * -0.5;
                    gl.conic[0] += d_q * dx * dx;
                    gl.conic[1] += d_q * 2.0 * dx * dy;
                    gl.conic[2] += d_q * dy * dy;
                    gl.mean2d[0] += d_q * -2.0 * (p.conic[0] * dx + p.conic[1] * dy);
                    gl.mean2d[1] += d_q * -2.0 * (p.conic[1] * dx + p.conic[2] * dy);
                }
            }
            list.iter().copied().zip(local).collect()
        })
        .collect();
    let mut out = vec![ProjectedGrad::default(); projected.len()];
    for tile in partials {
        for (k, g) in tile {
            out[k].add(&g);
        }
    }
    out
}
