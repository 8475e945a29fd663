//! Synthetic desk-scale scenes with genuinely view-dependent appearance.
//!
//! Ground truth is a set of shaded surfels lit by one point light with a
//! Blinn–Phong lobe. Every view recolours the surfels for its own eye
//! position and composites them with the reference compositor, so the only
//! thing a static model cannot reproduce is the view dependence itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, GeometryError, PoseW2C};
use crate::image::Image;
use crate::linalg::{self, Mat3, Vec3};
use crate::raster::{self, RasterError, RenderOptions};
use crate::splat::{GaussianPrimitive, Provenance, SplatScene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("scene spec has no surfaces")]
    EmptySpec,
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    /// Rectangle centred at `center` with half extents along an in-plane basis
    /// derived from `normal`.
    Plane {
        center: Vec3,
        normal: Vec3,
        half_extent: [f64; 2],
        albedo: Vec3,
    },
    Sphere { center: Vec3, radius: f64, albedo: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub position: Vec3,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Specular {
    pub exponent: f64,
    pub strength: f64,
}

impl Default for Specular {
    fn default() -> Self {
        Self {
            exponent: 128.0,
            strength: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub surfaces: Vec<Surface>,
    pub light: Light,
    pub specular: Specular,
    /// Surfels per surface.
    pub gaussian_count: usize,
    /// Radius of each surfel Gaussian as a multiple of the mean sample spacing.
    pub surfel_scale: f64,
    pub surfel_opacity: f64,
    pub background: Vec3,
}

impl SceneSpec {
    /// A floor with two spheres under a light; glossy by default.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            surfaces: vec![
                Surface::Plane {
                    center: [0.0, 0.0, 0.0],
                    normal: [0.0, 0.0, 1.0],
                    half_extent: [1.0, 1.0],
                    albedo: [0.55, 0.45, 0.35],
                },
                Surface::Sphere {
                    center: [-0.35, 0.2, 0.35],
                    radius: 0.35,
                    albedo: [0.2, 0.35, 0.7],
                },
                Surface::Sphere {
                    center: [0.4, -0.3, 0.25],
                    radius: 0.25,
                    albedo: [0.7, 0.25, 0.2],
                },
            ],
            light: Light {
                position: [0.6, 0.8, 2.2],
                intensity: 1.0,
            },
            specular: Specular::default(),
            gaussian_count: 150,
            surfel_scale: 0.6,
            surfel_opacity: 0.85,
            background: [0.0; 3],
        }
    }

    /// The same geometry without a specular lobe.
    pub fn lambertian(seed: u64) -> Self {
        let mut s = Self::desk(seed);
        s.specular.strength = 0.0;
        s
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.surfaces.is_empty() {
            return Err(SynthError::EmptySpec);
        }
        if !(self.specular.exponent > 0.0) {
            return Err(SynthError::InvalidSpec("specular exponent must be > 0".into()));
        }
        if self.gaussian_count == 0 {
            return Err(SynthError::InvalidSpec("gaussian_count must be ≥ 1".into()));
        }
        if !(self.surfel_scale > 0.0) || !(self.surfel_opacity > 0.0 && self.surfel_opacity < 1.0) {
            return Err(SynthError::InvalidSpec("surfel scale/opacity out of range".into()));
        }
        for s in &self.surfaces {
            match s {
                Surface::Plane { normal, half_extent, .. } => {
                    if linalg::norm(normal) < 1e-12 || half_extent.iter().any(|e| !(*e > 0.0)) {
                        return Err(SynthError::InvalidSpec("degenerate plane".into()));
                    }
                }
                Surface::Sphere { radius, .. } => {
                    if !(*radius > 0.0) {
                        return Err(SynthError::InvalidSpec("sphere radius must be > 0".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surfel {
    pub position: Vec3,
    pub normal: Vec3,
    pub albedo: Vec3,
    pub radius: f64,
}

/// Ground-truth surfels plus their lighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtScene {
    pub surfels: Vec<Surfel>,
    pub light: Light,
    pub specular: Specular,
    pub opacity: f64,
    pub surfaces: Vec<Surface>,
}

fn unit(v: &Vec3) -> Vec3 {
    let n = linalg::norm(v);
    linalg::scale(v, 1.0 / n)
}

/// Orthonormal `(u, v)` spanning the plane with normal `n`.
fn plane_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = unit(&linalg::cross(&helper, n));
    let v = linalg::cross(n, &u);
    (u, v)
}

fn surface_area(s: &Surface) -> f64 {
    match s {
        Surface::Plane { half_extent, .. } => 4.0 * half_extent[0] * half_extent[1],
        Surface::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
    }
}

/// Sample surfels uniformly on every surface, deterministically in the seed.
pub fn make_scene(spec: &SceneSpec) -> Result<GtScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = spec.gaussian_count;
    let mut surfels = Vec::with_capacity(count * spec.surfaces.len());
    for s in &spec.surfaces {
        let spacing = (surface_area(s) / count as f64).sqrt();
        let radius = spec.surfel_scale * spacing;
        match *s {
            Surface::Plane {
                center,
                normal,
                half_extent,
                albedo,
            } => {
                let n = unit(&normal);
                let (u, v) = plane_basis(&n);
                for _ in 0..count {
                    let a = rng.random_range(-half_extent[0]..half_extent[0]);
                    let b = rng.random_range(-half_extent[1]..half_extent[1]);
                    let position = linalg::add(&center, &linalg::add(&linalg::scale(&u, a), &linalg::scale(&v, b)));
                    surfels.push(Surfel {
                        position,
                        normal: n,
                        albedo,
                        radius,
                    });
                }
            }
            Surface::Sphere { center, radius: r, albedo } => {
                for _ in 0..count {
                    let d: Vec3 = loop {
                        let g: Vec3 = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                        if linalg::norm(&g) > 1e-6 {
                            break unit(&g);
                        }
                    };
                    surfels.push(Surfel {
                        position: linalg::add(&center, &linalg::scale(&d, r)),
                        normal: d,
                        albedo,
                        radius,
                    });
                }
            }
        }
    }
    Ok(GtScene {
        surfels,
        light: spec.light,
        specular: spec.specular,
        opacity: spec.surfel_opacity,
        surfaces: spec.surfaces.clone(),
    })
}

/// `I·(albedo·max(n·L̂, 0) + k_s·max(n·Ĥ, 0)^e)` for a viewer at `eye`.
pub fn shade(s: &Surfel, light: &Light, spec: &Specular, eye: &Vec3) -> Vec3 {
    let l = unit(&linalg::sub(&light.position, &s.position));
    let v = unit(&linalg::sub(eye, &s.position));
    let h = unit(&linalg::add(&l, &v));
    let diffuse = linalg::dot(&s.normal, &l).max(0.0);
    let spec_term = if spec.strength == 0.0 {
        0.0
    } else {
        spec.strength * linalg::dot(&s.normal, &h).max(0.0).powf(spec.exponent)
    };
    std::array::from_fn(|c| light.intensity * (s.albedo[c] * diffuse + spec_term))
}

/// View-independent part of [`shade`].
pub fn diffuse(s: &Surfel, light: &Light) -> Vec3 {
    let l = unit(&linalg::sub(&light.position, &s.position));
    let d = linalg::dot(&s.normal, &l).max(0.0);
    std::array::from_fn(|c| light.intensity * s.albedo[c] * d)
}

fn surfel_primitive(s: &Surfel, opacity: f64, rgb: Vec3, degree: usize) -> GaussianPrimitive {
    let mut g = GaussianPrimitive::isotropic(s.position, s.radius, opacity, degree);
    g.set_base_color(rgb.map(|c| c.clamp(0.0, 1.0)));
    g
}

/// Ground-truth image: per-view shading of every surfel, composited by the
/// brute-force reference compositor.
pub fn gt_render(gt: &GtScene, pose: &PoseW2C, cam: &CameraModel, background: Vec3) -> Result<Image, SynthError> {
    let eye = pose.center();
    let mut projected = Vec::with_capacity(gt.surfels.len());
    let mut colors = Vec::with_capacity(gt.surfels.len());
    for (i, s) in gt.surfels.iter().enumerate() {
        let g = GaussianPrimitive::isotropic(s.position, s.radius, gt.opacity, 0);
        if let Some(p) = raster::ewa_project(&g, i, pose, cam).visible() {
            projected.push(p);
            colors.push(shade(s, &gt.light, &gt.specular, &eye).map(|c| c.clamp(0.0, 1.0)));
        }
    }
    for (p, c) in projected.iter_mut().zip(colors) {
        p.rgb = c;
    }
    Ok(raster::composite_reference(&projected, cam, &background)?.image)
}

/// Static initialisation: surfels as Gaussians carrying their diffuse colour.
pub fn init_scene(gt: &GtScene, sh_degree: usize) -> SplatScene {
    SplatScene::new(
        gt.surfels
            .iter()
            .map(|s| surfel_primitive(s, gt.opacity, diffuse(s, &gt.light), sh_degree))
            .collect(),
    )
}

/// `(t, normal)` of the nearest ray hit.
fn intersect(surfaces: &[Surface], origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
    let mut best: Option<(f64, Vec3)> = None;
    let mut consider = |t: f64, n: Vec3| {
        if t > 1e-9 && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };
    for s in surfaces {
        match *s {
            Surface::Plane {
                center,
                normal,
                half_extent,
                ..
            } => {
                let n = unit(&normal);
                let denom = linalg::dot(&n, dir);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let t = linalg::dot(&n, &linalg::sub(&center, origin)) / denom;
                let p = linalg::add(origin, &linalg::scale(dir, t));
                let (u, v) = plane_basis(&n);
                let rel = linalg::sub(&p, &center);
                if linalg::dot(&rel, &u).abs() <= half_extent[0] && linalg::dot(&rel, &v).abs() <= half_extent[1] {
                    consider(t, n);
                }
            }
            Surface::Sphere { center, radius, .. } => {
                let oc = linalg::sub(origin, &center);
                let b = linalg::dot(&oc, dir);
                let c = linalg::dot(&oc, &oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    continue;
                }
                let sq = disc.sqrt();
                for t in [-b - sq, -b + sq] {
                    let p = linalg::add(origin, &linalg::scale(dir, t));
                    consider(t, unit(&linalg::sub(&p, &center)));
                }
            }
        }
    }
    best
}

/// Albedo of the surface hit first along a ray.
fn hit_albedo(surfaces: &[Surface], origin: &Vec3, dir: &Vec3) -> Option<(Vec3, Vec3, Vec3)> {
    let (t, n) = intersect(surfaces, origin, dir)?;
    let p = linalg::add(origin, &linalg::scale(dir, t));
    // the hit surface is the one whose own intersection distance equals t
    let albedo = surfaces
        .iter()
        .find(|s| intersect(std::slice::from_ref(*s), origin, dir).is_some_and(|(ts, _)| (ts - t).abs() < 1e-12))
        .map(|s| match s {
            Surface::Plane { albedo, .. } | Surface::Sphere { albedo, .. } => *albedo,
        })?;
    Some((p, n, albedo))
}

/// Gaussians lifted from the pixel centres of each view (every `stride`-th
/// pixel in both directions) by casting rays into the surfaces, with
/// provenance. Colours are the diffuse shading, so rendering the result is
/// view-consistent and exact at the lifting poses.
pub fn lifted_scene(
    gt: &GtScene,
    views: &[(PoseW2C, CameraModel)],
    stride: usize,
    scale: f64,
) -> SplatScene {
    let stride = stride.max(1);
    let mut prims = Vec::new();
    let mut prov = Vec::new();
    for (v, (pose, cam)) in views.iter().enumerate() {
        let c = pose.center();
        let r = pose.rotation();
        for row in (stride / 2..cam.height as usize).step_by(stride) {
            for col in (stride / 2..cam.width as usize).step_by(stride) {
                let u = col as f64 + 0.5;
                let w = row as f64 + 0.5;
                let ray_cam = [(u - cam.cx) / cam.fx, (w - cam.cy) / cam.fy, 1.0];
                let dir = unit(&linalg::mat_t_vec(r, &ray_cam));
                let Some((p, n, albedo)) = hit_albedo(&gt.surfaces, &c, &dir) else {
                    continue;
                };
                // lift along the exact pixel ray so the reprojection is exact
                let depth = linalg::dot(&linalg::sub(&p, &c), &r[2]);
                let on_ray = linalg::add(&c, &linalg::mat_t_vec(r, &linalg::scale(&ray_cam, depth)));
                let s = Surfel {
                    position: on_ray,
                    normal: n,
                    albedo,
                    radius: scale * depth * stride as f64 / cam.fx,
                };
                prims.push(surfel_primitive(&s, gt.opacity, diffuse(&s, &gt.light), 0));
                prov.push(Provenance {
                    view: v,
                    pixel: row * cam.width as usize + col,
                });
            }
        }
    }
    SplatScene {
        primitives: prims,
        provenance: Some(prov),
    }
}

/// Rotation matrix for `angle` radians about unit `axis`.
fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = *axis;
    let k = 1.0 - c;
    [
        [c + x * x * k, x * y * k - z * s, x * z * k + y * s],
        [y * x * k + z * s, c + y * y * k, y * z * k - x * s],
        [z * x * k - y * s, z * y * k + x * s, c + z * z * k],
    ]
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = linalg::norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return linalg::scale(&v, 1.0 / n);
        }
    }
}

/// Rotate the camera by exactly `rot_deg` about a random axis and shift its
/// translation by a random vector of length `trans`.
pub fn perturb_pose(pose: &PoseW2C, rot_deg: f64, trans: f64, rng: &mut ChaCha8Rng) -> Result<PoseW2C, SynthError> {
    let dr = axis_angle(&random_unit(rng), rot_deg.to_radians());
    let dt = linalg::scale(&random_unit(rng), trans);
    let r = linalg::mat_mul(&dr, pose.rotation());
    let t = linalg::add(pose.translation(), &dt);
    Ok(PoseW2C::new(r, t)?.canonical())
}

/// A noiseless pose-recovery problem: a scene lifted from `views` and the
/// images it renders at those (ground-truth) poses.
pub fn pose_problem(
    gt: &GtScene,
    views: &[(PoseW2C, CameraModel)],
    stride: usize,
    scale: f64,
    background: Vec3,
) -> Result<(SplatScene, Vec<Image>), SynthError> {
    let scene = lifted_scene(gt, views, stride, scale);
    let opts = RenderOptions {
        background,
        color_anchors: None,
    };
    let images = views
        .iter()
        .map(|(p, c)| Ok(raster::render(&scene.primitives, p, c, &opts)?.image))
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok((scene, images))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigView {
    pub pose: PoseW2C,
    pub cam: CameraModel,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub views: Vec<RigView>,
}

impl CameraRig {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &RigView> {
        self.views.iter().filter(move |v| v.split == split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub radius: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub target: Vec3,
    pub width: u32,
    pub height: u32,
    pub fov_y_deg: f64,
    pub seed: u64,
}

impl RigSpec {
    pub fn desk(n_train: usize, n_test: usize, size: u32, seed: u64) -> Self {
        Self {
            n_train,
            n_test,
            radius: [2.6, 3.0],
            elevation_deg: [35.0, 50.0],
            target: [0.0, 0.0, 0.2],
            width: size,
            height: size,
            fov_y_deg: 45.0,
            seed,
        }
    }
}

/// Orbit cameras looking at `target`. Train azimuths are evenly spaced from
/// a seed-derived phase; test azimuths sit halfway between train azimuths.
pub fn make_rig(spec: &RigSpec) -> Result<CameraRig, SynthError> {
    if spec.n_train < 2 {
        return Err(SynthError::InvalidSpec("n_train must be ≥ 2".into()));
    }
    if spec.n_test > spec.n_train {
        return Err(SynthError::InvalidSpec("n_test must not exceed n_train".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5249_47);
    let cam = CameraModel::from_fov_y(spec.width, spec.height, spec.fov_y_deg)?;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / spec.n_train as f64;
    let mut sample = |az: f64, split: Split| -> Result<RigView, SynthError> {
        let r = rng.random_range(spec.radius[0]..=spec.radius[1]);
        let el = rng.random_range(spec.elevation_deg[0]..=spec.elevation_deg[1]).to_radians();
        let eye = [
            spec.target[0] + r * el.cos() * az.cos(),
            spec.target[1] + r * el.cos() * az.sin(),
            spec.target[2] + r * el.sin(),
        ];
        Ok(RigView {
            pose: PoseW2C::look_at(eye, spec.target, [0.0, 0.0, 1.0])?.canonical(),
            cam,
            split,
        })
    };
    let mut views = Vec::with_capacity(spec.n_train + spec.n_test);
    for k in 0..spec.n_train {
        views.push(sample(phase + k as f64 * step, Split::Train)?);
    }
    for j in 0..spec.n_test {
        let k = j * spec.n_train / spec.n_test.max(1);
        views.push(sample(phase + (k as f64 + 0.5) * step, Split::Test)?);
    }
    Ok(CameraRig { views })
}

/// Azimuth of a rig camera around `target`, in radians.
pub fn azimuth(pose: &PoseW2C, target: &Vec3) -> f64 {
    let c = pose.center();
    (c[1] - target[1]).atan2(c[0] - target[0])
}

/// Scene, rig and ground-truth images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub rig: CameraRig,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, rig_spec: &RigSpec) -> Result<(Self, GtScene), SynthError> {
        let gt = make_scene(spec)?;
        let rig = make_rig(rig_spec)?;
        let images = rig
            .views
            .par_iter()
            .map(|v| gt_render(&gt, &v.pose, &v.cam, spec.background))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((
            Self {
                spec: spec.clone(),
                rig,
                images,
            },
            gt,
        ))
    }

    /// Indices of the views in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.rig.views.len()).filter(|&i| self.rig.views[i].split == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    fn one_plane(count: usize) -> SceneSpec {
        SceneSpec {
            surfaces: vec![Surface::Plane {
                center: [0.0; 3],
                normal: [0.0, 0.0, 1.0],
                half_extent: [0.5, 0.5],
                albedo: [0.5; 3],
            }],
            gaussian_count: count,
            ..SceneSpec::desk(1)
        }
    }

    #[test]
    fn plane_surfels_share_normal() {
        let gt = make_scene(&one_plane(100)).unwrap();
        assert_eq!(gt.surfels.len(), 100);
        assert!(gt.surfels.iter().all(|s| s.normal == [0.0, 0.0, 1.0]));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        assert_eq!(make_scene(&SceneSpec::desk(3)).unwrap(), make_scene(&SceneSpec::desk(3)).unwrap());
        assert_ne!(make_scene(&SceneSpec::desk(3)).unwrap(), make_scene(&SceneSpec::desk(4)).unwrap());
        let r = RigSpec::desk(8, 4, 32, 5);
        assert_eq!(make_rig(&r).unwrap(), make_rig(&r).unwrap());
    }

    #[test]
    fn sphere_surfels_lie_on_sphere() {
        let gt = make_scene(&SceneSpec::desk(2)).unwrap();
        let Surface::Sphere { center, radius, .. } = SceneSpec::desk(2).surfaces[1] else {
            unreachable!()
        };
        let n = SceneSpec::desk(2).gaussian_count;
        for s in &gt.surfels[n..2 * n] {
            let d = linalg::norm(&linalg::sub(&s.position, &center));
            assert!((d - radius).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_and_invalid_specs() {
        let mut s = SceneSpec::desk(0);
        s.surfaces.clear();
        assert_eq!(make_scene(&s), Err(SynthError::EmptySpec));
        let mut s = SceneSpec::desk(0);
        s.specular.exponent = 0.0;
        assert!(matches!(make_scene(&s), Err(SynthError::InvalidSpec(_))));
    }

    #[test]
    fn sharp_lobe_only_at_mirror_direction() {
        let s = Surfel {
            position: [0.0; 3],
            normal: [0.0, 0.0, 1.0],
            albedo: [0.0; 3],
            radius: 0.1,
        };
        let light = Light {
            position: [1.0, 0.0, 1.0],
            intensity: 1.0,
        };
        let spec = Specular {
            exponent: 1e7,
            strength: 1.0,
        };
        let mirror = shade(&s, &light, &spec, &[-1.0, 0.0, 1.0]);
        assert!((mirror[0] - 1.0).abs() < 1e-9);
        let off = shade(&s, &light, &spec, &[-1.0, 0.2, 1.0]);
        assert!(off[0] < 1e-12);
    }

    #[test]
    fn lambertian_is_view_independent() {
        let gt = make_scene(&SceneSpec::lambertian(3)).unwrap();
        for s in gt.surfels.iter().take(50) {
            let a = shade(s, &gt.light, &gt.specular, &[3.0, 0.0, 2.0]);
            let b = shade(s, &gt.light, &gt.specular, &[-1.0, 2.5, 1.0]);
            assert_eq!(a, b);
            assert_eq!(a, diffuse(s, &gt.light));
        }
    }

    #[test]
    fn mirrored_cameras_give_mirrored_highlights() {
        // plane symmetric about x = 0 with the light on that plane
        let mut gt = make_scene(&one_plane(300)).unwrap();
        gt.light.position = [0.0, 0.4, 1.5];
        let mirrored: Vec<Surfel> = gt
            .surfels
            .iter()
            .map(|s| Surfel {
                position: [-s.position[0], s.position[1], s.position[2]],
                ..*s
            })
            .collect();
        gt.surfels.extend(mirrored);
        let cam = CameraModel::from_fov_y(32, 32, 50.0).unwrap();
        let a = PoseW2C::look_at([1.2, -1.5, 1.4], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        let b = PoseW2C::look_at([-1.2, -1.5, 1.4], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        let ia = gt_render(&gt, &a, &cam, [0.0; 3]).unwrap();
        let ib = gt_render(&gt, &b, &cam, [0.0; 3]).unwrap();
        assert!(ia.max_abs_diff(&ib.flip_horizontal()) < 1e-4);
        assert!(ia.max_abs_diff(&ib) > 1e-3);
    }

    #[test]
    fn rig_spacing_and_centering() {
        let spec = RigSpec::desk(8, 4, 64, 9);
        let rig = make_rig(&spec).unwrap();
        let train: Vec<&RigView> = rig.split(Split::Train).collect();
        assert_eq!(train.len(), 8);
        for w in train.windows(2) {
            let d = (azimuth(&w[1].pose, &spec.target) - azimuth(&w[0].pose, &spec.target)).rem_euclid(std::f64::consts::TAU);
            assert!((d.to_degrees() - 45.0).abs() < 1e-9);
        }
        for v in &rig.views {
            let p = project(&v.cam, &v.pose, &spec.target).unwrap();
            assert!((p[0] - 32.0).abs() < 3.2 && (p[1] - 32.0).abs() < 3.2);
        }
        // test azimuths are not train azimuths
        for t in rig.split(Split::Test) {
            let at = azimuth(&t.pose, &spec.target);
            for tr in &train {
                let d = (at - azimuth(&tr.pose, &spec.target)).rem_euclid(std::f64::consts::TAU);
                assert!(d.min(std::f64::consts::TAU - d).to_degrees() > 1.0);
            }
        }
    }

    #[test]
    fn specular_surfels_are_not_statically_representable() {
        let spec = SceneSpec::desk(4);
        let gt = make_scene(&spec).unwrap();
        let rig = make_rig(&RigSpec::desk(8, 0, 16, 4)).unwrap();
        let eyes: Vec<Vec3> = rig.views.iter().map(|v| v.pose.center()).collect();
        // best constant colour per surfel is the mean over views
        let mut residual = 0.0;
        let mut count = 0;
        for s in &gt.surfels {
            let cols: Vec<Vec3> = eyes.iter().map(|e| shade(s, &gt.light, &gt.specular, e)).collect();
            let spread = cols.iter().map(|c| c[0]).fold(0.0, f64::max) - cols.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
            if spread > 0.05 {
                let mean: Vec3 = std::array::from_fn(|k| cols.iter().map(|c| c[k]).sum::<f64>() / cols.len() as f64);
                residual += cols.iter().map(|c| (0..3).map(|k| (c[k] - mean[k]).abs()).sum::<f64>() / 3.0).sum::<f64>();
                count += cols.len();
            }
        }
        assert!(count > 0);
        assert!(residual / count as f64 > 1e-3);
    }

    #[test]
    fn lifted_scene_reprojects_exactly() {
        let gt = make_scene(&SceneSpec::lambertian(5)).unwrap();
        let rig = make_rig(&RigSpec::desk(3, 0, 32, 5)).unwrap();
        let views: Vec<(PoseW2C, CameraModel)> = rig.views.iter().map(|v| (v.pose, v.cam)).collect();
        let scene = lifted_scene(&gt, &views, 4, 1.0);
        assert!(scene.len() > 50);
        let poses: Vec<PoseW2C> = views.iter().map(|v| v.0).collect();
        let cams: Vec<CameraModel> = views.iter().map(|v| v.1).collect();
        let l = crate::objectives::reprojection_loss(&scene, &poses, &cams, &Default::default()).unwrap();
        assert!(l < 1e-9, "{l}");
    }

    #[test]
    fn init_scene_matches_lambertian_ground_truth() {
        let gt = make_scene(&SceneSpec::lambertian(6)).unwrap();
        let rig = make_rig(&RigSpec::desk(2, 0, 24, 6)).unwrap();
        let scene = init_scene(&gt, 2);
        for v in &rig.views {
            let a = gt_render(&gt, &v.pose, &v.cam, [0.0; 3]).unwrap();
            let b = raster::render(&scene.primitives, &v.pose, &v.cam, &Default::default()).unwrap().image;
            assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }
}
