//! Python bindings. Images cross the boundary as flat row-major RGB lists of
//! length `height * width * 3`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use vasplat::geometry::{CameraModel, PoseMode, PoseW2C};
use vasplat::image::Image;
use vasplat::io;
use vasplat::model::Model;
use vasplat::objectives;
use vasplat::splat::SplatScene;
use vasplat::synth::{self, RigSpec, SceneSpec, Split};
use vasplat::train::{self, Frame, TrainConfig};
use vasplat::view_adapt::{HyperNet, OffsetComponents, RefineConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Pose", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyPose(pub PoseW2C);

#[pymethods]
impl PyPose {
    #[staticmethod]
    fn identity() -> Self {
        Self(PoseW2C::identity())
    }

    #[staticmethod]
    #[pyo3(signature = (eye, target, up = [0.0, 1.0, 0.0]))]
    fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> PyResult<Self> {
        PoseW2C::look_at(eye, target, up).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_6d(v: [f64; 6], t: [f64; 3]) -> PyResult<Self> {
        PoseW2C::from_6d(&v, t).map(Self).map_err(err)
    }

    fn to_6d(&self) -> [f64; 6] {
        self.0.to_6d()
    }

    fn translation(&self) -> [f64; 3] {
        *self.0.translation()
    }

    fn center(&self) -> [f64; 3] {
        self.0.center()
    }

    fn rotation_error_deg(&self, other: &PyPose) -> f64 {
        self.0.rotation_error_deg(&other.0)
    }
}

#[pyclass(name = "Camera", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyCamera(pub CameraModel);

#[pymethods]
impl PyCamera {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> PyResult<Self> {
        CameraModel::new(fx, fy, cx, cy, width, height).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_fov_y(width: u32, height: u32, fov_y_deg: f64) -> PyResult<Self> {
        CameraModel::from_fov_y(width, height, fov_y_deg).map(Self).map_err(err)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height
    }
}

#[pyclass(name = "Scene", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyScene(pub SplatScene);

#[pymethods]
impl PyScene {
    #[staticmethod]
    #[pyo3(signature = (path, sh_degree = None))]
    fn read_ply(path: PathBuf, sh_degree: Option<usize>) -> PyResult<Self> {
        io::read_ply(&path, sh_degree).map(Self).map_err(err)
    }

    fn write_ply(&self, path: PathBuf) -> PyResult<()> {
        io::write_ply(&path, &self.0).map_err(err)
    }

    /// Ground-truth-initialised scene of a synthetic spec.
    #[staticmethod]
    #[pyo3(signature = (kind = "desk", seed = 0, gaussians = 150, sh_degree = 4))]
    fn synthetic(kind: &str, seed: u64, gaussians: usize, sh_degree: usize) -> PyResult<Self> {
        let mut spec = scene_spec(kind, seed)?;
        spec.gaussian_count = gaussians;
        let gt = synth::make_scene(&spec).map_err(err)?;
        Ok(Self(synth::init_scene(&gt, sh_degree)))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.0.sh_degree()
    }

    fn means(&self) -> Vec<[f64; 3]> {
        self.0.primitives.iter().map(|g| g.mu).collect()
    }
}

fn scene_spec(kind: &str, seed: u64) -> PyResult<SceneSpec> {
    match kind {
        "desk" => Ok(SceneSpec::desk(seed)),
        "lambertian" => Ok(SceneSpec::lambertian(seed)),
        other => Err(err(format!("unknown scene kind '{other}'"))),
    }
}

#[pyclass(name = "Model", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel(pub Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn static_only(scene: &PyScene) -> Self {
        Self(Model::static_only(scene.0.clone()))
    }

    /// Attach a freshly initialised view-adaptive head.
    #[staticmethod]
    #[pyo3(signature = (scene, hidden_dim = 16, seed = 0, offsets = "all", pose_mode = "log"))]
    fn with_head(scene: &PyScene, hidden_dim: usize, seed: u64, offsets: &str, pose_mode: &str) -> PyResult<Self> {
        let cfg = TrainConfig {
            hidden_dim,
            sh_degree: scene.0.sh_degree(),
            ..Default::default()
        }
        .hyper_config();
        let refine = RefineConfig {
            enabled: offsets.parse::<OffsetComponents>().map_err(err)?,
            pose_mode: pose_mode.parse::<PoseMode>().map_err(err)?,
            ..Default::default()
        };
        let head = HyperNet::new(scene.0.len(), cfg, seed);
        Model::with_hyper(scene.0.clone(), head, refine).map(Self).map_err(err)
    }

    #[staticmethod]
    fn read_checkpoint(path: PathBuf) -> PyResult<Self> {
        io::read_checkpoint(&path, None).map(|c| Self(c.model)).map_err(err)
    }

    #[pyo3(signature = (path, seed = 0))]
    fn write_checkpoint(&self, path: PathBuf, seed: u64) -> PyResult<()> {
        let ck = io::Checkpoint {
            model: self.0.clone(),
            seed,
            optimizer: None,
        };
        io::write_checkpoint(&path, &ck).map_err(err)
    }

    #[getter]
    fn is_adaptive(&self) -> bool {
        self.0.is_adaptive()
    }

    #[getter]
    fn scene(&self) -> PyScene {
        PyScene(self.0.scene.clone())
    }

    #[pyo3(signature = (pose, camera, static_only = false, background = [0.0, 0.0, 0.0]))]
    fn render(&self, pose: &PyPose, camera: &PyCamera, static_only: bool, background: [f64; 3]) -> PyResult<Vec<f64>> {
        let out = if static_only {
            self.0.render_static(&pose.0, &camera.0, background)
        } else {
            self.0.render(&pose.0, &camera.0, background)
        };
        out.map(|r| r.image.data).map_err(err)
    }
}

fn to_image(data: Vec<f64>, width: u32, height: u32) -> PyResult<Image> {
    if data.len() != width as usize * height as usize * 3 {
        return Err(err(format!("expected {} values, got {}", width * height * 3, data.len())));
    }
    Ok(Image { width, height, data })
}

#[pyfunction]
fn psnr(pred: Vec<f64>, gt: Vec<f64>, width: u32, height: u32) -> PyResult<f64> {
    let m = objectives::mse(&to_image(pred, width, height)?, &to_image(gt, width, height)?).map_err(err)?;
    Ok(objectives::psnr_from_mse(m))
}

#[pyfunction]
fn ssim(pred: Vec<f64>, gt: Vec<f64>, width: u32, height: u32) -> PyResult<f64> {
    objectives::ssim(&to_image(pred, width, height)?, &to_image(gt, width, height)?).map_err(err)
}

/// Generate a synthetic dataset directory.
#[pyfunction]
#[pyo3(signature = (out, kind = "desk", seed = 0, gaussians = 150, train_views = 48, test_views = 24, size = 48))]
fn synth_dataset(
    out: PathBuf,
    kind: &str,
    seed: u64,
    gaussians: usize,
    train_views: usize,
    test_views: usize,
    size: u32,
) -> PyResult<usize> {
    let mut spec = scene_spec(kind, seed)?;
    spec.gaussian_count = gaussians;
    let (ds, _) = synth::Dataset::generate(&spec, &RigSpec::desk(train_views, test_views, size, seed)).map_err(err)?;
    io::write_dataset(&out, &ds).map_err(err)?;
    Ok(ds.images.len())
}

fn split_frames(ds: &synth::Dataset, split: Split) -> Vec<Frame<'_>> {
    ds.indices(split)
        .into_iter()
        .map(|i| Frame {
            pose: &ds.rig.views[i].pose,
            cam: &ds.rig.views[i].cam,
            image: &ds.images[i],
        })
        .collect()
}

/// Static fit from the dataset's ground-truth initialisation.
#[pyfunction]
#[pyo3(signature = (data, steps = 100, batch = 4, seed = 0, sh_degree = 4))]
fn fit_static(data: PathBuf, steps: usize, batch: usize, seed: u64, sh_degree: usize) -> PyResult<PyModel> {
    let ds = io::read_dataset(&data).map_err(err)?;
    let gt = synth::make_scene(&ds.spec).map_err(err)?;
    let cfg = TrainConfig {
        steps,
        batch: (batch > 0).then_some(batch),
        seed,
        sh_degree,
        background: ds.spec.background,
        ..Default::default()
    };
    let init = synth::init_scene(&gt, sh_degree);
    train::fit_static(&init, &split_frames(&ds, Split::Train), &cfg)
        .map(|o| PyModel(o.model))
        .map_err(err)
}

/// Fit a view-adaptive head on a frozen base.
#[pyfunction]
#[pyo3(signature = (base, data, steps = 100, batch = 4, seed = 0, lr = 3e-5, hidden_dim = 16))]
fn fit_view(base: &PyModel, data: PathBuf, steps: usize, batch: usize, seed: u64, lr: f64, hidden_dim: usize) -> PyResult<PyModel> {
    let ds = io::read_dataset(&data).map_err(err)?;
    let cfg = TrainConfig {
        steps,
        batch: (batch > 0).then_some(batch),
        seed,
        lr,
        hidden_dim,
        sh_degree: base.0.scene.sh_degree(),
        background: ds.spec.background,
        ..Default::default()
    };
    train::fit_view(&base.0.scene, &split_frames(&ds, Split::Train), &cfg)
        .map(|o| PyModel(o.model))
        .map_err(err)
}

/// Mean (psnr, ssim, mse) over a split ("train" or "test").
#[pyfunction]
#[pyo3(signature = (model, data, split = "test"))]
fn evaluate(model: &PyModel, data: PathBuf, split: &str) -> PyResult<(f64, f64, f64)> {
    let ds = io::read_dataset(&data).map_err(err)?;
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(err(format!("unknown split '{other}'"))),
    };
    let m = train::evaluate(&model.0, &split_frames(&ds, split), ds.spec.background).map_err(err)?;
    Ok((m.psnr, m.ssim, m.mse))
}

#[pymodule]
#[pyo3(name = "vasplat")]
fn vasplat_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fit_static, m)?)?;
    m.add_function(wrap_pyfunction!(fit_view, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
