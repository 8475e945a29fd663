//! A base scene plus its optional view-adaptive head, rendered as one unit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, GeometryError, PoseW2C};
use crate::linalg::Vec3;
use crate::raster::{self, RasterError, RenderOptions, RenderedImage};
use crate::splat::{GaussianPrimitive, SplatScene};
use crate::view_adapt::{
    refine_with_weights, ColorAnchor, GeneratedWeights, HyperNet, RefineConfig, ViewAdaptError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    ViewAdapt(#[from] ViewAdaptError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub scene: SplatScene,
    pub hyper: Option<HyperNet>,
    pub refine: RefineConfig,
}

impl Model {
    pub fn static_only(scene: SplatScene) -> Self {
        Self {
            scene,
            hyper: None,
            refine: RefineConfig::default(),
        }
    }

    pub fn with_hyper(scene: SplatScene, hyper: HyperNet, refine: RefineConfig) -> Result<Self, ViewAdaptError> {
        if scene.len() != hyper.len() {
            return Err(ViewAdaptError::SizeMismatch {
                scene: scene.len(),
                hypernet: hyper.len(),
            });
        }
        Ok(Self {
            scene,
            hyper: Some(hyper),
            refine,
        })
    }

    /// True when rendering goes through the view MLP at all.
    pub fn is_adaptive(&self) -> bool {
        self.hyper.is_some() && self.refine.enabled.any()
    }

    pub fn generate(&self) -> Option<GeneratedWeights> {
        self.is_adaptive().then(|| self.hyper.as_ref().map(HyperNet::generate_all)).flatten()
    }

    /// Gaussians as seen from `pose`. Static models return the base unchanged.
    pub fn refined(&self, weights: Option<&GeneratedWeights>, pose: &PoseW2C) -> Result<Vec<GaussianPrimitive>, ModelError> {
        match weights {
            Some(w) if self.is_adaptive() => Ok(refine_with_weights(&self.scene, w, pose, &self.refine)?),
            _ => Ok(self.scene.primitives.clone()),
        }
    }

    pub(crate) fn color_anchors(&self) -> Option<Vec<Vec3>> {
        (self.is_adaptive() && self.refine.color_anchor == ColorAnchor::Base)
            .then(|| self.scene.primitives.iter().map(|g| g.mu).collect())
    }

    /// Render one view; `weights` may be precomputed with [`Model::generate`].
    pub fn render_with(
        &self,
        weights: Option<&GeneratedWeights>,
        pose: &PoseW2C,
        cam: &CameraModel,
        background: Vec3,
    ) -> Result<RenderedImage, ModelError> {
        let prims = self.refined(weights, pose)?;
        let opts = RenderOptions {
            background,
            color_anchors: self.color_anchors(),
        };
        Ok(raster::render(&prims, pose, cam, &opts)?)
    }

    pub fn render(&self, pose: &PoseW2C, cam: &CameraModel, background: Vec3) -> Result<RenderedImage, ModelError> {
        self.render_with(self.generate().as_ref(), pose, cam, background)
    }

    /// Render bypassing the view-adaptive head.
    pub fn render_static(&self, pose: &PoseW2C, cam: &CameraModel, background: Vec3) -> Result<RenderedImage, ModelError> {
        self.render_with(None, pose, cam, background)
    }
}

/// A camera pose as optimised: 6D rotation latent plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub rot6d: [f64; 6],
    pub t: Vec3,
}

impl PoseParams {
    pub fn from_pose(p: &PoseW2C) -> Self {
        Self {
            rot6d: p.to_6d(),
            t: *p.translation(),
        }
    }

    pub fn to_pose(&self) -> Result<PoseW2C, GeometryError> {
        PoseW2C::from_6d(&self.rot6d, self.t)
    }
}
