//! Hypernetwork-generated view MLPs and pose-conditioned residual refinement.
//!
//! Every Gaussian owns a learned context vector. A shared two-layer
//! generator maps it to the flat parameter vector `θ` of a tiny view MLP
//! (`4 → D → M`). At render time the MLP reads the 4D pose feature of the
//! target camera and emits residual offsets for every attribute, which are
//! added to the base Gaussian before rasterisation.
//!
//! Layout of `θ`: `W1` (D×4, row-major), `b1` (D), `W2` (M×D, row-major), `b2` (M).
//! Layout of the MLP output: `Δμ`(3), `Δα`(1), `Δr`(4), `Δs`(3), `Δc`(3 per SH
//! coefficient, coefficient-major).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{logit, sigmoid, Real};
use crate::geometry::{pose_feature_4d, PoseMode, PoseW2C, ViewFeature4D};
use crate::linalg::Vec3;
use crate::splat::{sh_coeff_count, GaussianPrimitive, SplatScene};

pub const DEFAULT_VIEW_HIDDEN: usize = 16;
pub const DEFAULT_FEATURE_DIM: usize = 32;
pub const DEFAULT_GEN_HIDDEN: usize = 64;
const ROT_FALLBACK_NORM: f64 = 1e-8;
const RAW_OPACITY_MARGIN: f64 = 1e-4;
const RAW_SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewAdaptError {
    #[error("scene has {scene} primitives but the hypernetwork has {hypernet} context features")]
    SizeMismatch { scene: usize, hypernet: usize },
    #[error("Gaussian index {index} out of range for {len} context features")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("scene SH degree {scene} does not match the hypernetwork's degree {hypernet}")]
    DegreeMismatch { scene: usize, hypernet: usize },
    #[error("unknown offset component '{0}' (expected mu, alpha, rot, scale, sh)")]
    UnknownComponent(String),
}

/// Which residual offsets are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OffsetComponents {
    pub mu: bool,
    pub alpha: bool,
    pub rot: bool,
    pub scale: bool,
    pub sh: bool,
}

impl Default for OffsetComponents {
    fn default() -> Self {
        Self::all()
    }
}

impl OffsetComponents {
    pub const fn all() -> Self {
        Self {
            mu: true,
            alpha: true,
            rot: true,
            scale: true,
            sh: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            mu: false,
            alpha: false,
            rot: false,
            scale: false,
            sh: false,
        }
    }

    pub fn any(&self) -> bool {
        self.mu || self.alpha || self.rot || self.scale || self.sh
    }

    /// The six offset-subset rows of the refinement-component ablation, with labels.
    pub fn ablation_rows() -> Vec<(&'static str, Self)> {
        let rsc = |mu, alpha| Self {
            mu,
            alpha,
            rot: true,
            scale: true,
            sh: true,
        };
        vec![
            ("baseline", Self::none()),
            (
                "mu_alpha_only",
                Self {
                    mu: true,
                    alpha: true,
                    ..Self::none()
                },
            ),
            ("rsc_only", rsc(false, false)),
            ("without_alpha", rsc(true, false)),
            ("without_mu", rsc(false, true)),
            ("full", Self::all()),
        ]
    }

    /// Mask for one output slot of the view MLP.
    pub(crate) fn slot_enabled(&self, slot: usize) -> bool {
        match slot {
            0..=2 => self.mu,
            3 => self.alpha,
            4..=7 => self.rot,
            8..=10 => self.scale,
            _ => self.sh,
        }
    }
}

impl std::str::FromStr for OffsetComponents {
    type Err = ViewAdaptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Self::none();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "mu" => out.mu = true,
                "alpha" => out.alpha = true,
                "rot" => out.rot = true,
                "scale" => out.scale = true,
                "sh" => out.sh = true,
                "all" => out = Self::all(),
                "none" => {}
                other => return Err(ViewAdaptError::UnknownComponent(other.to_string())),
            }
        }
        Ok(out)
    }
}

impl std::fmt::Display for OffsetComponents {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = [
            (self.mu, "mu"),
            (self.alpha, "alpha"),
            (self.rot, "rot"),
            (self.scale, "scale"),
            (self.sh, "sh"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// Which SH coefficients receive colour offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ColorOffsetMode {
    #[default]
    AllBands,
    DcOnly,
}

/// Space in which opacity and scale offsets are added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetSpace {
    /// Add to logit opacity and log scale.
    #[default]
    PreActivation,
    /// Add to activated opacity / scale, then clamp back into the valid range.
    RawClamped,
}

/// Point used as the origin of the SH viewing direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ColorAnchor {
    #[default]
    Refined,
    Base,
}

/// Shape of one view MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewMlpLayout {
    pub hidden: usize,
    pub sh_coeffs: usize,
    pub color_mode: ColorOffsetMode,
}

pub const INPUT_DIM: usize = 4;
/// Offset slots before the colour block.
pub const GEOMETRY_SLOTS: usize = 11;

impl ViewMlpLayout {
    pub fn new(hidden: usize, sh_degree: usize, color_mode: ColorOffsetMode) -> Self {
        Self {
            hidden,
            sh_coeffs: sh_coeff_count(sh_degree),
            color_mode,
        }
    }

    /// Number of SH coefficients that get offsets.
    pub fn color_coeffs(&self) -> usize {
        match self.color_mode {
            ColorOffsetMode::AllBands => self.sh_coeffs,
            ColorOffsetMode::DcOnly => 1,
        }
    }

    pub fn out_dim(&self) -> usize {
        GEOMETRY_SLOTS + 3 * self.color_coeffs()
    }

    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let m = self.out_dim();
        INPUT_DIM * d + d + m * d + m
    }

    pub(crate) fn w1_range(&self) -> std::ops::Range<usize> {
        0..INPUT_DIM * self.hidden
    }
    pub(crate) fn b1_range(&self) -> std::ops::Range<usize> {
        let s = INPUT_DIM * self.hidden;
        s..s + self.hidden
    }
    pub(crate) fn w2_range(&self) -> std::ops::Range<usize> {
        let s = (INPUT_DIM + 1) * self.hidden;
        s..s + self.out_dim() * self.hidden
    }
    pub(crate) fn b2_range(&self) -> std::ops::Range<usize> {
        let s = (INPUT_DIM + 1) * self.hidden + self.out_dim() * self.hidden;
        s..s + self.out_dim()
    }
}

/// Parameters of one view MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMlpWeights {
    pub layout: ViewMlpLayout,
    pub params: Vec<f64>,
}

impl ViewMlpWeights {
    pub fn zeros(layout: ViewMlpLayout) -> Self {
        Self {
            layout,
            params: vec![0.0; layout.param_count()],
        }
    }

    pub fn w1(&self) -> &[f64] {
        &self.params[self.layout.w1_range()]
    }
    pub fn b1(&self) -> &[f64] {
        &self.params[self.layout.b1_range()]
    }
    pub fn w2(&self) -> &[f64] {
        &self.params[self.layout.w2_range()]
    }
    pub fn b2(&self) -> &[f64] {
        &self.params[self.layout.b2_range()]
    }
    pub fn w1_mut(&mut self) -> &mut [f64] {
        let r = self.layout.w1_range();
        &mut self.params[r]
    }
    pub fn w2_mut(&mut self) -> &mut [f64] {
        let r = self.layout.w2_range();
        &mut self.params[r]
    }
    pub fn b1_mut(&mut self) -> &mut [f64] {
        let r = self.layout.b1_range();
        &mut self.params[r]
    }
    pub fn b2_mut(&mut self) -> &mut [f64] {
        let r = self.layout.b2_range();
        &mut self.params[r]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// Residual offsets for one Gaussian at one target view.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetVector {
    pub d_mu: Vec3,
    pub d_alpha: f64,
    pub d_rot: [f64; 4],
    pub d_scale: Vec3,
    /// One entry per stored SH coefficient; only the DC entry is used in dc-only mode.
    pub d_sh: Vec<[f64; 3]>,
}

impl OffsetVector {
    pub fn zeros(sh_coeffs: usize) -> Self {
        Self {
            d_mu: [0.0; 3],
            d_alpha: 0.0,
            d_rot: [0.0; 4],
            d_scale: [0.0; 3],
            d_sh: vec![[0.0; 3]; sh_coeffs],
        }
    }

    pub fn from_raw(raw: &[f64], layout: &ViewMlpLayout) -> Self {
        Self::from_slots(raw.iter().copied(), layout)
    }

    fn from_slots(raw: impl Iterator<Item = f64>, layout: &ViewMlpLayout) -> Self {
        let raw: Vec<f64> = raw.collect();
        let mut o = Self::zeros(layout.sh_coeffs);
        o.d_mu.copy_from_slice(&raw[0..3]);
        o.d_alpha = raw[3];
        o.d_rot.copy_from_slice(&raw[4..8]);
        o.d_scale.copy_from_slice(&raw[8..11]);
        for k in 0..layout.color_coeffs() {
            for c in 0..3 {
                o.d_sh[k][c] = raw[GEOMETRY_SLOTS + 3 * k + c];
            }
        }
        o
    }

    pub fn is_finite(&self) -> bool {
        self.d_mu.iter().all(|v| v.is_finite())
            && self.d_alpha.is_finite()
            && self.d_rot.iter().all(|v| v.is_finite())
            && self.d_scale.iter().all(|v| v.is_finite())
            && self.d_sh.iter().flatten().all(|v| v.is_finite())
    }
}

/// Raw view MLP forward: fills `hidden` (post-ReLU) and `out`.
pub(crate) fn mlp_forward_raw(
    theta: &[f64],
    layout: &ViewMlpLayout,
    x: &[f64; INPUT_DIM],
    hidden: &mut [f64],
    out: &mut [f64],
) {
    let d = layout.hidden;
    let m = layout.out_dim();
    let w1 = &theta[layout.w1_range()];
    let b1 = &theta[layout.b1_range()];
    let w2 = &theta[layout.w2_range()];
    let b2 = &theta[layout.b2_range()];
    for j in 0..d {
        let row = &w1[j * INPUT_DIM..(j + 1) * INPUT_DIM];
        let pre = b1[j] + row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + row[3] * x[3];
        hidden[j] = if pre > 0.0 { pre } else { 0.0 };
    }
    for o in 0..m {
        let row = &w2[o * d..(o + 1) * d];
        out[o] = b2[o] + row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Adjoint of [`mlp_forward_raw`]; accumulates into `d_theta` and `d_x`.
/// `d_out` entries of masked slots must already be zero.
pub(crate) fn mlp_backward_raw(
    theta: &[f64],
    layout: &ViewMlpLayout,
    x: &[f64; INPUT_DIM],
    hidden: &[f64],
    d_out: &[f64],
    d_theta: &mut [f64],
    d_x: &mut [f64; INPUT_DIM],
) {
    let d = layout.hidden;
    let m = layout.out_dim();
    let w1 = &theta[layout.w1_range()];
    let w2 = &theta[layout.w2_range()];
    let mut d_hidden = vec![0.0; d];
    {
        let (off_w2, off_b2) = (layout.w2_range().start, layout.b2_range().start);
        for o in 0..m {
            let g = d_out[o];
            if g == 0.0 {
                continue;
            }
            d_theta[off_b2 + o] += g;
            let row = &w2[o * d..(o + 1) * d];
            for j in 0..d {
                d_theta[off_w2 + o * d + j] += g * hidden[j];
                d_hidden[j] += g * row[j];
            }
        }
    }
    let (off_w1, off_b1) = (layout.w1_range().start, layout.b1_range().start);
    for j in 0..d {
        // ReLU: hidden > 0 iff pre-activation > 0; subgradient 0 at the kink
        if hidden[j] <= 0.0 || d_hidden[j] == 0.0 {
            continue;
        }
        let g = d_hidden[j];
        d_theta[off_b1 + j] += g;
        for i in 0..INPUT_DIM {
            d_theta[off_w1 + j * INPUT_DIM + i] += g * x[i];
            d_x[i] += g * w1[j * INPUT_DIM + i];
        }
    }
}

/// `out = W2·ReLU(W1·[u; l] + b1) + b2`, split into offset components.
pub fn view_mlp_forward(theta: &ViewMlpWeights, feat: &ViewFeature4D) -> OffsetVector {
    let layout = theta.layout;
    let mut hidden = vec![0.0; layout.hidden];
    let mut out = vec![0.0; layout.out_dim()];
    mlp_forward_raw(&theta.params, &layout, &feat.as_array(), &mut hidden, &mut out);
    OffsetVector::from_raw(&out, &layout)
}

/// How the generator's output layer is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HyperInit {
    /// Rows producing the view MLP output layer (`W2`, `b2`) are zero; rows
    /// producing its hidden layer are random, so offsets start at exactly zero
    /// while the hidden units are alive and `W2` receives gradient.
    #[default]
    ZeroOutput,
    /// Every output row is zero, so `θ = 0`. With a ReLU hidden layer only
    /// `b2` can ever move away from zero: no view dependence is learnable.
    FullZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    pub feature_dim: usize,
    pub gen_hidden: usize,
    pub view_hidden: usize,
    pub sh_degree: usize,
    pub color_mode: ColorOffsetMode,
    pub init: HyperInit,
}

impl HyperNetConfig {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            feature_dim: DEFAULT_FEATURE_DIM,
            gen_hidden: DEFAULT_GEN_HIDDEN,
            view_hidden: DEFAULT_VIEW_HIDDEN,
            sh_degree,
            color_mode: ColorOffsetMode::AllBands,
            init: HyperInit::ZeroOutput,
        }
    }

    pub fn layout(&self) -> ViewMlpLayout {
        ViewMlpLayout::new(self.view_hidden, self.sh_degree, self.color_mode)
    }
}

/// Per-Gaussian context features plus the shared weight generator
/// `θ_i = G2·ReLU(G1·f_i + g1) + g2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNet {
    pub config: HyperNetConfig,
    /// `n × F`, row-major.
    pub context: Vec<f64>,
    /// `H × F`.
    pub gen_w1: Vec<f64>,
    pub gen_b1: Vec<f64>,
    /// `P × H` where `P = θ` size.
    pub gen_w2: Vec<f64>,
    pub gen_b2: Vec<f64>,
}

impl HyperNet {
    pub fn new(n: usize, config: HyperNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4879_7065_724e_6574);
        let f = config.feature_dim;
        let h = config.gen_hidden;
        let layout = config.layout();
        let p = layout.param_count();
        let mut normal = |std: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        };
        let context = (0..n * f).map(|_| normal(1.0)).collect();
        let w1_std = 1.0 / (f as f64).sqrt();
        let gen_w1 = (0..h * f).map(|_| normal(w1_std)).collect();
        let gen_b1 = vec![0.0; h];
        let mut gen_w2 = vec![0.0; p * h];
        if config.init == HyperInit::ZeroOutput {
            // hidden-layer rows: unit-variance W1/b1 entries given E[ReLU(z)²] = ½
            let std = (2.0 / h as f64).sqrt();
            let hidden_rows = layout.w1_range().start..layout.b1_range().end;
            for r in hidden_rows {
                for j in 0..h {
                    gen_w2[r * h + j] = normal(std);
                }
            }
        }
        let gen_b2 = vec![0.0; p];
        Self {
            config,
            context,
            gen_w1,
            gen_b1,
            gen_w2,
            gen_b2,
        }
    }

    pub fn len(&self) -> usize {
        self.context.len() / self.config.feature_dim
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }

    pub fn layout(&self) -> ViewMlpLayout {
        self.config.layout()
    }

    pub fn param_count(&self) -> usize {
        self.layout().param_count()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        let f = self.config.feature_dim;
        &self.context[i * f..(i + 1) * f]
    }

    /// Generator forward for Gaussian `i`; writes the post-ReLU hidden
    /// activations and `θ_i`.
    pub(crate) fn generate_into(&self, i: usize, hidden: &mut [f64], theta: &mut [f64]) {
        let f = self.config.feature_dim;
        let h = self.config.gen_hidden;
        let feat = self.feature(i);
        for j in 0..h {
            let row = &self.gen_w1[j * f..(j + 1) * f];
            let pre = self.gen_b1[j] + row.iter().zip(feat).map(|(a, b)| a * b).sum::<f64>();
            hidden[j] = pre.max(0.0);
        }
        for (r, out) in theta.iter_mut().enumerate() {
            let row = &self.gen_w2[r * h..(r + 1) * h];
            *out = self.gen_b2[r] + row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn generate_weights(&self, indices: &[usize]) -> Result<Vec<ViewMlpWeights>, ViewAdaptError> {
        let n = self.len();
        let layout = self.layout();
        indices
            .iter()
            .map(|&i| {
                if i >= n {
                    return Err(ViewAdaptError::IndexOutOfRange { index: i, len: n });
                }
                let mut hidden = vec![0.0; self.config.gen_hidden];
                let mut w = ViewMlpWeights::zeros(layout);
                self.generate_into(i, &mut hidden, &mut w.params);
                Ok(w)
            })
            .collect()
    }

    /// `θ` for every Gaussian, computed once and reused across target views.
    pub fn generate_all(&self) -> GeneratedWeights {
        let n = self.len();
        let p = self.param_count();
        let h = self.config.gen_hidden;
        let mut thetas = vec![0.0; n * p];
        let mut hidden = vec![0.0; n * h];
        thetas
            .par_chunks_mut(p.max(1))
            .zip(hidden.par_chunks_mut(h.max(1)))
            .enumerate()
            .for_each(|(i, (theta, hid))| self.generate_into(i, hid, theta));
        GeneratedWeights {
            layout: self.layout(),
            thetas,
            gen_hidden: hidden,
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.context, &self.gen_w1, &self.gen_b1, &self.gen_w2, &self.gen_b2]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Output of [`HyperNet::generate_all`].
#[derive(Debug, Clone)]
pub struct GeneratedWeights {
    pub layout: ViewMlpLayout,
    /// `n × P`.
    pub thetas: Vec<f64>,
    /// Generator hidden activations, `n × H` (kept for the backward pass).
    pub gen_hidden: Vec<f64>,
}

impl GeneratedWeights {
    pub fn theta(&self, i: usize) -> &[f64] {
        let p = self.layout.param_count();
        &self.thetas[i * p..(i + 1) * p]
    }

    pub fn len(&self) -> usize {
        self.thetas.len() / self.layout.param_count().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

/// Refinement settings shared by rendering and training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RefineConfig {
    pub enabled: OffsetComponents,
    pub pose_mode: PoseMode,
    pub offset_space: OffsetSpace,
    pub color_anchor: ColorAnchor,
}

/// Attribute tuple of a primitive over any [`Real`].
#[derive(Clone, Debug)]
pub(crate) struct PrimVars<T> {
    pub mu: [T; 3],
    pub rot: [T; 4],
    pub log_scale: [T; 3],
    pub logit_opacity: T,
    pub sh: Vec<[T; 3]>,
}

impl PrimVars<f64> {
    pub fn from_primitive(g: &GaussianPrimitive) -> Self {
        Self {
            mu: g.mu,
            rot: g.rot,
            log_scale: g.log_scale,
            logit_opacity: g.logit_opacity,
            sh: g.sh.clone(),
        }
    }

    pub fn into_primitive(self) -> GaussianPrimitive {
        GaussianPrimitive {
            mu: self.mu,
            rot: self.rot,
            log_scale: self.log_scale,
            logit_opacity: self.logit_opacity,
            sh: self.sh,
        }
    }
}

/// Masked offsets over any [`Real`], indexed like the MLP output.
///
/// With `normalize_rot == false` the summed quaternion is left unnormalised;
/// the covariance normalises it anyway, and a zero offset then leaves the
/// primitive bit-identical to its base.
pub(crate) fn apply_offsets_generic<T: Real>(
    g: &PrimVars<T>,
    off: &[T],
    layout: &ViewMlpLayout,
    space: OffsetSpace,
    normalize_rot: bool,
) -> PrimVars<T> {
    let mu = std::array::from_fn(|i| g.mu[i] + off[i]);
    let (logit_opacity, log_scale) = match space {
        OffsetSpace::PreActivation => (
            g.logit_opacity + off[3],
            std::array::from_fn(|i| g.log_scale[i] + off[8 + i]),
        ),
        OffsetSpace::RawClamped => {
            let a = (g.logit_opacity.sigmoid() + off[3]).clamp_to(RAW_OPACITY_MARGIN, 1.0 - RAW_OPACITY_MARGIN);
            let lo = (a / (a.lift(1.0) - a)).ln();
            let ls = std::array::from_fn(|i| (g.log_scale[i].exp() + off[8 + i]).floor_at(RAW_SCALE_FLOOR).ln());
            (lo, ls)
        }
    };
    let summed: [T; 4] = std::array::from_fn(|i| g.rot[i] + off[4 + i]);
    let sq = |q: &[T; 4]| q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
    let s2 = sq(&summed);
    let src = if s2.value().sqrt() < ROT_FALLBACK_NORM {
        g.rot
    } else {
        summed
    };
    let rot = if normalize_rot {
        let n = sq(&src).sqrt();
        let inv = n.lift(1.0) / n;
        src.map(|v| v * inv)
    } else {
        src
    };
    let mut sh = g.sh.clone();
    for k in 0..layout.color_coeffs().min(sh.len()) {
        for c in 0..3 {
            sh[k][c] = sh[k][c] + off[GEOMETRY_SLOTS + 3 * k + c];
        }
    }
    PrimVars {
        mu,
        rot,
        log_scale,
        logit_opacity,
        sh,
    }
}

fn offsets_to_raw(o: &OffsetVector, layout: &ViewMlpLayout) -> Vec<f64> {
    let mut raw = vec![0.0; layout.out_dim()];
    raw[0..3].copy_from_slice(&o.d_mu);
    raw[3] = o.d_alpha;
    raw[4..8].copy_from_slice(&o.d_rot);
    raw[8..11].copy_from_slice(&o.d_scale);
    for k in 0..layout.color_coeffs().min(o.d_sh.len()) {
        raw[GEOMETRY_SLOTS + 3 * k..GEOMETRY_SLOTS + 3 * k + 3].copy_from_slice(&o.d_sh[k]);
    }
    raw
}

/// Element-wise residual addition (pre-activation space). The quaternion is
/// renormalised after the addition.
pub fn apply_offsets(g: &GaussianPrimitive, o: &OffsetVector) -> GaussianPrimitive {
    apply_offsets_in(g, o, OffsetSpace::PreActivation)
}

pub fn apply_offsets_in(g: &GaussianPrimitive, o: &OffsetVector, space: OffsetSpace) -> GaussianPrimitive {
    let layout = ViewMlpLayout {
        hidden: 0,
        sh_coeffs: g.sh.len(),
        color_mode: if o.d_sh.len() >= g.sh.len() {
            ColorOffsetMode::AllBands
        } else {
            ColorOffsetMode::DcOnly
        },
    };
    let raw = offsets_to_raw(o, &layout);
    apply_offsets_generic(&PrimVars::from_primitive(g), &raw, &layout, space, true).into_primitive()
}

/// Per-Gaussian refinement with precomputed weights. Returned quaternions
/// are the raw sums `r + Δr`; rendering normalises them.
pub fn refine_with_weights(
    scene: &SplatScene,
    weights: &GeneratedWeights,
    target_pose: &PoseW2C,
    cfg: &RefineConfig,
) -> Result<Vec<GaussianPrimitive>, ViewAdaptError> {
    if scene.len() != weights.len() {
        return Err(ViewAdaptError::SizeMismatch {
            scene: scene.len(),
            hypernet: weights.len(),
        });
    }
    let layout = weights.layout;
    if !scene.is_empty() && scene.primitives[0].sh.len() != layout.sh_coeffs {
        return Err(ViewAdaptError::DegreeMismatch {
            scene: scene.sh_degree(),
            hypernet: crate::splat::sh_degree_for(layout.sh_coeffs).unwrap_or(0),
        });
    }
    Ok(scene
        .primitives
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut out = vec![0.0; layout.out_dim()];
            if cfg.enabled.any() {
                let feat = pose_feature_4d(&g.mu, target_pose, cfg.pose_mode);
                let mut hidden = vec![0.0; layout.hidden];
                mlp_forward_raw(weights.theta(i), &layout, &feat.as_array(), &mut hidden, &mut out);
                for (slot, v) in out.iter_mut().enumerate() {
                    if !cfg.enabled.slot_enabled(slot) {
                        *v = 0.0;
                    }
                }
            }
            apply_offsets_generic(&PrimVars::from_primitive(g), &out, &layout, cfg.offset_space, false).into_primitive()
        })
        .collect())
}

/// Generate weights and refine every Gaussian for `target_pose`. The pose
/// feature is computed from the base centre, single-shot.
pub fn refine_scene(
    scene: &SplatScene,
    hypernet: &HyperNet,
    target_pose: &PoseW2C,
    cfg: &RefineConfig,
) -> Result<Vec<GaussianPrimitive>, ViewAdaptError> {
    if scene.len() != hypernet.len() {
        return Err(ViewAdaptError::SizeMismatch {
            scene: scene.len(),
            hypernet: hypernet.len(),
        });
    }
    refine_with_weights(scene, &hypernet.generate_all(), target_pose, cfg)
}

/// Refined opacity as a probability; convenience for tests and reports.
pub fn activated_opacity(g: &GaussianPrimitive) -> f64 {
    sigmoid(g.logit_opacity)
}

/// Logit of the refined opacity after a raw-space offset.
pub fn raw_opacity_logit(base_logit: f64, d_alpha: f64) -> f64 {
    logit((sigmoid(base_logit) + d_alpha).clamp(RAW_OPACITY_MARGIN, 1.0 - RAW_OPACITY_MARGIN))
}
