//! Gaussian primitives, real spherical harmonics and 3D covariances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Real};
use crate::linalg::{self, Mat3, Vec3};

/// Constant added to the SH sum so that zero coefficients give mid-grey.
pub const SH_DC_OFFSET: f64 = 0.5;
/// Highest degree the basis evaluator supports.
pub const MAX_SH_DEGREE: usize = 8;
const QUAT_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplatError {
    #[error("SH degree {requested} exceeds the stored degree {stored}")]
    BadDegree { requested: usize, stored: usize },
    #[error("quaternion norm is below {QUAT_EPS:e}")]
    DegenerateQuaternion,
    #[error("{count} SH coefficients is not a square number")]
    BadCoefficientCount { count: usize },
    #[error("scene has {primitives} primitives but {provenance} provenance entries")]
    ProvenanceMismatch { primitives: usize, provenance: usize },
}

/// Number of coefficients per channel for `degree`.
pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree whose coefficient count is exactly `k`.
pub fn sh_degree_for(k: usize) -> Option<usize> {
    let d = (k as f64).sqrt().round() as usize;
    (d >= 1 && d * d == k).then(|| d - 1)
}

/// One splat. Opacity is stored as a logit and scales as logs; the
/// quaternion `(w, x, y, z)` is kept unnormalised and normalised on use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mu: Vec3,
    pub rot: [f64; 4],
    pub log_scale: Vec3,
    pub logit_opacity: f64,
    /// `sh[k][channel]`, `k` in the standard `l² + l + m` order.
    pub sh: Vec<[f64; 3]>,
}

impl GaussianPrimitive {
    pub fn isotropic(mu: Vec3, scale: f64, opacity: f64, sh_degree: usize) -> Self {
        Self {
            mu,
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: [scale.ln(); 3],
            logit_opacity: crate::autodiff::logit(opacity),
            sh: vec![[0.0; 3]; sh_coeff_count(sh_degree)],
        }
    }

    pub fn sh_degree(&self) -> usize {
        sh_degree_for(self.sh.len()).unwrap_or(0)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    /// Set the DC band so that the degree-0 colour equals `rgb`.
    pub fn set_base_color(&mut self, rgb: Vec3) {
        for c in 0..3 {
            self.sh[0][c] = (rgb[c] - SH_DC_OFFSET) / SH_C0;
        }
    }

    pub fn normalized_rot(&self) -> Option<[f64; 4]> {
        normalize_quat(&self.rot)
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.rot.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.logit_opacity.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }

    /// Resize the SH bands, zero-padding new high bands or dropping extra ones.
    pub fn with_sh_degree(mut self, degree: usize) -> Self {
        self.sh.resize(sh_coeff_count(degree), [0.0; 3]);
        self
    }
}

pub fn normalize_quat(q: &[f64; 4]) -> Option<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    (n > QUAT_EPS).then(|| {
        let inv = 1.0 / n;
        q.map(|v| v * inv)
    })
}

/// Pixel a primitive was lifted from: view `view`, pixel `pixel = row·W + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub view: usize,
    pub pixel: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplatScene {
    pub primitives: Vec<GaussianPrimitive>,
    /// Either absent or one entry per primitive.
    pub provenance: Option<Vec<Provenance>>,
}

impl SplatScene {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        Self {
            primitives,
            provenance: None,
        }
    }

    pub fn with_provenance(
        primitives: Vec<GaussianPrimitive>,
        provenance: Vec<Provenance>,
    ) -> Result<Self, SplatError> {
        if primitives.len() != provenance.len() {
            return Err(SplatError::ProvenanceMismatch {
                primitives: primitives.len(),
                provenance: provenance.len(),
            });
        }
        Ok(Self {
            primitives,
            provenance: Some(provenance),
        })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn sh_degree(&self) -> usize {
        self.primitives.first().map_or(0, GaussianPrimitive::sh_degree)
    }

    pub fn with_sh_degree(self, degree: usize) -> Self {
        Self {
            primitives: self
                .primitives
                .into_iter()
                .map(|g| g.with_sh_degree(degree))
                .collect(),
            provenance: self.provenance,
        }
    }
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// `d!! = d·(d−2)·…` for odd `d`.
fn double_factorial(n: i64) -> f64 {
    let mut acc = 1.0;
    let mut k = n;
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

fn factorial_ratio(l: usize, m: usize) -> f64 {
    // (l − m)! / (l + m)!
    let mut acc = 1.0;
    for k in (l - m + 1)..=(l + m) {
        acc /= k as f64;
    }
    acc
}

/// Normalisation `K_l^m` (without the `√2` of the real basis).
fn sh_norm(l: usize, m: usize) -> f64 {
    ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial_ratio(l, m)).sqrt()
}

/// Real SH basis up to `degree`, Condon–Shortley phase included, ordered
/// `k = l² + l + m`. Matches the sign convention of the common splat
/// pipelines (`Y_1 = (−C1·y, C1·z, −C1·x)`). The direction must be unit length;
/// everything is polynomial in `(x, y, z)`, so it works on tape variables.
pub fn sh_basis<T: Real>(dir: &[T; 3], degree: usize) -> Vec<T> {
    assert!(degree <= MAX_SH_DEGREE, "SH degree {degree} > {MAX_SH_DEGREE}");
    let [x, y, z] = *dir;
    let one = x.lift(1.0);
    let zero = x.lift(0.0);
    let mut out = vec![zero; sh_coeff_count(degree)];

    // (x + iy)^m
    let mut re = vec![one; degree + 1];
    let mut im = vec![zero; degree + 1];
    for m in 1..=degree {
        re[m] = re[m - 1] * x - im[m - 1] * y;
        im[m] = re[m - 1] * y + im[m - 1] * x;
    }

    for m in 0..=degree {
        // reduced associated Legendre P_l^m(z) / sin^m θ, CS phase included
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        let pmm = one * (sign * double_factorial(2 * m as i64 - 1));
        let mut p_prev2 = pmm;
        let mut p_prev = pmm;
        for l in m..=degree {
            let p = if l == m {
                pmm
            } else if l == m + 1 {
                z * pmm * (2 * m + 1) as f64
            } else {
                (z * p_prev * (2 * l - 1) as f64 - p_prev2 * (l + m - 1) as f64) / (l - m) as f64
            };
            if l >= m + 1 {
                p_prev2 = p_prev;
            }
            p_prev = p;
            let k = sh_norm(l, m);
            let base = l * l + l;
            if m == 0 {
                out[base] = p * k;
            } else {
                let c = k * std::f64::consts::SQRT_2;
                out[base + m] = p * re[m] * c;
                out[base - m] = p * im[m] * c;
            }
        }
    }
    out
}

/// `0.5 + Σ_k Y_k(dir)·sh[k]` over bands `0..=degree`, unclamped.
pub fn sh_eval(sh: &[[f64; 3]], dir: &Vec3, degree: usize) -> Result<Vec3, SplatError> {
    let stored = sh_degree_for(sh.len()).ok_or(SplatError::BadCoefficientCount { count: sh.len() })?;
    if degree > stored {
        return Err(SplatError::BadDegree {
            requested: degree,
            stored,
        });
    }
    Ok(sh_eval_generic(sh, dir, degree))
}

pub(crate) fn sh_eval_generic<T: Real>(sh: &[[T; 3]], dir: &[T; 3], degree: usize) -> [T; 3] {
    let basis = sh_basis(dir, degree);
    let mut rgb = [dir[0].lift(SH_DC_OFFSET); 3];
    for (y, coeff) in basis.iter().zip(sh) {
        for c in 0..3 {
            rgb[c] = rgb[c] + *y * coeff[c];
        }
    }
    rgb
}

/// Rotation matrix of a quaternion `(w, x, y, z)`, normalising it first.
pub(crate) fn quat_to_rotation<T: Real>(q: &[T; 4]) -> [[T; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let inv = n.lift(1.0) / n;
    let [w, x, y, z] = q.map(|v| v * inv);
    let one = w.lift(1.0);
    [
        [
            one - (y * y + z * z) * 2.0,
            (x * y - w * z) * 2.0,
            (x * z + w * y) * 2.0,
        ],
        [
            (x * y + w * z) * 2.0,
            one - (x * x + z * z) * 2.0,
            (y * z - w * x) * 2.0,
        ],
        [
            (x * z - w * y) * 2.0,
            (y * z + w * x) * 2.0,
            one - (x * x + y * y) * 2.0,
        ],
    ]
}

/// `Σ = R_q S Sᵀ R_qᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance3d(rot: &[f64; 4], log_scale: &Vec3) -> Result<Mat3, SplatError> {
    if normalize_quat(rot).is_none() {
        return Err(SplatError::DegenerateQuaternion);
    }
    Ok(covariance_generic(rot, log_scale))
}

pub(crate) fn covariance_generic<T: Real>(rot: &[T; 4], log_scale: &[T; 3]) -> [[T; 3]; 3] {
    let r = quat_to_rotation(rot);
    let s2 = log_scale.map(|v| (v * 2.0).exp());
    // M = R diag(s²); Σ = M Rᵀ
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            r[i][0] * r[j][0] * s2[0] + r[i][1] * r[j][1] * s2[1] + r[i][2] * r[j][2] * s2[2]
        })
    })
}

pub fn covariance_eigenvalues(rot: &[f64; 4], log_scale: &Vec3) -> Result<[f64; 3], SplatError> {
    Ok(linalg::sym_eigenvalues3(&covariance3d(rot, log_scale)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Hard-coded degree ≤ 3 constants as used by common splat renderers.
    fn reference_basis_deg3(d: &Vec3) -> [f64; 16] {
        const C1: f64 = 0.488_602_511_902_919_9;
        const C2: [f64; 5] = [
            1.092_548_430_592_079_2,
            -1.092_548_430_592_079_2,
            0.315_391_565_252_520_05,
            -1.092_548_430_592_079_2,
            0.546_274_215_296_039_6,
        ];
        const C3: [f64; 7] = [
            -0.590_043_589_926_643_5,
            2.890_611_442_640_554,
            -0.457_045_799_464_465_8,
            0.373_176_332_590_115_4,
            -0.457_045_799_464_465_8,
            1.445_305_721_320_277,
            -0.590_043_589_926_643_5,
        ];
        let [x, y, z] = *d;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        [
            SH_C0,
            -C1 * y,
            C1 * z,
            -C1 * x,
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2.0 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
            C3[0] * y * (3.0 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4.0 * zz - xx - yy),
            C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * x * (4.0 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3.0 * yy),
        ]
    }

    fn unit(v: Vec3) -> Vec3 {
        let n = linalg::norm(&v);
        v.map(|c| c / n)
    }

    #[test]
    fn basis_matches_hardcoded_low_degrees() {
        for d in [
            unit([0.3, -0.5, 0.8]),
            unit([1.0, 0.0, 0.0]),
            unit([-0.2, 0.9, -0.1]),
        ] {
            let ours = sh_basis(&d, 3);
            let reference = reference_basis_deg3(&d);
            for (k, (a, b)) in ours.iter().zip(reference.iter()).enumerate() {
                assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
            }
        }
    }

    /// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration.
    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let dx = p1 / dp;
                    x -= dx;
                    if dx.abs() < 1e-15 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    }

    #[test]
    fn basis_is_orthonormal_under_quadrature() {
        // Products of two degree-8 functions are band-limited to degree 16, so
        // 12 Gauss–Legendre nodes in z and 40 uniform φ samples integrate exactly.
        let degree = 8;
        let n_phi = 40;
        let k = sh_coeff_count(degree);
        let mut gram = vec![0.0; k * k];
        let dphi = 2.0 * std::f64::consts::PI / n_phi as f64;
        for (z, w) in gauss_legendre(12) {
            let s = (1.0 - z * z).sqrt();
            for j in 0..n_phi {
                let phi = j as f64 * dphi;
                let y = sh_basis(&[s * phi.cos(), s * phi.sin(), z], degree);
                for a in 0..k {
                    for b in a..k {
                        gram[a * k + b] += y[a] * y[b] * w * dphi;
                    }
                }
            }
        }
        for a in 0..k {
            for b in a..k {
                let target = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (gram[a * k + b] - target).abs() < 1e-10,
                    "<Y{a},Y{b}> = {}",
                    gram[a * k + b]
                );
            }
        }
    }

    #[test]
    fn sh_eval_examples() {
        let zeros = vec![[0.0; 3]; 25];
        let d = unit([0.2, 0.3, -0.9]);
        assert_eq!(sh_eval(&zeros, &d, 4).unwrap(), [0.5; 3]);

        let mut dc = vec![[0.0; 3]; 1];
        dc[0] = [1.0; 3];
        let rgb = sh_eval(&dc, &d, 0).unwrap();
        for c in rgb {
            assert!((c - 0.7820948).abs() < 1e-7);
        }
        let neg = sh_eval(&dc, &d.map(|v| -v), 0).unwrap();
        assert_eq!(rgb, neg);

        assert_eq!(
            sh_eval(&dc, &d, 1),
            Err(SplatError::BadDegree {
                requested: 1,
                stored: 0
            })
        );
    }

    #[test]
    fn covariance_examples() {
        let id = covariance3d(&[1., 0., 0., 0.], &[0.; 3]).unwrap();
        assert_eq!(id, linalg::IDENTITY3);
        let c = covariance3d(&[1., 0., 0., 0.], &[2f64.ln(), 0., 0.]).unwrap();
        for (i, row) in c.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = match (i, j) {
                    (0, 0) => 4.0,
                    (1, 1) | (2, 2) => 1.0,
                    _ => 0.0,
                };
                assert!((v - e).abs() < 1e-12);
            }
        }
        assert_eq!(
            covariance3d(&[0.; 4], &[0.; 3]),
            Err(SplatError::DegenerateQuaternion)
        );
    }

    #[test]
    fn degree_padding() {
        let g = GaussianPrimitive::isotropic([0.; 3], 0.1, 0.5, 3).with_sh_degree(4);
        assert_eq!(g.sh.len(), 25);
        assert_eq!(g.sh_degree(), 4);
        assert_eq!(sh_degree_for(24), None);
    }

    fn quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("non-degenerate", |q| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
    }

    proptest! {
        #[test]
        fn covariance_is_psd_with_scale_eigenvalues(q in quat(), ls in prop::array::uniform3(-2.0f64..1.0)) {
            let e = covariance_eigenvalues(&q, &ls).unwrap();
            prop_assert!(e[0] >= -1e-12);
            let mut expected = ls.map(|v| (2.0 * v).exp());
            expected.sort_by(|a, b| a.total_cmp(b));
            for (a, b) in e.iter().zip(expected) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
            let det = linalg::det3(&covariance3d(&q, &ls).unwrap());
            let target = (2.0 * ls.iter().sum::<f64>()).exp();
            prop_assert!((det - target).abs() <= 1e-9 * target.max(1.0));
        }

        #[test]
        fn negated_quaternion_same_covariance(q in quat(), ls in prop::array::uniform3(-2.0f64..1.0)) {
            let a = covariance3d(&q, &ls).unwrap();
            let b = covariance3d(&q.map(|v| -v), &ls).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn sh_eval_is_affine_in_coefficients(
            a in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 16),
            b in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 16),
            sa in -2.0f64..2.0, sb in -2.0f64..2.0,
            d in prop::array::uniform3(-1.0f64..1.0),
        ) {
            prop_assume!(linalg::norm(&d) > 1e-3);
            let d = unit(d);
            let mix: Vec<[f64; 3]> = a.iter().zip(&b)
                .map(|(x, y)| std::array::from_fn(|c| sa * x[c] + sb * y[c]))
                .collect();
            let lhs = sh_eval(&mix, &d, 3).unwrap();
            let ea = sh_eval(&a, &d, 3).unwrap();
            let eb = sh_eval(&b, &d, 3).unwrap();
            for c in 0..3 {
                let rhs = sa * ea[c] + sb * eb[c] - (sa + sb - 1.0) * 0.5;
                prop_assert!((lhs[c] - rhs).abs() < 1e-9);
            }
        }
    }
}
