//! Kernel functions and Gram matrices.
//!
//! Two kernels are provided. The Gaussian kernel lives on a bounded box in
//! `R^d`. The truncated Mercer kernel lives on `[0, 1]` and is built from the
//! eigenpairs of the integral operator under the uniform marginal:
//!
//! ```text
//! K(x, x') = sum_{t=1}^{T} sigma_t phi_t(x) phi_t(x'),
//! sigma_t  = t^(-1/s),   phi_t(x) = sqrt(2) cos(t pi x)
//! ```
//!
//! Because the `phi_t` are orthonormal in `L^2([0,1])`, every population
//! quantity (effective dimension, RKHS norm, L2 error) is available in closed
//! form for this kernel.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::points::Points;

pub const DEFAULT_TRUNCATION: usize = 1000;

fn default_truncation() -> usize {
    DEFAULT_TRUNCATION
}

fn default_dim() -> usize {
    1
}

/// Axis-aligned box holding every admissible input point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputDomain {
    pub fn unit_cube(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn check(&self, points: &Points) -> Result<()> {
        if points.dim() != self.dim() {
            return arg(format!(
                "points have dimension {} but the domain has dimension {}",
                points.dim(),
                self.dim()
            ));
        }
        match points.iter().position(|p| !self.contains(p)) {
            Some(index) => Err(Error::Domain { index }),
            None => Ok(()),
        }
    }
}

/// Serialized form of a kernel: `{"variant": "gaussian", "bandwidth": 0.2}` or
/// `{"variant": "truncated_mercer", "s_param": 0.5, "truncation": 1000}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelConfig {
    Gaussian {
        bandwidth: f64,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    TruncatedMercer {
        s_param: f64,
        #[serde(default = "default_truncation")]
        truncation: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
enum Variant {
    Gaussian { bandwidth: f64 },
    TruncatedMercer { s_param: f64, sigmas: Vec<f64> },
}

/// An immutable Mercer kernel with its domain and the bound
/// `kappa >= sup_x sqrt(K(x, x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelConfig", into = "KernelConfig")]
pub struct KernelSpec {
    variant: Variant,
    domain: InputDomain,
    kappa: f64,
}

impl TryFrom<KernelConfig> for KernelSpec {
    type Error = Error;

    fn try_from(cfg: KernelConfig) -> Result<Self> {
        match cfg {
            KernelConfig::Gaussian { bandwidth, dim } => Self::gaussian(bandwidth, dim),
            KernelConfig::TruncatedMercer {
                s_param,
                truncation,
            } => Self::truncated_mercer(s_param, truncation),
        }
    }
}

impl From<KernelSpec> for KernelConfig {
    fn from(spec: KernelSpec) -> Self {
        match spec.variant {
            Variant::Gaussian { bandwidth } => KernelConfig::Gaussian {
                bandwidth,
                dim: spec.domain.dim(),
            },
            Variant::TruncatedMercer { s_param, sigmas } => KernelConfig::TruncatedMercer {
                s_param,
                truncation: sigmas.len(),
            },
        }
    }
}

impl KernelSpec {
    /// `exp(-|x - x'|^2 / (2 bandwidth^2))` on the unit cube `[0,1]^dim`.
    pub fn gaussian(bandwidth: f64, dim: usize) -> Result<Self> {
        Self::gaussian_on(bandwidth, InputDomain::unit_cube(dim))
    }

    pub fn gaussian_on(bandwidth: f64, domain: InputDomain) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return arg(format!("bandwidth must be positive, got {bandwidth}"));
        }
        if domain.dim() == 0 || domain.lower.len() != domain.upper.len() {
            return arg("malformed input domain");
        }
        if domain
            .lower
            .iter()
            .zip(&domain.upper)
            .any(|(lo, hi)| lo > hi)
        {
            return arg("domain lower corner exceeds upper corner");
        }
        Ok(Self {
            variant: Variant::Gaussian { bandwidth },
            domain,
            kappa: 1.0,
        })
    }

    /// Truncated Mercer kernel with eigenvalues `t^(-1/s_param)`, `t = 1..=truncation`.
    pub fn truncated_mercer(s_param: f64, truncation: usize) -> Result<Self> {
        if !(s_param > 0.0 && s_param <= 1.0) {
            return arg(format!("s_param must lie in (0, 1], got {s_param}"));
        }
        if truncation == 0 {
            return arg("truncation must be positive");
        }
        let sigmas = mercer_eigenvalues(s_param, truncation);
        // K(x, x) = 2 sum sigma_t cos^2(t pi x) is maximized at x = 0.
        let kappa = (2.0 * sigmas.iter().sum::<f64>()).sqrt();
        Ok(Self {
            variant: Variant::TruncatedMercer { s_param, sigmas },
            domain: InputDomain::unit_cube(1),
            kappa,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn domain(&self) -> &InputDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Eigenvalues `sigma_1 > sigma_2 > ...` for the truncated Mercer kernel.
    pub fn mercer_sigmas(&self) -> Option<&[f64]> {
        match &self.variant {
            Variant::TruncatedMercer { sigmas, .. } => Some(sigmas),
            Variant::Gaussian { .. } => None,
        }
    }

    pub fn s_param(&self) -> Option<f64> {
        match &self.variant {
            Variant::TruncatedMercer { s_param, .. } => Some(*s_param),
            Variant::Gaussian { .. } => None,
        }
    }

    pub fn config(&self) -> KernelConfig {
        self.clone().into()
    }

    /// Kernel value without domain checks.
    pub(crate) fn raw(&self, x: &[f64], x2: &[f64]) -> f64 {
        match &self.variant {
            Variant::Gaussian { bandwidth } => {
                let d2: f64 = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
            Variant::TruncatedMercer { sigmas, .. } => {
                // 2 cos(a) cos(b) = cos(a - b) + cos(a + b)
                cosine_series(sigmas, PI * (x[0] - x2[0]))
                    + cosine_series(sigmas, PI * (x[0] + x2[0]))
            }
        }
    }
}

/// Cosine sequences are advanced by rotation and re-anchored this often.
const ROTATION_ANCHOR: usize = 32;

/// `sum_t w_t cos(t u)` for `t = 1..`.
fn cosine_series(weights: &[f64], u: f64) -> f64 {
    let (su, cu) = u.sin_cos();
    let mut total = 0.0;
    for (block, chunk) in weights.chunks(ROTATION_ANCHOR).enumerate() {
        let (mut s, mut c) = (((block * ROTATION_ANCHOR + 1) as f64) * u).sin_cos();
        for w in chunk {
            total += w * c;
            (c, s) = (c * cu - s * su, s * cu + c * su);
        }
    }
    total
}

/// `t^(-1/s)` for `t = 1..=truncation`.
pub fn mercer_eigenvalues(s_param: f64, truncation: usize) -> Vec<f64> {
    (1..=truncation)
        .map(|t| (t as f64).powf(-1.0 / s_param))
        .collect()
}

/// `phi_t(x) = sqrt(2) cos(t pi x)`.
pub fn mercer_eigenfunction(t: usize, x: f64) -> f64 {
    SQRT_2 * (t as f64 * PI * x).cos()
}

/// `n x T` matrix of eigenfunction values `phi_t(x_i)` for 1-d points.
pub fn mercer_features(points: &Points, truncation: usize) -> DMatrix<f64> {
    let n = points.len();
    let mut f = DMatrix::zeros(n, truncation);
    for (i, p) in points.iter().enumerate() {
        let u = PI * p[0];
        let (su, cu) = u.sin_cos();
        for start in (0..truncation).step_by(ROTATION_ANCHOR) {
            let (mut s, mut c) = (((start + 1) as f64) * u).sin_cos();
            for t in start..truncation.min(start + ROTATION_ANCHOR) {
                f[(i, t)] = SQRT_2 * c;
                (c, s) = (c * cu - s * su, s * cu + c * su);
            }
        }
    }
    f
}

pub(crate) fn check_point(spec: &KernelSpec, x: &[f64], index: usize) -> Result<()> {
    if x.len() != spec.dim() {
        return arg(format!(
            "point has dimension {} but the kernel expects {}",
            x.len(),
            spec.dim()
        ));
    }
    if spec.domain.contains(x) {
        Ok(())
    } else {
        Err(Error::Domain { index })
    }
}

/// `K(x, x2)`.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    check_point(spec, x, 0)?;
    check_point(spec, x2, 1)?;
    Ok(spec.raw(x, x2))
}

/// `|xs| x |xs2|` matrix of kernel values. When both lists are equal the result
/// is exactly symmetric.
pub fn gram_matrix(spec: &KernelSpec, xs: &Points, xs2: &Points) -> Result<DMatrix<f64>> {
    if xs.is_empty() || xs2.is_empty() {
        return arg("gram_matrix needs non-empty point lists");
    }
    spec.domain.check(xs)?;
    spec.domain.check(xs2)?;
    let same = xs == xs2;
    let mut g = match &spec.variant {
        Variant::Gaussian { .. } => {
            if same {
                let n = xs.len();
                let mut g = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in i..n {
                        let v = spec.raw(xs.row(i), xs.row(j));
                        g[(i, j)] = v;
                        g[(j, i)] = v;
                    }
                }
                return Ok(g);
            }
            DMatrix::from_fn(xs.len(), xs2.len(), |i, j| spec.raw(xs.row(i), xs2.row(j)))
        }
        Variant::TruncatedMercer { sigmas, .. } => {
            let weighted = |pts: &Points| {
                let mut f = mercer_features(pts, sigmas.len());
                for (mut col, s) in f.column_iter_mut().zip(sigmas) {
                    col *= s.sqrt();
                }
                f
            };
            let f1 = weighted(xs);
            if same {
                &f1 * f1.transpose()
            } else {
                &f1 * weighted(xs2).transpose()
            }
        }
    };
    if same {
        let n = g.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                g[(j, i)] = g[(i, j)];
            }
        }
    }
    Ok(g)
}

/// Kernel column `K(x_i, x)` for every support point.
pub(crate) fn kernel_column(spec: &KernelSpec, support: &Points, x: &[f64]) -> Vec<f64> {
    support.iter().map(|p| spec.raw(p, x)).collect()
}
