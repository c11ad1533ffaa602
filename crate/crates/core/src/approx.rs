//! Shared-center approximation of ladder differences and their global synthesis.
//!
//! Every agent represents `g_k = f_{lambda_k} - f_{lambda_{k-1}}` in the span
//! of kernel sections at the shared centers `xi_1..xi_L`. The row of
//! coefficients for ladder index `k` minimizes
//!
//! ```text
//! (1/n) |C a - g_k(X)|^2 + mu a^T G a
//! ```
//!
//! with `C = K(X, Xi)` and `G = K(Xi, Xi)`. Coefficient matrices are indexed
//! from `k = 2`; row `k - 2` belongs to ladder index `k`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{arg, Error, Result};
use crate::kernel::{check_point, gram_matrix, kernel_column, KernelSpec};
use crate::points::Points;

/// Row of a coefficient matrix holding ladder index `k >= 2`.
pub fn row_of(k: usize) -> usize {
    debug_assert!(k >= 2);
    k - 2
}

/// The shared centers and their gram matrix.
#[derive(Clone, Debug)]
pub struct CenterBasis {
    centers: Points,
    gram: DMatrix<f64>,
}

impl CenterBasis {
    pub fn new(spec: &KernelSpec, centers: Points) -> Result<Self> {
        let gram = gram_matrix(spec, &centers, &centers)?;
        Ok(Self { centers, gram })
    }

    pub fn centers(&self) -> &Points {
        &self.centers
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// A factorized normal system `(C^T C / n + mu G) a = C^T t / n` that can be
/// solved for many targets.
#[derive(Clone, Debug)]
pub struct LocalApproxSolver {
    chol: Cholesky<f64, Dyn>,
    cross: DMatrix<f64>,
    jitter: f64,
}

impl LocalApproxSolver {
    pub fn new(cross: DMatrix<f64>, center_gram: &DMatrix<f64>, mu: f64) -> Result<Self> {
        let (n, l) = cross.shape();
        if center_gram.shape() != (l, l) {
            return arg(format!(
                "cross gram is {n}x{l} but center gram is {}x{}",
                center_gram.nrows(),
                center_gram.ncols()
            ));
        }
        if n == 0 || l == 0 {
            return arg("local approximation needs data and centers");
        }
        if !(mu > 0.0) {
            return arg(format!("mu must be positive, got {mu}"));
        }
        let normal = (cross.transpose() * &cross) / n as f64 + center_gram * mu;
        if let Some(chol) = normal.clone().cholesky() {
            return Ok(Self {
                chol,
                cross,
                jitter: 0.0,
            });
        }
        let jitter = 1e-12 * center_gram.trace() / l as f64;
        let mut shifted = normal;
        for i in 0..l {
            shifted[(i, i)] += jitter;
        }
        let chol = shifted.cholesky().ok_or_else(|| {
            Error::Numeric(format!(
                "local approximation normal matrix is singular even with jitter {jitter:e}"
            ))
        })?;
        Ok(Self {
            chol,
            cross,
            jitter,
        })
    }

    /// Diagonal jitter that had to be added, zero when none was needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn cross(&self) -> &DMatrix<f64> {
        &self.cross
    }

    pub fn fit(&self, targets: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.cross.nrows();
        if targets.len() != n {
            return arg(format!("{} targets for {n} samples", targets.len()));
        }
        let rhs = self.cross.tr_mul(targets) / n as f64;
        let a = self.chol.solve(&rhs);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite local approximation".into()));
        }
        Ok(a)
    }

    /// [`fit`](Self::fit) for every column of `targets`.
    pub fn fit_many(&self, targets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.cross.nrows();
        if targets.nrows() != n {
            return arg(format!("{} target rows for {n} samples", targets.nrows()));
        }
        let rhs = (self.cross.transpose() * targets) / n as f64;
        let a = self.chol.solve(&rhs);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite local approximation".into()));
        }
        Ok(a)
    }
}

/// Minimizer of `(1/n)|C a - t|^2 + mu a^T G a` over `a in R^L`.
pub fn fit_local_approx(
    cross: &DMatrix<f64>,
    center_gram: &DMatrix<f64>,
    targets: &[f64],
    n: usize,
    mu: f64,
) -> Result<DVector<f64>> {
    if cross.nrows() != n || targets.len() != n {
        return arg(format!(
            "n = {n} but cross gram has {} rows and there are {} targets",
            cross.nrows(),
            targets.len()
        ));
    }
    LocalApproxSolver::new(cross.clone(), center_gram, mu)?
        .fit(&DVector::from_column_slice(targets))
}

/// Objective of [`fit_local_approx`] at `a`.
pub fn local_objective(
    cross: &DMatrix<f64>,
    center_gram: &DMatrix<f64>,
    targets: &[f64],
    mu: f64,
    a: &DVector<f64>,
) -> f64 {
    let n = cross.nrows() as f64;
    let r = cross * a - DVector::from_column_slice(targets);
    r.norm_squared() / n + mu * a.dot(&(center_gram * a))
}

/// `sum_l coeffs_l K(xi_l, x)`.
pub fn evaluate_basis(
    coeffs: &[f64],
    spec: &KernelSpec,
    centers: &Points,
    x: &[f64],
) -> Result<f64> {
    if coeffs.len() != centers.len() {
        return arg(format!(
            "{} coefficients for {} centers",
            coeffs.len(),
            centers.len()
        ));
    }
    check_point(spec, x, 0)?;
    Ok(kernel_column(spec, centers, x)
        .iter()
        .zip(coeffs)
        .map(|(k, c)| k * c)
        .sum())
}

/// `|g|_{D}^2 + lambda |g|_K^2` for `g = sum_l coeffs_l K_{xi_l}`, where
/// `|g|_D^2 = (1/n) sum_i g(x_i)^2` over the agent's own inputs.
pub fn seminorm_sq(
    coeffs: &[f64],
    agent_cross: &DMatrix<f64>,
    center_gram: &DMatrix<f64>,
    n: usize,
    lambda: f64,
) -> Result<f64> {
    let l = coeffs.len();
    if agent_cross.shape() != (n, l) || center_gram.shape() != (l, l) {
        return arg(format!(
            "shape mismatch: {l} coefficients, cross {:?}, center gram {:?}, n = {n}",
            agent_cross.shape(),
            center_gram.shape()
        ));
    }
    let a = DVector::from_column_slice(coeffs);
    Ok(seminorm_sq_unchecked(&a, agent_cross, center_gram, lambda))
}

pub(crate) fn seminorm_sq_unchecked(
    a: &DVector<f64>,
    agent_cross: &DMatrix<f64>,
    center_gram: &DMatrix<f64>,
    lambda: f64,
) -> f64 {
    let n = agent_cross.nrows() as f64;
    let empirical = (agent_cross * a).norm_squared() / n;
    let rkhs = a.dot(&(center_gram * a)).max(0.0);
    empirical + lambda * rkhs
}

/// One agent's coefficient rows for `k = 2..=K*`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalApproxCoeffs {
    pub rows: DMatrix<f64>,
}

/// The synthesized coefficient matrix and the aggregated W-quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalApprox {
    /// Row `k - 2` holds the global coefficients for ladder index `k`.
    pub coeffs: DMatrix<f64>,
    /// Entry `k - 2` holds `sum_j (n_j/|D|)^2 W_{j,k}^2`.
    pub w_bar: Vec<f64>,
}

impl GlobalApprox {
    pub fn k_star(&self) -> usize {
        self.coeffs.nrows() + 1
    }

    pub fn row(&self, k: usize) -> DVector<f64> {
        self.coeffs.row(row_of(k)).transpose()
    }

    pub fn w_bar(&self, k: usize) -> f64 {
        self.w_bar[row_of(k)]
    }
}

/// What one agent contributes to the synthesis.
#[derive(Clone, Copy, Debug)]
pub struct UploadView<'a> {
    pub coeffs: &'a DMatrix<f64>,
    pub w: &'a [f64],
    pub n: usize,
}

/// Size-weighted average of coefficient rows and squared-weight sum of W's.
pub fn synthesize_global(uploads: &[UploadView<'_>], total: usize) -> Result<GlobalApprox> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Argument("no uploads to synthesize".into()))?;
    let shape = first.coeffs.shape();
    let sum: usize = uploads.iter().map(|u| u.n).sum();
    if sum != total || total == 0 {
        return arg(format!("agent sizes sum to {sum}, expected {total}"));
    }
    let mut coeffs = DMatrix::zeros(shape.0, shape.1);
    let mut w_bar = vec![0.0; shape.0];
    for (j, u) in uploads.iter().enumerate() {
        if u.coeffs.shape() != shape || u.w.len() != shape.0 {
            return arg(format!(
                "upload {j} has shape {:?} with {} W values, expected {:?}",
                u.coeffs.shape(),
                u.w.len(),
                shape
            ));
        }
        let weight = u.n as f64 / total as f64;
        coeffs += u.coeffs * weight;
        for (acc, w) in w_bar.iter_mut().zip(u.w) {
            *acc += weight * weight * w * w;
        }
    }
    Ok(GlobalApprox { coeffs, w_bar })
}
