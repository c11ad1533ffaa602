//! Local kernel ridge regression along the regularization ladder, the
//! empirical effective dimension, the W-quantity and the algorithm constants.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::kernel::{kernel_column, KernelSpec};
use crate::points::Points;

/// Gamma(5) = 4!.
pub const GAMMA_5: f64 = 24.0;

const SYMMETRY_TOL: f64 = 1e-12;

/// How the ladder cap `K_j` / `K*` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CapMode {
    /// `floor(n / (16 b C1*^2 ln^3(16 n)))`.
    Theoretical,
    /// The theoretical cap, raised to at least `k_min`.
    Practical { k_min: usize },
}

/// How the local-approximation penalty `mu_j` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MuMode {
    /// `48 b C1* ln(1 + 8 kappa n) / n`.
    Theoretical,
    /// The theoretical value times `factor`.
    Scaled { factor: f64 },
    /// A constant penalty for every agent.
    Fixed { value: f64 },
}

/// Where the Lepskii constant comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClpMode {
    Theoretical,
    Calibrated { value: f64 },
}

/// Samples held by one agent. Never serialized into protocol messages.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDataset {
    pub x: Points,
    pub y: Vec<f64>,
}

impl LocalDataset {
    pub fn new(x: Points, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return arg(format!("{} inputs but {} labels", x.len(), y.len()));
        }
        if y.is_empty() {
            return arg("a local dataset needs at least one sample");
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Samples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            x: self.x.slice(start, end),
            y: self.y[start..end].to_vec(),
        }
    }

    /// Samples reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut x = Points::empty(self.x.dim());
        for &i in order {
            x.push(self.x.row(i));
        }
        Self {
            x,
            y: order.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// `lambda_k = 1 / (k b)`.
pub fn lambda_at(b: f64, k: usize) -> f64 {
    1.0 / (k as f64 * b)
}

/// `max{(kappa^2 + 1)/3, 2 sqrt(kappa^2 + 1)}`.
pub fn c1_star(kappa: f64) -> f64 {
    let q = kappa * kappa + 1.0;
    (q / 3.0).max(2.0 * q.sqrt())
}

/// `4 b^2 (1 + 576 Gamma(5) (kappa M + gamma)^2 (sqrt 2 + 4)^2)`.
pub fn c_lp(b: f64, kappa: f64, m_bound: f64, gamma: f64) -> f64 {
    let noise = kappa * m_bound + gamma;
    let tail = std::f64::consts::SQRT_2 + 4.0;
    4.0 * b * b * (1.0 + 576.0 * GAMMA_5 * noise * noise * tail * tail)
}

/// Ladder cap for an agent holding `n` samples. Logs are natural.
pub fn ladder_cap(n: usize, b: f64, kappa: f64, mode: CapMode) -> usize {
    let nf = n as f64;
    let c1 = c1_star(kappa);
    let l = (16.0 * nf).ln();
    let theoretical = (nf / (16.0 * b * c1 * c1 * l * l * l)).floor() as usize;
    match mode {
        CapMode::Theoretical => theoretical,
        CapMode::Practical { k_min } => theoretical.max(k_min),
    }
}

/// Penalty of the local approximation step for an agent with `n` samples.
pub fn mu_for_agent(n: usize, b: f64, kappa: f64, mode: MuMode) -> f64 {
    let nf = n as f64;
    let theoretical = 48.0 * b * c1_star(kappa) * (1.0 + 8.0 * kappa * nf).ln() / nf;
    match mode {
        MuMode::Theoretical => theoretical,
        MuMode::Scaled { factor } => theoretical * factor,
        MuMode::Fixed { value } => value,
    }
}

/// `1/(n sqrt(lambda)) + (1 + 1/sqrt(lambda n)) sqrt(max{n_eff, 1} / n)`.
pub fn w_quantity(n: usize, lambda: f64, n_eff: f64) -> f64 {
    let nf = n as f64;
    let sl = lambda.sqrt();
    1.0 / (nf * sl) + (1.0 + 1.0 / (lambda * nf).sqrt()) * (n_eff.max(1.0) / nf).sqrt()
}

/// The regularization grid `lambda_k = 1/(k b)`, `k = 1..=k_cap`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ladder {
    b: f64,
    k_cap: usize,
}

impl Ladder {
    pub fn new(b: f64, k_cap: usize) -> Result<Self> {
        if !(b >= 1.0 && b.is_finite()) {
            return arg(format!("ladder base b must be >= 1, got {b}"));
        }
        if k_cap == 0 {
            return arg("ladder cap must be positive");
        }
        Ok(Self { b, k_cap })
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn k_cap(&self) -> usize {
        self.k_cap
    }

    /// `lambda_k` for `1 <= k <= k_cap`.
    pub fn lambda(&self, k: usize) -> f64 {
        debug_assert!(k >= 1 && k <= self.k_cap);
        lambda_at(self.b, k)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (1..=self.k_cap).map(|k| self.lambda(k)).collect()
    }
}

/// Constants used by the stopping rule, with the mode they were produced in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub c1_star: f64,
    pub c_lp: f64,
    pub m_bound: f64,
    pub gamma: f64,
    pub clp_mode: ClpMode,
}

impl Constants {
    pub fn new(kappa: f64, b: f64, m_bound: f64, gamma: f64, clp_mode: ClpMode) -> Result<Self> {
        if !(m_bound >= 0.0 && gamma >= 0.0) {
            return arg("noise constants M and gamma must be non-negative");
        }
        let c_lp = match clp_mode {
            ClpMode::Theoretical => c_lp(b, kappa, m_bound, gamma),
            ClpMode::Calibrated { value } if value > 0.0 => value,
            ClpMode::Calibrated { value } => {
                return arg(format!("calibrated C_LP must be positive, got {value}"))
            }
        };
        Ok(Self {
            c1_star: c1_star(kappa),
            c_lp,
            m_bound,
            gamma,
            clp_mode,
        })
    }
}

pub(crate) fn check_symmetric(gram: &DMatrix<f64>) -> Result<()> {
    if !gram.is_square() {
        return arg(format!(
            "gram matrix is {}x{}, not square",
            gram.nrows(),
            gram.ncols()
        ));
    }
    let scale = gram.amax().max(1.0);
    let n = gram.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (gram[(i, j)] - gram[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return arg(format!("gram matrix is not symmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// Coefficients `(gram + lambda n I)^{-1} y` via a Cholesky factorization.
pub fn solve_krr(gram: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<DVector<f64>> {
    check_symmetric(gram)?;
    let n = gram.nrows();
    if y.len() != n {
        return arg(format!("{} targets for a {n}x{n} gram matrix", y.len()));
    }
    if !(lambda > 0.0) {
        return arg(format!("lambda must be positive, got {lambda}"));
    }
    let mut a = gram.clone();
    for i in 0..n {
        a[(i, i)] += lambda * n as f64;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numeric("KRR system is not positive definite".into()))?;
    Ok(chol.solve(&DVector::from_column_slice(y)))
}

/// `sum_i coeffs_i K(support_i, x)`.
pub fn predict_krr(coeffs: &[f64], spec: &KernelSpec, support: &Points, x: &[f64]) -> Result<f64> {
    if coeffs.len() != support.len() {
        return arg(format!(
            "{} coefficients for {} support points",
            coeffs.len(),
            support.len()
        ));
    }
    crate::kernel::check_point(spec, x, 0)?;
    Ok(kernel_column(spec, support, x)
        .iter()
        .zip(coeffs)
        .map(|(k, c)| k * c)
        .sum())
}

/// `Tr[(lambda n I + gram)^{-1} gram]`.
pub fn empirical_effective_dimension(gram: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return arg(format!("lambda must be positive, got {lambda}"));
    }
    check_symmetric(gram)?;
    let n = gram.nrows();
    let mut a = gram.clone();
    for i in 0..n {
        a[(i, i)] += lambda * n as f64;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numeric("shifted gram is not positive definite".into()))?;
    Ok(chol.solve(gram).trace())
}

/// `a^T gram a`, the squared RKHS norm of `sum a_i K_{x_i}`.
pub fn rkhs_norm_sq(gram: &DMatrix<f64>, a: &DVector<f64>) -> f64 {
    a.dot(&(gram * a))
}

/// Eigendecomposition of one agent's gram matrix, shared by every ladder solve.
#[derive(Clone, Debug)]
pub struct SpectralGram {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SpectralGram {
    pub fn new(gram: &DMatrix<f64>) -> Result<Self> {
        check_symmetric(gram)?;
        let eig = SymmetricEigen::try_new(gram.clone(), f64::EPSILON, 0)
            .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
        let eigenvalues = eig.eigenvalues.map(|e| e.max(0.0));
        Ok(Self {
            eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `Q^T y`.
    pub fn rotate(&self, y: &DVector<f64>) -> DVector<f64> {
        self.eigenvectors.tr_mul(y)
    }

    /// KRR coefficients given the rotated targets `Q^T y`.
    pub fn solve_rotated(&self, rotated: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let shift = lambda * self.n() as f64;
        let scaled = DVector::from_iterator(
            self.n(),
            rotated
                .iter()
                .zip(self.eigenvalues.iter())
                .map(|(r, e)| r / (e + shift)),
        );
        &self.eigenvectors * scaled
    }

    pub fn effective_dimension(&self, lambda: f64) -> f64 {
        let shift = lambda * self.n() as f64;
        self.eigenvalues.iter().map(|e| e / (e + shift)).sum()
    }
}

/// One agent's estimates along the ladder.
#[derive(Clone, Debug)]
pub struct LocalModelSet {
    ladder: Ladder,
    /// `coeffs[k - 1]` solves `(gram + lambda_k n I) a = y`.
    coeffs: Vec<DVector<f64>>,
    w: Vec<f64>,
    n_eff: Vec<f64>,
}

impl LocalModelSet {
    /// Solves every rung of the ladder against one eigendecomposition.
    pub fn fit(spectral: &SpectralGram, y: &[f64], ladder: Ladder) -> Result<Self> {
        let n = spectral.n();
        if y.len() != n {
            return arg(format!("{} targets for {n} samples", y.len()));
        }
        let rotated = spectral.rotate(&DVector::from_column_slice(y));
        let mut coeffs = Vec::with_capacity(ladder.k_cap());
        let mut w = Vec::with_capacity(ladder.k_cap());
        let mut n_eff = Vec::with_capacity(ladder.k_cap());
        for k in 1..=ladder.k_cap() {
            let lambda = ladder.lambda(k);
            let a = spectral.solve_rotated(&rotated, lambda);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite coefficients at k = {k}"
                )));
            }
            let ne = spectral.effective_dimension(lambda);
            coeffs.push(a);
            w.push(w_quantity(n, lambda, ne));
            n_eff.push(ne);
        }
        Ok(Self {
            ladder,
            coeffs,
            w,
            n_eff,
        })
    }

    pub fn ladder(&self) -> Ladder {
        self.ladder
    }

    /// Coefficients at ladder index `k` (1-based).
    pub fn coeffs(&self, k: usize) -> &DVector<f64> {
        &self.coeffs[k - 1]
    }

    /// `a_k - a_{k-1}` for `k >= 2`.
    pub fn diff(&self, k: usize) -> DVector<f64> {
        &self.coeffs[k - 1] - &self.coeffs[k - 2]
    }

    /// W-quantity at ladder index `k` (1-based).
    pub fn w(&self, k: usize) -> f64 {
        self.w[k - 1]
    }

    pub fn effective_dimension(&self, k: usize) -> f64 {
        self.n_eff[k - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::kernel::gram_matrix;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn solve_krr_examples() {
        let a = solve_krr(&DMatrix::from_element(1, 1, 1.0), &[3.0], 1.0).unwrap();
        assert!((a[0] - 1.5).abs() < 1e-15);

        let a = solve_krr(&DMatrix::identity(2, 2), &[2.0, 4.0], 0.5).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-15 && (a[1] - 2.0).abs() < 1e-15);

        // (G + 0.5 I) a = 1 with G = [[1, .5], [.5, 1]]  =>  2 a = 1.
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let a = solve_krr(&g, &[1.0, 1.0], 0.25).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15 && (a[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn solve_krr_rejects_bad_input() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(
            solve_krr(&g, &[1.0, 1.0], 1.0),
            Err(Error::Argument(_))
        ));
        let g = DMatrix::identity(2, 2);
        assert!(solve_krr(&g, &[1.0], 1.0).is_err());
        assert!(solve_krr(&g, &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn predict_krr_examples() {
        let spec = KernelSpec::gaussian(0.5, 1).unwrap();
        let support = Points::from_scalars(vec![0.2, 0.7]);
        assert_eq!(
            predict_krr(&[0.0, 0.0], &spec, &support, &[0.4]).unwrap(),
            0.0
        );

        let one = Points::from_scalars(vec![0.3]);
        assert_eq!(predict_krr(&[1.0], &spec, &one, &[0.3]).unwrap(), 1.0);

        assert!(predict_krr(&[1.0], &spec, &support, &[0.3]).is_err());

        // Predictions at training points equal the gram-times-coefficients product.
        let g = gram_matrix(&spec, &support, &support).unwrap();
        let a = solve_krr(&g, &[1.0, -0.5], 0.1).unwrap();
        let direct = &g * &a;
        for i in 0..2 {
            let p = predict_krr(a.as_slice(), &spec, &support, support.row(i)).unwrap();
            assert!((p - direct[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn effective_dimension_examples() {
        let v = empirical_effective_dimension(&DMatrix::identity(2, 2), 0.5).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let v = empirical_effective_dimension(&g, 0.25).unwrap();
        assert!((v - 1.25).abs() < 1e-14);
        let v = empirical_effective_dimension(&g, 1e6).unwrap();
        assert!(v < 1e-4 * g.trace());
        assert!(empirical_effective_dimension(&g, 0.0).is_err());
        assert!(empirical_effective_dimension(&g, -1.0).is_err());
    }

    #[test]
    fn w_quantity_examples() {
        assert!((w_quantity(4, 0.25, 1.0) - 1.5).abs() < 1e-15);
        assert!((w_quantity(4, 0.25, 0.5) - 1.5).abs() < 1e-15);
        assert!((w_quantity(100, 0.01, 4.0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn w_quantity_decreases_in_n() {
        let w: Vec<f64> = [4, 16, 64, 256]
            .iter()
            .map(|&n| w_quantity(n, 0.1, 3.0))
            .collect();
        assert!(w.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_at(1.0, 1), 1.0);
        assert!((lambda_at(2.0, 5) - 0.1).abs() < 1e-16);
        assert_eq!(lambda_at(1.0, 4), 0.25);
        let l = Ladder::new(1.0, 10).unwrap();
        assert_eq!(l.lambda(1), 1.0);
        assert!(l.lambdas().windows(2).all(|w| w[1] < w[0]));
        assert!(Ladder::new(0.5, 10).is_err());
        assert!(Ladder::new(1.0, 0).is_err());
    }

    #[test]
    fn ladder_cap_examples() {
        assert_eq!(ladder_cap(10_000, 1.0, 1.0, CapMode::Theoretical), 0);
        assert_eq!(
            ladder_cap(10_000, 1.0, 1.0, CapMode::Practical { k_min: 50 }),
            50
        );
        let small = ladder_cap(10_000, 1.0, 1.0, CapMode::Theoretical);
        let big = ladder_cap(1_000_000, 1.0, 1.0, CapMode::Theoretical);
        assert!(big >= small);
        // Only astronomically large samples make the cap non-trivial.
        assert!(ladder_cap(1_000_000_000, 1.0, 1.0, CapMode::Theoretical) > 0);
    }

    // Independent re-statements of the printed constants.
    fn c1_ref(kappa: f64) -> f64 {
        let a = (kappa.powi(2) + 1.0) / 3.0;
        let b = 2.0 * (kappa.powi(2) + 1.0).sqrt();
        if a > b {
            a
        } else {
            b
        }
    }
    fn clp_ref(b: f64, kappa: f64, m: f64, gamma: f64) -> f64 {
        let gamma5 = (1..=4).product::<u32>() as f64;
        4.0 * b.powi(2)
            * (1.0 + 576.0 * gamma5 * (kappa * m + gamma).powi(2) * (2f64.sqrt() + 4.0).powi(2))
    }
    fn mu_ref(n: usize, b: f64, kappa: f64) -> f64 {
        48.0 * b * c1_ref(kappa) * (1.0 + 8.0 * kappa * n as f64).ln() / n as f64
    }

    #[test]
    fn c1_star_examples() {
        assert!((c1_star(1.0) - 2.0 * 2f64.sqrt()).abs() < 1e-15);
        assert!((c1_star(2.0) - 2.0 * 5f64.sqrt()).abs() < 1e-15);
        assert!((c1_star(6.0) - 37.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn c_lp_examples() {
        let v = c_lp(1.0, 1.0, 1.0, 1.0);
        let expected = 4.0 * (1.0 + 576.0 * 24.0 * 4.0 * (18.0 + 8.0 * 2f64.sqrt()));
        assert!(close(v, expected, 1e-14));
        assert!((v / 6.4837e6 - 1.0).abs() < 1e-4);
        assert!(close(c_lp(2.0, 1.0, 1.0, 1.0), 4.0 * v, 1e-14));
        assert_eq!(GAMMA_5, 24.0);
    }

    #[test]
    fn mu_examples() {
        let v = mu_for_agent(100, 1.0, 1.0, MuMode::Theoretical);
        assert!((v - 9.0771).abs() < 1e-4, "{v}");
        assert!(
            mu_for_agent(1_000_000, 1.0, 1.0, MuMode::Theoretical)
                < mu_for_agent(100, 1.0, 1.0, MuMode::Theoretical)
        );
        let s = mu_for_agent(100, 1.0, 1.0, MuMode::Scaled { factor: 0.01 });
        assert!((s - 0.090771).abs() < 1e-6);
        assert_eq!(
            mu_for_agent(100, 1.0, 1.0, MuMode::Fixed { value: 1e-12 }),
            1e-12
        );
    }

    proptest! {
        #[test]
        fn constants_match_reference(kappa in 0.01f64..20.0, b in 1.0f64..50.0,
                                     m in 0.01f64..10.0, gamma in 0.01f64..10.0,
                                     n in 1usize..1_000_000) {
            prop_assert!(close(c1_star(kappa), c1_ref(kappa), 1e-10));
            prop_assert!(close(c_lp(b, kappa, m, gamma), clp_ref(b, kappa, m, gamma), 1e-10));
            prop_assert!(close(mu_for_agent(n, b, kappa, MuMode::Theoretical),
                               mu_ref(n, b, kappa), 1e-10));
        }
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize) -> (DMatrix<f64>, Vec<f64>) {
        let spec = KernelSpec::truncated_mercer(0.5, 200).unwrap();
        let pts = Points::from_scalars((0..n).map(|_| rng.gen::<f64>()).collect());
        let y = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (gram_matrix(&spec, &pts, &pts).unwrap(), y)
    }

    #[test]
    fn ladder_solves_have_small_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 7, 33, 64] {
            let (g, y) = random_problem(&mut rng, n);
            let ladder = Ladder::new(2.0, 30).unwrap();
            let models = LocalModelSet::fit(&SpectralGram::new(&g).unwrap(), &y, ladder).unwrap();
            let yv = DVector::from_column_slice(&y);
            for k in 1..=30 {
                let a = models.coeffs(k);
                let shift = ladder.lambda(k) * n as f64;
                let r = &g * a + a * shift - &yv;
                assert!(r.norm() <= 1e-8 * yv.norm(), "n={n} k={k}");
                let chol = solve_krr(&g, &y, ladder.lambda(k)).unwrap();
                assert!((a - &chol).norm() <= 1e-8 * chol.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn regularization_path_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..6 {
            let n = rng.gen_range(2..=64);
            let (g, y) = random_problem(&mut rng, n);
            let ladder = Ladder::new(1.0, 40).unwrap();
            let models = LocalModelSet::fit(&SpectralGram::new(&g).unwrap(), &y, ladder).unwrap();
            let yv = DVector::from_column_slice(&y);
            for k in 2..=40 {
                // k grows => lambda shrinks => norm grows, training residual shrinks.
                let (prev, cur) = (models.coeffs(k - 1), models.coeffs(k));
                assert!(rkhs_norm_sq(&g, cur) >= rkhs_norm_sq(&g, prev) * (1.0 - 1e-12));
                let res = |a: &DVector<f64>| (&yv - &g * a).norm_squared();
                assert!(res(cur) <= res(prev) * (1.0 + 1e-12) + 1e-15);
            }
        }
    }

    #[test]
    fn effective_dimension_strictly_decreasing_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (g, _) = random_problem(&mut rng, 40);
        let lambdas: Vec<f64> = (0..20)
            .map(|i| 10f64.powf(-4.0 + 0.25 * i as f64))
            .collect();
        let vals: Vec<f64> = lambdas
            .iter()
            .map(|&l| empirical_effective_dimension(&g, l).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!(vals.iter().all(|&v| v > 0.0 && v < 40.0));
        let spectral = SpectralGram::new(&g).unwrap();
        for (l, v) in lambdas.iter().zip(&vals) {
            assert!((spectral.effective_dimension(*l) - v).abs() < 1e-9 * v);
        }
    }

    #[test]
    fn single_sample_ladder() {
        let g = DMatrix::from_element(1, 1, 2.0);
        let ladder = Ladder::new(1.0, 3).unwrap();
        let m = LocalModelSet::fit(&SpectralGram::new(&g).unwrap(), &[1.0], ladder).unwrap();
        assert!((m.coeffs(1)[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(m.w(2) > 0.0);
        assert!((m.diff(2)[0] - (1.0 / 2.5 - 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn constants_modes() {
        let c = Constants::new(1.0, 1.0, 1.0, 1.0, ClpMode::Theoretical).unwrap();
        assert!(close(c.c_lp, c_lp(1.0, 1.0, 1.0, 1.0), 1e-15));
        let c = Constants::new(1.0, 1.0, 1.0, 1.0, ClpMode::Calibrated { value: 3.0 }).unwrap();
        assert_eq!(c.c_lp, 3.0);
        assert!(Constants::new(1.0, 1.0, 1.0, 1.0, ClpMode::Calibrated { value: -1.0 }).is_err());
    }
}
