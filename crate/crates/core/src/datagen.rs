//! Synthetic regression problems on `[0, 1]` with a known eigen-expansion.
//!
//! The target is `f_rho = sum_t sigma_t^r h_t phi_t` in the eigenbasis of the
//! truncated Mercer kernel, so the source-condition index `r` and the
//! eigen-decay index `s` are both exact. Errors of any finite kernel expansion
//! are computed in closed form from its eigen-coefficients.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::kernel::{gram_matrix, mercer_eigenvalues, mercer_features, KernelSpec};
use crate::krr::{solve_krr, LocalDataset};
use crate::points::Points;

/// Splitmix64 step, used to derive independent per-stream seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub r: f64,
    pub s_param: f64,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    pub seed: u64,
}

fn default_truncation() -> usize {
    crate::kernel::DEFAULT_TRUNCATION
}

/// A regression function with exact source condition and eigen-decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegressionConfig", into = "RegressionConfig")]
pub struct RegressionSpec {
    config: RegressionConfig,
    sigmas: Vec<f64>,
    h: Vec<f64>,
    /// `sigma_t^r h_t`, the eigen-coefficients of `f_rho`.
    theta: Vec<f64>,
}

impl TryFrom<RegressionConfig> for RegressionSpec {
    type Error = Error;
    fn try_from(c: RegressionConfig) -> Result<Self> {
        Self::new(c.r, c.s_param, c.truncation, c.seed)
    }
}

impl From<RegressionSpec> for RegressionConfig {
    fn from(s: RegressionSpec) -> Self {
        s.config
    }
}

impl RegressionSpec {
    /// `h_t = +-1/t` with seeded signs.
    pub fn new(r: f64, s_param: f64, truncation: usize, seed: u64) -> Result<Self> {
        if !(0.5..=1.0).contains(&r) {
            return arg(format!("r must lie in [1/2, 1], got {r}"));
        }
        if !(s_param > 0.0 && s_param <= 1.0) {
            return arg(format!("s_param must lie in (0, 1], got {s_param}"));
        }
        if truncation == 0 {
            return arg("truncation must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Vec<f64> = (1..=truncation)
            .map(|t| {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                sign / t as f64
            })
            .collect();
        Ok(Self::with_coefficients(r, s_param, seed, h))
    }

    /// Same construction with explicit `h` coefficients.
    pub fn with_coefficients(r: f64, s_param: f64, seed: u64, h: Vec<f64>) -> Self {
        let sigmas = mercer_eigenvalues(s_param, h.len());
        let theta = sigmas.iter().zip(&h).map(|(s, h)| s.powf(r) * h).collect();
        Self {
            config: RegressionConfig {
                r,
                s_param,
                truncation: h.len(),
                seed,
            },
            sigmas,
            h,
            theta,
        }
    }

    pub fn config(&self) -> &RegressionConfig {
        &self.config
    }

    pub fn r(&self) -> f64 {
        self.config.r
    }

    pub fn s_param(&self) -> f64 {
        self.config.s_param
    }

    pub fn truncation(&self) -> usize {
        self.h.len()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// `|h|_2`.
    pub fn h_norm(&self) -> f64 {
        self.h.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `|f_rho|_K^2 = sum sigma_t^{2r-1} h_t^2`.
    pub fn target_rkhs_norm_sq(&self) -> f64 {
        self.theta
            .iter()
            .zip(&self.sigmas)
            .map(|(th, s)| th * th / s)
            .sum()
    }

    /// The truncated Mercer kernel sharing this problem's eigenvalues.
    pub fn matching_kernel(&self) -> KernelSpec {
        KernelSpec::truncated_mercer(self.config.s_param, self.truncation())
            .expect("validated at construction")
    }

    pub fn f_rho(&self, x: f64) -> f64 {
        let a = PI * x;
        std::f64::consts::SQRT_2
            * self
                .theta
                .iter()
                .enumerate()
                .map(|(i, th)| th * ((i + 1) as f64 * a).cos())
                .sum::<f64>()
    }

    pub fn f_rho_all(&self, xs: &Points) -> Vec<f64> {
        xs.iter().map(|p| self.f_rho(p[0])).collect()
    }
}

/// Conditional noise `y - f_rho(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Uniform on `[-bound, bound]`.
    UniformBounded {
        bound: f64,
    },
    Gaussian {
        sigma: f64,
    },
}

/// `E[e^{|Z|} - |Z| - 1]` for standard normal `Z`: `2 e^{1/2} Phi(1) - sqrt(2/pi) - 1`.
const GAUSSIAN_MOMENT: f64 = 0.976_401_396_867_144_1;

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec::UniformBounded { bound: 0.0 }
    }

    /// `(M, gamma)` for which the moment condition holds. Bounded noise uses
    /// `gamma/2 = M = bound`; Gaussian noise uses `M = sigma`.
    pub fn constants(&self) -> (f64, f64) {
        match *self {
            NoiseSpec::UniformBounded { bound } => (bound, 2.0 * bound),
            NoiseSpec::Gaussian { sigma } => (sigma, sigma * (2.0 * GAUSSIAN_MOMENT).sqrt()),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::UniformBounded { bound } if bound >= 0.0 => Ok(()),
            NoiseSpec::Gaussian { sigma } if sigma >= 0.0 => Ok(()),
            _ => arg("noise scale must be non-negative"),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            NoiseSpec::UniformBounded { bound } if bound > 0.0 => {
                Uniform::new_inclusive(-bound, bound).sample(rng)
            }
            NoiseSpec::Gaussian { sigma } if sigma > 0.0 => {
                Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
            }
            _ => 0.0,
        }
    }
}

/// `n` i.i.d. samples with `x ~ U[0,1]` and `y = f_rho(x) + noise`.
pub fn sample_dataset(
    spec: &RegressionSpec,
    noise: &NoiseSpec,
    n: usize,
    seed: u64,
) -> Result<LocalDataset> {
    if n == 0 {
        return arg("cannot sample an empty dataset");
    }
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let y = xs
        .iter()
        .map(|&x| spec.f_rho(x) + noise.draw(&mut rng))
        .collect();
    LocalDataset::new(Points::from_scalars(xs), y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum PartitionScheme {
    Equal,
    Proportional { weights: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Partition {
    pub sizes: Vec<usize>,
    /// Set when some agent holds fewer than `|D|^{1/(2r+s)}` samples.
    pub under_qualified: bool,
}

/// Splits `n_total` samples among `m` agents.
pub fn partition(
    n_total: usize,
    m: usize,
    scheme: &PartitionScheme,
    r: f64,
    s: f64,
) -> Result<Partition> {
    if m == 0 {
        return arg("need at least one agent");
    }
    if m > n_total {
        return arg(format!("cannot split {n_total} samples among {m} agents"));
    }
    let sizes = match scheme {
        PartitionScheme::Equal => {
            let (q, rem) = (n_total / m, n_total % m);
            (0..m).map(|j| q + usize::from(j < rem)).collect::<Vec<_>>()
        }
        PartitionScheme::Proportional { weights } => {
            if weights.len() != m {
                return arg(format!("{} weights for {m} agents", weights.len()));
            }
            if weights.iter().any(|w| !(*w > 0.0)) {
                return arg("partition weights must be positive");
            }
            let total: f64 = weights.iter().sum();
            let exact: Vec<f64> = weights.iter().map(|w| n_total as f64 * w / total).collect();
            let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
            let mut left = n_total - sizes.iter().sum::<usize>();
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| {
                let fa = exact[a] - exact[a].floor();
                let fb = exact[b] - exact[b].floor();
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            for &j in &order {
                if left == 0 {
                    break;
                }
                sizes[j] += 1;
                left -= 1;
            }
            if sizes.contains(&0) {
                return arg("proportional partition leaves an agent without samples");
            }
            sizes
        }
    };
    let floor = (n_total as f64).powf(1.0 / (2.0 * r + s));
    let under_qualified = sizes.iter().any(|&n| (n as f64) < floor);
    Ok(Partition {
        sizes,
        under_qualified,
    })
}

/// `N(lambda) = sum_t sigma_t / (sigma_t + lambda)`.
pub fn population_effective_dimension(spec: &RegressionSpec, lambda: f64) -> f64 {
    spec.sigmas.iter().map(|s| s / (s + lambda)).sum()
}

/// `max_lambda N(lambda) lambda^s` over the grid, with the monotonicity check.
pub fn effective_dimension_constant(spec: &RegressionSpec, lambdas: &[f64]) -> (f64, bool) {
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let vals: Vec<f64> = sorted
        .iter()
        .map(|&l| population_effective_dimension(spec, l))
        .collect();
    let monotone = vals.windows(2).all(|w| w[1] < w[0]);
    let c0 = sorted
        .iter()
        .zip(&vals)
        .map(|(l, n)| n * l.powf(spec.s_param()))
        .fold(0.0, f64::max);
    (c0, monotone)
}

/// `sum_p c_p K(z_p, .)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelExpansion {
    pub points: Points,
    pub coeffs: Vec<f64>,
}

/// Squared errors of an estimate against `f_rho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorPair {
    pub rho_norm_sq: f64,
    pub k_norm_sq: f64,
}

fn check_kernel(kernel: &KernelSpec, spec: &RegressionSpec) -> Result<()> {
    match (kernel.s_param(), kernel.mercer_sigmas()) {
        (Some(s), Some(sig)) if s == spec.s_param() && sig.len() == spec.truncation() => Ok(()),
        _ => arg("estimate is not expressible in the problem's eigenbasis; use the matching truncated Mercer kernel"),
    }
}

/// `sum_p c_p phi_t(z_p)` for every `t`.
pub fn eigen_projection(points: &Points, coeffs: &[f64], truncation: usize) -> DVector<f64> {
    mercer_features(points, truncation).tr_mul(&DVector::from_column_slice(coeffs))
}

/// Errors of the function whose eigen-projection (see [`eigen_projection`]) is `proj`.
pub fn errors_from_projection(proj: &DVector<f64>, spec: &RegressionSpec) -> ErrorPair {
    let mut rho = 0.0;
    let mut k = 0.0;
    for ((p, s), th) in proj.iter().zip(&spec.sigmas).zip(&spec.theta) {
        let e = s * p - th;
        rho += e * e;
        k += e * e / s;
    }
    ErrorPair {
        rho_norm_sq: rho,
        k_norm_sq: k,
    }
}

/// `(|est - f_rho|_rho^2, |est - f_rho|_K^2)` computed in the eigenbasis.
pub fn true_errors(
    estimate: &KernelExpansion,
    kernel: &KernelSpec,
    spec: &RegressionSpec,
) -> Result<ErrorPair> {
    check_kernel(kernel, spec)?;
    if estimate.points.len() != estimate.coeffs.len() {
        return arg("expansion has mismatched points and coefficients");
    }
    if estimate.points.is_empty() {
        return Ok(errors_from_projection(
            &DVector::zeros(spec.truncation()),
            spec,
        ));
    }
    kernel.domain().check(&estimate.points)?;
    let proj = eigen_projection(&estimate.points, &estimate.coeffs, spec.truncation());
    Ok(errors_from_projection(&proj, spec))
}

/// KRR fitted to the noise-free targets `f_rho(x_i)`.
pub fn noise_free_krr(
    agent: &LocalDataset,
    kernel: &KernelSpec,
    spec: &RegressionSpec,
    lambda: f64,
) -> Result<DVector<f64>> {
    let gram = gram_matrix(kernel, &agent.x, &agent.x)?;
    solve_krr(&gram, &spec.f_rho_all(&agent.x), lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub reps: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// `rhs * (1 + 3/sqrt(reps))`.
    pub allowed: f64,
    pub passed: bool,
}

/// Monte Carlo estimate of both sides of the averaging error decomposition
/// in the `rho`-norm.
pub fn lemma1_diagnostic(
    kernel: &KernelSpec,
    spec: &RegressionSpec,
    noise: &NoiseSpec,
    sizes: &[usize],
    lambda: f64,
    reps: usize,
    seed: u64,
) -> Result<Lemma1Report> {
    if reps < 30 {
        return arg(format!(
            "the diagnostic needs at least 30 repetitions, got {reps}"
        ));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return arg("every agent needs at least one sample");
    }
    check_kernel(kernel, spec)?;
    let total: usize = sizes.iter().sum();
    let t = spec.truncation();
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for rep in 0..reps {
        let mut avg_proj = DVector::zeros(t);
        for (j, &n) in sizes.iter().enumerate() {
            let w = n as f64 / total as f64;
            let data = sample_dataset(
                spec,
                noise,
                n,
                derive_seed(seed, (rep * sizes.len() + j) as u64),
            )?;
            let feats = mercer_features(&data.x, t);
            let mut gram = &feats
                * DMatrix::from_diagonal(&DVector::from_column_slice(&spec.sigmas))
                * feats.transpose();
            for i in 0..n {
                gram[(i, i)] += lambda * n as f64;
            }
            let chol = gram
                .cholesky()
                .ok_or_else(|| Error::Numeric("KRR system is not positive definite".into()))?;
            let a = chol.solve(&DVector::from_column_slice(&data.y));
            let a_free = chol.solve(&DVector::from_column_slice(&spec.f_rho_all(&data.x)));
            let proj = feats.tr_mul(&a);
            let proj_free = feats.tr_mul(&a_free);
            rhs += w * w * errors_from_projection(&proj, spec).rho_norm_sq
                + w * errors_from_projection(&proj_free, spec).rho_norm_sq;
            avg_proj += proj * w;
        }
        lhs += errors_from_projection(&avg_proj, spec).rho_norm_sq;
    }
    lhs /= reps as f64;
    rhs /= reps as f64;
    let allowed = rhs * (1.0 + 3.0 / (reps as f64).sqrt());
    Ok(Lemma1Report {
        reps,
        lhs,
        rhs,
        ratio: lhs / rhs,
        allowed,
        passed: lhs <= allowed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::krr::{empirical_effective_dimension, solve_krr};

    fn spec() -> RegressionSpec {
        RegressionSpec::new(0.5, 0.5, 1000, 17).unwrap()
    }

    #[test]
    fn noiseless_samples_hit_the_target() {
        let s = spec();
        let d = sample_dataset(&s, &NoiseSpec::noiseless(), 50, 1).unwrap();
        for (x, y) in d.x.iter().zip(&d.y) {
            assert_eq!(*y, s.f_rho(x[0]));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = spec();
        let n = NoiseSpec::UniformBounded { bound: 0.3 };
        assert_eq!(
            sample_dataset(&s, &n, 40, 9).unwrap(),
            sample_dataset(&s, &n, 40, 9).unwrap()
        );
        assert_ne!(
            sample_dataset(&s, &n, 40, 9).unwrap(),
            sample_dataset(&s, &n, 40, 10).unwrap()
        );
    }

    #[test]
    fn bounded_noise_is_bounded() {
        // A short truncation keeps 10^5 target evaluations cheap.
        let s = RegressionSpec::new(0.5, 0.5, 20, 3).unwrap();
        let d = sample_dataset(&s, &NoiseSpec::UniformBounded { bound: 0.5 }, 100_000, 4).unwrap();
        let worst =
            d.x.iter()
                .zip(&d.y)
                .map(|(x, y)| (y - s.f_rho(x[0])).abs())
                .fold(0.0, f64::max);
        assert!(worst <= 0.5);
        assert!(worst > 0.45);
    }

    #[test]
    fn gaussian_constants_satisfy_moment_condition() {
        // E[e^{|Z|} - |Z| - 1] by trapezoidal quadrature of the half-normal density.
        let h = 1e-4;
        let integral: f64 = (0..200_000)
            .map(|i| {
                let z = (i as f64 + 0.5) * h;
                let dens = 2.0 * (-z * z / 2.0).exp() / (2.0 * PI).sqrt();
                (z.exp() - z - 1.0) * dens * h
            })
            .sum();
        assert!((integral - GAUSSIAN_MOMENT).abs() < 1e-8, "{integral}");
        let (m, gamma) = NoiseSpec::Gaussian { sigma: 0.7 }.constants();
        assert!(integral <= gamma * gamma / (2.0 * m * m) * (1.0 + 1e-12));
        assert_eq!(
            NoiseSpec::UniformBounded { bound: 0.25 }.constants(),
            (0.25, 0.5)
        );
    }

    #[test]
    fn partition_examples() {
        let p = partition(10, 3, &PartitionScheme::Equal, 0.5, 0.5).unwrap();
        assert_eq!(p.sizes, vec![4, 3, 3]);
        let p = partition(
            8,
            2,
            &PartitionScheme::Proportional {
                weights: vec![1.0, 3.0],
            },
            0.5,
            0.5,
        )
        .unwrap();
        assert_eq!(p.sizes, vec![2, 6]);
        let p = partition(4096, 8, &PartitionScheme::Equal, 0.5, 0.5).unwrap();
        assert_eq!(p.sizes, vec![512; 8]);
        assert!(!p.under_qualified);
        let p = partition(4096, 64, &PartitionScheme::Equal, 0.5, 0.5).unwrap();
        assert!(p.under_qualified);
        assert!(partition(3, 4, &PartitionScheme::Equal, 0.5, 0.5).is_err());
        let p = partition(
            1001,
            7,
            &PartitionScheme::Proportional {
                weights: vec![1.0; 7],
            },
            0.5,
            0.5,
        )
        .unwrap();
        assert_eq!(p.sizes.iter().sum::<usize>(), 1001);
    }

    #[test]
    fn population_effective_dimension_examples() {
        let s3 = RegressionSpec::new(0.5, 0.5, 3, 0).unwrap();
        assert!((population_effective_dimension(&s3, 1.0) - 0.8).abs() < 1e-15);
        let s = spec();
        assert!(population_effective_dimension(&s, 1e6) < 1000.0 * 1e-6 * s.sigmas()[0]);
        let first = s.sigmas()[0] / (s.sigmas()[0] + s.sigmas()[0]);
        assert_eq!(first, 0.5);
    }

    #[test]
    fn effective_dimension_decay_constant() {
        let s = spec();
        let grid: Vec<f64> = (0..20).map(|i| 10f64.powf(-4.0 + 0.2 * i as f64)).collect();
        let (c0, monotone) = effective_dimension_constant(&s, &grid);
        assert!(monotone);
        assert!(c0.is_finite() && c0 > 0.0);
        // For sigma_t = t^-2 the decay constant is close to pi/2.
        assert!(c0 < 2.0, "{c0}");
    }

    #[test]
    fn true_errors_of_target_and_zero() {
        let s = spec();
        let k = s.matching_kernel();
        let zero = KernelExpansion {
            points: Points::from_scalars(vec![0.3]),
            coeffs: vec![0.0],
        };
        let e = true_errors(&zero, &k, &s).unwrap();
        let rho: f64 = s.theta().iter().map(|t| t * t).sum();
        assert!((e.rho_norm_sq - rho).abs() < 1e-15);
        assert_eq!(e.k_norm_sq, s.target_rkhs_norm_sq());
        let direct: f64 = s
            .sigmas()
            .iter()
            .zip(s.h())
            .map(|(sg, h)| sg.powf(2.0 * s.r() - 1.0) * h * h)
            .sum();
        assert!((e.k_norm_sq - direct).abs() < 1e-12 * direct);

        // A single-term target is represented exactly by one kernel section:
        // K(0, .) = 2 sigma_1 cos(pi .) = sqrt(2) sigma_1 phi_1.
        let one = RegressionSpec::with_coefficients(0.5, 0.5, 0, vec![1.0]);
        let k1 = one.matching_kernel();
        let exp = KernelExpansion {
            points: Points::from_scalars(vec![0.0]),
            coeffs: vec![1.0 / 2f64.sqrt()],
        };
        let e = true_errors(&exp, &k1, &one).unwrap();
        assert!(e.rho_norm_sq < 1e-30 && e.k_norm_sq < 1e-30);

        let gauss = KernelSpec::gaussian(0.2, 1).unwrap();
        assert!(true_errors(&zero, &gauss, &s).is_err());
    }

    #[test]
    fn rho_error_matches_monte_carlo() {
        let s = spec();
        let k = s.matching_kernel();
        let d = sample_dataset(&s, &NoiseSpec::UniformBounded { bound: 0.5 }, 30, 2).unwrap();
        let g = gram_matrix(&k, &d.x, &d.x).unwrap();
        let a = solve_krr(&g, &d.y, 0.01).unwrap();
        let est = KernelExpansion {
            points: d.x.clone(),
            coeffs: a.as_slice().to_vec(),
        };
        let exact = true_errors(&est, &k, &s).unwrap().rho_norm_sq;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let q = Points::from_scalars((0..100_000).map(|_| rng.gen::<f64>()).collect());
        let kq = gram_matrix(&k, &q, &d.x).unwrap();
        let pred = kq * a;
        let mc: f64 = q
            .iter()
            .zip(pred.iter())
            .map(|(x, p)| (p - s.f_rho(x[0])).powi(2))
            .sum::<f64>()
            / 100_000.0;
        assert!((mc - exact).abs() <= 0.01 * exact, "{mc} vs {exact}");
    }

    #[test]
    fn noise_free_krr_examples() {
        let s = spec();
        let k = s.matching_kernel();
        let clean = sample_dataset(&s, &NoiseSpec::noiseless(), 20, 5).unwrap();
        let g = gram_matrix(&k, &clean.x, &clean.x).unwrap();
        let a = noise_free_krr(&clean, &k, &s, 0.05).unwrap();
        assert_eq!(a, solve_krr(&g, &clean.y, 0.05).unwrap());

        let noisy = sample_dataset(&s, &NoiseSpec::UniformBounded { bound: 1.0 }, 20, 5).unwrap();
        let a = noise_free_krr(&noisy, &k, &s, 0.05).unwrap();
        let g = gram_matrix(&k, &noisy.x, &noisy.x).unwrap();
        assert_eq!(a, solve_krr(&g, &s.f_rho_all(&noisy.x), 0.05).unwrap());

        let zero = RegressionSpec::with_coefficients(0.5, 0.5, 0, vec![0.0; 50]);
        let kz = zero.matching_kernel();
        let a = noise_free_krr(&noisy, &kz, &zero, 0.1).unwrap();
        assert!(a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lemma1_small_cases() {
        let s = RegressionSpec::new(0.5, 0.5, 200, 1).unwrap();
        let k = s.matching_kernel();
        let r = lemma1_diagnostic(&k, &s, &NoiseSpec::noiseless(), &[40, 40], 0.05, 30, 3).unwrap();
        assert!(r.passed);
        let r = lemma1_diagnostic(
            &k,
            &s,
            &NoiseSpec::UniformBounded { bound: 0.5 },
            &[60],
            0.05,
            30,
            3,
        )
        .unwrap();
        assert!(r.passed && r.ratio < 1.0);
        assert!(lemma1_diagnostic(&k, &s, &NoiseSpec::noiseless(), &[40], 0.05, 10, 3).is_err());
    }

    #[test]
    fn empirical_and_population_effective_dimension_are_close() {
        let s = spec();
        let k = s.matching_kernel();
        for lambda in [0.1, 0.01] {
            let mean: f64 = (0..5)
                .map(|seed| {
                    let d = sample_dataset(&s, &NoiseSpec::noiseless(), 256, seed).unwrap();
                    let g = gram_matrix(&k, &d.x, &d.x).unwrap();
                    empirical_effective_dimension(&g, lambda).unwrap()
                })
                .sum::<f64>()
                / 5.0;
            let pop = population_effective_dimension(&s, lambda);
            assert!((mean - pop).abs() <= 0.3 * pop, "{mean} vs {pop}");
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let s = spec();
        let text = serde_json::to_string(&s).unwrap();
        let back: RegressionSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(
            serde_json::from_str::<RegressionSpec>(r#"{"r":0.2,"s_param":0.5,"seed":1}"#).is_err()
        );
    }
}
