//! Experiment configuration, single runs and sample-size sweeps.

use std::cell::RefCell;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::{
    derive_seed, errors_from_projection, partition, sample_dataset, NoiseSpec, PartitionScheme,
    RegressionConfig, RegressionSpec,
};
use crate::error::{arg, Error, Result};
use crate::kernel::{mercer_features, KernelConfig, KernelSpec};
use crate::krr::{ClpMode, Constants, LocalDataset};
use crate::lepskii::{calibrate_clp, CalibrationOptions, ClpPipeline, TraceRow};
use crate::points::Points;
use crate::protocol::{halton_points, ProtocolConfig, Session, StepTotals};

/// Seed stream for the coordinator's centers.
const CENTER_STREAM: u64 = 1 << 32;
/// Seed stream for the calibration session's centers.
const CALIBRATION_STREAM: u64 = (1 << 32) + 1;

/// Source of the Lepskii constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClpSetting {
    /// The closed-form constant for the configured noise.
    Theoretical,
    Fixed {
        value: f64,
    },
    /// Grid search on a holdout prefix of every agent's data.
    Calibrated {
        grid: Vec<f64>,
        #[serde(default = "default_holdout_fraction")]
        holdout_fraction: f64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default)]
        shuffle_seed: Option<u64>,
        #[serde(default = "default_folds")]
        folds: usize,
    },
}

fn default_folds() -> usize {
    1
}

fn default_holdout_fraction() -> f64 {
    0.1
}

fn default_train_fraction() -> f64 {
    0.9
}

/// Geometric grid of `count` values from `lo` to `hi`.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let step = (hi / lo).ln() / (count - 1) as f64;
    (0..count).map(|i| lo * (step * i as f64).exp()).collect()
}

fn default_partition() -> PartitionScheme {
    PartitionScheme::Equal
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Must be the problem's truncated Mercer kernel when given; errors are
    /// computed exactly in its eigenbasis.
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
    pub regression: RegressionConfig,
    pub noise: NoiseSpec,
    pub n_total: usize,
    pub m: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionScheme,
    pub protocol: ProtocolConfig,
    pub clp: ClpSetting,
    /// Query points sent through step 5; 0 skips it.
    #[serde(default)]
    pub eval_points: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.protocol.b < 1.0 {
            return Err(Error::Config(format!(
                "b = {} must be at least 1",
                self.protocol.b
            )));
        }
        if self.m == 0 || self.n_total < self.m {
            return Err(Error::Config(format!(
                "cannot split {} samples among {} agents",
                self.n_total, self.m
            )));
        }
        if let Some(l) = self.protocol.n_centers {
            let need = self.n_total.div_ceil(self.m);
            if matches!(self.partition, PartitionScheme::Equal) && l < need {
                return Err(Error::Config(format!(
                    "n_centers = {l} is below the largest agent size {need}; raise it or leave it unset"
                )));
            }
        }
        Ok(())
    }

    fn kernel_spec(&self, spec: &RegressionSpec) -> Result<KernelSpec> {
        let matching = spec.matching_kernel();
        match &self.kernel {
            None => Ok(matching),
            Some(k) if *k == matching.config() => Ok(matching),
            Some(_) => Err(Error::Config(
                "exact error metrics need the problem's truncated Mercer kernel; drop the kernel field or make it match".into(),
            )),
        }
    }
}

/// Every seed a run draws from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSeeds {
    pub base: u64,
    pub regression: u64,
    pub agents: Vec<u64>,
    pub centers: u64,
    pub calibration_centers: Option<u64>,
    pub calibration_shuffle: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgentTrace {
    pub agent: usize,
    pub rows: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub under_qualified: bool,
    pub k_star: usize,
    pub selected_k: Vec<usize>,
    pub selected_lambda: Vec<f64>,
    pub c_lp: f64,
    pub clp_mode: ClpMode,
    /// `(candidate, validation MSE)` when the constant was calibrated.
    pub calibration_scores: Vec<(f64, f64)>,
    pub mu: Vec<f64>,
    pub rho_err: f64,
    pub k_err: f64,
    /// Best `rho` error of plain DKRR over the ladder.
    pub oracle_err: f64,
    pub oracle_k: usize,
    /// Worst `rho` error of plain DKRR over the ladder.
    pub ladder_max_err: f64,
    /// Mean squared error against `f_rho` of step-5 predictions on the
    /// evaluation points.
    pub eval_mse: Option<f64>,
    pub floats_sent: usize,
    pub bytes_sent: usize,
    pub per_step: [StepTotals; 5],
    pub seeds: RunSeeds,
    pub wall_ms: u128,
    #[serde(skip)]
    pub traces: Vec<AgentTrace>,
}

/// Runs the protocol on the holdouts during calibration.
struct ProtocolPipeline<'a> {
    kernel: &'a KernelSpec,
    config: &'a ProtocolConfig,
    center_seed: u64,
}

impl ClpPipeline for ProtocolPipeline<'_> {
    type Prepared = RefCell<Session>;

    fn prepare(&self, train: &[LocalDataset]) -> Result<Self::Prepared> {
        let mut config = self.config.clone();
        config.n_centers = None;
        let mut session = Session::new(self.kernel.clone(), train.to_vec(), config)?;
        session.setup(self.center_seed)?;
        Ok(RefCell::new(session))
    }

    fn validation_mse(
        &self,
        prepared: &Self::Prepared,
        c_lp: f64,
        validation: &[LocalDataset],
    ) -> Result<f64> {
        let mut session = prepared.borrow_mut();
        session.select(c_lp)?;
        let xs = Points::concat(validation.iter().map(|v| &v.x))?;
        let preds = session.predict_many(&xs)?;
        let mut sq = 0.0;
        let mut count = 0usize;
        for (p, y) in preds.iter().zip(validation.iter().flat_map(|v| &v.y)) {
            sq += (p - y) * (p - y);
            count += 1;
        }
        Ok(sq / count as f64)
    }
}

/// Executes data generation, the protocol and exact error evaluation.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    let start = Instant::now();
    config.validate()?;
    let spec = RegressionSpec::try_from(config.regression.clone())?;
    let kernel = config.kernel_spec(&spec)?;
    let part = partition(
        config.n_total,
        config.m,
        &config.partition,
        spec.r(),
        spec.s_param(),
    )?;
    let agent_seeds: Vec<u64> = (0..config.m as u64)
        .map(|j| derive_seed(config.seed, j))
        .collect();
    let datasets = part
        .sizes
        .iter()
        .zip(&agent_seeds)
        .map(|(&n, &s)| sample_dataset(&spec, &config.noise, n, s))
        .collect::<Result<Vec<_>>>()?;

    let mut seeds = RunSeeds {
        base: config.seed,
        regression: config.regression.seed,
        agents: agent_seeds,
        centers: derive_seed(config.seed, CENTER_STREAM),
        calibration_centers: None,
        calibration_shuffle: None,
    };

    let (c_lp, clp_mode, calibration_scores) = match &config.clp {
        ClpSetting::Theoretical => {
            let (m_bound, gamma) = config.noise.constants();
            let c = Constants::new(
                kernel.kappa(),
                config.protocol.b,
                m_bound,
                gamma,
                ClpMode::Theoretical,
            )?;
            (c.c_lp, ClpMode::Theoretical, Vec::new())
        }
        ClpSetting::Fixed { value } => {
            if !(*value > 0.0) {
                return Err(Error::Config("a fixed C_LP must be positive".into()));
            }
            (*value, ClpMode::Calibrated { value: *value }, Vec::new())
        }
        ClpSetting::Calibrated {
            grid,
            holdout_fraction,
            train_fraction,
            shuffle_seed,
            folds,
        } => {
            if !(*holdout_fraction > 0.0 && *holdout_fraction <= 1.0) {
                return Err(Error::Config("holdout_fraction must lie in (0, 1]".into()));
            }
            let holdouts = datasets
                .iter()
                .map(|d| {
                    let h = ((d.len() as f64 * holdout_fraction).ceil() as usize)
                        .clamp(2.min(d.len()), d.len());
                    d.slice(0, h)
                })
                .collect::<Vec<_>>();
            let center_seed = derive_seed(config.seed, CALIBRATION_STREAM);
            seeds.calibration_centers = Some(center_seed);
            seeds.calibration_shuffle = *shuffle_seed;
            let pipeline = ProtocolPipeline {
                kernel: &kernel,
                config: &config.protocol,
                center_seed,
            };
            let options = CalibrationOptions {
                train_fraction: *train_fraction,
                shuffle_seed: *shuffle_seed,
                folds: *folds,
            };
            let cal = calibrate_clp(&holdouts, grid, &pipeline, options)?;
            (
                cal.c_lp,
                ClpMode::Calibrated { value: cal.c_lp },
                cal.scores,
            )
        }
    };

    let mut session = Session::new(kernel.clone(), datasets, config.protocol.clone())?;
    session.setup(seeds.centers)?;
    session.select(c_lp)?;

    let eval_mse = if config.eval_points > 0 {
        let xs = halton_points(config.eval_points, kernel.domain())?;
        let preds = session.predict_many(&xs)?;
        let truth = spec.f_rho_all(&xs);
        let sq: f64 = preds
            .iter()
            .zip(&truth)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Some(sq / xs.len() as f64)
    } else {
        None
    };
    session.audit()?;

    let eval = evaluate(&session, &spec)?;
    let selected_k = session.selected_indices();
    let ladder_b = config.protocol.b;
    let traces = session
        .agents()
        .iter()
        .map(|a| AgentTrace {
            agent: a.id(),
            rows: a.selection().map(|s| s.trace.clone()).unwrap_or_default(),
        })
        .collect();
    Ok(RunResult {
        n: config.n_total,
        m: config.m,
        seed: config.seed,
        sizes: part.sizes,
        under_qualified: part.under_qualified,
        k_star: session.k_star().expect("setup fixed K*"),
        selected_lambda: selected_k
            .iter()
            .map(|&k| crate::krr::lambda_at(ladder_b, k))
            .collect(),
        selected_k,
        c_lp,
        clp_mode,
        calibration_scores,
        mu: session.agents().iter().filter_map(|a| a.mu()).collect(),
        rho_err: eval.rho_err,
        k_err: eval.k_err,
        oracle_err: eval.oracle_err,
        oracle_k: eval.oracle_k,
        ladder_max_err: eval.ladder_max_err,
        eval_mse,
        floats_sent: session.ledger().total_scalars(),
        bytes_sent: session.ledger().total_bytes(),
        per_step: session.ledger().step_totals(),
        seeds,
        wall_ms: start.elapsed().as_millis(),
        traces,
    })
}

struct Evaluation {
    rho_err: f64,
    k_err: f64,
    oracle_err: f64,
    oracle_k: usize,
    ladder_max_err: f64,
}

/// Exact errors of the selected estimate and of plain DKRR at every ladder
/// index, from the agents' eigen-projections.
fn evaluate(session: &Session, spec: &RegressionSpec) -> Result<Evaluation> {
    let k_star = session
        .k_star()
        .ok_or_else(|| Error::Protocol("run has no K*".into()))?;
    let t = spec.truncation();
    let total: usize = session.agents().iter().map(|a| a.n()).sum();
    // Column k-1 holds the projection of sum_j w_j f_{D_j, lambda_k}.
    let mut avg = DMatrix::<f64>::zeros(t, k_star);
    for agent in session.agents() {
        let models = agent
            .models()
            .ok_or_else(|| Error::Protocol(format!("agent {} has no ladder", agent.id())))?;
        let coeffs = DMatrix::from_columns(
            &(1..=k_star)
                .map(|k| models.coeffs(k).clone())
                .collect::<Vec<_>>(),
        );
        let feats = mercer_features(&agent.dataset().x, t);
        avg += (feats.transpose() * coeffs) * (agent.n() as f64 / total as f64);
    }
    let mut oracle_err = f64::INFINITY;
    let mut oracle_k = 0;
    let mut ladder_max_err = 0.0f64;
    for k in 1..=k_star {
        let e = errors_from_projection(&avg.column(k - 1).into_owned(), spec).rho_norm_sq;
        if e < oracle_err {
            oracle_err = e;
            oracle_k = k;
        }
        ladder_max_err = ladder_max_err.max(e);
    }
    let mut selected = DVector::zeros(t);
    for agent in session.agents() {
        let k = agent
            .selection()
            .ok_or_else(|| Error::Protocol(format!("agent {} made no selection", agent.id())))?
            .k;
        selected += avg.column(k - 1) * (agent.n() as f64 / total as f64);
    }
    let errs = errors_from_projection(&selected, spec);
    Ok(Evaluation {
        rho_err: errs.rho_norm_sq,
        k_err: errs.k_norm_sq,
        oracle_err,
        oracle_k,
        ladder_max_err,
    })
}

pub const CSV_HEADER: [&str; 11] = [
    "n",
    "m",
    "seed",
    "k_star_per_agent",
    "rho_err",
    "k_err",
    "oracle_err",
    "floats_sent",
    "wall_ms",
    "k_cap",
    "c_lp",
];

impl RunResult {
    pub fn csv_record(&self) -> Vec<String> {
        let ks: Vec<String> = self.selected_k.iter().map(usize::to_string).collect();
        vec![
            self.n.to_string(),
            self.m.to_string(),
            self.seed.to_string(),
            ks.join(";"),
            format!("{:e}", self.rho_err),
            format!("{:e}", self.k_err),
            format!("{:e}", self.oracle_err),
            self.floats_sent.to_string(),
            self.wall_ms.to_string(),
            self.k_star.to_string(),
            format!("{:e}", self.c_lp),
        ]
    }
}

pub fn write_results_csv<W: std::io::Write>(out: W, runs: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in runs {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

/// CSV rows `n,seed,agent,k,seminorm,threshold,hit`.
pub fn write_selection_traces<W: std::io::Write>(out: W, runs: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "seed", "agent", "k", "seminorm", "threshold", "hit"])?;
    for r in runs {
        for t in &r.traces {
            for row in &t.rows {
                w.write_record([
                    r.n.to_string(),
                    r.seed.to_string(),
                    t.agent.to_string(),
                    row.k.to_string(),
                    format!("{:e}", row.seminorm),
                    format!("{:e}", row.threshold),
                    row.hit.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    crate_version: &'static str,
    config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<&'a SweepSummary>,
    runs: &'a [RunResult],
}

/// Writes `results.csv`, `selection_trace.csv` and `manifest.json` into `dir`.
pub fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    runs: &[RunResult],
    sweep: Option<&SweepSummary>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_results_csv(fs::File::create(dir.join("results.csv"))?, runs)?;
    write_selection_traces(fs::File::create(dir.join("selection_trace.csv"))?, runs)?;
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION"),
        config,
        sweep,
        runs,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Number of agents as a function of the total sample size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MRule {
    /// `ceil(n^{1/4})`.
    #[default]
    QuarterPower,
    Fixed {
        m: usize,
    },
}

impl MRule {
    pub fn agents(&self, n: usize) -> usize {
        match *self {
            MRule::QuarterPower => (n as f64).powf(0.25).ceil() as usize,
            MRule::Fixed { m } => m,
        }
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return arg("a slope needs at least two paired points");
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return arg("log-log fit needs positive values");
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return arg("log-log fit needs distinct x values");
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub n_grid: Vec<usize>,
    pub m_rule: MRule,
    pub reps: usize,
    pub mean_rho_err: Vec<f64>,
    pub mean_oracle_err: Vec<f64>,
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub runs: Vec<RunResult>,
    pub summary: SweepSummary,
}

/// A failed sweep, with every run that completed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("sweep aborted at n = {n}, rep = {rep}: {source}")]
pub struct SweepError {
    pub n: usize,
    pub rep: usize,
    pub partial: Vec<RunResult>,
    #[source]
    pub source: Error,
}

/// Seed of repetition `rep` at sample size `n`.
pub fn sweep_seed(base: u64, n: usize, rep: usize) -> u64 {
    derive_seed(derive_seed(base, n as u64), rep as u64)
}

/// Runs `reps` experiments per sample size and fits the error slope.
pub fn sweep(
    config: &ExperimentConfig,
    n_grid: &[usize],
    m_rule: MRule,
    reps: usize,
) -> std::result::Result<SweepResult, SweepError> {
    let fail = |source: Error| SweepError {
        n: 0,
        rep: 0,
        partial: Vec::new(),
        source,
    };
    if reps < 3 {
        return Err(fail(Error::Config(
            "a sweep needs at least 3 repetitions".into(),
        )));
    }
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(fail(Error::Config(
            "the sample-size grid must be strictly increasing".into(),
        )));
    }
    let mut runs = Vec::with_capacity(n_grid.len() * reps);
    let mut mean_rho_err = Vec::with_capacity(n_grid.len());
    let mut mean_oracle_err = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let mut sum = 0.0;
        let mut sum_oracle = 0.0;
        for rep in 0..reps {
            let mut c = config.clone();
            c.n_total = n;
            c.m = m_rule.agents(n);
            c.seed = sweep_seed(config.seed, n, rep);
            match run_experiment(&c) {
                Ok(r) => {
                    sum += r.rho_err;
                    sum_oracle += r.oracle_err;
                    runs.push(r);
                }
                Err(source) => {
                    return Err(SweepError {
                        n,
                        rep,
                        partial: runs,
                        source,
                    })
                }
            }
        }
        mean_rho_err.push(sum / reps as f64);
        mean_oracle_err.push(sum_oracle / reps as f64);
    }
    let xs: Vec<f64> = n_grid.iter().map(|&n| n as f64).collect();
    let slope = if n_grid.len() >= 2 {
        log_log_slope(&xs, &mean_rho_err).map_err(fail)?
    } else {
        f64::NAN
    };
    Ok(SweepResult {
        runs,
        summary: SweepSummary {
            n_grid: n_grid.to_vec(),
            m_rule,
            reps,
            mean_rho_err,
            mean_oracle_err,
            slope,
        },
    })
}
