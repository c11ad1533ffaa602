use std::collections::BTreeMap;

use lepdkrr::datagen::{
    derive_seed, sample_dataset, true_errors, KernelExpansion, NoiseSpec, PartitionScheme,
    RegressionConfig, RegressionSpec,
};
use lepdkrr::experiment::{
    geometric_grid, log_log_slope, run_experiment, sweep, write_results_csv, ClpSetting,
    ExperimentConfig, MRule,
};
use lepdkrr::kernel::gram_matrix;
use lepdkrr::krr::{empirical_effective_dimension, solve_krr, w_quantity, CapMode, Ladder, MuMode};
use lepdkrr::lepskii::{select_k, threshold_at};
use lepdkrr::protocol::{CenterScheme, ProtocolConfig};
use lepdkrr::Error;

fn base(n: usize, m: usize, noise: NoiseSpec) -> ExperimentConfig {
    ExperimentConfig {
        kernel: None,
        regression: RegressionConfig {
            r: 0.5,
            s_param: 0.5,
            truncation: 300,
            seed: 3,
        },
        noise,
        n_total: n,
        m,
        partition: PartitionScheme::Equal,
        protocol: ProtocolConfig {
            b: 4.0,
            cap_mode: CapMode::Practical { k_min: 40 },
            mu_mode: MuMode::Fixed { value: 1e-8 },
            centers: CenterScheme::IidUniform,
            n_centers: None,
        },
        clp: ClpSetting::Fixed { value: 1.0 },
        eval_points: 20,
        seed: 99,
    }
}

#[test]
fn noiseless_single_agent_matches_the_direct_rule() {
    let mut cfg = base(150, 1, NoiseSpec::noiseless());
    let spec = RegressionSpec::try_from(cfg.regression.clone()).unwrap();
    let data = sample_dataset(&spec, &cfg.noise, 150, derive_seed(cfg.seed, 0)).unwrap();
    cfg.protocol.mu_mode = MuMode::Fixed { value: 1e-12 };
    cfg.protocol.centers = CenterScheme::Explicit {
        dim: 1,
        coords: data.x.coords().to_vec(),
    };
    let result = run_experiment(&cfg).unwrap();

    let kernel = spec.matching_kernel();
    let gram = gram_matrix(&kernel, &data.x, &data.x).unwrap();
    let ladder = Ladder::new(4.0, result.k_star).unwrap();
    let coeffs: Vec<_> = (1..=ladder.k_cap())
        .map(|k| solve_krr(&gram, &data.y, ladder.lambda(k)).unwrap())
        .collect();
    let mut sem = BTreeMap::new();
    let mut thr = BTreeMap::new();
    for k in 2..=ladder.k_cap() {
        let lambda = ladder.lambda(k);
        let d = &coeffs[k - 1] - &coeffs[k - 2];
        let v = &gram * &d;
        sem.insert(k, v.norm_squared() / 150.0 + lambda * d.dot(&v));
        let w = w_quantity(
            150,
            lambda,
            empirical_effective_dimension(&gram, lambda).unwrap(),
        );
        thr.insert(k, threshold_at(k, 1.0, w * w, &ladder).unwrap());
    }
    let k = select_k(&sem, &thr, ladder.k_cap()).unwrap();
    assert_eq!(result.selected_k, vec![k]);
    let expansion = KernelExpansion {
        points: data.x.clone(),
        coeffs: coeffs[k - 1].iter().copied().collect(),
    };
    let direct = true_errors(&expansion, &kernel, &spec).unwrap();
    assert!((result.rho_err - direct.rho_norm_sq).abs() <= 1e-6);
}

#[test]
fn noiseless_selection_is_near_the_ladder_oracle() {
    // A short expansion puts the target in the span reached at small lambda.
    let mut cfg = base(240, 3, NoiseSpec::noiseless());
    cfg.regression.truncation = 5;
    cfg.clp = ClpSetting::Calibrated {
        grid: geometric_grid(1e-4, 1e2, 7),
        holdout_fraction: 0.5,
        train_fraction: 0.8,
        shuffle_seed: None,
        folds: 1,
    };
    let r = run_experiment(&cfg).unwrap();
    assert!(
        r.rho_err <= 2.0 * r.oracle_err,
        "{} vs {} ks {:?} oracle k {} K* {}",
        r.rho_err,
        r.oracle_err,
        r.selected_k,
        r.oracle_k,
        r.k_star
    );
    assert!(r.oracle_err <= r.ladder_max_err);
    assert!(r.rho_err >= 0.0 && r.k_err >= 0.0);
}

#[test]
fn runs_are_deterministic() {
    let cfg = base(120, 2, NoiseSpec::UniformBounded { bound: 0.25 });
    let mut a = run_experiment(&cfg).unwrap();
    let mut b = run_experiment(&cfg).unwrap();
    a.wall_ms = 0;
    b.wall_ms = 0;
    assert_eq!(a.csv_record(), b.csv_record());
    assert_eq!(a.eval_mse, b.eval_mse);
}

#[test]
fn run_reports_consistent_totals() {
    let cfg = base(120, 3, NoiseSpec::UniformBounded { bound: 0.25 });
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.selected_k.len(), 3);
    assert!(r.selected_k.iter().all(|&k| (2..=r.k_star).contains(&k)));
    for (k, l) in r.selected_k.iter().zip(&r.selected_lambda) {
        assert_eq!(*l, 1.0 / (4.0 * *k as f64));
    }
    let sum: usize = r.per_step.iter().map(|t| t.scalars).sum();
    assert_eq!(sum, r.floats_sent);
    assert_eq!(r.bytes_sent, 8 * sum);
    assert_eq!(r.per_step[4].scalars, 3 * 3 * 20);
    assert_eq!(r.seeds.agents.len(), 3);
}

#[test]
fn calibrated_constant_comes_from_the_grid() {
    let mut cfg = base(200, 2, NoiseSpec::UniformBounded { bound: 0.25 });
    let grid = vec![0.1, 1.0, 10.0];
    cfg.clp = ClpSetting::Calibrated {
        grid: grid.clone(),
        holdout_fraction: 0.5,
        train_fraction: 0.8,
        shuffle_seed: None,
        folds: 2,
    };
    let r = run_experiment(&cfg).unwrap();
    assert!(grid.contains(&r.c_lp));
    assert_eq!(r.calibration_scores.len(), 3);
    assert!(r.seeds.calibration_centers.is_some());
}

#[test]
fn theoretical_cap_reports_a_remedy() {
    let mut cfg = base(200, 2, NoiseSpec::UniformBounded { bound: 0.25 });
    cfg.protocol.cap_mode = CapMode::Theoretical;
    match run_experiment(&cfg) {
        Err(Error::Config(msg)) => assert!(msg.contains("practical")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn mismatched_kernel_is_rejected() {
    let mut cfg = base(100, 1, NoiseSpec::noiseless());
    cfg.kernel = Some(
        lepdkrr::kernel::KernelSpec::gaussian(0.3, 1)
            .unwrap()
            .config(),
    );
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
}

#[test]
fn noiseless_sweep_slope_is_negative() {
    let cfg = base(100, 1, NoiseSpec::noiseless());
    let result = sweep(&cfg, &[100, 400], MRule::Fixed { m: 2 }, 3).unwrap();
    assert_eq!(result.runs.len(), 6);
    assert!(result.summary.slope < 0.0, "slope {}", result.summary.slope);
    let s = &result.summary;
    let two_point = (s.mean_rho_err[1] / s.mean_rho_err[0]).ln() / 4.0f64.ln();
    assert!((s.slope - two_point).abs() < 1e-12);
    assert_eq!(
        log_log_slope(&[100.0, 400.0], &s.mean_rho_err).unwrap(),
        s.slope
    );
}

#[test]
fn sweep_preconditions() {
    let cfg = base(100, 1, NoiseSpec::noiseless());
    assert!(sweep(&cfg, &[100, 400], MRule::QuarterPower, 2).is_err());
    assert!(sweep(&cfg, &[400, 100], MRule::QuarterPower, 3).is_err());
}

#[test]
fn failed_sweeps_keep_partial_results() {
    let mut cfg = base(100, 1, NoiseSpec::noiseless());
    cfg.protocol.n_centers = Some(60);
    // 120 samples on one agent exceed the 60 centers; the first size succeeds.
    let err = sweep(&cfg, &[60, 120], MRule::Fixed { m: 1 }, 3).unwrap_err();
    assert_eq!(err.n, 120);
    assert_eq!(err.partial.len(), 3);
}

#[test]
fn csv_has_the_stable_columns() {
    let r = run_experiment(&base(80, 2, NoiseSpec::noiseless())).unwrap();
    let mut buf = Vec::new();
    write_results_csv(&mut buf, &[r.clone(), r]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    for col in [
        "n",
        "m",
        "seed",
        "k_star_per_agent",
        "rho_err",
        "k_err",
        "oracle_err",
        "floats_sent",
        "wall_ms",
    ] {
        assert!(header.contains(&col), "missing {col}");
    }
    for line in lines {
        assert_eq!(line.split(',').count(), header.len());
    }
}

#[test]
fn config_json_round_trip() {
    let cfg = base(64, 2, NoiseSpec::Gaussian { sigma: 0.1 });
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    let minimal = r#"{
        "regression": {"r": 0.5, "s_param": 0.5, "seed": 1},
        "noise": {"distribution": "uniform_bounded", "bound": 0.25},
        "n_total": 100, "m": 2,
        "protocol": {"b": 4.0, "cap_mode": {"mode": "practical", "k_min": 20},
                     "mu_mode": {"mode": "fixed", "value": 1e-8},
                     "centers": {"scheme": "halton"}},
        "clp": {"mode": "calibrated", "grid": [0.1, 1.0]},
        "seed": 5
    }"#;
    let parsed = ExperimentConfig::from_json(minimal).unwrap();
    assert_eq!(parsed.partition, PartitionScheme::Equal);
    assert_eq!(parsed.regression.truncation, 1000);
    match parsed.clp {
        ClpSetting::Calibrated {
            holdout_fraction,
            train_fraction,
            folds,
            ..
        } => {
            assert_eq!((holdout_fraction, train_fraction, folds), (0.1, 0.9, 1));
        }
        other => panic!("unexpected {other:?}"),
    }
}
