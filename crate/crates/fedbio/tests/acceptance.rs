//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Positional arguments act as substring filters on criterion names, so
//! `cargo test -p fedbio --test acceptance -- consensus` runs one criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use fedbio::config::{parse_config_str, ExperimentConfig};
use fedbio::logio::masked_log_text;
use fedbio::runner::{run_experiment, ExperimentReport, SUMMARY_FILE};
use fedbio_core::dataset::{
    build_balanced_validation, partition_iid, partition_noniid, split_train_test, TabularDataset,
};
use fedbio_core::diagnostics::{hypergrad_bias, MetricsRecord, NullSink};
use fedbio_core::engine::{Algorithm, EstimatorKind, RunConfig, Simulation};
use fedbio_core::hypergrad::{inner_solve, phi_exact, LinearSolveConfig, NeumannConfig};
use fedbio_core::numerics::DenseMatrix;
use fedbio_core::problems::fairfl::{
    prepare_federated, synthetic_two_group, Distribution, SyntheticFairSpec,
};
use fedbio_core::problems::{make_quadratic, QuadraticFamilySpec, QuadraticOracle};
use fedbio_core::{BatchKind, BilevelOracle, Minibatch, RngStream, Vector};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    check: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tight_solve() -> LinearSolveConfig {
    LinearSolveConfig {
        tol: 1e-14,
        max_iter: Some(400),
    }
}

/// Least-squares slope of `ys` against `xs`.
fn fitted_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn max_abs_diff(a: &Vector, b: &Vector) -> f64 {
    a.sub(b).max_abs()
}

// 1. Neumann bias law.

fn neumann_bias_law() -> Outcome {
    let one = || DenseMatrix::identity(1);
    let oracle =
        QuadraticOracle::new(one(), one(), Vector::from([0.0])).map_err(|e| e.to_string())?;
    let (x, y) = (Vector::from([0.0]), Vector::from([1.0]));
    let bias = |q: usize| -> Result<f64, String> {
        let mut rng = RngStream::new(0, 0);
        hypergrad_bias(
            &oracle,
            &x,
            &y,
            &NeumannConfig::deterministic(0.5, q),
            &tight_solve(),
            1,
            &mut rng,
        )
        .map_err(|e| e.to_string())
    };
    for (q, want) in [(0, 0.5), (1, 0.25), (9, 0.5f64.powi(10))] {
        let got = bias(q)?;
        ensure((got - want).abs() <= 1e-9, || {
            format!("Q={q}: bias {got:e}, expected {want:e}")
        })?;
    }
    let qs: Vec<f64> = (0..=20).map(f64::from).collect();
    let logs = (0..=20)
        .map(|q| bias(q).map(f64::ln))
        .collect::<Result<Vec<_>, _>>()?;
    let slope = fitted_slope(&qs, &logs);
    let want = 0.5f64.ln();
    ensure((slope - want).abs() <= 0.05 * want.abs(), || {
        format!("log-bias slope {slope:.5}, expected {want:.5}")
    })?;
    Ok(format!("bias(Q=9) = {:.4e}, slope {slope:.5}", bias(9)?))
}

// 2. Exact hypergradient against finite differences of h.

fn exact_hypergradient_matches_fd() -> Outcome {
    let spec = QuadraticFamilySpec {
        outer_x_weight: 0.3,
        ..Default::default()
    };
    let (oracles, _) = make_quadratic(&spec).map_err(|e| e.to_string())?;
    let full_f = Minibatch::full(BatchKind::F);
    let mut rng = RngStream::new(2, 0);
    let mut worst: f64 = 0.0;
    for point in 0..20 {
        let o = &oracles[point % oracles.len()];
        let x = rng.normal_vector(o.dim_x(), 1.0);
        let y0 = Vector::zeros(o.dim_y());
        // h(x) = f(x, y_x) with y_x from the iterative inner solver.
        let h = |x: &Vector| -> Result<f64, String> {
            let y = inner_solve(o, x, &y0, 1e-12, 100).map_err(|e| e.to_string())?;
            o.f_value(x, &y, &full_f).map_err(|e| e.to_string())
        };
        let y_star = inner_solve(o, &x, &y0, 1e-12, 100).map_err(|e| e.to_string())?;
        let phi = phi_exact(o, &x, &y_star, &tight_solve()).map_err(|e| e.to_string())?;
        let step = 1e-5;
        let mut fd = Vector::zeros(x.dim());
        for i in 0..x.dim() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_mut_slice()[i] += step;
            xm.as_mut_slice()[i] -= step;
            fd.as_mut_slice()[i] = (h(&xp)? - h(&xm)?) / (2.0 * step);
        }
        let rel = phi.sub(&fd).norm() / fd.norm().max(1e-12);
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-5, || format!("worst relative error {worst:e}"))?;
    Ok(format!("worst relative error {worst:.2e} over 20 points"))
}

// 3. Single client, communication every step, against a closed-form loop.

fn centralized_equivalence() -> Outcome {
    let spec = QuadraticFamilySpec {
        clients: 1,
        outer_x_weight: 0.5,
        ..Default::default()
    };
    let (oracles, _) = make_quadratic(&spec).map_err(|e| e.to_string())?;
    let o = &oracles[0];
    let (gamma, eta, steps) = (0.2, 0.05, 100);
    let mut rng = RngStream::new(3, 0);
    let x1 = rng.normal_vector(o.dim_x(), 1.0);
    let y1 = rng.normal_vector(o.dim_y(), 1.0);

    // Alternating descent written directly from the quadratic's closed forms:
    // ∇_y g = H(y - Ax), Φ = w(x - c) + AᵀH H⁻¹(y - b).
    let (a, hm, b) = (o.a(), o.h(), o.b());
    let (w, c) = o.outer_x_term().cloned().ok_or("missing outer x term")?;
    let mut reference = Vec::with_capacity(steps);
    let (mut x, mut y) = (x1.clone(), y1.clone());
    for _ in 0..steps {
        let omega = hm.matvec(&y.sub(&a.matvec(&x)));
        let z = hm.cholesky_solve(&y.sub(b)).map_err(|e| e.to_string())?;
        let mut phi = a.matvec_t(&hm.matvec(&z));
        phi.axpy(w, &x.sub(&c));
        y.axpy(-gamma, &omega);
        x.axpy(-eta, &phi);
        reference.push((x.clone(), y.clone()));
    }

    let mut worst: f64 = 0.0;
    for (t, (xr, yr)) in reference.iter().enumerate() {
        let cfg = RunConfig {
            algorithm: Algorithm::FedBiO,
            estimator: Some(EstimatorKind::Exact),
            num_clients: 1,
            sync_interval: 1,
            total_steps: t + 1,
            gamma,
            eta_outer: eta,
            solve: tight_solve(),
            log_every: t + 1,
            ..Default::default()
        };
        let res = Simulation::new(&cfg, &oracles)
            .and_then(|s| s.run(&x1, &y1, &mut NullSink))
            .map_err(|e| e.to_string())?;
        let client = &res.clients[0];
        worst = worst
            .max(max_abs_diff(&client.x, xr))
            .max(max_abs_diff(&client.y, yr));
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.2e} over {steps} steps"))
}

// 4. Consensus is exactly zero after every communication.

fn consensus_reset() -> Outcome {
    let mut checked = 0usize;
    for algorithm in [Algorithm::FedAvg, Algorithm::FedBiO, Algorithm::FedBiOAcc] {
        for clients in [2, 4, 8] {
            let spec = QuadraticFamilySpec {
                clients,
                noise_sigma: 0.1,
                noise_samples: 50,
                outer_x_weight: 0.5,
                ..Default::default()
            };
            let (oracles, truth) = make_quadratic(&spec).map_err(|e| e.to_string())?;
            for interval in [1, 5, 20] {
                let cfg = RunConfig {
                    algorithm,
                    estimator: Some(EstimatorKind::Neumann),
                    num_clients: clients,
                    sync_interval: interval,
                    total_steps: 2000,
                    gamma: 0.1,
                    eta_outer: 0.02,
                    batch_y: 4,
                    neumann: NeumannConfig {
                        eta: 0.2,
                        q_terms: 5,
                        batch_f: 4,
                        batch_g: 4,
                        batch_hess: 4,
                    },
                    seed: clients as u64 * 31 + interval as u64,
                    ..Default::default()
                };
                let sim = Simulation::new(&cfg, &oracles)
                    .map_err(|e| e.to_string())?
                    .with_ground_truth(&truth);
                // Distinct starting points, so every algorithm has something to average.
                let mut states = sim
                    .initial_states(&Vector::zeros(spec.dim_x), &Vector::zeros(spec.dim_y))
                    .map_err(|e| e.to_string())?;
                let mut start = RngStream::new(cfg.seed, 99);
                for s in &mut states {
                    s.x = start.normal_vector(spec.dim_x, 1.0);
                    s.x_prev = s.x.clone();
                }
                let mut records: Vec<MetricsRecord> = Vec::new();
                sim.run_from(states, &mut records)
                    .map_err(|e| e.to_string())?;
                let mut drifted = false;
                for r in &records {
                    if cfg.communicates_after(r.t as usize) {
                        ensure(r.consensus_error == 0.0, || {
                            format!(
                                "{} M={clients} I={interval} t={}: consensus {:e}",
                                algorithm.name(),
                                r.t,
                                r.consensus_error
                            )
                        })?;
                        checked += 1;
                    } else {
                        drifted |= r.consensus_error > 0.0;
                    }
                }
                ensure(interval == 1 || drifted, || {
                    format!(
                        "{} M={clients} I={interval}: clients never drifted apart",
                        algorithm.name()
                    )
                })?;
            }
        }
    }
    Ok(format!("{checked} communication records, all exactly 0"))
}

// 5. Rate trend on the deterministic quadratic.

fn rate_trend() -> Outcome {
    let spec = QuadraticFamilySpec::default();
    let (oracles, truth) = make_quadratic(&spec).map_err(|e| e.to_string())?;
    let delta = 0.5;
    let mut log_t = Vec::new();
    let mut log_g = Vec::new();
    let mut detail = Vec::new();
    for total in [100usize, 1000, 10_000] {
        let cfg = RunConfig {
            algorithm: Algorithm::FedBiO,
            estimator: Some(EstimatorKind::Exact),
            num_clients: spec.clients,
            sync_interval: 5,
            total_steps: total,
            gamma: 0.2,
            eta_outer: delta / (total as f64).sqrt(),
            ..Default::default()
        };
        let sim = Simulation::new(&cfg, &oracles)
            .map_err(|e| e.to_string())?
            .with_ground_truth(&truth);
        let mut records: Vec<MetricsRecord> = Vec::new();
        sim.run(
            &Vector::zeros(spec.dim_x),
            &Vector::zeros(spec.dim_y),
            &mut records,
        )
        .map_err(|e| e.to_string())?;
        let best = records
            .iter()
            .map(|r| r.grad_norm_sq)
            .fold(f64::INFINITY, f64::min);
        log_t.push((total as f64).ln());
        log_g.push(best.ln());
        detail.push(format!("T={total}: {best:.3e}"));
    }
    let slope = fitted_slope(&log_t, &log_g);
    ensure(slope <= -0.8, || {
        format!("slope {slope:.3} ({})", detail.join(", "))
    })?;
    Ok(format!("slope {slope:.3} ({})", detail.join(", ")))
}

// 6. Acceleration ordering on the noisy quadratic at matched oracle budgets.

const ACCEL_THRESHOLD: f64 = 1e-3;
const ACCEL_MAX_STEPS: usize = 2000;
const ACCEL_FEDBIO_ETAS: [f64; 6] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5];

fn steps_to_threshold(cfg: &RunConfig, spec: &QuadraticFamilySpec) -> Result<Option<u64>, String> {
    let (oracles, truth) = make_quadratic(spec).map_err(|e| e.to_string())?;
    let sim = Simulation::new(cfg, &oracles)
        .map_err(|e| e.to_string())?
        .with_ground_truth(&truth);
    let mut records: Vec<MetricsRecord> = Vec::new();
    sim.run(
        &Vector::zeros(spec.dim_x),
        &Vector::zeros(spec.dim_y),
        &mut records,
    )
    .map_err(|e| e.to_string())?;
    Ok(records
        .iter()
        .find(|r| r.grad_norm_sq <= ACCEL_THRESHOLD)
        .map(|r| r.t))
}

fn acceleration_ordering() -> Outcome {
    let neumann = |batch| NeumannConfig {
        eta: 0.45,
        q_terms: 12,
        batch_f: batch,
        batch_g: batch,
        batch_hess: batch,
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let spec = QuadraticFamilySpec {
            dim_x: 40,
            dim_y: 40,
            clients: 4,
            mu: 1.0,
            lipschitz: 2.0,
            zeta_scale: 0.05,
            noise_sigma: 0.1,
            noise_samples: 500,
            seed,
            ..Default::default()
        };
        let base = RunConfig {
            num_clients: 4,
            sync_interval: 5,
            total_steps: ACCEL_MAX_STEPS,
            seed,
            ..Default::default()
        };
        // FedBiOAcc queries each oracle at two points per step with batch 1;
        // FedBiO queries once with batch 2.
        let mut acc = RunConfig {
            algorithm: Algorithm::FedBiOAcc,
            estimator: Some(EstimatorKind::Neumann),
            batch_y: 1,
            neumann: neumann(1),
            delta: 0.5,
            u: 1.0,
            sigma: 1.0,
            c_nu: 1.0,
            c_omega: 1.0,
            eta_outer: 0.5,
            ..base.clone()
        };
        acc.gamma = 0.2 / acc.alpha(1);
        let acc_steps = steps_to_threshold(&acc, &spec)?;
        let mut best: Option<u64> = None;
        for eta in ACCEL_FEDBIO_ETAS {
            let cfg = RunConfig {
                algorithm: Algorithm::FedBiO,
                estimator: Some(EstimatorKind::Neumann),
                batch_y: 2,
                neumann: neumann(2),
                gamma: 0.2,
                eta_outer: eta,
                ..base.clone()
            };
            if let Some(s) = steps_to_threshold(&cfg, &spec)? {
                best = Some(best.map_or(s, |b| b.min(s)));
            }
        }
        let won = match (acc_steps, best) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        };
        wins += usize::from(won);
        let show = |s: Option<u64>| s.map_or("never".to_string(), |s| s.to_string());
        detail.push(format!("{}/{}", show(acc_steps), show(best)));
    }
    let summary = format!(
        "accelerated faster on {wins}/10 seeds (acc/best fedbio: {})",
        detail.join(" ")
    );
    ensure(wins >= 8, || summary.clone())?;
    Ok(summary)
}

// 7. Without noise correction or momentum the accelerated method is FedBiO.

fn degeneration() -> Outcome {
    let (delta, u, gamma, eta): (f64, f64, f64, f64) = (0.7, 2.0, 0.3, 0.1);
    let scale = delta / u.cbrt();
    let mut detail = Vec::new();
    for (clients, interval) in [(1usize, 5usize), (4, 1)] {
        let spec = QuadraticFamilySpec {
            clients,
            ..Default::default()
        };
        let (oracles, _) = make_quadratic(&spec).map_err(|e| e.to_string())?;
        let base = RunConfig {
            estimator: Some(EstimatorKind::Exact),
            num_clients: clients,
            sync_interval: interval,
            total_steps: 500,
            solve: tight_solve(),
            log_every: 500,
            ..Default::default()
        };
        let acc = RunConfig {
            algorithm: Algorithm::FedBiOAcc,
            gamma,
            eta_outer: eta,
            delta,
            u,
            sigma: 0.0,
            c_nu: 0.0,
            c_omega: 0.0,
            ..base.clone()
        };
        let plain = RunConfig {
            algorithm: Algorithm::FedBiO,
            gamma: gamma * scale,
            eta_outer: eta * scale,
            ..base
        };
        let mut rng = RngStream::new(7, 0);
        let x1 = rng.normal_vector(spec.dim_x, 1.0);
        let y1 = rng.normal_vector(spec.dim_y, 1.0);
        let run = |cfg: &RunConfig| {
            Simulation::new(cfg, &oracles)
                .and_then(|s| s.run(&x1, &y1, &mut NullSink))
                .map_err(|e| e.to_string())
        };
        let (ra, rp) = (run(&acc)?, run(&plain)?);
        let worst = ra
            .clients
            .iter()
            .zip(&rp.clients)
            .map(|(a, p)| max_abs_diff(&a.x, &p.x).max(max_abs_diff(&a.y, &p.y)))
            .fold(0.0, f64::max);
        ensure(worst <= 1e-9, || {
            format!("M={clients} I={interval}: deviation {worst:e}")
        })?;
        detail.push(format!("M={clients} I={interval}: {worst:.1e}"));
    }
    Ok(format!(
        "max deviation after 500 steps ({})",
        detail.join(", ")
    ))
}

// 8. Fairness direction on the two-group synthetic task.

fn experiment(text: &str, out: &Path) -> Result<ExperimentConfig, String> {
    let mut cfg =
        parse_config_str(text, Path::new("acceptance.toml"), out).map_err(|e| e.to_string())?;
    cfg.output_dir = out.to_path_buf();
    Ok(cfg)
}

fn run_ok(cfg: &ExperimentConfig) -> Result<ExperimentReport, String> {
    let report = run_experiment(cfg).map_err(|e| e.to_string())?;
    if let Some(f) = report.failures.first() {
        return Err(format!("{} seed {} failed: {}", f.method, f.seed, f.error));
    }
    Ok(report)
}

const FAIR_COMMON: &str = r#"
problem = "fairfl"
seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]

[fairfl]
distribution = "iid"
train_ratio = 0.7
validation_per_group = 20
lambda = 0.01

[fairfl.fedavg]
total_steps = 500
eta_outer = 0.5
batch_size = 32
"#;

const FAIR_FEDBIO: &str = r#"
[run]
algorithm = "fedbio"
estimator = "exact"
num_clients = 3
sync_interval = 5
total_steps = 300
gamma = 1.0
eta_outer = 1.0
log_every = 50
"#;

const FAIR_FEDBIOACC: &str = r#"
[run]
algorithm = "fedbioacc"
estimator = "exact"
num_clients = 3
sync_interval = 5
total_steps = 300
gamma = 10.0
eta_outer = 10.0
delta = 0.1
u = 1.0
sigma = 1.0
c_nu = 1.0
c_omega = 1.0
log_every = 50
"#;

fn fairness_direction() -> Outcome {
    let spec = SyntheticFairSpec::default();
    ensure(spec.majority == 10 * spec.minority, || {
        "synthetic task is not 10:1".into()
    })?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    let mut baseline = None;
    for (alg, run, with_baseline) in [
        ("fedbio", FAIR_FEDBIO, true),
        ("fedbioacc", FAIR_FEDBIOACC, false),
    ] {
        let out = dir.path().join(alg);
        let mut cfg = experiment(&format!("{FAIR_COMMON}{run}"), &out)?;
        cfg.fairfl.baseline = with_baseline;
        let report = run_ok(&cfg)?;
        if with_baseline {
            let row = report
                .summary
                .get("fedavg", "test_eqopp")
                .ok_or("missing baseline row")?;
            baseline = Some(row.mean);
        }
        let base = baseline.ok_or("baseline not computed")?;
        let method = format!("two_stage_{alg}");
        let eqopp = report
            .summary
            .get(&method, "test_eqopp")
            .ok_or("missing two-stage row")?;
        ensure(eqopp.n_seeds == 10, || {
            format!("{method}: {} seeds", eqopp.n_seeds)
        })?;
        ensure(eqopp.mean < base, || {
            format!(
                "{method}: test EqOpp {:.4} not below baseline {base:.4}",
                eqopp.mean
            )
        })?;
        let weights: Vec<f64> = report
            .results
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.metrics["weight_group1"])
            .collect();
        let lowest = weights.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(weights.len() == 10 && lowest > 1.0, || {
            format!("{method}: minority weights {weights:?}")
        })?;
        detail.push(format!(
            "{alg} {:.3} (min minority weight {lowest:.2})",
            eqopp.mean
        ));
    }
    Ok(format!(
        "mean test EqOpp {} vs fedavg {:.3}",
        detail.join(", "),
        baseline.unwrap_or(f64::NAN)
    ))
}

// 9. Split invariants.

fn labeled_groups(group_sizes: &[usize]) -> Result<TabularDataset, String> {
    let n: usize = group_sizes.iter().sum();
    let groups: Vec<usize> = group_sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &k)| std::iter::repeat_n(g, k))
        .collect();
    let rows: Vec<[f64; 1]> = (0..n).map(|i| [i as f64]).collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    TabularDataset::new(
        DenseMatrix::from_rows(&refs),
        (0..n).map(|i| (i % 2) as u8).collect(),
        groups,
        group_sizes.len(),
        vec!["v".into()],
    )
    .map_err(|e| e.to_string())
}

fn ids(parts: &[&TabularDataset]) -> Vec<u64> {
    let mut v: Vec<u64> = parts
        .iter()
        .flat_map(|p| p.row_ids.iter().copied())
        .collect();
    v.sort_unstable();
    v
}

fn splits() -> Outcome {
    let mut checks = 0usize;
    for seed in 0..20u64 {
        let mut rng = RngStream::new(seed, 0);
        let ds = labeled_groups(&[10, 10, 30])?;
        let all = ids(&[&ds]);
        let shards = partition_noniid(&ds, 3, &mut rng).map_err(|e| e.to_string())?;
        ensure(ids(&shards.iter().collect::<Vec<_>>()) == all, || {
            "non-iid shards are not a partition".into()
        })?;
        for (g, size) in [(0, 10), (1, 10), (2, 30)] {
            let mut counts: Vec<usize> = shards.iter().map(|s| s.group_counts()[g]).collect();
            counts.sort_unstable();
            let unit = size / 10;
            ensure(counts == [2 * unit, 2 * unit, 6 * unit], || {
                format!("seed {seed} group {g}: shares {counts:?}")
            })?;
        }
        let iid = partition_iid(&ds, 4, &mut rng).map_err(|e| e.to_string())?;
        ensure(ids(&iid.iter().collect::<Vec<_>>()) == all, || {
            "iid shards are not a partition".into()
        })?;
        let (train, test) = split_train_test(&ds, 0.7, &mut rng).map_err(|e| e.to_string())?;
        ensure(ids(&[&train, &test]) == all, || {
            "train/test is not a partition".into()
        })?;
        let (val, rest) = build_balanced_validation(&ds, 4, &mut rng).map_err(|e| e.to_string())?;
        ensure(val.group_counts().iter().all(|&c| c == 4), || {
            format!("validation counts {:?}", val.group_counts())
        })?;
        ensure(ids(&[&val, &rest]) == all, || {
            "validation/rest is not a partition".into()
        })?;
        checks += 1;
    }

    // The full federated pipeline on the synthetic task.
    let ds = synthetic_two_group(&SyntheticFairSpec::default(), &mut RngStream::new(9, 0))
        .map_err(|e| e.to_string())?;
    for distribution in [Distribution::Iid, Distribution::NonIid] {
        let split = prepare_federated(
            &ds,
            3,
            distribution,
            0.7,
            20,
            0.01,
            &mut RngStream::new(9, 1),
        )
        .map_err(|e| e.to_string())?;
        let mut parts: Vec<&TabularDataset> = vec![&split.test];
        for c in &split.spec.clients {
            ensure(c.validation.group_counts() == [20, 20], || {
                format!(
                    "{}: validation counts {:?}",
                    distribution.name(),
                    c.validation.group_counts()
                )
            })?;
            parts.push(&c.train);
            parts.push(&c.validation);
        }
        ensure(ids(&parts) == ids(&[&ds]), || {
            format!("{}: pipeline is not a partition", distribution.name())
        })?;
    }
    Ok(format!(
        "{checks} seeded split batteries and both federated pipelines"
    ))
}

// 10. Determinism, including parallel execution.

const DETERMINISM_QUADRATIC: &str = r#"
problem = "quadratic"
seeds = [0, 1, 2]

[run]
algorithm = "fedbioacc"
num_clients = 4
total_steps = 300
batch_y = 4
bias_mc_samples = 2
log_every = 1

[run.neumann]
eta = 0.2
q_terms = 6
batch_f = 4
batch_g = 4
batch_hess = 4

[quadratic]
noise_sigma = 0.1
noise_samples = 100
"#;

const DETERMINISM_FAIRFL: &str = r#"
problem = "fairfl"
seeds = [0, 1]

[run]
algorithm = "fedbio"
estimator = "neumann"
num_clients = 3
total_steps = 60
gamma = 0.5
eta_outer = 0.5
batch_y = 16
log_every = 5

[run.neumann]
eta = 0.02
q_terms = 5
batch_f = 8
batch_g = 8
batch_hess = 8

[fairfl]
distribution = "noniid"
validation_per_group = 10

[fairfl.synthetic]
majority = 1000
minority = 300

[fairfl.fedavg]
total_steps = 60
batch_size = 16
"#;

/// Masked NDJSON logs and CSV files of one output directory, keyed by file name.
fn snapshot(dir: &Path, skip_metadata: bool) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("ndjson") => {
                let masked = masked_log_text(&path).map_err(|e| e.to_string())?;
                if skip_metadata {
                    masked
                        .split_once('\n')
                        .map(|(_, rest)| rest.to_string())
                        .unwrap_or_default()
                } else {
                    masked
                }
            }
            Some("csv") => std::fs::read_to_string(&path).map_err(|e| e.to_string())?,
            _ => continue,
        };
        out.push((name, text));
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for (label, text) in [
        ("quadratic", DETERMINISM_QUADRATIC),
        ("fairfl", DETERMINISM_FAIRFL),
    ] {
        let out = root.path().join(label);
        let cfg = experiment(text, &out)?;
        run_ok(&cfg)?;
        let first = snapshot(&out, false)?;
        run_ok(&cfg)?;
        let second = snapshot(&out, false)?;
        ensure(first == second, || format!("{label}: repeated run differs"))?;

        // Everything but the run flags recorded in the metadata must match.
        let mut parallel = cfg.clone();
        parallel.parallel_seeds = true;
        parallel.run.parallel = true;
        run_ok(&parallel)?;
        let threaded = snapshot(&out, true)?;
        ensure(snapshot_without_metadata(&first)? == threaded, || {
            format!("{label}: parallel run differs")
        })?;
        ensure(first.iter().any(|(n, _)| n == SUMMARY_FILE), || {
            format!("{label}: no summary")
        })?;
        files += first.len();
    }
    Ok(format!(
        "{files} files identical across repeated and parallel runs"
    ))
}

fn snapshot_without_metadata(snap: &[(String, String)]) -> Result<Vec<(String, String)>, String> {
    Ok(snap
        .iter()
        .map(|(n, t)| {
            if n.ends_with(".ndjson") {
                (
                    n.clone(),
                    t.split_once('\n')
                        .map(|(_, r)| r.to_string())
                        .unwrap_or_default(),
                )
            } else {
                (n.clone(), t.clone())
            }
        })
        .collect())
}

fn main() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion {
            id: 1,
            name: "neumann_bias_law",
            budget: Some(secs(1)),
            check: neumann_bias_law,
        },
        Criterion {
            id: 2,
            name: "exact_hypergradient",
            budget: Some(secs(1)),
            check: exact_hypergradient_matches_fd,
        },
        Criterion {
            id: 3,
            name: "centralized_equivalence",
            budget: Some(secs(1)),
            check: centralized_equivalence,
        },
        Criterion {
            id: 4,
            name: "consensus_reset",
            budget: Some(secs(10)),
            check: consensus_reset,
        },
        Criterion {
            id: 5,
            name: "rate_trend",
            budget: Some(secs(30)),
            check: rate_trend,
        },
        Criterion {
            id: 6,
            name: "acceleration_ordering",
            budget: Some(secs(120)),
            check: acceleration_ordering,
        },
        Criterion {
            id: 7,
            name: "degeneration",
            budget: Some(secs(5)),
            check: degeneration,
        },
        Criterion {
            id: 8,
            name: "fairness_direction",
            budget: Some(secs(120)),
            check: fairness_direction,
        },
        Criterion {
            id: 9,
            name: "splits",
            budget: None,
            check: splits,
        },
        Criterion {
            id: 10,
            name: "determinism",
            budget: None,
            check: determinism,
        },
    ];

    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected: Vec<&Criterion> = criteria
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())))
        .collect();
    if selected.is_empty() {
        return;
    }

    let mut failed = 0;
    for c in &selected {
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!(
                "took {:.1}s, budget {}s",
                elapsed.as_secs_f64(),
                b.as_secs()
            )),
            (o, _) => o,
        };
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {:>2} {:<24} {status}  {detail} [{:.2}s]",
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        selected.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
