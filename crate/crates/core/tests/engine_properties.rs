//! Engine invariants: averaging, symmetry, determinism, the accelerated
//! recursion against an independent script, and convergence to the
//! closed-form minimizer.

use fedbio_core::diagnostics::{inner_error, NullSink};
use fedbio_core::engine::{
    alpha_schedule, communicate, fedbio_local_step, states_identical, Algorithm, ClientState,
    EstimatorKind, RunConfig, Simulation,
};
use fedbio_core::hypergrad::{HypergradEstimator, LinearSolveConfig, NeumannConfig};
use fedbio_core::numerics::{mean_of_vectors, DenseMatrix};
use fedbio_core::problems::{make_quadratic, GroundTruth, QuadraticFamilySpec, QuadraticOracle};
use fedbio_core::{BilevelOracle, RngStream, Vector};
use proptest::prelude::*;

fn tight_solve() -> LinearSolveConfig {
    LinearSolveConfig {
        tol: 1e-14,
        max_iter: Some(200),
    }
}

fn random_states(xs: &[Vec<f64>], seed: u64) -> Vec<ClientState> {
    let mut rng = RngStream::new(seed, 0);
    xs.iter()
        .enumerate()
        .map(|(m, x)| {
            let mut c = ClientState::new(
                Vector::from(x.clone()),
                rng.normal_vector(2, 1.0),
                RngStream::new(seed, m as u64),
            );
            c.nu = rng.normal_vector(x.len(), 1.0);
            c.x_prev = rng.normal_vector(x.len(), 1.0);
            c
        })
        .collect()
}

proptest! {
    #[test]
    fn averaging_conserves_the_mean_and_resets_consensus(
        xs in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 3), 1..9),
        seed in 0u64..1000,
        which in 0usize..3,
    ) {
        let algorithm = [Algorithm::FedAvg, Algorithm::FedBiO, Algorithm::FedBiOAcc][which];
        let mut states = random_states(&xs, seed);
        let ys: Vec<Vector> = states.iter().map(|c| c.y.clone()).collect();
        let before = mean_of_vectors(states.iter().map(|c| &c.x)).unwrap();
        communicate(&mut states, algorithm).unwrap();
        let after = mean_of_vectors(states.iter().map(|c| &c.x)).unwrap();
        prop_assert!(before.sub(&after).max_abs() <= 1e-12 * before.max_abs().max(1.0));
        prop_assert_eq!(fedbio_core::diagnostics::consensus_error(&states).unwrap(), 0.0);
        for (c, y) in states.iter().zip(&ys) {
            prop_assert_eq!(&c.y, y);
        }
    }

    #[test]
    fn alpha_is_decreasing_and_bounded(
        delta in 0.01f64..10.0,
        u in 0.1f64..100.0,
        sigma in 0.01f64..5.0,
        t in 1usize..100_000,
    ) {
        let a = alpha_schedule(delta, u, sigma, t);
        prop_assert!(a > 0.0 && a <= delta / u.cbrt() * (1.0 + 1e-15));
        prop_assert!(alpha_schedule(delta, u, sigma, t + 1) < a);
    }
}

fn noisy_family(zeta: f64) -> Vec<QuadraticOracle> {
    make_quadratic(&QuadraticFamilySpec {
        zeta_scale: zeta,
        noise_sigma: 0.2,
        noise_samples: 50,
        clients: 3,
        ..Default::default()
    })
    .unwrap()
    .0
}

fn stochastic_config(algorithm: Algorithm, steps: usize) -> RunConfig {
    RunConfig {
        algorithm,
        num_clients: 3,
        total_steps: steps,
        estimator: Some(EstimatorKind::Neumann),
        gamma: 0.2,
        eta_outer: 0.05,
        delta: 1.0,
        c_nu: 0.5,
        c_omega: 0.5,
        batch_y: 4,
        neumann: NeumannConfig {
            eta: 0.2,
            q_terms: 4,
            batch_f: 4,
            batch_g: 4,
            batch_hess: 4,
        },
        ..Default::default()
    }
}

#[test]
fn clients_without_communication_stay_identical_under_symmetry() {
    // One oracle copied to every client, and one shared random stream seed.
    let oracles = vec![noisy_family(0.0).remove(0); 3];
    for algorithm in [Algorithm::FedAvg, Algorithm::FedBiO, Algorithm::FedBiOAcc] {
        let mut cfg = stochastic_config(algorithm, 30);
        cfg.sync_interval = cfg.total_steps + 1;
        let sim = Simulation::new(&cfg, &oracles).unwrap();
        let states: Vec<ClientState> = (0..3)
            .map(|_| {
                ClientState::new(
                    Vector::filled(5, 0.5),
                    Vector::zeros(8),
                    RngStream::new(4, 0),
                )
            })
            .collect();
        let result = sim.run_from(states, &mut NullSink).unwrap();
        for c in &result.clients[1..] {
            assert!(
                states_identical(std::slice::from_ref(c), &result.clients[..1]),
                "{algorithm:?}"
            );
        }
    }
}

#[test]
fn clients_start_from_the_same_point() {
    let oracles = noisy_family(1.0);
    let cfg = stochastic_config(Algorithm::FedBiOAcc, 1);
    let sim = Simulation::new(&cfg, &oracles).unwrap();
    let states = sim
        .initial_states(&Vector::filled(5, 0.3), &Vector::filled(8, -1.0))
        .unwrap();
    for c in &states {
        assert_eq!(c.x, states[0].x);
        assert_eq!(c.y, states[0].y);
    }
}

#[test]
fn runs_are_deterministic_with_and_without_threads() {
    let oracles = noisy_family(0.5);
    for algorithm in [Algorithm::FedAvg, Algorithm::FedBiO, Algorithm::FedBiOAcc] {
        let cfg = stochastic_config(algorithm, 40);
        let run = |parallel: bool| {
            let cfg = RunConfig {
                parallel,
                ..cfg.clone()
            };
            let sim = Simulation::new(&cfg, &oracles).unwrap();
            sim.run(&Vector::filled(5, 0.1), &Vector::zeros(8), &mut NullSink)
                .unwrap()
        };
        let (a, b, c) = (run(false), run(false), run(true));
        assert!(states_identical(&a.clients, &b.clients));
        assert!(states_identical(&a.clients, &c.clients));
        assert_eq!(a.records, b.records);
        assert_eq!(a.records, c.records);
    }
}

/// Independent script of three accelerated steps on one deterministic client,
/// using `∇_y g = H(y - Ax)` and `Φ = w(x - c) + Aᵀ(y - b)` directly.
#[test]
fn accelerated_steps_match_scripted_recursion() {
    let a = DenseMatrix::from_rows(&[&[1.0, 0.5], &[-0.5, 1.0], &[0.3, 0.2]]);
    let h = DenseMatrix::from_rows(&[&[2.0, 0.3, 0.0], &[0.3, 1.5, 0.1], &[0.0, 0.1, 1.0]]);
    let b = Vector::from([1.0, -0.5, 0.25]);
    let (w, c) = (0.4, Vector::from([0.2, -0.1]));
    let o = QuadraticOracle::new(a.clone(), h.clone(), b.clone())
        .unwrap()
        .with_outer_x_term(w, c.clone())
        .unwrap();
    let cfg = RunConfig {
        algorithm: Algorithm::FedBiOAcc,
        num_clients: 1,
        sync_interval: 1,
        total_steps: 3,
        estimator: Some(EstimatorKind::Exact),
        solve: tight_solve(),
        gamma: 0.7,
        eta_outer: 0.9,
        delta: 0.8,
        u: 2.0,
        sigma: 1.5,
        c_nu: 0.6,
        c_omega: 0.9,
        ..Default::default()
    };
    let grad_y = |x: &Vector, y: &Vector| h.matvec(&y.sub(&a.matvec(x)));
    let phi = |x: &Vector, y: &Vector| {
        let mut p = a.matvec_t(&y.sub(&b));
        p.axpy(w, &x.sub(&c));
        p
    };
    let alpha = |t: f64| cfg.delta / (cfg.u + cfg.sigma * cfg.sigma * t).cbrt();

    let (mut x, mut y) = (Vector::from([1.0, -1.0]), Vector::from([0.5, 0.0, -0.5]));
    let (mut xp, mut yp) = (x.clone(), y.clone());
    let (mut nu, mut om) = (Vector::zeros(2), Vector::zeros(3));
    let oracles = [o];
    let sim = Simulation::new(&cfg, &oracles).unwrap();
    let result = sim.run(&x, &y, &mut NullSink).unwrap();
    for t in 1..=3 {
        let (new_om, new_nu) = if t == 1 {
            (grad_y(&x, &y), phi(&x, &y))
        } else {
            let ap = alpha((t - 1) as f64);
            let mut o = grad_y(&x, &y);
            o.axpy(1.0 - cfg.c_omega * ap * ap, &om.sub(&grad_y(&xp, &yp)));
            let mut n = phi(&x, &y);
            n.axpy(1.0 - cfg.c_nu * ap * ap, &nu.sub(&phi(&xp, &yp)));
            (o, n)
        };
        let at = alpha(t as f64);
        xp = x.clone();
        yp = y.clone();
        y.axpy(-cfg.gamma * at, &new_om);
        x.axpy(-cfg.eta_outer * at, &new_nu);
        om = new_om;
        nu = new_nu;
    }
    let s = &result.clients[0];
    assert!(s.x.sub(&x).max_abs() <= 1e-12, "{:?} vs {x:?}", s.x);
    assert!(s.y.sub(&y).max_abs() <= 1e-12);
    assert!(s.nu.sub(&nu).max_abs() <= 1e-12);
    assert!(s.omega.sub(&om).max_abs() <= 1e-12);
}

#[test]
fn inner_error_contracts_under_inner_steps() {
    let (oracles, truth) = make_quadratic(&QuadraticFamilySpec {
        clients: 1,
        ..Default::default()
    })
    .unwrap();
    let o = &oracles[0];
    let gamma = 0.5 / o.smoothness().unwrap();
    let rate = (1.0 - gamma * o.strong_convexity()).powi(2);
    let mut clients = vec![ClientState::new(
        Vector::filled(5, 1.0),
        Vector::filled(8, -2.0),
        RngStream::new(0, 0),
    )];
    let estimator = HypergradEstimator::Exact(LinearSolveConfig::default());
    let mut prev = inner_error(&clients, &truth).unwrap();
    for _ in 0..50 {
        fedbio_local_step(&mut clients[0], o, gamma, 0.0, &estimator, 0).unwrap();
        let e = inner_error(&clients, &truth).unwrap();
        assert!(e < prev && e <= rate * prev * (1.0 + 1e-12));
        prev = e;
    }
}

#[test]
fn centralized_fedbio_recovers_the_minimizer() {
    let (oracles, truth) = make_quadratic(&QuadraticFamilySpec {
        clients: 1,
        ..Default::default()
    })
    .unwrap();
    let x_star = truth.minimizer().unwrap();
    let cfg = RunConfig {
        algorithm: Algorithm::FedBiO,
        num_clients: 1,
        sync_interval: 1,
        total_steps: 4000,
        gamma: 0.25,
        eta_outer: 0.2,
        estimator: Some(EstimatorKind::Exact),
        solve: tight_solve(),
        log_every: 4000,
        ..Default::default()
    };
    let sim = Simulation::new(&cfg, &oracles)
        .unwrap()
        .with_ground_truth(&truth);
    let result = sim
        .run(&Vector::zeros(5), &Vector::zeros(8), &mut NullSink)
        .unwrap();
    let x = result.mean_x();
    assert!(
        truth.hypergradient(&x).norm() <= 1e-8,
        "{}",
        truth.hypergradient(&x).norm()
    );
    assert!(x.sub(&x_star).norm() <= 1e-6);
}
