//! Quadratic bilevel instances with closed-form ground truth.
//!
//! Client `m` has
//!
//! ```text
//! g(x, y) = ½ (y - A x)ᵀ H (y - A x)          inner, μ-strongly convex in y
//! f(x, y) = ½ ‖y - b‖² (+ ½ w ‖x - c‖²)      outer
//! ```
//!
//! so `y_x = A x`, `∇²_xy g = -AᵀH` and `∇h(x) = Aᵀ(Ax - b) (+ w(x - c))`.
//! Stochastic variants add centered per-sample noise `ξ_s` to the outer
//! residual and a linear term `ξ_sᵀ y` to the inner objective, which keeps
//! every full-batch quantity exact.

use alloc::vec::Vec;

use super::GroundTruth;
use crate::error::{Error, Result};
use crate::numerics::{mean_of_vectors, DenseMatrix, RngStream, Vector};
use crate::oracle::{check_point, BatchKind, BilevelOracle, DeclaredConstants, Minibatch};

#[derive(Debug, Clone)]
pub struct QuadraticOracle {
    a: DenseMatrix,
    h: DenseMatrix,
    b: Vector,
    outer_x: Option<(f64, Vector)>,
    noise_f: Vec<Vector>,
    noise_g: Vec<Vector>,
    mu: f64,
    lipschitz: f64,
    cross_norm: f64,
}

impl QuadraticOracle {
    /// `a` is `dim_y × dim_x`, `h` is symmetric positive definite `dim_y × dim_y`.
    pub fn new(a: DenseMatrix, h: DenseMatrix, b: Vector) -> Result<Self> {
        let dim_y = a.rows();
        if h.rows() != dim_y || h.cols() != dim_y {
            return Err(Error::DimensionMismatch {
                expected: dim_y,
                found: h.rows(),
            });
        }
        b.check_dim(dim_y)?;
        let lipschitz = h.spectral_norm();
        let shifted = DenseMatrix::identity(dim_y).combine(lipschitz, &h, -1.0);
        let mu = lipschitz - shifted.spectral_norm();
        if !(mu > 0.0) {
            return Err(Error::config(
                "h",
                "inner Hessian must be positive definite",
            ));
        }
        let cross_norm = h.matmul(&a).spectral_norm();
        Ok(QuadraticOracle {
            a,
            h,
            b,
            outer_x: None,
            noise_f: Vec::new(),
            noise_g: Vec::new(),
            mu,
            lipschitz,
            cross_norm,
        })
    }

    /// Adds `½ weight ‖x - center‖²` to the outer objective.
    pub fn with_outer_x_term(mut self, weight: f64, center: Vector) -> Result<Self> {
        center.check_dim(self.a.cols())?;
        self.outer_x = Some((weight, center));
        Ok(self)
    }

    /// Replaces the sample populations with `samples` centered Gaussian noise
    /// vectors of scale `sigma` each for `f` and `g`.
    pub fn with_additive_noise(mut self, sigma: f64, samples: usize, rng: &mut RngStream) -> Self {
        let dim_y = self.a.rows();
        let draw = |rng: &mut RngStream| -> Vec<Vector> {
            if samples == 0 {
                return Vec::new();
            }
            let raw: Vec<Vector> = (0..samples)
                .map(|_| rng.normal_vector(dim_y, sigma))
                .collect();
            let mean = mean_of_vectors(&raw).expect("nonempty");
            raw.iter().map(|v| v.sub(&mean)).collect()
        };
        self.noise_f = draw(rng);
        self.noise_g = draw(rng);
        self
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn h(&self) -> &DenseMatrix {
        &self.h
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    pub fn outer_x_term(&self) -> Option<&(f64, Vector)> {
        self.outer_x.as_ref()
    }

    /// `y_x = A x`.
    pub fn inner_solution(&self, x: &Vector) -> Vector {
        self.a.matvec(x)
    }

    /// `∇h(x) = Aᵀ(Ax - b) + w(x - c)`.
    pub fn hypergradient(&self, x: &Vector) -> Vector {
        let mut g = self.a.matvec_t(&self.a.matvec(x).sub(&self.b));
        if let Some((w, c)) = &self.outer_x {
            g.axpy(*w, &x.sub(c));
        }
        g
    }

    /// `h(x) = f(x, y_x)` for the noiseless objective.
    pub fn objective(&self, x: &Vector) -> f64 {
        let mut v = 0.5 * self.a.matvec(x).sub(&self.b).norm_sq();
        if let Some((w, c)) = &self.outer_x {
            v += 0.5 * w * x.sub(c).norm_sq();
        }
        v
    }

    fn outer_x_value(&self, x: &Vector) -> f64 {
        self.outer_x
            .as_ref()
            .map_or(0.0, |(w, c)| 0.5 * w * x.sub(c).norm_sq())
    }

    /// Mean of the noise vectors over the batch; zero for the full batch.
    fn noise_mean(noise: &[Vector], batch: &Minibatch, dim: usize) -> Result<Vector> {
        if batch.is_full() {
            return Ok(Vector::zeros(dim));
        }
        if noise.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 0,
                found: batch.indices.len(),
            });
        }
        batch.check_range(noise.len())?;
        let mut out = Vector::zeros(dim);
        for &i in &batch.indices {
            out.axpy(1.0, &noise[i]);
        }
        out.scale(1.0 / batch.indices.len() as f64);
        Ok(out)
    }

    fn inner_residual(&self, x: &Vector, y: &Vector) -> Vector {
        y.sub(&self.a.matvec(x))
    }
}

impl BilevelOracle for QuadraticOracle {
    fn dim_x(&self) -> usize {
        self.a.cols()
    }

    fn dim_y(&self) -> usize {
        self.a.rows()
    }

    fn num_samples_f(&self) -> usize {
        self.noise_f.len()
    }

    fn num_samples_g(&self) -> usize {
        self.noise_g.len()
    }

    fn strong_convexity(&self) -> f64 {
        self.mu
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.lipschitz)
    }

    fn declared_constants(&self) -> Option<DeclaredConstants> {
        let outer_l = self.outer_x.as_ref().map_or(1.0, |(w, _)| w.max(1.0));
        Some(DeclaredConstants {
            smoothness: self.lipschitz.max(outer_l),
            grad_bound_f: f64::INFINITY,
            cross_bound: self.cross_norm,
            cross_lipschitz: 0.0,
            hessian_lipschitz: 0.0,
            mu: self.mu,
        })
    }

    fn f_value(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<f64> {
        check_point(self, x, y)?;
        batch.expect_kind(&[BatchKind::F])?;
        let r = y.sub(&self.b);
        let base = self.outer_x_value(x);
        if self.noise_f.is_empty() {
            // Rejects sampled batches on a deterministic oracle.
            Self::noise_mean(&self.noise_f, batch, 0)?;
            return Ok(base + 0.5 * r.norm_sq());
        }
        batch.check_range(self.noise_f.len())?;
        let sample = |i: usize| 0.5 * r.sub(&self.noise_f[i]).norm_sq();
        let mean = if batch.is_full() {
            (0..self.noise_f.len()).map(sample).sum::<f64>() / self.noise_f.len() as f64
        } else {
            batch.indices.iter().map(|&i| sample(i)).sum::<f64>() / batch.indices.len() as f64
        };
        Ok(base + mean)
    }

    fn g_value(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<f64> {
        check_point(self, x, y)?;
        batch.expect_kind(&[BatchKind::G, BatchKind::Hessian])?;
        let r = self.inner_residual(x, y);
        let xi = Self::noise_mean(&self.noise_g, batch, self.dim_y())?;
        Ok(0.5 * r.dot(&self.h.matvec(&r)) + xi.dot(y))
    }

    fn grad_x_f(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        batch.expect_kind(&[BatchKind::F])?;
        batch.check_range(self.noise_f.len().max(1))?;
        Ok(match &self.outer_x {
            Some((w, c)) => x.sub(c).scaled(*w),
            None => Vector::zeros(self.dim_x()),
        })
    }

    fn grad_y_f(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        batch.expect_kind(&[BatchKind::F])?;
        let xi = Self::noise_mean(&self.noise_f, batch, self.dim_y())?;
        Ok(y.sub(&self.b).sub(&xi))
    }

    fn grad_y_g(&self, x: &Vector, y: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        batch.expect_kind(&[BatchKind::G])?;
        let xi = Self::noise_mean(&self.noise_g, batch, self.dim_y())?;
        Ok(self.h.matvec(&self.inner_residual(x, y)).add(&xi))
    }

    fn hvp_yy_g(&self, x: &Vector, y: &Vector, v: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        v.check_dim(self.dim_y())?;
        batch.expect_kind(&[BatchKind::Hessian, BatchKind::G])?;
        batch.check_range(self.noise_g.len().max(1))?;
        Ok(self.h.matvec(v))
    }

    fn jvp_xy_g(&self, x: &Vector, y: &Vector, v: &Vector, batch: &Minibatch) -> Result<Vector> {
        check_point(self, x, y)?;
        v.check_dim(self.dim_y())?;
        batch.expect_kind(&[BatchKind::G, BatchKind::Hessian])?;
        batch.check_range(self.noise_g.len().max(1))?;
        Ok(self.a.matvec_t(&self.h.matvec(v)).scaled(-1.0))
    }
}

/// Generator settings for [`make_quadratic`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct QuadraticFamilySpec {
    pub dim_x: usize,
    pub dim_y: usize,
    pub clients: usize,
    /// Smallest eigenvalue of every inner Hessian.
    pub mu: f64,
    /// Largest eigenvalue of every inner Hessian.
    pub lipschitz: f64,
    /// Spread of `(A_m, b_m, H_m)` across clients; 0 makes all clients identical.
    pub zeta_scale: f64,
    /// Scale of the additive sample noise; 0 gives deterministic oracles.
    pub noise_sigma: f64,
    /// Number of samples per client when `noise_sigma > 0`.
    pub noise_samples: usize,
    /// Weight `w` of the explicit `½ w ‖x - c‖²` outer term; 0 disables it.
    pub outer_x_weight: f64,
    pub seed: u64,
}

impl Default for QuadraticFamilySpec {
    fn default() -> Self {
        QuadraticFamilySpec {
            dim_x: 5,
            dim_y: 8,
            clients: 4,
            mu: 1.0,
            lipschitz: 4.0,
            zeta_scale: 0.5,
            noise_sigma: 0.0,
            noise_samples: 0,
            outer_x_weight: 0.0,
            seed: 0,
        }
    }
}

// Stream ids reserved for problem generation, disjoint from client streams.
const STREAM_BASE: u64 = 1 << 40;
const STREAM_CLIENT: u64 = 1 << 41;
const STREAM_NOISE: u64 = 1 << 42;

/// Closed-form truth for a quadratic family.
#[derive(Debug, Clone)]
pub struct QuadraticGroundTruth {
    clients: Vec<QuadraticOracle>,
}

impl QuadraticGroundTruth {
    pub fn new(clients: Vec<QuadraticOracle>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Empty("ground truth clients"));
        }
        Ok(QuadraticGroundTruth { clients })
    }

    /// Minimizer of `h` from the normal equations
    /// `(1/M) Σ (A_mᵀA_m + w_m I) x = (1/M) Σ (A_mᵀ b_m + w_m c_m)`.
    pub fn minimizer(&self) -> Result<Vector> {
        let dx = self.clients[0].dim_x();
        let mut lhs = DenseMatrix::zeros(dx, dx);
        let mut rhs = Vector::zeros(dx);
        let inv_m = 1.0 / self.clients.len() as f64;
        for c in &self.clients {
            let ata = c.a.transpose().matmul(&c.a);
            lhs = lhs.combine(1.0, &ata, inv_m);
            rhs.axpy(inv_m, &c.a.matvec_t(&c.b));
            if let Some((w, center)) = &c.outer_x {
                lhs = lhs.combine(1.0, &DenseMatrix::identity(dx), inv_m * w);
                rhs.axpy(inv_m * w, center);
            }
        }
        lhs.cholesky_solve(&rhs)
    }

    pub fn client(&self, m: usize) -> &QuadraticOracle {
        &self.clients[m]
    }
}

impl GroundTruth for QuadraticGroundTruth {
    fn num_clients(&self) -> usize {
        self.clients.len()
    }

    fn inner_solution(&self, client: usize, x: &Vector) -> Vector {
        self.clients[client].inner_solution(x)
    }

    fn client_hypergradient(&self, client: usize, x: &Vector) -> Vector {
        self.clients[client].hypergradient(x)
    }

    fn objective(&self, x: &Vector) -> f64 {
        self.clients.iter().map(|c| c.objective(x)).sum::<f64>() / self.clients.len() as f64
    }
}

fn random_orthogonal(n: usize, rng: &mut RngStream) -> DenseMatrix {
    // Modified Gram-Schmidt on a Gaussian matrix, column by column.
    let mut cols: Vec<Vector> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = rng.normal_vector(n, 1.0);
        for c in &cols {
            let p = v.dot(c);
            v.axpy(-p, c);
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v.scaled(1.0 / norm));
        }
    }
    let mut q = DenseMatrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            q[(i, j)] = c[i];
        }
    }
    q
}

fn random_spd(n: usize, mu: f64, lipschitz: f64, rng: &mut RngStream) -> DenseMatrix {
    let mut eigs: Vec<f64> = (0..n)
        .map(|_| mu + (lipschitz - mu) * rng.uniform())
        .collect();
    eigs[0] = mu;
    if n > 1 {
        eigs[n - 1] = lipschitz;
    }
    let q = random_orthogonal(n, rng);
    let h = q
        .matmul(&DenseMatrix::diagonal(&eigs))
        .matmul(&q.transpose());
    // Exact symmetry.
    h.combine(0.5, &h.transpose(), 0.5)
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = scale * rng.normal();
        }
    }
    m
}

/// Builds `spec.clients` quadratic oracles and their closed-form truth.
///
/// Client matrices are `A_m = A_0 + ζ E_m`, `b_m = b_0 + ζ e_m`,
/// `H_m = (1 - s) H_0 + s H'_m` with `s = min(ζ, 1)`. The per-client draws do
/// not depend on `ζ`, so sweeping `ζ` at a fixed seed moves clients apart
/// along fixed directions.
pub fn make_quadratic(
    spec: &QuadraticFamilySpec,
) -> Result<(Vec<QuadraticOracle>, QuadraticGroundTruth)> {
    if !(spec.mu > 0.0) || !(spec.lipschitz >= spec.mu) {
        return Err(Error::config("mu", "need 0 < mu <= lipschitz"));
    }
    if spec.clients == 0 {
        return Err(Error::config("clients", "must be at least 1"));
    }
    if spec.dim_x == 0 || spec.dim_y == 0 {
        return Err(Error::config("dim_x", "dimensions must be positive"));
    }
    if spec.dim_y < spec.dim_x && spec.outer_x_weight <= 0.0 {
        return Err(Error::config(
            "dim_y",
            "dim_y < dim_x leaves h without a unique minimizer; set outer_x_weight > 0",
        ));
    }
    if !(spec.zeta_scale >= 0.0) {
        return Err(Error::config("zeta_scale", "must be nonnegative"));
    }
    let mut base = RngStream::new(spec.seed, STREAM_BASE);
    let mut a0 = gaussian_matrix(
        spec.dim_y,
        spec.dim_x,
        0.3 / libm::sqrt(spec.dim_x as f64),
        &mut base,
    );
    for i in 0..spec.dim_x.min(spec.dim_y) {
        a0[(i, i)] += 1.0;
    }
    let b0 = base.normal_vector(spec.dim_y, 1.0);
    let h0 = random_spd(spec.dim_y, spec.mu, spec.lipschitz, &mut base);
    let center = base.normal_vector(spec.dim_x, 1.0);
    let blend = spec.zeta_scale.min(1.0);

    let mut oracles = Vec::with_capacity(spec.clients);
    for m in 0..spec.clients {
        let mut rng = RngStream::new(spec.seed, STREAM_CLIENT + m as u64);
        let e_a = gaussian_matrix(
            spec.dim_y,
            spec.dim_x,
            1.0 / libm::sqrt(spec.dim_x as f64),
            &mut rng,
        );
        let e_b = rng.normal_vector(spec.dim_y, 1.0);
        let h_client = random_spd(spec.dim_y, spec.mu, spec.lipschitz, &mut rng);
        let a = a0.combine(1.0, &e_a, spec.zeta_scale);
        let mut b = b0.clone();
        b.axpy(spec.zeta_scale, &e_b);
        let h = if blend == 0.0 {
            h0.clone()
        } else {
            h0.combine(1.0 - blend, &h_client, blend)
        };
        let mut oracle = QuadraticOracle::new(a, h, b)?;
        if spec.outer_x_weight > 0.0 {
            oracle = oracle.with_outer_x_term(spec.outer_x_weight, center.clone())?;
        }
        if spec.noise_sigma > 0.0 && spec.noise_samples > 0 {
            let mut noise_rng = RngStream::new(spec.seed, STREAM_NOISE + m as u64);
            oracle =
                oracle.with_additive_noise(spec.noise_sigma, spec.noise_samples, &mut noise_rng);
        }
        oracles.push(oracle);
    }
    let truth = QuadraticGroundTruth::new(oracles.clone())?;
    Ok((oracles, truth))
}
