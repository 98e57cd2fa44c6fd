//! Plant description and steady-state Kalman filtering.
//!
//! The model is the standard discrete-time stochastic LTI loop
//!
//! ```text
//! x_{k+1} = A x_k + B u_k + w_k,   w_k ~ N(0, Q)
//! y_k     = C x_k + v_k,           v_k ~ N(0, R)
//! ```
//!
//! with quadratic stage cost `xᵀ W x + uᵀ U u`. The estimator throughout the
//! crate is the steady-state Kalman filter; its error covariance solves the
//! estimation DARE, obtained here by fixed-point iteration.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{is_symmetric, spectral_radius, sym};
use crate::{linalg, Error, Result};

/// Relative Frobenius change at which Riccati iterations stop.
const DARE_REL_TOL: f64 = 1e-12;
/// Iteration cap for Riccati fixed points.
const DARE_MAX_ITERS: usize = 10_000;

/// An LTI plant with Gaussian process/measurement noise and LQG weights.
#[derive(Debug, Clone)]
pub struct SystemModel {
    /// State transition, `n x n`.
    pub a: DMatrix<f64>,
    /// Input map, `n x p`.
    pub b: DMatrix<f64>,
    /// Output map, `m x n`.
    pub c: DMatrix<f64>,
    /// Process noise covariance `Q`, `n x n`, PSD.
    pub process_noise: DMatrix<f64>,
    /// Measurement noise covariance `R`, `m x m`, PD.
    pub measurement_noise: DMatrix<f64>,
    /// State stage-cost weight `W`, `n x n`, PSD.
    pub state_cost: DMatrix<f64>,
    /// Input stage-cost weight `U`, `p x p`, PD.
    pub input_cost: DMatrix<f64>,
}

/// Steady-state Kalman filter quantities.
#[derive(Debug, Clone)]
pub struct KalmanSolution {
    /// Prediction error covariance `P` (solution of the estimation DARE).
    pub error_cov: DMatrix<f64>,
    /// Steady-state gain `K = P Cᵀ (C P Cᵀ + R)⁻¹`.
    pub gain: DMatrix<f64>,
    /// Innovation covariance `C P Cᵀ + R`.
    pub innovation_cov: DMatrix<f64>,
    /// Filtered error covariance `(I - K C) P`.
    pub filtered_cov: DMatrix<f64>,
}

/// One filter update: prediction, innovation, and filtered estimate.
#[derive(Debug, Clone)]
pub struct StateEstimate {
    /// `x̂_{k+1|k} = A x̂_{k|k} + B u_k`.
    pub x_pred: DVector<f64>,
    /// Innovation `z_{k+1} = y_{k+1} - C x̂_{k+1|k}`.
    pub innovation: DVector<f64>,
    /// `x̂_{k+1|k+1} = x̂_{k+1|k} + K z_{k+1}`.
    pub x_filt: DVector<f64>,
    /// Estimation error `x - x̂_{k|k}`, filled by simulations that know the
    /// true state.
    pub error: Option<DVector<f64>>,
}

impl StateEstimate {
    /// The all-zero estimate used to start a simulation.
    pub fn origin(n: usize, m: usize) -> Self {
        StateEstimate {
            x_pred: DVector::zeros(n),
            innovation: DVector::zeros(m),
            x_filt: DVector::zeros(n),
            error: None,
        }
    }
}

impl SystemModel {
    /// Build and validate a model.
    ///
    /// Checks dimensions, covariance/weight symmetry and definiteness
    /// (`R` and `U` must be invertible), and that `(A, B)` is controllable
    /// and `(A, C)` observable, which the designers rely on.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        process_noise: DMatrix<f64>,
        measurement_noise: DMatrix<f64>,
        state_cost: DMatrix<f64>,
        input_cost: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::InvalidModel(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidModel("state dimension is zero".into()));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::InvalidModel(format!(
                "B must be {n}x(p>0), got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::InvalidModel(format!(
                "C must be (m>0)x{n}, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        let p = b.ncols();
        let m = c.nrows();
        if process_noise.nrows() != n {
            return Err(Error::InvalidModel("Q dimension mismatch".into()));
        }
        if measurement_noise.nrows() != m {
            return Err(Error::InvalidModel("R dimension mismatch".into()));
        }
        if state_cost.nrows() != n {
            return Err(Error::InvalidModel("W dimension mismatch".into()));
        }
        if input_cost.nrows() != p {
            return Err(Error::InvalidModel("U dimension mismatch".into()));
        }
        // All four weights must be symmetric positive definite: R and U are
        // inverted, and the cost/correlation formulas assume Q, W ≻ 0.
        for (mat, name) in [
            (&process_noise, "process noise Q"),
            (&measurement_noise, "measurement noise R"),
            (&state_cost, "state cost W"),
            (&input_cost, "input cost U"),
        ] {
            linalg::check_covariance(mat, name)?;
            if mat.clone().cholesky().is_none() {
                return Err(Error::InvalidModel(format!(
                    "{name} must be positive definite"
                )));
            }
        }
        if !pair_rank_full(&a, &b) {
            return Err(Error::InvalidModel("(A, B) is not controllable".into()));
        }
        if !pair_rank_full(&a.transpose(), &c.transpose()) {
            return Err(Error::InvalidModel("(A, C) is not observable".into()));
        }
        Ok(SystemModel {
            a,
            b,
            c,
            process_noise,
            measurement_noise,
            state_cost,
            input_cost,
        })
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    /// Output dimension.
    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    /// Solve the estimation DARE and assemble the steady-state filter.
    pub fn solve_dare(&self) -> Result<KalmanSolution> {
        let p = solve_dare_matrices(
            &self.a,
            &self.c,
            &self.process_noise,
            &self.measurement_noise,
        )?;
        let innovation_cov = &self.c * &p * self.c.transpose() + &self.measurement_noise;
        let inv = innovation_cov
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("innovation covariance".into()))?;
        let gain = &p * self.c.transpose() * inv;
        let filtered_cov =
            (DMatrix::identity(self.n(), self.n()) - &gain * &self.c) * &p;
        Ok(KalmanSolution {
            error_cov: p,
            gain,
            innovation_cov,
            filtered_cov,
        })
    }

    /// Advance the plant one step: `x⁺ = A x + B u + d + w`, where `d` is an
    /// attacker-injected term already mapped into state space (`Bᵃuᵃ`).
    pub fn plant_step(
        &self,
        x: &DVector<f64>,
        u_applied: &DVector<f64>,
        w: &DVector<f64>,
        attack_input: Option<&DVector<f64>>,
    ) -> DVector<f64> {
        let mut next = &self.a * x + &self.b * u_applied + w;
        if let Some(d) = attack_input {
            next += d;
        }
        next
    }

    /// Measure the plant: `y = C x + v`.
    pub fn measure(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.c * x + v
    }

    /// One steady-state Kalman update from the previous filtered estimate.
    ///
    /// `u_applied` is the control that actually reached the plant at step
    /// `k` (the estimator learns delivery through acknowledgments, so its
    /// prediction uses the realized input, watermark and drops included).
    pub fn kalman_step(
        &self,
        gain: &DMatrix<f64>,
        prev: &StateEstimate,
        u_applied: &DVector<f64>,
        y_next: &DVector<f64>,
    ) -> StateEstimate {
        let x_pred = &self.a * &prev.x_filt + &self.b * u_applied;
        let innovation = y_next - &self.c * &x_pred;
        let x_filt = &x_pred + gain * &innovation;
        StateEstimate {
            x_pred,
            innovation,
            x_filt,
            error: None,
        }
    }
}

/// Rank test for the controllability pair `(A, B)`: the Kalman matrix
/// `[B, AB, ..., A^{n-1}B]` must have full row rank. Rank is counted from
/// singular values above `1e-8` times the largest.
fn pair_rank_full(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let p = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * p);
    let mut block = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * p), (n, p)).copy_from(&block);
        block = a * &block;
    }
    let sv = ctrb.svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return false;
    }
    sv.iter().filter(|&&s| s > 1e-8 * max).count() == n
}

/// Solve the estimation DARE
/// `P = A P Aᵀ + Q - A P Cᵀ (C P Cᵀ + R)⁻¹ C P Aᵀ`
/// by fixed-point iteration from `P₀ = Q`, symmetrizing each iterate.
///
/// The control Riccati equation is the same map under the substitution
/// `A → Aᵀ, C → Bᵀ, Q → W, R → U`, which callers use for LQR cross-checks.
pub fn solve_dare_matrices(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for iter in 0..DARE_MAX_ITERS {
        let next = dare_map(a, c, q, r, &p)?;
        let diff = (&next - &p).norm();
        let scale = next.norm().max(1.0);
        p = next;
        if diff <= DARE_REL_TOL * scale {
            return Ok(p);
        }
        if !p.iter().all(|x| x.is_finite()) {
            return Err(Error::NonConvergence {
                what: "estimation DARE",
                iterations: iter + 1,
                residual: f64::INFINITY,
            });
        }
    }
    let residual = dare_residual(a, c, q, r, &p);
    Err(Error::NonConvergence {
        what: "estimation DARE",
        iterations: DARE_MAX_ITERS,
        residual,
    })
}

/// One application of the DARE fixed-point map, symmetrized.
fn dare_map(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let s = c * p * c.transpose() + r;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::Singular("innovation covariance in DARE".into()))?;
    let apc = a * p * c.transpose();
    Ok(sym(&(a * p * a.transpose() + q - &apc * s_inv * apc.transpose())))
}

/// Frobenius norm of the DARE defect `‖P - map(P)‖`, for verification.
pub fn dare_residual(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    match dare_map(a, c, q, r, p) {
        Ok(next) => (p - next).norm(),
        Err(_) => f64::INFINITY,
    }
}

/// Draw a random test system: `A`, `B`, `C` have iid standard normal
/// entries, `A` is rescaled to spectral radius 0.8, and all covariances
/// and cost weights are identity. Redraws until the controllability and
/// observability checks pass (almost surely the first draw).
pub fn generate_random_system<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    m: usize,
    rng: &mut R,
) -> Result<SystemModel> {
    generate_random_system_with_radius(n, p, m, 0.8, rng)
}

/// [`generate_random_system`] with an explicit open-loop spectral radius in
/// `(0, 1)`, so callers can tune how close the plant sits to instability.
pub fn generate_random_system_with_radius<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    m: usize,
    radius: f64,
    rng: &mut R,
) -> Result<SystemModel> {
    if !(radius > 0.0 && radius < 1.0) {
        return Err(Error::InvalidModel(format!(
            "target spectral radius {radius} outside (0, 1)"
        )));
    }
    for _ in 0..32 {
        let mut a = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        let b = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng));
        let c = DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(rng));
        let rho = spectral_radius(&a);
        if rho < 1e-12 {
            continue;
        }
        a *= radius / rho;
        let model = SystemModel::new(
            a,
            b,
            c,
            DMatrix::identity(n, n),
            DMatrix::identity(m, m),
            DMatrix::identity(n, n),
            DMatrix::identity(p, p),
        );
        if let Ok(model) = model {
            return Ok(model);
        }
    }
    Err(Error::InvalidModel(
        "could not draw a controllable and observable random system".into(),
    ))
}

/// Assert that a solved error covariance is symmetric PSD; used by the
/// verification command.
pub fn check_riccati_solution(p: &DMatrix<f64>) -> Result<()> {
    let scale = p.iter().map(|x| x.abs()).fold(1.0, f64::max);
    if !is_symmetric(p, 1e-9 * scale) {
        return Err(Error::InvalidModel("Riccati solution not symmetric".into()));
    }
    let min = p
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min < -1e-9 * scale {
        return Err(Error::InvalidModel(format!(
            "Riccati solution indefinite (min eigenvalue {min:.3e})"
        )));
    }
    Ok(())
}
