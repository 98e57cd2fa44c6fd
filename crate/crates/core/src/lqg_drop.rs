//! LQG control under Bernoulli actuation drops, and the covariance
//! operators whose spectral radii certify closed-loop stability.
//!
//! The actuation link delivers `u_{k,c} = η_k u_k`, where `η_k` is either an
//! IID Bernoulli process with drop probability `p_d` or a two-state Markov
//! chain. With acknowledgments, the optimal controller is linear state
//! feedback whose gain solves a drop-weighted Riccati fixed point (a coupled
//! pair for the Markov chain). This module computes those gains and the
//! resulting steady-state costs, and provides the two linear
//! covariance-propagation operators the watermark analysis depends on:
//! [`MarkovCovOp`] for mode-conditioned covariance pairs under Markov drops,
//! and [`IidCovOp`] for drop-averaged covariances under IID drops.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::linalg::{kron, spectral_radius, sym, unvec_mat, vec_mat};
use crate::sysmodel::{KalmanSolution, SystemModel};
use crate::{Error, Result};

/// Relative change at which Riccati iterations stop.
const RICCATI_REL_TOL: f64 = 1e-12;
/// Iteration cap for Riccati fixed points.
const RICCATI_MAX_ITERS: usize = 10_000;
/// Frobenius norm beyond which a cost iteration is declared divergent.
const DIVERGENCE_NORM: f64 = 1e12;
/// Relative residual at which linear covariance fixed points stop.
const COV_REL_TOL: f64 = 1e-12;
/// Iteration cap for linear covariance fixed points.
const COV_MAX_ITERS: usize = 200_000;
/// Smallest Markov drop probability; exact zero is clamped here so the
/// chain stays irreducible while still modelling an effectively drop-free
/// link (experiment configurations use "no drops" corners).
pub const MARKOV_MIN_DROP: f64 = 1e-6;

/// The actuation-loss process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropModel {
    /// IID Bernoulli drops: `P(η_k = 0) = drop_prob`.
    Iid {
        drop_prob: f64,
    },
    /// Two-state Markov chain on `η ∈ {0, 1}`:
    /// `recover_prob = P(η_{k+1}=1 | η_k=0)` and
    /// `drop_prob = P(η_{k+1}=0 | η_k=1)`.
    Markov {
        recover_prob: f64,
        drop_prob: f64,
    },
}

impl DropModel {
    /// IID drop process with drop probability in `[0, 1]`.
    pub fn iid(drop_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&drop_prob) {
            return Err(Error::Config(format!(
                "IID drop probability {drop_prob} outside [0, 1]"
            )));
        }
        Ok(DropModel::Iid { drop_prob })
    }

    /// Markov drop process. `recover_prob` must lie in `(0, 1]`;
    /// `drop_prob` in `[0, 1]`, with exact zero clamped to
    /// [`MARKOV_MIN_DROP`] to keep the chain irreducible.
    pub fn markov(recover_prob: f64, drop_prob: f64) -> Result<Self> {
        if !(recover_prob > 0.0 && recover_prob <= 1.0) {
            return Err(Error::Config(format!(
                "Markov recover probability {recover_prob} outside (0, 1]"
            )));
        }
        if !(0.0..=1.0).contains(&drop_prob) {
            return Err(Error::Config(format!(
                "Markov drop probability {drop_prob} outside [0, 1]"
            )));
        }
        Ok(DropModel::Markov {
            recover_prob,
            drop_prob: drop_prob.max(MARKOV_MIN_DROP),
        })
    }

    /// Stationary probability that a packet is dropped.
    pub fn drop_rate(&self) -> f64 {
        match *self {
            DropModel::Iid { drop_prob } => drop_prob,
            DropModel::Markov {
                recover_prob,
                drop_prob,
            } => drop_prob / (recover_prob + drop_prob),
        }
    }

    /// Check that this artificial drop process is realizable on top of a
    /// naturally lossy link with IID drop probability `natural_p_d`:
    /// the composed link can never deliver more reliably than the natural
    /// one, so `P(deliver)` transition weights are capped by
    /// `1 - natural_p_d`.
    pub fn check_natural_bound(&self, natural_p_d: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&natural_p_d) {
            return Err(Error::Config(format!(
                "natural drop probability {natural_p_d} outside [0, 1]"
            )));
        }
        let cap = 1.0 - natural_p_d;
        match *self {
            DropModel::Iid { drop_prob } => {
                if drop_prob < natural_p_d {
                    return Err(Error::Config(format!(
                        "IID drop probability {drop_prob} below the natural rate {natural_p_d}"
                    )));
                }
            }
            DropModel::Markov {
                recover_prob,
                drop_prob,
            } => {
                if recover_prob > cap + 1e-12 || (1.0 - drop_prob) > cap + 1e-12 {
                    return Err(Error::Config(format!(
                        "Markov parameters ({recover_prob}, {drop_prob}) exceed delivery cap {cap} \
                         implied by natural drop rate {natural_p_d}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Steady-state LQG solution under IID drops.
#[derive(Debug, Clone)]
pub struct IidLqgSolution {
    /// Drop probability the solution was computed for.
    pub drop_prob: f64,
    /// Feedback gain (p×n): `u_k = gain · x̂_{k|k}`.
    pub gain: DMatrix<f64>,
    /// Cost-to-go matrix (n×n), fixed point of the drop-weighted Riccati map.
    pub value: DMatrix<f64>,
    /// Steady-state average cost per step.
    pub cost: f64,
}

impl IidLqgSolution {
    /// Mean closed-loop matrix `A + (1-p_d) B L`; Schur stable whenever the
    /// cost is finite.
    pub fn mean_closed_loop(&self, model: &SystemModel) -> DMatrix<f64> {
        &model.a + (&model.b * &self.gain) * (1.0 - self.drop_prob)
    }

    /// Delivered-mode closed-loop matrix `A + B L`.
    pub fn closed_loop(&self, model: &SystemModel) -> DMatrix<f64> {
        &model.a + &model.b * &self.gain
    }
}

/// Steady-state LQG solution under Markov drops.
#[derive(Debug, Clone)]
pub struct MarkovLqgSolution {
    /// `P(η_{k+1}=1 | η_k=0)`.
    pub recover_prob: f64,
    /// `P(η_{k+1}=0 | η_k=1)`.
    pub drop_prob: f64,
    /// Feedback gain (p×n).
    pub gain: DMatrix<f64>,
    /// Cost-to-go matrix conditioned on the previous packet being delivered.
    pub value_delivered: DMatrix<f64>,
    /// Cost-to-go matrix conditioned on the previous packet being dropped.
    pub value_dropped: DMatrix<f64>,
    /// Steady-state average cost per step.
    pub cost: f64,
}

impl MarkovLqgSolution {
    /// Delivered-mode closed-loop matrix `A + B L`.
    pub fn closed_loop(&self, model: &SystemModel) -> DMatrix<f64> {
        &model.a + &model.b * &self.gain
    }
}

/// Optimal feedback gain for the current value matrix:
/// `L = -(Bᵀ V B + U)⁻¹ Bᵀ V A`.
fn feedback_gain(model: &SystemModel, value: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let btvb = model.b.transpose() * value * &model.b + &model.input_cost;
    let inv = btvb
        .try_inverse()
        .ok_or_else(|| Error::Singular("input-weighted value matrix".into()))?;
    Ok(-inv * model.b.transpose() * value * &model.a)
}

/// Guard shared by the value iterations: divergence and monotonicity.
///
/// Iterates started from `W` are nondecreasing in the semidefinite order;
/// the assertion allows slack relative to the matrix scale because the
/// eigenvalue check itself is computed in floating point.
fn check_iterate(next: &DMatrix<f64>, prev: &DMatrix<f64>, what: &'static str) -> Result<()> {
    let norm = next.norm();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::UnboundedCost(format!(
            "{what} iteration diverged (‖value‖ = {norm:.3e}); the drop process is too lossy"
        )));
    }
    if cfg!(debug_assertions) {
        let min_step = (next - prev)
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        debug_assert!(
            min_step >= -1e-10 * norm.max(1.0),
            "{what} iteration lost semidefinite monotonicity: step eigenvalue {min_step:.3e}"
        );
    }
    Ok(())
}

/// Solve the IID-drop LQG problem: fixed point of
/// `S = AᵀSA + W - (1-p_d) AᵀSB (BᵀSB+U)⁻¹ BᵀSA`
/// iterated from `S₀ = W`, then the cost
/// `J = tr(SQ) + tr((AᵀSA + W - S)(P - KCP))`.
pub fn solve_iid_lqg(
    model: &SystemModel,
    kalman: &KalmanSolution,
    drop_prob: f64,
) -> Result<IidLqgSolution> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::Config(format!(
            "drop probability {drop_prob} outside [0, 1]"
        )));
    }
    let deliver = 1.0 - drop_prob;
    let mut s = model.state_cost.clone();
    for _ in 0..RICCATI_MAX_ITERS {
        let gain = feedback_gain(model, &s)?;
        let next = sym(
            &(model.a.transpose() * &s * &model.a
                + &model.state_cost
                + (model.a.transpose() * &s * &model.b * &gain) * deliver),
        );
        let delta = (&next - &s).norm();
        check_iterate(&next, &s, "IID-drop LQG")?;
        let scale = next.norm().max(1.0);
        s = next;
        if delta <= RICCATI_REL_TOL * scale {
            let gain = feedback_gain(model, &s)?;
            let cost = iid_cost(model, kalman, &s);
            return Ok(IidLqgSolution {
                drop_prob,
                gain,
                value: s,
                cost,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "IID-drop LQG value iteration",
        iterations: RICCATI_MAX_ITERS,
        residual: f64::NAN,
    })
}

fn iid_cost(model: &SystemModel, kalman: &KalmanSolution, s: &DMatrix<f64>) -> f64 {
    let estimation_penalty =
        model.a.transpose() * s * &model.a + &model.state_cost - s;
    (s * &model.process_noise).trace() + (estimation_penalty * &kalman.filtered_cov).trace()
}

/// Solve the Markov-drop LQG problem: coupled fixed point
///
/// ```text
/// L  = -(Bᵀ R B + U)⁻¹ Bᵀ R A
/// R⁺ = Aᵀ(β S + (1-β) R)A + W + (1-β) AᵀRBL
/// S⁺ = Aᵀ((1-α) S + α R)A + W + α AᵀRBL
/// ```
///
/// iterated from `R₀ = S₀ = W`, where `R` conditions on the previous packet
/// being delivered and `S` on it being dropped. The cost averages the two
/// modes under the chain's stationary distribution.
pub fn solve_markov_lqg(
    model: &SystemModel,
    kalman: &KalmanSolution,
    recover_prob: f64,
    drop_prob: f64,
) -> Result<MarkovLqgSolution> {
    let (alpha, beta) = (recover_prob, drop_prob);
    if !(alpha > 0.0 && alpha <= 1.0) || !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!(
            "Markov parameters ({alpha}, {beta}) outside (0, 1]²"
        )));
    }
    let mut r = model.state_cost.clone();
    let mut s = model.state_cost.clone();
    for _ in 0..RICCATI_MAX_ITERS {
        let gain = feedback_gain(model, &r)?;
        let arbl = model.a.transpose() * &r * &model.b * &gain;
        let next_r = sym(
            &(model.a.transpose() * (&s * beta + &r * (1.0 - beta)) * &model.a
                + &model.state_cost
                + &arbl * (1.0 - beta)),
        );
        let next_s = sym(
            &(model.a.transpose() * (&s * (1.0 - alpha) + &r * alpha) * &model.a
                + &model.state_cost
                + &arbl * alpha),
        );
        let delta = (&next_r - &r).norm() + (&next_s - &s).norm();
        check_iterate(&next_r, &r, "Markov-drop LQG (delivered mode)")?;
        check_iterate(&next_s, &s, "Markov-drop LQG (dropped mode)")?;
        let scale = (next_r.norm() + next_s.norm()).max(1.0);
        r = next_r;
        s = next_s;
        if delta <= RICCATI_REL_TOL * scale {
            let gain = feedback_gain(model, &r)?;
            let cost = markov_cost(model, kalman, alpha, beta, &r, &s);
            return Ok(MarkovLqgSolution {
                recover_prob: alpha,
                drop_prob: beta,
                gain,
                value_delivered: r,
                value_dropped: s,
                cost,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "Markov-drop LQG value iteration",
        iterations: RICCATI_MAX_ITERS,
        residual: f64::NAN,
    })
}

fn markov_cost(
    model: &SystemModel,
    kalman: &KalmanSolution,
    alpha: f64,
    beta: f64,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> f64 {
    let process_term = ((s * beta + r * alpha) * &model.process_noise).trace();
    let estimation_penalty = model.a.transpose() * (s * (1.0 - alpha) + r * alpha) * &model.a
        + &model.state_cost
        - s;
    (process_term + (estimation_penalty * &kalman.filtered_cov).trace()) / (alpha + beta)
}

/// Covariance-pair propagator under Markov drops.
///
/// Acting on mode-conditioned covariances `(X₀, X₁)` (condition: previous
/// packet dropped / delivered), one step of the closed loop maps
///
/// ```text
/// X₀ ↦ A ((1-α) X₀ + α X₁) Aᵀ
/// X₁ ↦ F (β X₀ + (1-β) X₁) Fᵀ,      F = A + B L
/// ```
///
/// Its vectorized spectral radius below one certifies that forced fixed
/// points exist and are unique.
#[derive(Debug, Clone)]
pub struct MarkovCovOp {
    pub recover_prob: f64,
    pub drop_prob: f64,
    a: DMatrix<f64>,
    f: DMatrix<f64>,
}

impl MarkovCovOp {
    /// Build the operator from the open-loop matrix and the delivered-mode
    /// closed loop `F = A + B L`.
    pub fn new(recover_prob: f64, drop_prob: f64, a: DMatrix<f64>, f: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "A must be square");
        assert_eq!(a.nrows(), f.nrows(), "A and F dimension mismatch");
        assert_eq!(f.nrows(), f.ncols(), "F must be square");
        MarkovCovOp {
            recover_prob,
            drop_prob,
            a,
            f,
        }
    }

    /// Convenience constructor from a Markov LQG solution.
    pub fn from_solution(model: &SystemModel, sol: &MarkovLqgSolution) -> Self {
        MarkovCovOp::new(
            sol.recover_prob,
            sol.drop_prob,
            model.a.clone(),
            sol.closed_loop(model),
        )
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// One application via matrix products.
    pub fn apply(&self, x0: &DMatrix<f64>, x1: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (alpha, beta) = (self.recover_prob, self.drop_prob);
        let mix0 = x0 * (1.0 - alpha) + x1 * alpha;
        let mix1 = x0 * beta + x1 * (1.0 - beta);
        (
            &self.a * mix0 * self.a.transpose(),
            &self.f * mix1 * self.f.transpose(),
        )
    }

    /// The 2n²×2n² matrix of the operator on stacked column-major
    /// vectorizations `[vec X₀; vec X₁]`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let (alpha, beta) = (self.recover_prob, self.drop_prob);
        let n2 = self.dim() * self.dim();
        let aa = kron(&self.a, &self.a);
        let ff = kron(&self.f, &self.f);
        let mut m = DMatrix::zeros(2 * n2, 2 * n2);
        m.view_mut((0, 0), (n2, n2)).copy_from(&(&aa * (1.0 - alpha)));
        m.view_mut((0, n2), (n2, n2)).copy_from(&(&aa * alpha));
        m.view_mut((n2, 0), (n2, n2)).copy_from(&(&ff * beta));
        m.view_mut((n2, n2), (n2, n2))
            .copy_from(&(&ff * (1.0 - beta)));
        m
    }

    /// Spectral radius of the vectorized operator.
    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.matrix())
    }

    /// Solve the forced fixed point
    /// `(X₀, X₁) = op(X₀, X₁) + (0, forcing)` by iteration from zero.
    ///
    /// The spectral radius is checked first so an unstable operator fails
    /// fast instead of wandering.
    pub fn solve_forced(&self, forcing: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let rho = self.spectral_radius();
        if rho >= 1.0 - 1e-12 {
            return Err(Error::Singular(format!(
                "Markov covariance operator is not stable (spectral radius {rho:.6})"
            )));
        }
        let n = self.dim();
        let mut x0 = DMatrix::zeros(n, n);
        let mut x1 = DMatrix::zeros(n, n);
        let scale = forcing.norm().max(1.0);
        for _ in 0..COV_MAX_ITERS {
            let (n0, mut n1) = self.apply(&x0, &x1);
            n1 += forcing;
            let delta = (&n0 - &x0).norm() + (&n1 - &x1).norm();
            x0 = n0;
            x1 = n1;
            if delta <= COV_REL_TOL * scale.max(x0.norm() + x1.norm()) {
                return Ok((x0, x1));
            }
        }
        Err(Error::NonConvergence {
            what: "Markov covariance fixed point",
            iterations: COV_MAX_ITERS,
            residual: f64::NAN,
        })
    }

    /// Forced fixed point via one dense linear solve of the vectorized
    /// system; exact up to factorization error. Used to cross-check
    /// [`MarkovCovOp::solve_forced`] and in designer adjoint assembly.
    pub fn solve_forced_direct(
        &self,
        forcing: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.dim();
        let n2 = n * n;
        let system = DMatrix::identity(2 * n2, 2 * n2) - self.matrix();
        let mut rhs = DVector::zeros(2 * n2);
        rhs.rows_mut(n2, n2).copy_from(&vec_mat(forcing));
        let sol = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("Markov covariance fixed point".into()))?;
        Ok((
            unvec_mat(&sol.rows(0, n2).into_owned(), n, n),
            unvec_mat(&sol.rows(n2, n2).into_owned(), n, n),
        ))
    }
}

/// Drop-averaged covariance propagator under IID drops:
/// `X ↦ (1-p_d) F X Fᵀ + p_d A X Aᵀ` with `F = A + B L`.
///
/// [`IidCovOp::solve`] returns the accumulated response
/// `Y = (1-p_d)(F Y Fᵀ + X) + p_d A Y Aᵀ`, the quantity the stationary
/// watermark analysis is built on.
#[derive(Debug, Clone)]
pub struct IidCovOp {
    pub drop_prob: f64,
    a: DMatrix<f64>,
    f: DMatrix<f64>,
}

impl IidCovOp {
    pub fn new(drop_prob: f64, a: DMatrix<f64>, f: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "A must be square");
        assert_eq!(a.nrows(), f.nrows(), "A and F dimension mismatch");
        assert_eq!(f.nrows(), f.ncols(), "F must be square");
        IidCovOp { drop_prob, a, f }
    }

    /// Convenience constructor from an IID LQG solution.
    pub fn from_solution(model: &SystemModel, sol: &IidLqgSolution) -> Self {
        IidCovOp::new(sol.drop_prob, model.a.clone(), sol.closed_loop(model))
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// One application via matrix products.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.drop_prob;
        &self.f * x * self.f.transpose() * (1.0 - p) + &self.a * x * self.a.transpose() * p
    }

    /// The n²×n² matrix of the operator on column-major vectorizations.
    pub fn matrix(&self) -> DMatrix<f64> {
        let p = self.drop_prob;
        kron(&self.f, &self.f) * (1.0 - p) + kron(&self.a, &self.a) * p
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.matrix())
    }

    /// Solve `Y = (1-p_d)(F Y Fᵀ + X) + p_d A Y Aᵀ` by iteration from zero.
    pub fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let rho = self.spectral_radius();
        if rho >= 1.0 - 1e-12 {
            return Err(Error::Singular(format!(
                "IID covariance operator is not stable (spectral radius {rho:.6})"
            )));
        }
        let n = self.dim();
        let forcing = x * (1.0 - self.drop_prob);
        let mut y = DMatrix::zeros(n, n);
        let scale = forcing.norm().max(1.0);
        for _ in 0..COV_MAX_ITERS {
            let next = self.apply(&y) + &forcing;
            let delta = (&next - &y).norm();
            y = next;
            if delta <= COV_REL_TOL * scale.max(y.norm()) {
                return Ok(y);
            }
        }
        Err(Error::NonConvergence {
            what: "IID covariance fixed point",
            iterations: COV_MAX_ITERS,
            residual: f64::NAN,
        })
    }

    /// Same fixed point via one dense linear solve; cross-check route.
    pub fn solve_direct(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let n2 = n * n;
        let system = DMatrix::identity(n2, n2) - self.matrix();
        let rhs = vec_mat(x) * (1.0 - self.drop_prob);
        let sol = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("IID covariance fixed point".into()))?;
        Ok(unvec_mat(&sol, n, n))
    }

    /// Factor the vectorized system once so many right-hand sides can be
    /// solved against the same operator.
    pub fn factor(&self) -> Result<FactoredIidCovOp> {
        let rho = self.spectral_radius();
        if rho >= 1.0 - 1e-12 {
            return Err(Error::Singular(format!(
                "IID covariance operator is not stable (spectral radius {rho:.6})"
            )));
        }
        let n = self.dim();
        let system = DMatrix::identity(n * n, n * n) - self.matrix();
        Ok(FactoredIidCovOp {
            drop_prob: self.drop_prob,
            dim: n,
            lu: system.lu(),
        })
    }

    /// Complex extension: the operator is real-linear, so a complex argument
    /// splits into independent solves on its real and imaginary parts.
    pub fn solve_complex(&self, x: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
        let re = x.map(|z| z.re);
        let im = x.map(|z| z.im);
        let yre = self.solve(&re)?;
        let yim = self.solve(&im)?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            Complex64::new(yre[(i, j)], yim[(i, j)])
        }))
    }
}

/// Prefactored form of [`IidCovOp`], solving each right-hand side with two
/// triangular substitutions instead of a fresh dense factorization.
#[derive(Debug)]
pub struct FactoredIidCovOp {
    drop_prob: f64,
    dim: usize,
    lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl FactoredIidCovOp {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solve `Y = (1-p_d)(F Y Fᵀ + X) + p_d A Y Aᵀ`.
    pub fn solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let rhs = vec_mat(x) * (1.0 - self.drop_prob);
        let sol = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("IID covariance fixed point".into()))?;
        Ok(unvec_mat(&sol, self.dim, self.dim))
    }

    /// Complex right-hand side via separate real and imaginary solves.
    pub fn solve_complex(&self, x: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
        let yre = self.solve(&x.map(|z| z.re))?;
        let yim = self.solve(&x.map(|z| z.im))?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            Complex64::new(yre[(i, j)], yim[(i, j)])
        }))
    }
}
