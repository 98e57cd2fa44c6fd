//! Physical watermark design.
//!
//! Two watermark families are designed here, both trading detection power
//! (the steady-state correlation between plant output and a defender-side
//! virtual replica, which an attacker cannot reproduce) against LQG cost:
//!
//! * [`design_wm1`]: an IID Gaussian input perturbation riding on a Markov
//!   actuation-drop process. For fixed chain parameters `(α, β)` the optimal
//!   perturbation covariance is rank one and found by a generalized
//!   eigenproblem; the designer sweeps a grid of chain parameters.
//! * [`design_wm2`]: a stationary Gaussian perturbation produced by a hidden
//!   rotation state, riding on an IID drop process. The optimal spectral
//!   measure concentrates on a single frequency atom `h e^{2πjωk}`; the
//!   designer sweeps a `(ω, p_d)` grid and solves a rank-one problem per
//!   point in a complex Hermitian space, realized through a real embedding.
//!
//! Each designer reports the full grid it examined alongside the winning
//! design, so infeasible or degenerate regions stay visible to callers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::linalg::{
    canonicalize_phase, check_covariance, complex_from_stacked, hermitian_embed,
    generalized_max_eigen, spectral_radius, sym, unvec_mat, vec_mat,
};
use crate::lqg_drop::{
    solve_iid_lqg, solve_markov_lqg, DropModel, FactoredIidCovOp, IidCovOp, IidLqgSolution,
    MarkovCovOp, MarkovLqgSolution,
};
use crate::sysmodel::{KalmanSolution, SystemModel};
use crate::{Error, Result};

/// IID Gaussian watermark: `Δu_k ~ N(0, covariance)`, drawn independently
/// each step and added to the control input before the drop link.
#[derive(Debug, Clone, PartialEq)]
pub struct IidGaussianWatermark {
    /// Input-space covariance (p×p, symmetric positive semidefinite).
    pub covariance: DMatrix<f64>,
}

impl IidGaussianWatermark {
    pub fn new(covariance: DMatrix<f64>) -> Result<Self> {
        check_covariance(&covariance, "watermark covariance")?;
        Ok(IidGaussianWatermark { covariance })
    }

    /// Watermark that injects nothing.
    pub fn zero(p: usize) -> Self {
        IidGaussianWatermark {
            covariance: DMatrix::zeros(p, p),
        }
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.covariance.norm() == 0.0
    }
}

/// Stationary Gaussian watermark generated by a hidden linear state:
/// `ζ_{k+1} = A_w ζ_k + ψ_k`, `Δu_k = C_h ζ_k`, with `ψ_k ~ N(0, Ψ)` and
/// `ζ_0 ~ N(0, Z_0)` where `Z_0` is the stationary state covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmWatermark {
    /// Hidden-state transition matrix.
    pub a_w: DMatrix<f64>,
    /// Output map from hidden state to input perturbation (p × state dim).
    pub c_h: DMatrix<f64>,
    /// Hidden-state noise covariance.
    pub psi: DMatrix<f64>,
    /// Spectral-radius budget the hidden dynamics were designed under.
    pub rho_bar: f64,
    /// Stationary hidden-state covariance.
    pub z0: DMatrix<f64>,
}

impl HmmWatermark {
    /// Validate and assemble a hidden-state watermark. Requires
    /// `ρ(A_w) ≤ rho_bar` and that `z0` is stationary for `(A_w, Ψ)`.
    pub fn new(
        a_w: DMatrix<f64>,
        c_h: DMatrix<f64>,
        psi: DMatrix<f64>,
        rho_bar: f64,
        z0: DMatrix<f64>,
    ) -> Result<Self> {
        if !(rho_bar > 0.0 && rho_bar <= 1.0) {
            return Err(Error::Config(format!(
                "hidden-state radius budget {rho_bar} outside (0, 1]"
            )));
        }
        let d = a_w.nrows();
        if a_w.ncols() != d || c_h.ncols() != d {
            return Err(Error::InvalidModel(
                "hidden-state dimensions are inconsistent".into(),
            ));
        }
        check_covariance(&psi, "hidden-state noise covariance")?;
        check_covariance(&z0, "stationary hidden-state covariance")?;
        let rho = spectral_radius(&a_w);
        if rho > rho_bar + 1e-10 {
            return Err(Error::InvalidModel(format!(
                "hidden-state spectral radius {rho:.12} exceeds budget {rho_bar}"
            )));
        }
        let residual = (&a_w * &z0 * a_w.transpose() + &psi - &z0).norm();
        if residual > 1e-10 * z0.norm().max(1.0) {
            return Err(Error::InvalidModel(format!(
                "hidden-state covariance is not stationary (residual {residual:.3e})"
            )));
        }
        Ok(HmmWatermark {
            a_w,
            c_h,
            psi,
            rho_bar,
            z0,
        })
    }

    /// Number of perturbed inputs.
    pub fn output_dim(&self) -> usize {
        self.c_h.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.a_w.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.c_h.norm() == 0.0
    }

    /// Lag-`d` autocovariance `E[Δu_k Δu_{k+d}ᵀ] = C_h Z_0 (A_wᵈ)ᵀ C_hᵀ`.
    pub fn autocovariance(&self, lag: usize) -> DMatrix<f64> {
        let mut power = DMatrix::identity(self.state_dim(), self.state_dim());
        for _ in 0..lag {
            power = &power * &self.a_w;
        }
        &self.c_h * &self.z0 * power.transpose() * self.c_h.transpose()
    }

    /// Recover `(ω, h, ρ)` when this watermark is a damped rotation atom as
    /// built by [`hmm_from_atom`]: a 2-state scaled-rotation transition with
    /// `Ψ = (1-ρ²)I₂`, `Z₀ = I₂`, and counterclockwise angle `2πω ∈ [0, π]`.
    /// Returns `None` for any other hidden-state structure.
    pub fn as_atom(&self) -> Option<(f64, DVector<Complex64>, f64)> {
        if self.state_dim() != 2 {
            return None;
        }
        let a = &self.a_w;
        if (a[(0, 0)] - a[(1, 1)]).abs() > 1e-12 || (a[(0, 1)] + a[(1, 0)]).abs() > 1e-12 {
            return None;
        }
        let rho = a[(0, 0)].hypot(a[(1, 0)]);
        let theta = a[(1, 0)].atan2(a[(0, 0)]);
        if !(0.0..=std::f64::consts::PI).contains(&theta) {
            return None;
        }
        let eye = DMatrix::identity(2, 2);
        if (&self.z0 - &eye).norm() > 1e-12 || (&self.psi - eye * (1.0 - rho * rho)).norm() > 1e-10
        {
            return None;
        }
        let p = self.output_dim();
        let h = DVector::from_fn(p, |i, _| {
            Complex64::new(self.c_h[(i, 0)], self.c_h[(i, 1)]) / std::f64::consts::SQRT_2
        });
        Some((theta / (2.0 * std::f64::consts::PI), h, rho))
    }
}

/// Watermark whose output is identically zero, used when the optimal design
/// injects nothing.
pub fn zero_hmm(p: usize, rho_bar: f64) -> Result<HmmWatermark> {
    HmmWatermark::new(
        DMatrix::identity(2, 2) * rho_bar,
        DMatrix::zeros(p, 2),
        DMatrix::identity(2, 2) * (1.0 - rho_bar * rho_bar),
        rho_bar,
        DMatrix::identity(2, 2),
    )
}

/// Realize the single-frequency atom `h e^{2πjωk}` (damped by `rho_bar`) as
/// a two-state rotation watermark:
///
/// ```text
/// A_w = ρ̄ [cos 2πω  -sin 2πω]      C_h = √2 [Re h  Im h]
///          [sin 2πω   cos 2πω]      Ψ   = (1-ρ̄²) I₂,  Z₀ = I₂
/// ```
///
/// whose autocovariance is `Γ(d) = 2 ρ̄^d Re(e^{2πjdω} h hᴴ)`.
pub fn hmm_from_atom(omega: f64, h: &DVector<Complex64>, rho_bar: f64) -> Result<HmmWatermark> {
    if !(0.0..=0.5).contains(&omega) {
        return Err(Error::Config(format!(
            "watermark frequency {omega} outside [0, 0.5]"
        )));
    }
    if h.norm() <= 0.0 {
        return Err(Error::Config(
            "frequency-atom direction must be nonzero".into(),
        ));
    }
    let theta = 2.0 * std::f64::consts::PI * omega;
    let a_w = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
        * rho_bar;
    let p = h.len();
    let mut c_h = DMatrix::zeros(p, 2);
    for i in 0..p {
        c_h[(i, 0)] = std::f64::consts::SQRT_2 * h[i].re;
        c_h[(i, 1)] = std::f64::consts::SQRT_2 * h[i].im;
    }
    let psi = DMatrix::identity(2, 2) * (1.0 - rho_bar * rho_bar);
    HmmWatermark::new(a_w, c_h, psi, rho_bar, DMatrix::identity(2, 2))
}

/// Stationary covariance pair of the defender's virtual replica against the
/// true state under Markov drops, and the output correlation it implies.
#[derive(Debug, Clone)]
pub struct CorrelationFixedPoint {
    /// Cross-covariance conditioned on the previous packet being dropped.
    pub x0: DMatrix<f64>,
    /// Cross-covariance conditioned on the previous packet being delivered.
    pub x1: DMatrix<f64>,
    /// Steady-state `E[y_kᵀ y'_k]`.
    pub expected_corr: f64,
}

/// Steady-state output correlation produced by an IID Gaussian watermark
/// under Markov drops: the fixed point of
///
/// ```text
/// X₀ = A((1-α)X₀ + αX₁)Aᵀ
/// X₁ = F(βX₀ + (1-β)X₁)Fᵀ + B 𝒬 Bᵀ,     F = A + B L
/// ```
///
/// with `E[y_kᵀy'_k] = tr(C(αX₁ + βX₀)Cᵀ)/(α+β)`.
pub fn wm1_correlation(
    model: &SystemModel,
    sol: &MarkovLqgSolution,
    wm: &IidGaussianWatermark,
) -> Result<CorrelationFixedPoint> {
    if wm.dim() != model.p() {
        return Err(Error::Config(format!(
            "watermark dimension {} does not match input dimension {}",
            wm.dim(),
            model.p()
        )));
    }
    let op = MarkovCovOp::from_solution(model, sol);
    let forcing = &model.b * &wm.covariance * model.b.transpose();
    let (x0, x1) = op.solve_forced(&forcing)?;
    let (alpha, beta) = (sol.recover_prob, sol.drop_prob);
    let mix = &x1 * alpha + &x0 * beta;
    let expected_corr = (&model.c * mix * model.c.transpose()).trace() / (alpha + beta);
    Ok(CorrelationFixedPoint {
        x0,
        x1,
        expected_corr,
    })
}

/// Steady-state LQG cost with the watermark active:
/// `J̄ = J + α/(α+β) · tr((Bᵀ R B + U) 𝒬)`.
pub fn wm1_cost(model: &SystemModel, sol: &MarkovLqgSolution, wm: &IidGaussianWatermark) -> f64 {
    let (alpha, beta) = (sol.recover_prob, sol.drop_prob);
    let n = model.b.transpose() * &sol.value_delivered * &model.b + &model.input_cost;
    sol.cost + alpha / (alpha + beta) * (n * &wm.covariance).trace()
}

/// Matrix `M` of the linear functional `𝒬 ↦ E[y_kᵀy'_k]`, so that the
/// correlation equals `tr(M 𝒬)` for every watermark covariance. Assembled by
/// one adjoint solve of the vectorized covariance recursion instead of one
/// forward solve per candidate.
pub fn wm1_objective_matrix(model: &SystemModel, sol: &MarkovLqgSolution) -> Result<DMatrix<f64>> {
    let op = MarkovCovOp::from_solution(model, sol);
    let n = model.n();
    let n2 = n * n;
    let (alpha, beta) = (sol.recover_prob, sol.drop_prob);
    let ctc = model.c.transpose() * &model.c;
    let mut weight = DVector::zeros(2 * n2);
    weight
        .rows_mut(0, n2)
        .copy_from(&(vec_mat(&ctc) * (beta / (alpha + beta))));
    weight
        .rows_mut(n2, n2)
        .copy_from(&(vec_mat(&ctc) * (alpha / (alpha + beta))));
    let system = (DMatrix::identity(2 * n2, 2 * n2) - op.matrix()).transpose();
    let adjoint = system
        .lu()
        .solve(&weight)
        .ok_or_else(|| Error::Singular("adjoint of the Markov covariance recursion".into()))?;
    let w1 = unvec_mat(&adjoint.rows(n2, n2).into_owned(), n, n);
    Ok(model.b.transpose() * w1.transpose() * &model.b)
}

/// Solution of `maximize tr(sym(M) X)` over `X ⪰ 0` with `tr(N X) ≤ budget`.
#[derive(Debug, Clone)]
pub struct RankOneSolution {
    /// `X* = f fᵀ`, scaled so the budget binds; `None` when no direction has
    /// positive objective and `X* = 0` is optimal.
    pub factor: Option<DVector<f64>>,
    /// Objective value at the optimum.
    pub objective: f64,
}

/// Budget-constrained linear maximization over the PSD cone. The optimum is
/// rank one along the top generalized eigenvector of `(sym(M), N)`; a
/// non-positive top eigenvalue means injecting nothing is optimal.
pub fn rank_one_max(
    objective: &DMatrix<f64>,
    cost: &DMatrix<f64>,
    budget: f64,
) -> Result<RankOneSolution> {
    if budget < 0.0 {
        return Err(Error::Infeasible(format!(
            "negative budget {budget:.3e} in rank-one maximization"
        )));
    }
    if cost.clone().cholesky().is_none() {
        return Err(Error::NonPositiveCostForm(
            "budget form in rank-one maximization".into(),
        ));
    }
    let (top, direction) = generalized_max_eigen(&sym(objective), cost)?;
    if top <= 0.0 || budget == 0.0 {
        return Ok(RankOneSolution {
            factor: None,
            objective: 0.0,
        });
    }
    let weight = (cost * &direction).dot(&direction);
    let factor = direction * (budget / weight).sqrt();
    Ok(RankOneSolution {
        factor: Some(factor),
        objective: budget * top,
    })
}

/// Outcome of one examined grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridStatus {
    /// A watermark with positive expected correlation exists here.
    Feasible,
    /// The cost budget admits only the zero watermark (no direction has
    /// positive correlation gain).
    ZeroWatermark,
    /// The no-watermark cost already exceeds the budget.
    OverBudget,
    /// The drop process defeats every linear feedback (unbounded cost).
    Unstable,
    /// The point violates the natural-drop composition bound.
    OutOfBounds,
    /// The cost quadratic form degenerated; the point is skipped.
    NonPositiveCostForm,
}

impl std::fmt::Display for GridStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GridStatus::Feasible => "feasible",
            GridStatus::ZeroWatermark => "zero_watermark",
            GridStatus::OverBudget => "over_budget",
            GridStatus::Unstable => "unstable",
            GridStatus::OutOfBounds => "out_of_bounds",
            GridStatus::NonPositiveCostForm => "non_positive_cost_form",
        };
        f.write_str(s)
    }
}

/// One examined `(α, β)` point of the Markov-drop designer.
#[derive(Debug, Clone, Copy)]
pub struct Wm1GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub status: GridStatus,
    /// No-watermark cost at this point, when it is finite.
    pub cost_floor: Option<f64>,
    /// Achievable expected correlation.
    pub objective: Option<f64>,
    /// Total cost of the designed watermark.
    pub total_cost: Option<f64>,
}

/// Winning design of the Markov-drop watermark search.
#[derive(Debug, Clone)]
pub struct Wm1Design {
    pub alpha: f64,
    pub beta: f64,
    pub covariance: IidGaussianWatermark,
    /// Steady-state `E[y_kᵀy'_k]` of the design.
    pub expected_corr: f64,
    /// Steady-state cost with the watermark active.
    pub total_cost: f64,
    /// Budget the design was constrained by.
    pub cost_budget: f64,
}

/// Winner plus the full grid report.
#[derive(Debug, Clone)]
pub struct Wm1Outcome {
    pub design: Wm1Design,
    pub grid_report: Vec<Wm1GridPoint>,
}

/// Search the `(α, β)` grid for the IID-Gaussian-over-Markov-drops watermark
/// maximizing expected correlation subject to total cost at most `delta`.
/// `natural_drop` caps delivery reliability when the artificial chain rides
/// on a naturally lossy link. Ties prefer the earliest grid point.
pub fn design_wm1(
    model: &SystemModel,
    kalman: &KalmanSolution,
    delta: f64,
    grid: &[(f64, f64)],
    natural_drop: Option<f64>,
) -> Result<Wm1Outcome> {
    if grid.is_empty() {
        return Err(Error::Config("empty (α, β) design grid".into()));
    }
    if !delta.is_finite() {
        return Err(Error::Config(format!("cost budget {delta} is not finite")));
    }
    if let Some(p) = natural_drop {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "natural drop probability {p} outside [0, 1]"
            )));
        }
    }
    let evaluated: Vec<(Wm1GridPoint, Option<Wm1Design>)> =
        crate::parallel::ordered_map(grid, |&(alpha, beta)| {
            evaluate_wm1_point(model, kalman, delta, alpha, beta, natural_drop)
        })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut grid_report = Vec::with_capacity(evaluated.len());
    let mut best: Option<Wm1Design> = None;
    for (point, candidate) in evaluated {
        grid_report.push(point);
        if let Some(cand) = candidate {
            let better = best
                .as_ref()
                .map(|b| cand.expected_corr > b.expected_corr)
                .unwrap_or(true);
            if better {
                best = Some(cand);
            }
        }
    }
    let mut design = best.ok_or_else(|| {
        Error::Infeasible(format!(
            "no (α, β) grid point admits a watermark within cost budget {delta}"
        ))
    })?;

    // Recompute the winner's metrics through the forward fixed point; the
    // grid sweep uses the adjoint route.
    let drop = DropModel::markov(design.alpha, design.beta)?;
    let (alpha, beta) = match drop {
        DropModel::Markov {
            recover_prob,
            drop_prob,
        } => (recover_prob, drop_prob),
        DropModel::Iid { .. } => unreachable!(),
    };
    let sol = solve_markov_lqg(model, kalman, alpha, beta)?;
    design.expected_corr = wm1_correlation(model, &sol, &design.covariance)?.expected_corr;
    design.total_cost = wm1_cost(model, &sol, &design.covariance);
    Ok(Wm1Outcome {
        design,
        grid_report,
    })
}

fn evaluate_wm1_point(
    model: &SystemModel,
    kalman: &KalmanSolution,
    delta: f64,
    alpha: f64,
    beta: f64,
    natural_drop: Option<f64>,
) -> Result<(Wm1GridPoint, Option<Wm1Design>)> {
    let point = |status, cost_floor, objective, total_cost| Wm1GridPoint {
        alpha,
        beta,
        status,
        cost_floor,
        objective,
        total_cost,
    };
    let drop = DropModel::markov(alpha, beta)?;
    if let Some(p) = natural_drop {
        if drop.check_natural_bound(p).is_err() {
            return Ok((point(GridStatus::OutOfBounds, None, None, None), None));
        }
    }
    let (alpha_c, beta_c) = match drop {
        DropModel::Markov {
            recover_prob,
            drop_prob,
        } => (recover_prob, drop_prob),
        DropModel::Iid { .. } => unreachable!(),
    };
    let sol = match solve_markov_lqg(model, kalman, alpha_c, beta_c) {
        Ok(sol) => sol,
        Err(Error::UnboundedCost(_)) | Err(Error::NonConvergence { .. }) => {
            return Ok((point(GridStatus::Unstable, None, None, None), None));
        }
        Err(e) => return Err(e),
    };
    let floor = sol.cost;
    if floor > delta {
        return Ok((point(GridStatus::OverBudget, Some(floor), None, None), None));
    }
    let budget = (alpha_c + beta_c) / alpha_c * (delta - floor);
    let objective_mat = match wm1_objective_matrix(model, &sol) {
        Ok(m) => m,
        Err(Error::Singular(_)) => {
            return Ok((point(GridStatus::Unstable, Some(floor), None, None), None));
        }
        Err(e) => return Err(e),
    };
    let cost_mat = model.b.transpose() * &sol.value_delivered * &model.b + &model.input_cost;
    let rank_one = match rank_one_max(&objective_mat, &cost_mat, budget) {
        Ok(r) => r,
        Err(Error::NonPositiveCostForm(_)) => {
            return Ok((
                point(GridStatus::NonPositiveCostForm, Some(floor), None, None),
                None,
            ));
        }
        Err(e) => return Err(e),
    };
    let (covariance, status, total_cost) = match rank_one.factor {
        Some(f) => {
            let q = &f * f.transpose();
            (
                IidGaussianWatermark::new(sym(&q))?,
                GridStatus::Feasible,
                delta,
            )
        }
        None => (
            IidGaussianWatermark::zero(model.p()),
            GridStatus::ZeroWatermark,
            floor,
        ),
    };
    let candidate = Wm1Design {
        alpha: alpha_c,
        beta: beta_c,
        covariance,
        expected_corr: rank_one.objective,
        total_cost,
        cost_budget: delta,
    };
    Ok((
        point(
            status,
            Some(floor),
            Some(rank_one.objective),
            Some(total_cost),
        ),
        Some(candidate),
    ))
}

/// Frequency-domain design terms at one `(ω, p_d)` point: the transfer
/// factors `M₁, M₂` and the Hermitian matrices of the correlation objective
/// and added-cost functionals over spectral atoms `H = h hᴴ`.
#[derive(Debug, Clone)]
pub struct FreqDesignTerms {
    pub omega: f64,
    pub drop_prob: f64,
    /// `s = e^{2πjω}` on the unit circle.
    pub s: Complex64,
    pub m1: DMatrix<Complex64>,
    pub m2: DMatrix<Complex64>,
    /// Hermitian `M̃` with objective `tr(M̃ H)`.
    pub obj_mat: DMatrix<Complex64>,
    /// Hermitian `Ñ` with added cost `tr(Ñ H)`.
    pub cost_mat: DMatrix<Complex64>,
}

impl FreqDesignTerms {
    /// Real symmetric embedding of the objective form.
    pub fn obj_embed(&self) -> DMatrix<f64> {
        hermitian_embed(&self.obj_mat)
    }

    /// Real symmetric embedding of the cost form.
    pub fn cost_embed(&self) -> DMatrix<f64> {
        hermitian_embed(&self.cost_mat)
    }
}

/// Evaluator of the stationary-watermark objective and cost at fixed drop
/// probability, reused across the frequency grid.
pub struct FreqDesigner<'a> {
    model: &'a SystemModel,
    drop_prob: f64,
    rho_bar: f64,
    op: FactoredIidCovOp,
    b_c: DMatrix<Complex64>,
    gain_c: DMatrix<Complex64>,
    closed_c: DMatrix<Complex64>,
    mean_closed_c: DMatrix<Complex64>,
    ctc: DMatrix<f64>,
    state_weight: DMatrix<f64>,
}

impl<'a> FreqDesigner<'a> {
    pub fn new(
        model: &'a SystemModel,
        iid_sol: &IidLqgSolution,
        rho_bar: f64,
    ) -> Result<Self> {
        if !(rho_bar > 0.0 && rho_bar <= 1.0) {
            return Err(Error::Config(format!(
                "hidden-state radius budget {rho_bar} outside (0, 1]"
            )));
        }
        let p_bar = 1.0 - iid_sol.drop_prob;
        let op = IidCovOp::from_solution(model, iid_sol).factor()?;
        let to_c = |m: &DMatrix<f64>| m.map(Complex64::from);
        let closed = iid_sol.closed_loop(model);
        let mean_closed = iid_sol.mean_closed_loop(model);
        let state_weight = &model.state_cost
            + iid_sol.gain.transpose() * &model.input_cost * &iid_sol.gain * p_bar;
        Ok(FreqDesigner {
            model,
            drop_prob: iid_sol.drop_prob,
            rho_bar,
            op,
            b_c: to_c(&model.b),
            gain_c: to_c(&iid_sol.gain),
            closed_c: to_c(&closed),
            mean_closed_c: to_c(&mean_closed),
            ctc: model.c.transpose() * &model.c,
            state_weight,
        })
    }

    pub fn drop_prob(&self) -> f64 {
        self.drop_prob
    }

    /// Assemble the design terms at frequency `omega` by probing the
    /// objective and cost functionals on a Hermitian matrix basis.
    pub fn terms(&self, omega: f64) -> Result<FreqDesignTerms> {
        if !(0.0..=0.5).contains(&omega) {
            return Err(Error::Config(format!(
                "watermark frequency {omega} outside [0, 0.5]"
            )));
        }
        let p = self.model.p();
        let n = self.model.n();
        let s = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * omega);
        let p_bar = Complex64::from(1.0 - self.drop_prob);
        let lead = p_bar * self.rho_bar * s;
        let resolvent = (DMatrix::<Complex64>::identity(n, n)
            - &self.mean_closed_c * (s * self.rho_bar))
            .try_inverse()
            .ok_or_else(|| Error::Singular("frequency-response resolvent".into()))?;
        let m2 = &self.closed_c * &resolvent * &self.b_c * lead;
        let m1 = &self.gain_c * &resolvent * &self.b_c * lead;
        let mut partial = FreqDesignTerms {
            omega,
            drop_prob: self.drop_prob,
            s,
            m1,
            m2,
            obj_mat: DMatrix::zeros(p, p),
            cost_mat: DMatrix::zeros(p, p),
        };
        for i in 0..p {
            let mut basis = DMatrix::<Complex64>::zeros(p, p);
            basis[(i, i)] = Complex64::from(1.0);
            let (obj, cost) = self.probe(&partial, &basis)?;
            partial.obj_mat[(i, i)] = Complex64::from(obj);
            partial.cost_mat[(i, i)] = Complex64::from(cost);
            for j in (i + 1)..p {
                let mut real_pair = DMatrix::<Complex64>::zeros(p, p);
                real_pair[(i, j)] = Complex64::from(1.0);
                real_pair[(j, i)] = Complex64::from(1.0);
                let (obj_re, cost_re) = self.probe(&partial, &real_pair)?;
                let mut imag_pair = DMatrix::<Complex64>::zeros(p, p);
                imag_pair[(i, j)] = Complex64::i();
                imag_pair[(j, i)] = -Complex64::i();
                let (obj_im, cost_im) = self.probe(&partial, &imag_pair)?;
                partial.obj_mat[(i, j)] = Complex64::new(obj_re / 2.0, obj_im / 2.0);
                partial.obj_mat[(j, i)] = partial.obj_mat[(i, j)].conj();
                partial.cost_mat[(i, j)] = Complex64::new(cost_re / 2.0, cost_im / 2.0);
                partial.cost_mat[(j, i)] = partial.cost_mat[(i, j)].conj();
            }
        }
        Ok(partial)
    }

    fn probe(&self, terms: &FreqDesignTerms, h: &DMatrix<Complex64>) -> Result<(f64, f64)> {
        let f2 = self.output_cov_gain(terms, h)?;
        let objective = (&self.ctc * &f2).trace();
        Ok((objective, self.added_cost_from(terms, h, &f2)))
    }

    /// `F₂(H)`: stationary state-covariance increment produced by the atom.
    pub fn output_cov_gain(
        &self,
        terms: &FreqDesignTerms,
        h: &DMatrix<Complex64>,
    ) -> Result<DMatrix<f64>> {
        let cross = &terms.m2 * h * self.b_c.transpose();
        let l1_cross = self.op.solve_complex(&cross)?;
        let sym_cross = (&l1_cross + l1_cross.transpose()) * Complex64::from(0.5);
        let direct = &self.b_c * h * self.b_c.transpose();
        let l1_direct = self.op.solve_complex(&direct)?;
        let total = sym_cross * Complex64::from(2.0) + l1_direct;
        Ok(total.map(|z| 2.0 * z.re))
    }

    /// `Θ(H)`: stationary input-covariance increment produced by the atom.
    pub fn input_cov_gain(
        &self,
        terms: &FreqDesignTerms,
        h: &DMatrix<Complex64>,
    ) -> DMatrix<f64> {
        let p_bar = Complex64::from(1.0 - self.drop_prob);
        let cross = &terms.m1 * h * p_bar;
        let sym_cross = (&cross + cross.transpose()) * Complex64::from(0.5);
        let total = sym_cross * Complex64::from(2.0) + h * p_bar;
        total.map(|z| 2.0 * z.re)
    }

    fn added_cost_from(
        &self,
        terms: &FreqDesignTerms,
        h: &DMatrix<Complex64>,
        f2: &DMatrix<f64>,
    ) -> f64 {
        let theta = self.input_cov_gain(terms, h);
        (&self.model.input_cost * theta).trace() + (&self.state_weight * f2).trace()
    }

    /// `F₁(H)`: steady-state cost increase produced by the atom.
    pub fn added_cost(&self, terms: &FreqDesignTerms, h: &DMatrix<Complex64>) -> Result<f64> {
        let f2 = self.output_cov_gain(terms, h)?;
        Ok(self.added_cost_from(terms, h, &f2))
    }

    /// Correlation objective `tr(C F₂(H) Cᵀ)` produced by the atom.
    pub fn objective(&self, terms: &FreqDesignTerms, h: &DMatrix<Complex64>) -> Result<f64> {
        let f2 = self.output_cov_gain(terms, h)?;
        Ok((&self.ctc * f2).trace())
    }
}

/// Design terms at a single `(ω, p_d)` point.
pub fn freq_terms(
    model: &SystemModel,
    iid_sol: &IidLqgSolution,
    omega: f64,
    rho_bar: f64,
) -> Result<FreqDesignTerms> {
    FreqDesigner::new(model, iid_sol, rho_bar)?.terms(omega)
}

/// One examined `(ω, p_d)` point of the stationary-watermark designer.
#[derive(Debug, Clone, Copy)]
pub struct Wm2GridPoint {
    pub drop_prob: f64,
    pub omega: f64,
    pub status: GridStatus,
    /// No-watermark cost at this drop probability, when finite.
    pub cost_floor: Option<f64>,
    pub objective: Option<f64>,
    pub total_cost: Option<f64>,
}

/// Winning design of the stationary-watermark search.
#[derive(Debug, Clone)]
pub struct Wm2Design {
    pub drop_prob: f64,
    pub omega: f64,
    /// Optimal spectral atom `H* = h hᴴ`.
    pub h_cov: DMatrix<Complex64>,
    /// Hidden-state realization of the atom.
    pub hmm: HmmWatermark,
    pub expected_corr: f64,
    pub total_cost: f64,
    pub cost_budget: f64,
}

/// Winner plus the full grid report.
#[derive(Debug, Clone)]
pub struct Wm2Outcome {
    pub design: Wm2Design,
    pub grid_report: Vec<Wm2GridPoint>,
}

/// Search the `(ω, p_d)` grid for the stationary-Gaussian-over-IID-drops
/// watermark maximizing expected correlation subject to total cost at most
/// `delta`, with hidden-state spectral radius capped at `rho_bar`.
/// `natural_drop` forces `p_d` at least the link's own loss rate. Ties
/// prefer the earliest grid point (`p_d` major, `ω` minor).
pub fn design_wm2(
    model: &SystemModel,
    kalman: &KalmanSolution,
    delta: f64,
    rho_bar: f64,
    omega_grid: &[f64],
    pd_grid: &[f64],
    natural_drop: Option<f64>,
) -> Result<Wm2Outcome> {
    if omega_grid.is_empty() || pd_grid.is_empty() {
        return Err(Error::Config("empty (ω, p_d) design grid".into()));
    }
    if !delta.is_finite() {
        return Err(Error::Config(format!("cost budget {delta} is not finite")));
    }
    if !(rho_bar > 0.0 && rho_bar <= 1.0) {
        return Err(Error::Config(format!(
            "hidden-state radius budget {rho_bar} outside (0, 1]"
        )));
    }
    if let Some(p) = natural_drop {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "natural drop probability {p} outside [0, 1]"
            )));
        }
    }
    for &pd in pd_grid {
        if !(0.0..=1.0).contains(&pd) {
            return Err(Error::Config(format!(
                "drop probability {pd} outside [0, 1]"
            )));
        }
    }
    let evaluated: Vec<(Vec<Wm2GridPoint>, Option<Wm2Design>)> =
        crate::parallel::ordered_map(pd_grid, |&pd| {
            evaluate_wm2_slice(model, kalman, delta, rho_bar, omega_grid, pd, natural_drop)
        })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut grid_report = Vec::with_capacity(omega_grid.len() * pd_grid.len());
    let mut best: Option<Wm2Design> = None;
    for (points, candidate) in evaluated {
        grid_report.extend(points);
        if let Some(cand) = candidate {
            let better = best
                .as_ref()
                .map(|b| cand.expected_corr > b.expected_corr)
                .unwrap_or(true);
            if better {
                best = Some(cand);
            }
        }
    }
    let design = best.ok_or_else(|| {
        Error::Infeasible(format!(
            "no (ω, p_d) grid point admits a watermark within cost budget {delta}"
        ))
    })?;
    Ok(Wm2Outcome {
        design,
        grid_report,
    })
}

fn evaluate_wm2_slice(
    model: &SystemModel,
    kalman: &KalmanSolution,
    delta: f64,
    rho_bar: f64,
    omega_grid: &[f64],
    pd: f64,
    natural_drop: Option<f64>,
) -> Result<(Vec<Wm2GridPoint>, Option<Wm2Design>)> {
    let all = |status, cost_floor: Option<f64>| {
        omega_grid
            .iter()
            .map(|&omega| Wm2GridPoint {
                drop_prob: pd,
                omega,
                status,
                cost_floor,
                objective: None,
                total_cost: None,
            })
            .collect::<Vec<_>>()
    };
    if let Some(p_nat) = natural_drop {
        if pd + 1e-12 < p_nat {
            return Ok((all(GridStatus::OutOfBounds, None), None));
        }
    }
    let iid_sol = match solve_iid_lqg(model, kalman, pd) {
        Ok(sol) => sol,
        Err(Error::UnboundedCost(_)) | Err(Error::NonConvergence { .. }) => {
            return Ok((all(GridStatus::Unstable, None), None));
        }
        Err(e) => return Err(e),
    };
    let floor = iid_sol.cost;
    if floor > delta {
        return Ok((all(GridStatus::OverBudget, Some(floor)), None));
    }
    let budget = delta - floor;
    let designer = match FreqDesigner::new(model, &iid_sol, rho_bar) {
        Ok(d) => d,
        Err(Error::Singular(_)) => return Ok((all(GridStatus::Unstable, Some(floor)), None)),
        Err(e) => return Err(e),
    };
    let mut points = Vec::with_capacity(omega_grid.len());
    let mut best: Option<Wm2Design> = None;
    for &omega in omega_grid {
        let point = |status, objective, total_cost| Wm2GridPoint {
            drop_prob: pd,
            omega,
            status,
            cost_floor: Some(floor),
            objective,
            total_cost,
        };
        let terms = match designer.terms(omega) {
            Ok(t) => t,
            Err(Error::Singular(_)) => {
                points.push(point(GridStatus::Unstable, None, None));
                continue;
            }
            Err(e) => return Err(e),
        };
        let obj_embed = terms.obj_embed();
        let cost_embed = terms.cost_embed();
        let scale = cost_embed.norm().max(obj_embed.norm());
        let candidate = if scale <= 1e-12 {
            // Nothing is ever delivered (p_d = 1): both forms vanish.
            points.push(point(GridStatus::ZeroWatermark, Some(0.0), Some(floor)));
            Some(zero_wm2_candidate(model, pd, omega, rho_bar, floor, delta)?)
        } else {
            match rank_one_max(&obj_embed, &cost_embed, budget) {
                Ok(RankOneSolution {
                    factor: Some(stacked),
                    objective,
                }) => {
                    let h = canonicalize_phase(&complex_from_stacked(&stacked));
                    let h_cov = &h * h.adjoint();
                    let expected_corr = designer.objective(&terms, &h_cov)?;
                    let total_cost = floor + designer.added_cost(&terms, &h_cov)?;
                    points.push(point(
                        GridStatus::Feasible,
                        Some(objective),
                        Some(total_cost),
                    ));
                    Some(Wm2Design {
                        drop_prob: pd,
                        omega,
                        h_cov,
                        hmm: hmm_from_atom(omega, &h, rho_bar)?,
                        expected_corr,
                        total_cost,
                        cost_budget: delta,
                    })
                }
                Ok(RankOneSolution { factor: None, .. }) => {
                    points.push(point(GridStatus::ZeroWatermark, Some(0.0), Some(floor)));
                    Some(zero_wm2_candidate(model, pd, omega, rho_bar, floor, delta)?)
                }
                Err(Error::NonPositiveCostForm(_)) => {
                    points.push(point(GridStatus::NonPositiveCostForm, None, None));
                    None
                }
                Err(e) => return Err(e),
            }
        };
        if let Some(cand) = candidate {
            let better = best
                .as_ref()
                .map(|b| cand.expected_corr > b.expected_corr)
                .unwrap_or(true);
            if better {
                best = Some(cand);
            }
        }
    }
    Ok((points, best))
}

fn zero_wm2_candidate(
    model: &SystemModel,
    pd: f64,
    omega: f64,
    rho_bar: f64,
    floor: f64,
    delta: f64,
) -> Result<Wm2Design> {
    Ok(Wm2Design {
        drop_prob: pd,
        omega,
        h_cov: DMatrix::zeros(model.p(), model.p()),
        hmm: zero_hmm(model.p(), rho_bar)?,
        expected_corr: 0.0,
        total_cost: floor,
        cost_budget: delta,
    })
}

/// Default 20×20 `(α, β)` grid over `(0, 1]²`.
pub fn default_markov_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::with_capacity(400);
    for i in 1..=20 {
        for j in 1..=20 {
            grid.push((i as f64 * 0.05, j as f64 * 0.05));
        }
    }
    grid
}

/// Default 51-point frequency grid over `[0, 0.5]`.
pub fn default_omega_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 * 0.01).collect()
}

/// Default 21-point drop-probability grid over `[0, 1]`.
pub fn default_pd_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::generate_random_system;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_model(a: f64) -> SystemModel {
        SystemModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn random_psd(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        &g * g.transpose()
    }

    fn random_hermitian_psd(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
        let g = DMatrix::from_fn(dim, dim, |_, _| {
            Complex64::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            )
        });
        &g * g.adjoint()
    }

    #[test]
    fn scalar_correlation_matches_hand_solve() {
        let model = scalar_model(0.5);
        let kalman = model.solve_dare().unwrap();
        let (alpha, beta) = (0.6, 0.3);
        let sol = solve_markov_lqg(&model, &kalman, alpha, beta).unwrap();
        let q = 0.8;
        let wm = IidGaussianWatermark::new(DMatrix::from_element(1, 1, q)).unwrap();
        let corr = wm1_correlation(&model, &sol, &wm).unwrap();
        // Scalar fixed point: x0 = a²(ᾱx0 + αx1), x1 = f²(βx0 + β̄x1) + q.
        let a2 = 0.25;
        let f2 = (0.5 + sol.gain[(0, 0)]).powi(2);
        let x0_coef = a2 * alpha / (1.0 - a2 * (1.0 - alpha));
        let x1 = q / (1.0 - f2 * (1.0 - beta) - f2 * beta * x0_coef);
        let x0 = x0_coef * x1;
        assert_relative_eq!(corr.x0[(0, 0)], x0, epsilon = 1e-9);
        assert_relative_eq!(corr.x1[(0, 0)], x1, epsilon = 1e-9);
        assert_relative_eq!(
            corr.expected_corr,
            (alpha * x1 + beta * x0) / (alpha + beta),
            epsilon = 1e-9
        );
    }

    #[test]
    fn correlation_fixed_point_has_small_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = generate_random_system(3, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let sol = solve_markov_lqg(&model, &kalman, 0.7, 0.4).unwrap();
        let wm = IidGaussianWatermark::new(random_psd(2, &mut rng)).unwrap();
        let corr = wm1_correlation(&model, &sol, &wm).unwrap();
        let op = MarkovCovOp::from_solution(&model, &sol);
        let forcing = &model.b * &wm.covariance * model.b.transpose();
        let (r0, mut r1) = op.apply(&corr.x0, &corr.x1);
        r1 += &forcing;
        let scale = corr.x0.norm().max(corr.x1.norm()).max(1.0);
        assert!((r0 - &corr.x0).norm() <= 1e-10 * scale);
        assert!((r1 - &corr.x1).norm() <= 1e-10 * scale);
    }

    #[test]
    fn zero_watermark_has_zero_correlation_and_floor_cost() {
        let model = scalar_model(0.5);
        let kalman = model.solve_dare().unwrap();
        let sol = solve_markov_lqg(&model, &kalman, 0.8, 0.2).unwrap();
        let wm = IidGaussianWatermark::zero(1);
        assert_eq!(wm1_correlation(&model, &sol, &wm).unwrap().expected_corr, 0.0);
        assert_relative_eq!(wm1_cost(&model, &sol, &wm), sol.cost, epsilon = 1e-12);
    }

    #[test]
    fn watermark_cost_is_affine_in_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = generate_random_system(3, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let sol = solve_markov_lqg(&model, &kalman, 0.5, 0.4).unwrap();
        let q = random_psd(2, &mut rng);
        let wm1 = IidGaussianWatermark::new(q.clone()).unwrap();
        let wm2 = IidGaussianWatermark::new(q * 2.0).unwrap();
        let extra1 = wm1_cost(&model, &sol, &wm1) - sol.cost;
        let extra2 = wm1_cost(&model, &sol, &wm2) - sol.cost;
        assert_relative_eq!(extra2, 2.0 * extra1, epsilon = 1e-9);
        assert!(extra1 > 0.0);
    }

    #[test]
    fn adjoint_objective_matrix_matches_forward_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = generate_random_system(3, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let sol = solve_markov_lqg(&model, &kalman, 0.6, 0.35).unwrap();
        let m = wm1_objective_matrix(&model, &sol).unwrap();
        for _ in 0..20 {
            let q = random_psd(2, &mut rng);
            let wm = IidGaussianWatermark::new(q.clone()).unwrap();
            let forward = wm1_correlation(&model, &sol, &wm).unwrap().expected_corr;
            let through_matrix = (&m * &q).trace();
            assert_relative_eq!(
                forward,
                through_matrix,
                max_relative = 1e-9,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn rank_one_max_handles_indefinite_and_degenerate_forms() {
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        let cost = DMatrix::identity(2, 2);
        let sol = rank_one_max(&neg, &cost, 1.0).unwrap();
        assert!(sol.factor.is_none());
        assert_eq!(sol.objective, 0.0);
        let obj = DMatrix::identity(2, 2);
        let bad_cost = DMatrix::zeros(2, 2);
        assert!(matches!(
            rank_one_max(&obj, &bad_cost, 1.0),
            Err(Error::NonPositiveCostForm(_))
        ));
        assert!(matches!(
            rank_one_max(&obj, &cost, -1.0),
            Err(Error::Infeasible(_))
        ));
        let zero_budget = rank_one_max(&obj, &cost, 0.0).unwrap();
        assert!(zero_budget.factor.is_none());
    }

    #[test]
    fn designed_wm1_is_rank_one_tight_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = generate_random_system(3, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let grid = [(0.5, 0.3), (0.8, 0.6), (1.0, 0.9)];
        let floor = grid
            .iter()
            .map(|&(a, b)| solve_markov_lqg(&model, &kalman, a, b).unwrap().cost)
            .fold(f64::INFINITY, f64::min);
        let delta = 1.3 * floor;
        let outcome = design_wm1(&model, &kalman, delta, &grid, None).unwrap();
        let design = &outcome.design;
        assert!(design.expected_corr > 0.0);
        assert!(design.total_cost <= delta + 1e-8);
        assert_relative_eq!(design.total_cost, delta, max_relative = 1e-6);
        let svd = design.covariance.covariance.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-9 * smax)
            .count();
        assert!(rank <= 1);
        assert_eq!(outcome.grid_report.len(), grid.len());
        assert!(outcome
            .grid_report
            .iter()
            .all(|p| p.status == GridStatus::Feasible));
    }

    #[test]
    fn doubling_cost_slack_doubles_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let model = generate_random_system(3, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let grid = [(0.7, 0.5)];
        let floor = solve_markov_lqg(&model, &kalman, 0.7, 0.5).unwrap().cost;
        let slack = 0.2 * floor;
        let one = design_wm1(&model, &kalman, floor + slack, &grid, None).unwrap();
        let two = design_wm1(&model, &kalman, floor + 2.0 * slack, &grid, None).unwrap();
        assert_relative_eq!(
            two.design.expected_corr,
            2.0 * one.design.expected_corr,
            max_relative = 1e-9
        );
    }

    #[test]
    fn designed_wm1_beats_random_feasible_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = generate_random_system(3, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let (alpha, beta) = (0.6, 0.4);
        let sol = solve_markov_lqg(&model, &kalman, alpha, beta).unwrap();
        let delta = 1.25 * sol.cost;
        let outcome = design_wm1(&model, &kalman, delta, &[(alpha, beta)], None).unwrap();
        let m = wm1_objective_matrix(&model, &sol).unwrap();
        let n = model.b.transpose() * &sol.value_delivered * &model.b + &model.input_cost;
        let budget = (alpha + beta) / alpha * (delta - sol.cost);
        for _ in 0..1000 {
            let q = random_psd(2, &mut rng);
            let scaled = &q * (budget / (&n * &q).trace());
            let corr = (&m * scaled).trace();
            assert!(corr <= outcome.design.expected_corr * (1.0 + 1e-6) + 1e-12);
        }
    }

    #[test]
    fn design_wm1_reports_infeasible_grids() {
        let model = scalar_model(0.5);
        let kalman = model.solve_dare().unwrap();
        let floor = solve_markov_lqg(&model, &kalman, 0.5, 0.5).unwrap().cost;
        let err = design_wm1(&model, &kalman, 0.5 * floor, &[(0.5, 0.5)], None);
        assert!(matches!(err, Err(Error::Infeasible(_))), "{err:?}");
    }

    #[test]
    fn design_wm1_respects_natural_drop_bound() {
        let model = scalar_model(0.5);
        let kalman = model.solve_dare().unwrap();
        // Natural loss 0.3 caps delivery weights at 0.7: (0.9, 0.4) is too
        // reliable on recovery, (0.6, 0.1) too sticky on delivery.
        let grid = [(0.9, 0.4), (0.6, 0.1), (0.6, 0.5)];
        let outcome = design_wm1(&model, &kalman, 10.0, &grid, Some(0.3)).unwrap();
        assert_eq!(outcome.grid_report[0].status, GridStatus::OutOfBounds);
        assert_eq!(outcome.grid_report[1].status, GridStatus::OutOfBounds);
        assert_eq!(outcome.design.alpha, 0.6);
        assert_eq!(outcome.design.beta, 0.5);
    }

    #[test]
    fn full_drop_destroys_design_terms() {
        let model = scalar_model(0.5);
        let kalman = model.solve_dare().unwrap();
        let sol = solve_iid_lqg(&model, &kalman, 1.0).unwrap();
        let terms = freq_terms(&model, &sol, 0.2, 0.9).unwrap();
        assert!(terms.obj_mat.norm() <= 1e-14);
        assert!(terms.cost_mat.norm() <= 1e-14);
        assert!(terms.m1.norm() <= 1e-14);
        assert!(terms.m2.norm() <= 1e-14);
    }

    #[test]
    fn probed_forms_match_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let model = generate_random_system(3, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let sol = solve_iid_lqg(&model, &kalman, 0.3).unwrap();
        let designer = FreqDesigner::new(&model, &sol, 0.9).unwrap();
        let terms = designer.terms(0.17).unwrap();
        for _ in 0..10 {
            let h = random_hermitian_psd(2, &mut rng);
            let direct_obj = designer.objective(&terms, &h).unwrap();
            let direct_cost = designer.added_cost(&terms, &h).unwrap();
            let via_obj = (&terms.obj_mat * &h).trace().re;
            let via_cost = (&terms.cost_mat * &h).trace().re;
            assert_relative_eq!(direct_obj, via_obj, max_relative = 1e-9, epsilon = 1e-12);
            assert_relative_eq!(direct_cost, via_cost, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn covariance_gains_are_real_symmetric_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = generate_random_system(3, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let sol = solve_iid_lqg(&model, &kalman, 0.25).unwrap();
        let designer = FreqDesigner::new(&model, &sol, 0.85).unwrap();
        let terms = designer.terms(0.31).unwrap();
        let h1 = random_hermitian_psd(2, &mut rng);
        let h2 = random_hermitian_psd(2, &mut rng);
        let f1 = designer.output_cov_gain(&terms, &h1).unwrap();
        let f2 = designer.output_cov_gain(&terms, &h2).unwrap();
        let t1 = designer.input_cov_gain(&terms, &h1);
        assert!(crate::linalg::is_symmetric(&f1, 1e-10));
        assert!(crate::linalg::is_symmetric(&t1, 1e-10));
        let combo = &h1 * Complex64::from(2.0) - &h2 * Complex64::from(0.5);
        let f_combo = designer.output_cov_gain(&terms, &combo).unwrap();
        assert_relative_eq!(f_combo, f1 * 2.0 - f2 * 0.5, epsilon = 1e-10);
    }

    #[test]
    fn scalar_input_design_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let model = generate_random_system(2, 1, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let pd = 0.2;
        let omega = 0.13;
        let sol = solve_iid_lqg(&model, &kalman, pd).unwrap();
        let delta = 1.4 * sol.cost;
        let outcome =
            design_wm2(&model, &kalman, delta, 0.9, &[omega], &[pd], None).unwrap();
        let terms = freq_terms(&model, &sol, omega, 0.9).unwrap();
        // One input: H is a nonnegative scalar, so the optimum saturates the
        // budget on the single coordinate.
        let m = terms.obj_mat[(0, 0)].re;
        let n = terms.cost_mat[(0, 0)].re;
        assert!(m > 0.0 && n > 0.0);
        let budget = delta - sol.cost;
        assert_relative_eq!(
            outcome.design.expected_corr,
            m * budget / n,
            max_relative = 1e-8
        );
        assert_relative_eq!(outcome.design.total_cost, delta, max_relative = 1e-8);
        for i in 0..1000 {
            let t = budget / n * (i as f64 / 999.0);
            assert!(m * t <= outcome.design.expected_corr * (1.0 + 1e-9));
        }
    }

    #[test]
    fn designed_wm2_beats_random_feasible_atoms() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = generate_random_system(3, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let pd = 0.25;
        let omega = 0.2;
        let sol = solve_iid_lqg(&model, &kalman, pd).unwrap();
        let delta = 1.3 * sol.cost;
        let outcome =
            design_wm2(&model, &kalman, delta, 0.95, &[omega], &[pd], None).unwrap();
        let terms = freq_terms(&model, &sol, omega, 0.95).unwrap();
        let budget = delta - sol.cost;
        for _ in 0..1000 {
            let h = random_hermitian_psd(2, &mut rng);
            let weight = (&terms.cost_mat * &h).trace().re;
            let scaled = &h * Complex64::from(budget / weight);
            let corr = (&terms.obj_mat * scaled).trace().re;
            assert!(corr <= outcome.design.expected_corr * (1.0 + 1e-6) + 1e-12);
        }
        // The atom construction makes the covariance rank one by definition;
        // check the budget binds.
        assert_relative_eq!(outcome.design.total_cost, delta, max_relative = 1e-8);
        let via_form = (&terms.cost_mat * &outcome.design.h_cov).trace().re;
        assert_relative_eq!(via_form, budget, max_relative = 1e-8);
    }

    #[test]
    fn wm2_design_realizes_matching_hmm() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = generate_random_system(3, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let rho_bar = 0.9;
        let outcome = design_wm2(
            &model,
            &kalman,
            1.35 * solve_iid_lqg(&model, &kalman, 0.3).unwrap().cost,
            rho_bar,
            &[0.0, 0.1, 0.25, 0.4],
            &[0.3],
            None,
        )
        .unwrap();
        let hmm = &outcome.design.hmm;
        let eigs = hmm.a_w.complex_eigenvalues();
        for e in eigs.iter() {
            assert_relative_eq!(e.norm(), rho_bar, epsilon = 1e-12);
        }
        let stationary = &hmm.a_w * &hmm.z0 * hmm.a_w.transpose() + &hmm.psi;
        assert_relative_eq!(stationary, hmm.z0, epsilon = 1e-12);
        // Autocovariance against the atom closed form at lags 0..5.
        let omega = outcome.design.omega;
        for lag in 0..=5 {
            let phase = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * omega * lag as f64);
            let closed: DMatrix<f64> =
                (&outcome.design.h_cov * phase).map(|z| 2.0 * z.re) * rho_bar.powi(lag as i32);
            assert_relative_eq!(hmm.autocovariance(lag), closed, epsilon = 1e-9);
        }
    }

    #[test]
    fn atom_realization_validates_inputs() {
        let h = DVector::from_vec(vec![Complex64::new(1.0, 0.5)]);
        assert!(hmm_from_atom(0.7, &h, 0.9).is_err());
        assert!(hmm_from_atom(0.2, &DVector::zeros(1), 0.9).is_err());
        assert!(hmm_from_atom(0.2, &h, 0.0).is_err());
        let real_h = DVector::from_vec(vec![Complex64::from(2.0)]);
        let hmm = hmm_from_atom(0.0, &real_h, 0.8).unwrap();
        assert_relative_eq!(hmm.a_w, DMatrix::identity(2, 2) * 0.8, epsilon = 1e-15);
        assert_relative_eq!(hmm.autocovariance(0)[(0, 0)], 8.0, epsilon = 1e-12);
    }

    #[test]
    fn atom_recovery_rejects_other_hidden_structures() {
        let h = DVector::from_vec(vec![Complex64::new(0.4, -0.9), Complex64::new(1.1, 0.2)]);
        let atom = hmm_from_atom(0.23, &h, 0.85).unwrap();
        let (omega, h_back, rho) = atom.as_atom().unwrap();
        assert_relative_eq!(omega, 0.23, epsilon = 1e-12);
        assert_relative_eq!(rho, 0.85, epsilon = 1e-12);
        for i in 0..2 {
            assert!((h_back[i] - h[i]).norm() <= 1e-12);
        }

        let diagonal = HmmWatermark::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.3])),
            DMatrix::identity(2, 2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.75, 0.91])),
            0.9,
            DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(diagonal.as_atom().is_none());

        let three_state = HmmWatermark::new(
            DMatrix::identity(3, 3) * 0.5,
            DMatrix::zeros(2, 3),
            DMatrix::identity(3, 3) * 0.75,
            0.9,
            DMatrix::identity(3, 3),
        )
        .unwrap();
        assert!(three_state.as_atom().is_none());

        let mut scaled = hmm_from_atom(0.23, &h, 0.85).unwrap();
        scaled.z0 *= 2.0;
        scaled.psi *= 2.0;
        assert!(scaled.as_atom().is_none());
    }

    #[test]
    fn deterministic_hidden_state_when_radius_budget_is_one() {
        let h = DVector::from_vec(vec![Complex64::new(0.3, -1.2), Complex64::new(0.7, 0.0)]);
        let hmm = hmm_from_atom(0.35, &h, 1.0).unwrap();
        assert_relative_eq!(hmm.psi, DMatrix::zeros(2, 2), epsilon = 1e-15);
        assert_relative_eq!(spectral_radius(&hmm.a_w), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn design_wm2_respects_natural_drop_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let model = generate_random_system(2, 1, 1, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let delta = 2.0 * solve_iid_lqg(&model, &kalman, 0.3).unwrap().cost;
        let outcome = design_wm2(
            &model,
            &kalman,
            delta,
            0.9,
            &[0.1, 0.3],
            &[0.1, 0.3, 0.5],
            Some(0.25),
        )
        .unwrap();
        assert!(outcome.design.drop_prob >= 0.25);
        assert!(outcome
            .grid_report
            .iter()
            .filter(|p| p.drop_prob < 0.25)
            .all(|p| p.status == GridStatus::OutOfBounds));
        let err = design_wm2(&model, &kalman, delta, 0.9, &[0.1], &[0.1], Some(0.25));
        assert!(matches!(err, Err(Error::Infeasible(_))), "{err:?}");
    }

    #[test]
    fn hmm_constructor_rejects_inconsistencies() {
        let a_w = DMatrix::identity(2, 2) * 0.95;
        let c_h = DMatrix::zeros(2, 2);
        let psi = DMatrix::identity(2, 2) * (1.0 - 0.95f64.powi(2));
        // Spectral radius above the budget.
        assert!(HmmWatermark::new(
            a_w.clone(),
            c_h.clone(),
            psi.clone(),
            0.9,
            DMatrix::identity(2, 2)
        )
        .is_err());
        // Non-stationary claimed covariance.
        assert!(HmmWatermark::new(
            a_w.clone(),
            c_h.clone(),
            psi.clone(),
            0.95,
            DMatrix::identity(2, 2) * 3.0
        )
        .is_err());
        assert!(HmmWatermark::new(a_w, c_h, psi, 0.95, DMatrix::identity(2, 2)).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// The rank-one maximizer dominates random budget-scaled PSD
        /// candidates for arbitrary symmetric objectives and PD costs.
        #[test]
        fn rank_one_dominates_random_candidates(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 3;
            let m_raw = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let objective = sym(&m_raw);
            let cost = random_psd(dim, &mut rng) + DMatrix::identity(dim, dim) * 0.5;
            let budget = 1.0;
            let best = rank_one_max(&objective, &cost, budget).unwrap();
            for _ in 0..20 {
                let x = random_psd(dim, &mut rng);
                let scaled = &x * (budget / (&cost * &x).trace());
                let value = (&objective * scaled).trace();
                prop_assert!(value <= best.objective * (1.0 + 1e-8) + 1e-9);
            }
        }
    }
}
