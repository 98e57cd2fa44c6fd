//! Deterministic closed-loop simulation with attack injection, plus the
//! Monte-Carlo experiment drivers built on it.
//!
//! One trial runs the watermarked LQG loop over a lossy actuation link: the
//! controller adds the watermark perturbation before the link, the link
//! drops packets, acknowledgments tell the estimator what actually reached
//! the plant, and the defender advances a noise-free virtual replica of the
//! watermark's closed-loop response. Both event-triggered detectors watch
//! the received outputs against that replica. Attacks substitute the
//! received output stream (replay of recorded outputs, outputs fabricated
//! from a parallel simulation, constant sensor bias) and may inject an
//! actuation signal into the true plant.
//!
//! Every random draw comes from a stream keyed by `(master seed, trial,
//! purpose)`, so results are reproducible bit for bit on any thread count
//! and an attacker's fabricated system consumes streams disjoint from the
//! defender's.

mod detectors;
mod rng;

pub use detectors::{
    chi2_score, correlation_score, triggered, DetectorConfig, DetectorKind, DetectorState,
};
pub use rng::{sample_bool, stream_rng, GaussianSampler, StreamPurpose};

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::lqg_drop::{DropModel, IidLqgSolution, MarkovLqgSolution};
use crate::sysmodel::{KalmanSolution, StateEstimate, SystemModel};
use crate::wm_design::{wm1_correlation, FreqDesigner, HmmWatermark, IidGaussianWatermark};
use crate::{Error, Result};

/// Watermark signal injected ahead of the drop link. Each drop model takes
/// the family designed for it: Markov links carry the IID Gaussian
/// perturbation, IID links carry the hidden-state stationary perturbation.
#[derive(Debug, Clone, PartialEq)]
pub enum Watermark {
    IidGaussian(IidGaussianWatermark),
    Hmm(HmmWatermark),
}

impl Watermark {
    /// Number of plant inputs the watermark perturbs.
    pub fn input_dim(&self) -> usize {
        match self {
            Watermark::IidGaussian(wm) => wm.dim(),
            Watermark::Hmm(wm) => wm.output_dim(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Watermark::IidGaussian(wm) => wm.is_zero(),
            Watermark::Hmm(wm) => wm.is_zero(),
        }
    }
}

/// Drop-aware LQG controller, one variant per drop model.
#[derive(Debug, Clone)]
pub enum LqgSolution {
    Iid(IidLqgSolution),
    Markov(MarkovLqgSolution),
}

impl LqgSolution {
    /// State-feedback gain `L` with `u = L x̂`.
    pub fn gain(&self) -> &DMatrix<f64> {
        match self {
            LqgSolution::Iid(sol) => &sol.gain,
            LqgSolution::Markov(sol) => &sol.gain,
        }
    }

    /// Steady-state cost without any watermark.
    pub fn nominal_cost(&self) -> f64 {
        match self {
            LqgSolution::Iid(sol) => sol.cost,
            LqgSolution::Markov(sol) => sol.cost,
        }
    }
}

/// Constant actuation signal an attacker injects into the true plant while
/// the attack is active: the state gains `matrix * input` each step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuationAttack {
    /// Attack input matrix (n × q).
    pub matrix: DMatrix<f64>,
    /// Attack input vector (q).
    pub input: DVector<f64>,
}

impl ActuationAttack {
    fn injection(&self) -> DVector<f64> {
        &self.matrix * &self.input
    }
}

/// How the received output stream is manipulated once the attack starts.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackKind {
    /// Outputs arrive untouched. Used as the null arm of paired experiments.
    None,
    /// The attacker records `record_len` true outputs and feeds the defender
    /// the output from `offset` steps earlier: received `y_k = y_{k-offset}`.
    /// `offset = 0` feeds the live output back unchanged, the strongest
    /// undetectable baseline.
    Replay { record_len: usize, offset: usize },
    /// The attacker fabricates outputs from its own full simulation of the
    /// loop: correct model and distributions, but noise, drop, and watermark
    /// realizations drawn from the attacker-side streams.
    VirtualSystem,
    /// A constant bias is added to the listed sensors. This models a benign
    /// fault rather than an integrity attack; the correlation statistic
    /// should ride through it while the chi-square statistic shifts.
    Fault {
        /// Full output-space bias vector; only the listed entries apply.
        bias: DVector<f64>,
        /// Indices of the affected sensors.
        sensors: Vec<usize>,
    },
}

impl AttackKind {
    /// Sensor-space offset added to every received output while a fault is
    /// active, zero-padded to the full output dimension.
    pub fn sensor_offset(&self, m: usize) -> Option<DVector<f64>> {
        match self {
            AttackKind::Fault { bias, sensors } => {
                let mut full = DVector::zeros(m);
                for &s in sensors {
                    full[s] = bias[s];
                }
                Some(full)
            }
            _ => None,
        }
    }
}

/// One attack arm of an experiment: what happens and when.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackScenario {
    pub kind: AttackKind,
    /// Post-burn-in step at which manipulation begins. For the `None` kind
    /// this anchors the scoring window of paired null runs.
    pub start: usize,
    /// Optional plant-side injection active from `start` on.
    pub actuation: Option<ActuationAttack>,
}

impl AttackScenario {
    /// Scenario that never touches the loop, anchored at `start` so paired
    /// experiments score the same window.
    pub fn none(start: usize) -> Self {
        AttackScenario {
            kind: AttackKind::None,
            start,
            actuation: None,
        }
    }

    /// The do-nothing scenario scored over the same window as `self`.
    pub fn null_counterpart(&self) -> Self {
        AttackScenario::none(self.start)
    }

    /// Whether this scenario changes the loop at all.
    pub fn is_active(&self) -> bool {
        !matches!(self.kind, AttackKind::None) || self.actuation.is_some()
    }
}

/// A fully validated simulation setup: plant, filter, controller, link,
/// watermark, detector settings, and run lengths. Building one resolves the
/// event-trigger level, so construct it through [`Experiment::new`].
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub model: &'a SystemModel,
    pub kalman: &'a KalmanSolution,
    pub lqg: &'a LqgSolution,
    pub drop: DropModel,
    pub watermark: &'a Watermark,
    pub detector: DetectorConfig,
    /// Recorded steps per trial, after burn-in.
    pub horizon: usize,
    /// Steps run before recording starts, to reach steady state.
    pub burn_in: usize,
    pub master_seed: u64,
    mu: f64,
    expected_corr: f64,
}

impl<'a> Experiment<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a SystemModel,
        kalman: &'a KalmanSolution,
        lqg: &'a LqgSolution,
        drop: DropModel,
        watermark: &'a Watermark,
        detector: DetectorConfig,
        horizon: usize,
        burn_in: usize,
        master_seed: u64,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        detector.validate()?;
        match (&drop, lqg, watermark) {
            (
                DropModel::Markov {
                    recover_prob,
                    drop_prob,
                },
                LqgSolution::Markov(sol),
                Watermark::IidGaussian(_),
            ) => {
                if sol.recover_prob != *recover_prob || sol.drop_prob != *drop_prob {
                    return Err(Error::Config(format!(
                        "controller was solved for chain ({}, {}) but the link is ({}, {})",
                        sol.recover_prob, sol.drop_prob, recover_prob, drop_prob
                    )));
                }
            }
            (DropModel::Iid { drop_prob }, LqgSolution::Iid(sol), Watermark::Hmm(_)) => {
                if sol.drop_prob != *drop_prob {
                    return Err(Error::Config(format!(
                        "controller was solved for drop probability {} but the link drops {}",
                        sol.drop_prob, drop_prob
                    )));
                }
            }
            _ => {
                return Err(Error::Config(
                    "unsupported pairing: a Markov link takes the IID Gaussian watermark with \
                     the Markov controller, an IID link takes the hidden-state watermark with \
                     the IID controller"
                        .into(),
                ));
            }
        }
        if watermark.input_dim() != model.p() {
            return Err(Error::Config(format!(
                "watermark perturbs {} inputs but the plant has {}",
                watermark.input_dim(),
                model.p()
            )));
        }
        let expected_corr = expected_correlation(model, lqg, watermark)?;
        let mu = detector
            .mu
            .unwrap_or(detector.mu_factor * expected_corr.max(0.0));
        Ok(Experiment {
            model,
            kalman,
            lqg,
            drop,
            watermark,
            detector,
            horizon,
            burn_in,
            master_seed,
            mu,
            expected_corr,
        })
    }

    /// Resolved event-trigger level `μ`.
    pub fn trigger_level(&self) -> f64 {
        self.mu
    }

    /// Analytic steady-state `E[y_kᵀ y'_k]` of the configured watermark.
    pub fn expected_corr(&self) -> f64 {
        self.expected_corr
    }
}

/// Analytic steady-state output correlation `E[y_kᵀ y'_k]` for a controller
/// and watermark pair. Hidden-state watermarks must be single-frequency
/// atoms (or zero); for other structures the trigger level has to be given
/// explicitly.
pub fn expected_correlation(
    model: &SystemModel,
    lqg: &LqgSolution,
    watermark: &Watermark,
) -> Result<f64> {
    match (lqg, watermark) {
        (LqgSolution::Markov(sol), Watermark::IidGaussian(wm)) => {
            Ok(wm1_correlation(model, sol, wm)?.expected_corr)
        }
        (LqgSolution::Iid(sol), Watermark::Hmm(wm)) => {
            if wm.is_zero() {
                return Ok(0.0);
            }
            let (omega, h, rho) = wm.as_atom().ok_or_else(|| {
                Error::Config(
                    "expected correlation is only available for single-frequency hidden-state \
                     watermarks; set the trigger level explicitly"
                        .into(),
                )
            })?;
            let designer = FreqDesigner::new(model, sol, rho)?;
            let terms = designer.terms(omega)?;
            let h_cov = &h * h.adjoint();
            designer.objective(&terms, &h_cov)
        }
        _ => Err(Error::Config(
            "controller and watermark families do not pair".into(),
        )),
    }
}

/// Per-step watermark draw.
#[derive(Debug)]
enum WatermarkSampler {
    Iid(GaussianSampler),
    Hmm {
        output: DMatrix<f64>,
        transition: DMatrix<f64>,
        noise: GaussianSampler,
        state: DVector<f64>,
    },
}

impl WatermarkSampler {
    fn new(wm: &Watermark, rng: &mut ChaCha8Rng) -> Result<Self> {
        match wm {
            Watermark::IidGaussian(w) => Ok(WatermarkSampler::Iid(GaussianSampler::new(
                &w.covariance,
            )?)),
            Watermark::Hmm(w) => {
                let state = GaussianSampler::new(&w.z0)?.sample(rng);
                Ok(WatermarkSampler::Hmm {
                    output: w.c_h.clone(),
                    transition: w.a_w.clone(),
                    noise: GaussianSampler::new(&w.psi)?,
                    state,
                })
            }
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            WatermarkSampler::Iid(g) => g.sample(rng),
            WatermarkSampler::Hmm {
                output,
                transition,
                noise,
                state,
            } => {
                let out = &*output * &*state;
                *state = &*transition * &*state + noise.sample(rng);
                out
            }
        }
    }
}

/// Stream of watermark perturbations `Δu_k`, for inspecting the injected
/// signal outside a full closed-loop run. [`simulate`] draws the identical
/// sequence when given the same stream.
#[derive(Debug)]
pub struct WatermarkStream(WatermarkSampler);

impl WatermarkStream {
    pub fn new(watermark: &Watermark, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(WatermarkStream(WatermarkSampler::new(watermark, rng)?))
    }

    pub fn next_sample(&mut self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        self.0.next(rng)
    }
}

/// Per-step delivery draw, carrying the chain state for Markov links.
#[derive(Debug)]
enum DropSampler {
    Iid { deliver_prob: f64 },
    Markov { recover: f64, drop: f64, delivered: bool },
}

impl DropSampler {
    fn new(model: &DropModel, rng: &mut ChaCha8Rng) -> Self {
        match *model {
            DropModel::Iid { drop_prob } => DropSampler::Iid {
                deliver_prob: 1.0 - drop_prob,
            },
            DropModel::Markov {
                recover_prob,
                drop_prob,
            } => DropSampler::Markov {
                recover: recover_prob,
                drop: drop_prob,
                delivered: sample_bool(rng, recover_prob / (recover_prob + drop_prob)),
            },
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> bool {
        match self {
            DropSampler::Iid { deliver_prob } => sample_bool(rng, *deliver_prob),
            DropSampler::Markov {
                recover,
                drop,
                delivered,
            } => {
                let next = if *delivered {
                    sample_bool(rng, 1.0 - *drop)
                } else {
                    sample_bool(rng, *recover)
                };
                *delivered = next;
                next
            }
        }
    }
}

/// One closed-loop instance: true plant, estimator, link, and watermark,
/// with its own random streams. The real loop and an attacker's fabricated
/// loop are both instances of this.
struct LoopState {
    x: DVector<f64>,
    est: StateEstimate,
    /// True output at the current step.
    y: DVector<f64>,
    drops: DropSampler,
    wm: WatermarkSampler,
    process: GaussianSampler,
    measurement: GaussianSampler,
    w_rng: ChaCha8Rng,
    v_rng: ChaCha8Rng,
    eta_rng: ChaCha8Rng,
    wm_rng: ChaCha8Rng,
}

impl LoopState {
    fn new(
        model: &SystemModel,
        drop: &DropModel,
        watermark: &Watermark,
        master_seed: u64,
        trial: u64,
        attacker_side: bool,
    ) -> Result<Self> {
        let purpose = |p: StreamPurpose| if attacker_side { p.attacker_side() } else { p };
        let w_rng = stream_rng(master_seed, trial, purpose(StreamPurpose::ProcessNoise));
        let mut v_rng = stream_rng(master_seed, trial, purpose(StreamPurpose::MeasurementNoise));
        let mut eta_rng = stream_rng(master_seed, trial, purpose(StreamPurpose::Drops));
        let mut wm_rng = stream_rng(master_seed, trial, purpose(StreamPurpose::Watermark));
        let drops = DropSampler::new(drop, &mut eta_rng);
        let wm = WatermarkSampler::new(watermark, &mut wm_rng)?;
        let process = GaussianSampler::new(&model.process_noise)?;
        let measurement = GaussianSampler::new(&model.measurement_noise)?;
        let x = DVector::zeros(model.n());
        let v0 = measurement.sample(&mut v_rng);
        let y = model.measure(&x, &v0);
        let mut est = StateEstimate::origin(model.n(), model.m());
        est.innovation = y.clone();
        Ok(LoopState {
            x,
            est,
            y,
            drops,
            wm,
            process,
            measurement,
            w_rng,
            v_rng,
            eta_rng,
            wm_rng,
        })
    }

    /// Draw this step's watermark and delivery, and form the input that
    /// reaches the plant: `η (L x̂ + Δu)`.
    fn control_inputs(&mut self, gain: &DMatrix<f64>) -> (bool, DVector<f64>, DVector<f64>) {
        let delta_u = self.wm.next(&mut self.wm_rng);
        let eta = self.drops.next(&mut self.eta_rng);
        let u_applied = if eta {
            gain * &self.est.x_filt + &delta_u
        } else {
            DVector::zeros(delta_u.len())
        };
        (eta, delta_u, u_applied)
    }

    /// Advance the true plant one step and measure the new output.
    fn advance_plant(
        &mut self,
        model: &SystemModel,
        u_applied: &DVector<f64>,
        injection: Option<&DVector<f64>>,
    ) {
        let w = self.process.sample(&mut self.w_rng);
        self.x = model.plant_step(&self.x, u_applied, &w, injection);
        let v = self.measurement.sample(&mut self.v_rng);
        self.y = model.measure(&self.x, &v);
    }

    /// Update the estimator with the output the defender actually received.
    fn assimilate(
        &mut self,
        model: &SystemModel,
        kalman_gain: &DMatrix<f64>,
        u_applied: &DVector<f64>,
        y_received: &DVector<f64>,
    ) {
        let mut est = model.kalman_step(kalman_gain, &self.est, u_applied, y_received);
        est.error = Some(&self.x - &est.x_filt);
        self.est = est;
    }

    /// One fully honest step: own control, own link, own outputs.
    fn honest_advance(
        &mut self,
        model: &SystemModel,
        kalman_gain: &DMatrix<f64>,
        control_gain: &DMatrix<f64>,
    ) {
        let (_, _, u_applied) = self.control_inputs(control_gain);
        self.advance_plant(model, &u_applied, None);
        let y = self.y.clone();
        self.assimilate(model, kalman_gain, &u_applied, &y);
    }
}

/// Everything one trial records, indexed by post-burn-in step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub horizon: usize,
    pub burn_in: usize,
    /// Resolved event-trigger level `μ`.
    pub trigger_level: f64,
    /// Post-burn-in step the attack started at, when one was active.
    pub attack_start: Option<usize>,
    /// Whether the event trigger fired at each step.
    pub triggered: Vec<bool>,
    /// Windowed correlation statistic, once a full window exists.
    pub stat_corr: Vec<Option<f64>>,
    /// Windowed chi-square statistic, once a full window exists.
    pub stat_chi2: Vec<Option<f64>>,
    /// Received-output correlation `y_kᵀ y'_k` at every step.
    pub corr_series: Vec<f64>,
    /// True stage cost `x_kᵀ W x_k + u_{c,k}ᵀ U u_{c,k}` at every step.
    pub stage_cost_series: Vec<f64>,
    /// Estimator innovation at every step.
    pub innovation_series: Vec<DVector<f64>>,
    /// Number of trigger events over the horizon.
    pub trigger_count: usize,
    /// Alarm trace of the configured detector at the configured threshold.
    pub alarms: Vec<bool>,
    /// Steps from attack start to the first alarm, for the configured
    /// detector and threshold.
    pub detection_delay: Option<usize>,
}

impl TrialRecord {
    /// Windowed statistic trace of one detector.
    pub fn stats(&self, kind: DetectorKind) -> &[Option<f64>] {
        match kind {
            DetectorKind::Correlation => &self.stat_corr,
            DetectorKind::ChiSquare => &self.stat_chi2,
        }
    }

    /// Most alarming (smallest) statistic from step `from` on, `+∞` when the
    /// window never filled there.
    pub fn min_stat(&self, kind: DetectorKind, from: usize) -> f64 {
        self.stats(kind)[from.min(self.horizon)..]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |acc, &s| acc.min(s))
    }

    /// First step at or after `from` whose statistic falls below `tau`.
    pub fn first_alarm(&self, kind: DetectorKind, tau: f64, from: usize) -> Option<usize> {
        self.stats(kind)[from.min(self.horizon)..]
            .iter()
            .position(|s| s.is_some_and(|v| v < tau))
            .map(|i| from + i)
    }

    /// Mean of the defined statistics over `[from, to)`.
    pub fn mean_stat(&self, kind: DetectorKind, from: usize, to: usize) -> Option<f64> {
        let slice = &self.stats(kind)[from.min(self.horizon)..to.min(self.horizon)];
        let defined: Vec<f64> = slice.iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }

    /// Mean of a plain per-step series over `[from, to)`.
    fn mean_series(series: &[f64], from: usize, to: usize) -> f64 {
        let slice = &series[from.min(series.len())..to.min(series.len())];
        slice.iter().sum::<f64>() / slice.len().max(1) as f64
    }

    /// Mean received-output correlation over `[from, to)`.
    pub fn mean_corr(&self, from: usize, to: usize) -> f64 {
        Self::mean_series(&self.corr_series, from, to)
    }

    /// Mean stage cost over `[from, to)`.
    pub fn mean_stage_cost(&self, from: usize, to: usize) -> f64 {
        Self::mean_series(&self.stage_cost_series, from, to)
    }
}

fn validate_attack(exp: &Experiment<'_>, attack: &AttackScenario) -> Result<()> {
    if attack.start >= exp.horizon {
        return Err(Error::Config(format!(
            "attack start {} is past the horizon {}",
            attack.start, exp.horizon
        )));
    }
    match &attack.kind {
        AttackKind::None | AttackKind::VirtualSystem => {}
        AttackKind::Replay { record_len, offset } => {
            if offset > record_len {
                return Err(Error::Config(format!(
                    "replay offset {offset} exceeds the recorded length {record_len}"
                )));
            }
            if *record_len > exp.burn_in + attack.start {
                return Err(Error::Config(format!(
                    "recording {} outputs needs {} steps before the attack, only {} exist",
                    record_len,
                    record_len,
                    exp.burn_in + attack.start
                )));
            }
        }
        AttackKind::Fault { bias, sensors } => {
            if bias.len() != exp.model.m() {
                return Err(Error::Config(format!(
                    "fault bias has {} entries for {} sensors",
                    bias.len(),
                    exp.model.m()
                )));
            }
            if sensors.is_empty() {
                return Err(Error::Config("fault affects no sensors".into()));
            }
            if let Some(&bad) = sensors.iter().find(|&&s| s >= exp.model.m()) {
                return Err(Error::Config(format!(
                    "fault sensor index {bad} out of range for {} sensors",
                    exp.model.m()
                )));
            }
        }
    }
    if let Some(act) = &attack.actuation {
        if act.matrix.nrows() != exp.model.n() || act.matrix.ncols() != act.input.len() {
            return Err(Error::Config(format!(
                "actuation attack shape {}x{} does not act on {} states with {} inputs",
                act.matrix.nrows(),
                act.matrix.ncols(),
                exp.model.n(),
                act.input.len()
            )));
        }
    }
    Ok(())
}

/// Run one trial of `exp` under `attack`. Identical arguments always
/// reproduce the identical record.
pub fn simulate(exp: &Experiment<'_>, attack: &AttackScenario, trial: u64) -> Result<TrialRecord> {
    validate_attack(exp, attack)?;
    let model = exp.model;
    let control_gain = exp.lqg.gain();
    let kalman_gain = &exp.kalman.gain;
    let sigma_inv = exp
        .kalman
        .innovation_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("innovation covariance inverse".into()))?
        .inverse();

    let total = exp.burn_in + exp.horizon;
    let start_abs = exp.burn_in + attack.start;
    let replaying = matches!(attack.kind, AttackKind::Replay { .. });
    let fault_offset = attack.kind.sensor_offset(model.m());
    let injection = attack.actuation.as_ref().map(|a| a.injection());

    let mut main = LoopState::new(
        model,
        &exp.drop,
        exp.watermark,
        exp.master_seed,
        trial,
        false,
    )?;
    let mut attacker = match attack.kind {
        AttackKind::VirtualSystem => Some(LoopState::new(
            model,
            &exp.drop,
            exp.watermark,
            exp.master_seed,
            trial,
            true,
        )?),
        _ => None,
    };

    let mut replica = DVector::zeros(model.n());
    let mut y_virtual = &model.c * &replica;
    let mut y_received = main.y.clone();
    let mut history: Vec<DVector<f64>> = Vec::new();
    if replaying {
        history.push(main.y.clone());
    }

    let mut corr_det = DetectorState::new(exp.detector.window);
    let mut chi_det = DetectorState::new(exp.detector.window);
    let mut triggered_trace = Vec::with_capacity(exp.horizon);
    let mut stat_corr = Vec::with_capacity(exp.horizon);
    let mut stat_chi2 = Vec::with_capacity(exp.horizon);
    let mut corr_series = Vec::with_capacity(exp.horizon);
    let mut stage_cost_series = Vec::with_capacity(exp.horizon);
    let mut innovation_series = Vec::with_capacity(exp.horizon);

    for k in 0..total {
        if k >= exp.burn_in {
            let rel = k - exp.burn_in;
            let trig = triggered(&y_virtual, exp.mu);
            if trig {
                corr_det.record(rel, correlation_score(&y_received, &y_virtual));
                chi_det.record(rel, chi2_score(&main.est.innovation, &sigma_inv));
            }
            triggered_trace.push(trig);
            stat_corr.push(corr_det.windowed_sum());
            stat_chi2.push(chi_det.windowed_sum());
            corr_series.push(correlation_score(&y_received, &y_virtual));
            innovation_series.push(main.est.innovation.clone());
        }

        let (eta, delta_u, u_applied) = main.control_inputs(control_gain);
        if k >= exp.burn_in {
            let cost = (&model.state_cost * &main.x).dot(&main.x)
                + (&model.input_cost * &u_applied).dot(&u_applied);
            stage_cost_series.push(cost);
        }

        let inject_now = injection.as_ref().filter(|_| k >= start_abs);
        main.advance_plant(model, &u_applied, inject_now);

        let mut next_replica = &model.a * &replica;
        if eta {
            next_replica += &model.b * (control_gain * &replica + &delta_u);
        }
        replica = next_replica;
        y_virtual = &model.c * &replica;

        if let Some(att) = attacker.as_mut() {
            att.honest_advance(model, kalman_gain, control_gain);
        }
        if replaying {
            history.push(main.y.clone());
        }

        let j = k + 1;
        y_received = match &attack.kind {
            AttackKind::Replay { offset, .. } if j >= start_abs => history[j - offset].clone(),
            AttackKind::VirtualSystem if j >= start_abs => {
                attacker.as_ref().expect("attacker loop exists").y.clone()
            }
            AttackKind::Fault { .. } if j >= start_abs => {
                &main.y + fault_offset.as_ref().expect("fault offset exists")
            }
            _ => main.y.clone(),
        };
        main.assimilate(model, kalman_gain, &u_applied, &y_received);
    }

    let attack_start = attack.is_active().then_some(attack.start);
    let stats = match exp.detector.kind {
        DetectorKind::Correlation => &stat_corr,
        DetectorKind::ChiSquare => &stat_chi2,
    };
    let alarms: Vec<bool> = stats
        .iter()
        .map(|s| s.is_some_and(|v| v < exp.detector.tau))
        .collect();
    let detection_delay = attack_start
        .and_then(|start| alarms[start..].iter().position(|&a| a));
    let trigger_count = triggered_trace.iter().filter(|&&t| t).count();

    Ok(TrialRecord {
        horizon: exp.horizon,
        burn_in: exp.burn_in,
        trigger_level: exp.mu,
        attack_start,
        triggered: triggered_trace,
        stat_corr,
        stat_chi2,
        corr_series,
        stage_cost_series,
        innovation_series,
        trigger_count,
        alarms,
        detection_delay,
    })
}

/// One threshold's operating point on a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub detector: DetectorKind,
    pub tau: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// One detector's ROC sweep and threshold-free ranking quality.
#[derive(Debug, Clone)]
pub struct DetectorRoc {
    pub detector: DetectorKind,
    /// Probability an attacked trial scores as more alarming than a clean
    /// one (ties counted half).
    pub auc: f64,
    pub points: Vec<RocPoint>,
    /// Per-trial scores of the clean arm (smaller is more alarming).
    pub h0_scores: Vec<f64>,
    /// Per-trial scores of the attacked arm.
    pub h1_scores: Vec<f64>,
}

/// Paired ROC experiment: each trial index runs once clean and once under
/// `attack` with the same defender-side streams, and is scored by its most
/// alarming windowed statistic from the attack start on.
pub fn run_roc(
    exp: &Experiment<'_>,
    attack: &AttackScenario,
    trials: u64,
    taus: &[f64],
) -> Result<Vec<DetectorRoc>> {
    if trials == 0 {
        return Err(Error::Config("ROC needs at least one trial".into()));
    }
    let null = attack.null_counterpart();
    let anchor = attack.start;
    let ids: Vec<u64> = (0..trials).collect();
    let per_trial: Vec<Result<[[f64; 2]; 2]>> = crate::parallel::ordered_map(&ids, |&t| {
        let h0 = simulate(exp, &null, t)?;
        let h1 = simulate(exp, attack, t)?;
        Ok([
            [
                h0.min_stat(DetectorKind::Correlation, anchor),
                h0.min_stat(DetectorKind::ChiSquare, anchor),
            ],
            [
                h1.min_stat(DetectorKind::Correlation, anchor),
                h1.min_stat(DetectorKind::ChiSquare, anchor),
            ],
        ])
    });
    let mut h0 = [Vec::with_capacity(ids.len()), Vec::with_capacity(ids.len())];
    let mut h1 = [Vec::with_capacity(ids.len()), Vec::with_capacity(ids.len())];
    for r in per_trial {
        let scores = r?;
        for d in 0..2 {
            h0[d].push(scores[0][d]);
            h1[d].push(scores[1][d]);
        }
    }
    let mut out = Vec::with_capacity(2);
    for (d, kind) in DetectorKind::ALL.into_iter().enumerate() {
        let points = taus
            .iter()
            .map(|&tau| RocPoint {
                detector: kind,
                tau,
                fpr: fraction_below(&h0[d], tau),
                tpr: fraction_below(&h1[d], tau),
            })
            .collect();
        out.push(DetectorRoc {
            detector: kind,
            auc: mann_whitney_auc(&h0[d], &h1[d]),
            points,
            h0_scores: std::mem::take(&mut h0[d]),
            h1_scores: std::mem::take(&mut h1[d]),
        });
    }
    Ok(out)
}

fn fraction_below(scores: &[f64], tau: f64) -> f64 {
    scores.iter().filter(|&&s| s < tau).count() as f64 / scores.len() as f64
}

/// Probability a score drawn from `h1` ranks below one drawn from `h0`,
/// ties counted half: the area under the ROC curve of the rule
/// "alarm when the score falls below the threshold".
pub fn mann_whitney_auc(h0: &[f64], h1: &[f64]) -> f64 {
    if h0.is_empty() || h1.is_empty() {
        return 0.5;
    }
    let mut acc = 0.0;
    for &a in h1 {
        for &b in h0 {
            if a < b {
                acc += 1.0;
            } else if a == b {
                acc += 0.5;
            }
        }
    }
    acc / (h0.len() as f64 * h1.len() as f64)
}

/// One trial's detection outcome at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtdRecord {
    pub detector: DetectorKind,
    pub tau: f64,
    pub trial: u64,
    /// Steps from attack start to the first alarm, when one fired.
    pub delay: Option<usize>,
}

impl TtdRecord {
    pub fn detected(&self) -> bool {
        self.delay.is_some()
    }
}

/// Time-to-detection sweep: for every detector, threshold, and trial, the
/// delay from attack start to the first alarm. Records are ordered by
/// detector, then threshold, then trial.
pub fn run_time_to_detection(
    exp: &Experiment<'_>,
    attack: &AttackScenario,
    trials: u64,
    taus: &[f64],
) -> Result<Vec<TtdRecord>> {
    if trials == 0 {
        return Err(Error::Config(
            "time-to-detection needs at least one trial".into(),
        ));
    }
    let ids: Vec<u64> = (0..trials).collect();
    let per_trial: Vec<Result<Vec<Option<usize>>>> = crate::parallel::ordered_map(&ids, |&t| {
        let rec = simulate(exp, attack, t)?;
        let mut delays = Vec::with_capacity(2 * taus.len());
        for kind in DetectorKind::ALL {
            for &tau in taus {
                delays.push(
                    rec.first_alarm(kind, tau, attack.start)
                        .map(|k| k - attack.start),
                );
            }
        }
        Ok(delays)
    });
    let per_trial: Vec<Vec<Option<usize>>> = per_trial.into_iter().collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(2 * taus.len() * per_trial.len());
    for (d, kind) in DetectorKind::ALL.into_iter().enumerate() {
        for (ti, &tau) in taus.iter().enumerate() {
            for (trial, delays) in per_trial.iter().enumerate() {
                out.push(TtdRecord {
                    detector: kind,
                    tau,
                    trial: trial as u64,
                    delay: delays[d * taus.len() + ti],
                });
            }
        }
    }
    Ok(out)
}

/// Mean and standard error of one detector's windowed statistic before and
/// after an event, averaged within trials and then across trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatShift {
    pub pre_mean: f64,
    pub pre_se: f64,
    pub post_mean: f64,
    pub post_se: f64,
}

impl StatShift {
    pub fn shift(&self) -> f64 {
        self.post_mean - self.pre_mean
    }

    pub fn shift_se(&self) -> f64 {
        self.pre_se.hypot(self.post_se)
    }
}

/// Before/after comparison of both detectors around an attack or fault.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultSummary {
    pub trials: u64,
    /// Post-burn-in step range averaged before the event.
    pub pre: (usize, usize),
    /// Post-burn-in step range averaged after the event.
    pub post: (usize, usize),
    pub corr: StatShift,
    pub chi2: StatShift,
}

/// Measure how both windowed statistics move when `attack` starts, skipping
/// `settle` steps on each side of the start so the windows hold fully
/// pre-event and fully post-event statistics.
pub fn run_fault_demo(
    exp: &Experiment<'_>,
    attack: &AttackScenario,
    trials: u64,
    settle: usize,
) -> Result<FaultSummary> {
    if trials == 0 {
        return Err(Error::Config(
            "fault comparison needs at least one trial".into(),
        ));
    }
    let pre = (settle, attack.start);
    let post = (attack.start + settle, exp.horizon);
    if pre.0 >= pre.1 || post.0 >= post.1 {
        return Err(Error::Config(format!(
            "settle {} leaves no steps to average around an attack at {} with horizon {}",
            settle, attack.start, exp.horizon
        )));
    }
    let ids: Vec<u64> = (0..trials).collect();
    let per_trial: Vec<Result<[f64; 4]>> = crate::parallel::ordered_map(&ids, |&t| {
        let rec = simulate(exp, attack, t)?;
        let take = |kind, range: (usize, usize)| {
            rec.mean_stat(kind, range.0, range.1).ok_or_else(|| {
                Error::Config(format!(
                    "no detector statistics in steps {}..{}; lower the trigger level \
                     or lengthen the run",
                    range.0, range.1
                ))
            })
        };
        Ok([
            take(DetectorKind::Correlation, pre)?,
            take(DetectorKind::Correlation, post)?,
            take(DetectorKind::ChiSquare, pre)?,
            take(DetectorKind::ChiSquare, post)?,
        ])
    });
    let mut cols = [const { Vec::new() }; 4];
    for r in per_trial {
        let vals = r?;
        for (col, v) in cols.iter_mut().zip(vals) {
            col.push(v);
        }
    }
    let stats: Vec<(f64, f64)> = cols.iter().map(|c| mean_se(c)).collect();
    Ok(FaultSummary {
        trials,
        pre,
        post,
        corr: StatShift {
            pre_mean: stats[0].0,
            pre_se: stats[0].1,
            post_mean: stats[1].0,
            post_se: stats[1].1,
        },
        chi2: StatShift {
            pre_mean: stats[2].0,
            pre_se: stats[2].1,
            post_mean: stats[3].0,
            post_se: stats[3].1,
        },
    })
}

/// Sample mean and its standard error over independent values.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Mean and standard error of a time average over an autocorrelated series,
/// by the method of batch means: the series is cut into `batches` contiguous
/// blocks whose means are treated as independent.
pub fn batch_means_se(series: &[f64], batches: usize) -> Result<(f64, f64)> {
    if batches < 2 {
        return Err(Error::Config("batch means needs at least 2 batches".into()));
    }
    let len = series.len() / batches;
    if len == 0 {
        return Err(Error::Config(format!(
            "series of {} values cannot fill {} batches",
            series.len(),
            batches
        )));
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| series[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    Ok(mean_se(&means))
}

/// Steady-state innovation mean produced by a constant sensor bias `b`: the
/// estimator's prediction-error mean settles at
/// `ē = -(I - A(I - KC))⁻¹ A K b` and the innovation mean at `C ē + b`.
pub fn fault_innovation_mean(
    model: &SystemModel,
    kalman: &KalmanSolution,
    bias: &DVector<f64>,
) -> Result<DVector<f64>> {
    if bias.len() != model.m() {
        return Err(Error::Config(format!(
            "bias has {} entries for {} sensors",
            bias.len(),
            model.m()
        )));
    }
    let n = model.n();
    let closed = &model.a * (DMatrix::identity(n, n) - &kalman.gain * &model.c);
    let lhs = DMatrix::identity(n, n) - closed;
    let rhs = -(&model.a * &kalman.gain * bias);
    let err_mean = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("fault error-mean fixed point".into()))?;
    Ok(&model.c * err_mean + bias)
}

/// Predicted change in the windowed chi-square statistic's mean caused by a
/// constant sensor bias: `-window · z̄ᵀ Σ⁻¹ z̄` with `z̄` the innovation mean
/// from [`fault_innovation_mean`]. Quadratic in the bias.
pub fn chi2_window_shift(
    model: &SystemModel,
    kalman: &KalmanSolution,
    bias: &DVector<f64>,
    window: usize,
) -> Result<f64> {
    let zbar = fault_innovation_mean(model, kalman, bias)?;
    let sigma_inv = kalman
        .innovation_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("innovation covariance inverse".into()))?
        .inverse();
    Ok(-(window as f64) * (sigma_inv * &zbar).dot(&zbar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqg_drop::{solve_iid_lqg, solve_markov_lqg};
    use crate::sysmodel::generate_random_system;
    use crate::wm_design::hmm_from_atom;
    use num_complex::Complex64;

    fn scalar_model(a: f64) -> SystemModel {
        let one = DMatrix::from_element(1, 1, 1.0);
        SystemModel::new(
            DMatrix::from_element(1, 1, a),
            one.clone(),
            one.clone(),
            one.clone(),
            one.clone(),
            one.clone(),
            one,
        )
        .unwrap()
    }

    struct MarkovSetup {
        model: SystemModel,
        kalman: KalmanSolution,
        lqg: LqgSolution,
        drop: DropModel,
        watermark: Watermark,
    }

    fn markov_setup(a: f64, alpha: f64, beta: f64, wm_var: f64) -> MarkovSetup {
        let model = scalar_model(a);
        let kalman = model.solve_dare().unwrap();
        let sol = solve_markov_lqg(&model, &kalman, alpha, beta).unwrap();
        MarkovSetup {
            drop: DropModel::markov(alpha, beta).unwrap(),
            lqg: LqgSolution::Markov(sol),
            watermark: Watermark::IidGaussian(
                IidGaussianWatermark::new(DMatrix::from_element(1, 1, wm_var)).unwrap(),
            ),
            model,
            kalman,
        }
    }

    impl MarkovSetup {
        fn experiment(
            &self,
            detector: DetectorConfig,
            horizon: usize,
            burn_in: usize,
            seed: u64,
        ) -> Experiment<'_> {
            Experiment::new(
                &self.model,
                &self.kalman,
                &self.lqg,
                self.drop,
                &self.watermark,
                detector,
                horizon,
                burn_in,
                seed,
            )
            .unwrap()
        }
    }

    #[test]
    fn pairing_mismatches_are_rejected() {
        let model = scalar_model(0.9);
        let kalman = model.solve_dare().unwrap();
        let markov_sol =
            LqgSolution::Markov(solve_markov_lqg(&model, &kalman, 0.7, 0.2).unwrap());
        let iid_sol = LqgSolution::Iid(solve_iid_lqg(&model, &kalman, 0.2).unwrap());
        let iid_wm = Watermark::IidGaussian(IidGaussianWatermark::zero(1));
        let hmm_wm = Watermark::Hmm(crate::wm_design::zero_hmm(1, 0.9).unwrap());
        let markov = DropModel::markov(0.7, 0.2).unwrap();
        let iid = DropModel::iid(0.2).unwrap();
        let cfg = DetectorConfig::default();

        let build = |drop, lqg: &LqgSolution, wm: &Watermark| {
            Experiment::new(&model, &kalman, lqg, drop, wm, cfg, 100, 10, 0).map(|_| ())
        };
        assert!(build(markov, &markov_sol, &iid_wm).is_ok());
        assert!(build(iid, &iid_sol, &hmm_wm).is_ok());
        assert!(matches!(
            build(markov, &markov_sol, &hmm_wm),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build(iid, &iid_sol, &iid_wm),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build(markov, &iid_sol, &iid_wm),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build(iid, &markov_sol, &hmm_wm),
            Err(Error::Config(_))
        ));
        let other_chain = DropModel::markov(0.8, 0.2).unwrap();
        assert!(matches!(
            build(other_chain, &markov_sol, &iid_wm),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attack_validation_catches_bad_shapes() {
        let setup = markov_setup(0.9, 0.7, 0.2, 0.5);
        let exp = setup.experiment(DetectorConfig::default(), 100, 50, 1);
        let bad_start = AttackScenario::none(100);
        assert!(simulate(&exp, &bad_start, 0).is_err());
        let offset_too_far = AttackScenario {
            kind: AttackKind::Replay {
                record_len: 10,
                offset: 20,
            },
            start: 50,
            actuation: None,
        };
        assert!(simulate(&exp, &offset_too_far, 0).is_err());
        let record_too_long = AttackScenario {
            kind: AttackKind::Replay {
                record_len: 200,
                offset: 10,
            },
            start: 50,
            actuation: None,
        };
        assert!(simulate(&exp, &record_too_long, 0).is_err());
        let bad_sensor = AttackScenario {
            kind: AttackKind::Fault {
                bias: DVector::from_element(1, 1.0),
                sensors: vec![3],
            },
            start: 50,
            actuation: None,
        };
        assert!(simulate(&exp, &bad_sensor, 0).is_err());
        let no_sensors = AttackScenario {
            kind: AttackKind::Fault {
                bias: DVector::from_element(1, 1.0),
                sensors: vec![],
            },
            start: 50,
            actuation: None,
        };
        assert!(simulate(&exp, &no_sensors, 0).is_err());
        let bad_bias = AttackScenario {
            kind: AttackKind::Fault {
                bias: DVector::from_element(2, 1.0),
                sensors: vec![0],
            },
            start: 50,
            actuation: None,
        };
        assert!(simulate(&exp, &bad_bias, 0).is_err());
        let bad_actuation = AttackScenario {
            kind: AttackKind::None,
            start: 50,
            actuation: Some(ActuationAttack {
                matrix: DMatrix::zeros(2, 1),
                input: DVector::zeros(1),
            }),
        };
        assert!(simulate(&exp, &bad_actuation, 0).is_err());
    }

    #[test]
    fn identical_arguments_reproduce_identical_records() {
        let setup = markov_setup(0.9, 0.7, 0.2, 0.5);
        let exp = setup.experiment(DetectorConfig::default(), 200, 100, 42);
        let attack = AttackScenario {
            kind: AttackKind::Replay {
                record_len: 50,
                offset: 50,
            },
            start: 80,
            actuation: None,
        };
        let a = simulate(&exp, &attack, 7).unwrap();
        let b = simulate(&exp, &attack, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate(&exp, &attack, 8).unwrap();
        assert_ne!(a.corr_series, c.corr_series);
    }

    #[test]
    fn trigger_level_resolution_honors_overrides() {
        let setup = markov_setup(0.9, 0.7, 0.2, 0.5);
        let exp = setup.experiment(DetectorConfig::default(), 100, 10, 0);
        let analytic = match (&setup.lqg, &setup.watermark) {
            (LqgSolution::Markov(sol), Watermark::IidGaussian(wm)) => {
                wm1_correlation(&setup.model, sol, wm)
                    .unwrap()
                    .expected_corr
            }
            _ => unreachable!(),
        };
        assert!((exp.expected_corr() - analytic).abs() <= 1e-12 * analytic.abs());
        assert!((exp.trigger_level() - 0.5 * analytic).abs() <= 1e-12 * analytic.abs());
        let explicit = DetectorConfig {
            mu: Some(0.123),
            ..DetectorConfig::default()
        };
        let exp = setup.experiment(explicit, 100, 10, 0);
        assert_eq!(exp.trigger_level(), 0.123);
    }

    #[test]
    fn atom_expected_correlation_matches_designer() {
        let model = scalar_model(0.8);
        let kalman = model.solve_dare().unwrap();
        let sol = solve_iid_lqg(&model, &kalman, 0.2).unwrap();
        let h = DVector::from_element(1, Complex64::new(0.5, 0.4));
        let wm = hmm_from_atom(0.15, &h, 0.9).unwrap();
        let (omega, h_back, rho) = wm.as_atom().unwrap();
        assert!((omega - 0.15).abs() <= 1e-12);
        assert!((rho - 0.9).abs() <= 1e-12);
        assert!((h_back[0] - h[0]).norm() <= 1e-12);
        let designer = FreqDesigner::new(&model, &sol, 0.9).unwrap();
        let terms = designer.terms(0.15).unwrap();
        let direct = designer
            .objective(&terms, &(&h * h.adjoint()))
            .unwrap();
        let via_enum = expected_correlation(
            &model,
            &LqgSolution::Iid(sol),
            &Watermark::Hmm(wm),
        )
        .unwrap();
        assert!((direct - via_enum).abs() <= 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn innovation_covariance_matches_filter_prediction() {
        let mut rng = stream_rng(33, 0, StreamPurpose::ProcessNoise);
        let model = generate_random_system(2, 2, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let sol = solve_markov_lqg(&model, &kalman, 0.8, 0.15).unwrap();
        let lqg = LqgSolution::Markov(sol);
        let wm = Watermark::IidGaussian(
            IidGaussianWatermark::new(DMatrix::identity(2, 2) * 0.25).unwrap(),
        );
        let exp = Experiment::new(
            &model,
            &kalman,
            &lqg,
            DropModel::markov(0.8, 0.15).unwrap(),
            &wm,
            DetectorConfig::default(),
            120_000,
            500,
            5,
        )
        .unwrap();
        let rec = simulate(&exp, &AttackScenario::none(10), 0).unwrap();
        let sigma = &kalman.innovation_cov;
        for i in 0..2 {
            for j in 0..2 {
                let series: Vec<f64> = rec
                    .innovation_series
                    .iter()
                    .map(|z| z[i] * z[j])
                    .collect();
                let (mean, se) = batch_means_se(&series, 100).unwrap();
                assert!(
                    (mean - sigma[(i, j)]).abs() <= 3.0 * se,
                    "entry ({i},{j}): empirical {mean:.5} vs {:.5} (se {se:.5})",
                    sigma[(i, j)]
                );
            }
        }
    }

    #[test]
    fn markov_loop_reproduces_cost_and_correlation_formulas() {
        let setup = markov_setup(0.9, 0.7, 0.2, 0.3);
        let exp = setup.experiment(DetectorConfig::default(), 200_000, 500, 11);
        let rec = simulate(&exp, &AttackScenario::none(10), 0).unwrap();
        let (sol, wm) = match (&setup.lqg, &setup.watermark) {
            (LqgSolution::Markov(s), Watermark::IidGaussian(w)) => (s, w),
            _ => unreachable!(),
        };
        let cost = crate::wm_design::wm1_cost(&setup.model, sol, wm);
        let (cost_mc, cost_se) = batch_means_se(&rec.stage_cost_series, 100).unwrap();
        assert!(
            (cost_mc - cost).abs() <= 3.0 * cost_se,
            "cost {cost_mc:.5} vs {cost:.5} (se {cost_se:.5})"
        );
        let corr = wm1_correlation(&setup.model, sol, wm).unwrap().expected_corr;
        let (corr_mc, corr_se) = batch_means_se(&rec.corr_series, 100).unwrap();
        assert!(
            (corr_mc - corr).abs() <= 3.0 * corr_se,
            "corr {corr_mc:.5} vs {corr:.5} (se {corr_se:.5})"
        );
    }

    #[test]
    fn stationary_watermark_loop_reproduces_freq_formulas() {
        let model = scalar_model(0.8);
        let kalman = model.solve_dare().unwrap();
        let pd = 0.2;
        let sol = solve_iid_lqg(&model, &kalman, pd).unwrap();
        let h = DVector::from_element(1, Complex64::new(0.5, 0.4));
        let rho = 0.9;
        let omega = 0.15;
        let wm = hmm_from_atom(omega, &h, rho).unwrap();
        let designer = FreqDesigner::new(&model, &sol, rho).unwrap();
        let terms = designer.terms(omega).unwrap();
        let h_cov = &h * h.adjoint();
        let corr = designer.objective(&terms, &h_cov).unwrap();
        let cost = sol.cost + designer.added_cost(&terms, &h_cov).unwrap();
        let lqg = LqgSolution::Iid(sol);
        let watermark = Watermark::Hmm(wm);
        let exp = Experiment::new(
            &model,
            &kalman,
            &lqg,
            DropModel::iid(pd).unwrap(),
            &watermark,
            DetectorConfig::default(),
            200_000,
            500,
            17,
        )
        .unwrap();
        let rec = simulate(&exp, &AttackScenario::none(10), 0).unwrap();
        let (corr_mc, corr_se) = batch_means_se(&rec.corr_series, 100).unwrap();
        assert!(
            (corr_mc - corr).abs() <= 3.0 * corr_se,
            "corr {corr_mc:.5} vs {corr:.5} (se {corr_se:.5})"
        );
        let (cost_mc, cost_se) = batch_means_se(&rec.stage_cost_series, 100).unwrap();
        assert!(
            (cost_mc - cost).abs() <= 3.0 * cost_se,
            "cost {cost_mc:.5} vs {cost:.5} (se {cost_se:.5})"
        );
    }

    #[test]
    fn hmm_sampler_reproduces_autocovariance() {
        let h = DVector::from_row_slice(&[Complex64::new(0.7, -0.2), Complex64::new(0.1, 0.5)]);
        let wm = hmm_from_atom(0.12, &h, 0.85).unwrap();
        let mut rng = stream_rng(3, 0, StreamPurpose::Watermark);
        let mut sampler =
            WatermarkSampler::new(&Watermark::Hmm(wm.clone()), &mut rng).unwrap();
        let steps = 200_000;
        let draws: Vec<DVector<f64>> = (0..steps).map(|_| sampler.next(&mut rng)).collect();
        for lag in 0..4 {
            let expected = wm.autocovariance(lag);
            for i in 0..2 {
                for j in 0..2 {
                    let series: Vec<f64> = (0..steps - lag)
                        .map(|k| draws[k][i] * draws[k + lag][j])
                        .collect();
                    let (mean, se) = batch_means_se(&series, 100).unwrap();
                    assert!(
                        (mean - expected[(i, j)]).abs() <= 3.0 * se,
                        "lag {lag} entry ({i},{j}): {mean:.5} vs {:.5} (se {se:.5})",
                        expected[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn live_feedthrough_replay_changes_nothing() {
        let setup = markov_setup(0.9, 0.7, 0.2, 0.5);
        let exp = setup.experiment(DetectorConfig::default(), 300, 100, 9);
        let copy = AttackScenario {
            kind: AttackKind::Replay {
                record_len: 0,
                offset: 0,
            },
            start: 100,
            actuation: None,
        };
        let attacked = simulate(&exp, &copy, 3).unwrap();
        let clean = simulate(&exp, &copy.null_counterpart(), 3).unwrap();
        assert_eq!(attacked.corr_series, clean.corr_series);
        assert_eq!(attacked.stat_corr, clean.stat_corr);
        assert_eq!(attacked.stat_chi2, clean.stat_chi2);
        assert_eq!(attacked.triggered, clean.triggered);
    }

    #[test]
    fn sensor_attacks_cannot_move_trigger_times() {
        let setup = markov_setup(0.9, 0.7, 0.2, 0.5);
        let exp = setup.experiment(DetectorConfig::default(), 300, 100, 21);
        let replay = AttackScenario {
            kind: AttackKind::Replay {
                record_len: 60,
                offset: 60,
            },
            start: 100,
            actuation: None,
        };
        let fault = AttackScenario {
            kind: AttackKind::Fault {
                bias: DVector::from_element(1, 2.0),
                sensors: vec![0],
            },
            start: 100,
            actuation: None,
        };
        let clean = simulate(&exp, &replay.null_counterpart(), 4).unwrap();
        for attack in [replay, fault] {
            let attacked = simulate(&exp, &attack, 4).unwrap();
            assert_eq!(attacked.triggered, clean.triggered);
        }
    }

    fn post_attack_corr_vanishes(kind: AttackKind, trials: u64) {
        let setup = markov_setup(0.9, 0.7, 0.2, 1.0);
        let exp = setup.experiment(DetectorConfig::default(), 300, 300, 23);
        let attack = AttackScenario {
            kind,
            start: 100,
            actuation: None,
        };
        let mut pre = Vec::new();
        let mut post = Vec::new();
        for t in 0..trials {
            let rec = simulate(&exp, &attack, t).unwrap();
            pre.push(rec.mean_corr(10, 100));
            post.push(rec.mean_corr(140, 300));
        }
        let (pre_mean, pre_se) = mean_se(&pre);
        let (post_mean, post_se) = mean_se(&post);
        assert!(
            pre_mean > 5.0 * pre_se,
            "pre-attack correlation {pre_mean:.4} should be clearly positive (se {pre_se:.4})"
        );
        assert!(
            post_mean.abs() <= 3.0 * post_se,
            "post-attack correlation {post_mean:.4} should vanish (se {post_se:.4})"
        );
    }

    #[test]
    fn replayed_outputs_decorrelate_from_the_replica() {
        post_attack_corr_vanishes(
            AttackKind::Replay {
                record_len: 100,
                offset: 100,
            },
            200,
        );
    }

    #[test]
    fn fabricated_outputs_decorrelate_from_the_replica() {
        post_attack_corr_vanishes(AttackKind::VirtualSystem, 150);
    }

    #[test]
    fn fault_shifts_chi2_and_spares_correlation() {
        let mut rng = stream_rng(77, 0, StreamPurpose::ProcessNoise);
        let model = generate_random_system(2, 1, 2, &mut rng).unwrap();
        let kalman = model.solve_dare().unwrap();
        let sol = solve_markov_lqg(&model, &kalman, 0.8, 0.15).unwrap();
        let lqg = LqgSolution::Markov(sol);
        let wm = Watermark::IidGaussian(
            IidGaussianWatermark::new(DMatrix::from_element(1, 1, 0.4)).unwrap(),
        );
        let exp = Experiment::new(
            &model,
            &kalman,
            &lqg,
            DropModel::markov(0.8, 0.15).unwrap(),
            &wm,
            DetectorConfig::default(),
            400,
            300,
            31,
        )
        .unwrap();
        let bias = DVector::from_row_slice(&[1.0, 0.0]);
        let attack = AttackScenario {
            kind: AttackKind::Fault {
                bias: bias.clone(),
                sensors: vec![0],
            },
            start: 200,
            actuation: None,
        };
        let trials = 200;
        let summary = run_fault_demo(&exp, &attack, trials, 50).unwrap();
        let offset = attack.kind.sensor_offset(model.m()).unwrap();
        let predicted =
            chi2_window_shift(&model, &kalman, &offset, exp.detector.window).unwrap();
        let chi = summary.chi2;
        assert!(
            (chi.shift() - predicted).abs() <= 3.0 * chi.shift_se(),
            "chi-square shift {:.4} vs predicted {predicted:.4} (se {:.4})",
            chi.shift(),
            chi.shift_se()
        );
        assert!(
            chi.shift() < -5.0 * chi.shift_se(),
            "chi-square shift {:.4} should dominate its uncertainty {:.4}",
            chi.shift(),
            chi.shift_se()
        );
        let corr = summary.corr;
        assert!(
            corr.shift().abs() <= 3.0 * corr.shift_se(),
            "correlation shift {:.4} should vanish (se {:.4})",
            corr.shift(),
            corr.shift_se()
        );

        let zbar = fault_innovation_mean(&model, &kalman, &offset).unwrap();
        let mut post_means = [Vec::new(), Vec::new()];
        for t in 0..trials {
            let rec = simulate(&exp, &attack, t).unwrap();
            for i in 0..2 {
                let per_step: Vec<f64> = rec.innovation_series[250..400]
                    .iter()
                    .map(|z| z[i])
                    .collect();
                post_means[i].push(per_step.iter().sum::<f64>() / per_step.len() as f64);
            }
        }
        for i in 0..2 {
            let (mean, se) = mean_se(&post_means[i]);
            assert!(
                (mean - zbar[i]).abs() <= 3.0 * se,
                "innovation mean entry {i}: {mean:.4} vs {:.4} (se {se:.4})",
                zbar[i]
            );
        }
    }

    #[test]
    fn chi2_shift_is_quadratic_in_the_bias() {
        let model = scalar_model(0.85);
        let kalman = model.solve_dare().unwrap();
        let b = DVector::from_element(1, 0.7);
        let single = chi2_window_shift(&model, &kalman, &b, 10).unwrap();
        let double = chi2_window_shift(&model, &kalman, &(&b * 2.0), 10).unwrap();
        assert!((double - 4.0 * single).abs() <= 1e-12 * single.abs());
    }

    #[test]
    fn fault_innovation_mean_matches_scalar_fixed_point() {
        let model = scalar_model(0.8);
        let kalman = model.solve_dare().unwrap();
        let k = kalman.gain[(0, 0)];
        let a = 0.8;
        let b = 0.6;
        let err_mean = -(a * k * b) / (1.0 - a * (1.0 - k));
        let expected = err_mean + b;
        let zbar = fault_innovation_mean(&model, &kalman, &DVector::from_element(1, b)).unwrap();
        assert!((zbar[0] - expected).abs() <= 1e-12);
    }

    fn roc_setup() -> MarkovSetup {
        markov_setup(0.95, 0.7, 0.2, 2.0)
    }

    fn roc_attack() -> AttackScenario {
        AttackScenario {
            kind: AttackKind::Replay {
                record_len: 60,
                offset: 60,
            },
            start: 60,
            actuation: None,
        }
    }

    #[test]
    fn roc_separates_replay_from_honest_runs() {
        let setup = roc_setup();
        let exp = setup.experiment(DetectorConfig::default(), 260, 200, 101);
        let taus: Vec<f64> = vec![-1e18, -20.0, -5.0, 0.0, 5.0, 20.0, 1e18];
        let rocs = run_roc(&exp, &roc_attack(), 150, &taus).unwrap();
        let corr = &rocs[0];
        assert_eq!(corr.detector, DetectorKind::Correlation);
        assert!(
            corr.auc > 0.75,
            "correlation AUC {:.3} too weak against replay",
            corr.auc
        );
        for roc in &rocs {
            let first = roc.points.first().unwrap();
            let last = roc.points.last().unwrap();
            assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
            assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for pair in roc.points.windows(2) {
                assert!(pair[1].fpr >= pair[0].fpr);
                assert!(pair[1].tpr >= pair[0].tpr);
            }
        }
    }

    #[test]
    fn live_feedthrough_attack_scores_exactly_chance() {
        let setup = roc_setup();
        let exp = setup.experiment(DetectorConfig::default(), 260, 200, 103);
        let copy = AttackScenario {
            kind: AttackKind::Replay {
                record_len: 0,
                offset: 0,
            },
            start: 60,
            actuation: None,
        };
        let rocs = run_roc(&exp, &copy, 80, &[]).unwrap();
        for roc in rocs {
            assert_eq!(roc.auc, 0.5);
            assert_eq!(roc.h0_scores, roc.h1_scores);
        }
    }

    #[test]
    fn detection_delays_shrink_as_the_threshold_rises() {
        let setup = roc_setup();
        let exp = setup.experiment(DetectorConfig::default(), 260, 200, 107);
        let taus = [-1e18, 0.0, 1e18];
        let records = run_time_to_detection(&exp, &roc_attack(), 30, &taus).unwrap();
        assert_eq!(records.len(), 2 * taus.len() * 30);
        for rec in &records {
            if rec.tau == -1e18 {
                assert_eq!(rec.delay, None);
            }
            if rec.tau == 1e18 {
                assert_eq!(rec.delay, Some(0), "trial {}", rec.trial);
            }
        }
        for kind in DetectorKind::ALL {
            for trial in 0..30u64 {
                let delay_at = |tau: f64| {
                    records
                        .iter()
                        .find(|r| r.detector == kind && r.tau == tau && r.trial == trial)
                        .unwrap()
                        .delay
                };
                if let (Some(mid), Some(hi)) = (delay_at(0.0), delay_at(1e18)) {
                    assert!(hi <= mid);
                }
            }
        }
    }

    #[test]
    fn mann_whitney_handles_order_and_ties() {
        assert_eq!(mann_whitney_auc(&[3.0, 4.0], &[1.0, 2.0]), 1.0);
        assert_eq!(mann_whitney_auc(&[1.0, 2.0], &[3.0, 4.0]), 0.0);
        assert_eq!(mann_whitney_auc(&[1.0, 1.0], &[1.0, 1.0]), 0.5);
        assert_eq!(
            mann_whitney_auc(&[f64::INFINITY], &[f64::INFINITY]),
            0.5
        );
        assert_eq!(mann_whitney_auc(&[1.0, 3.0], &[2.0, 2.0]), 0.5);
    }

    #[test]
    fn batch_means_tracks_independent_noise() {
        use rand_distr::StandardNormal;
        let mut rng = stream_rng(55, 0, StreamPurpose::ProcessNoise);
        let series: Vec<f64> = (0..20_000)
            .map(|_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal))
            .collect();
        let (mean, se) = batch_means_se(&series, 50).unwrap();
        let ideal = 1.0 / (series.len() as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se);
        assert!(se / ideal > 0.6 && se / ideal < 1.6);
        assert!(batch_means_se(&series, 1).is_err());
        assert!(batch_means_se(&series[..10], 50).is_err());
    }

    #[test]
    fn mean_se_matches_hand_computation() {
        let (mean, se) = mean_se(&[1.0, 2.0, 3.0]);
        assert!((mean - 2.0).abs() <= 1e-15);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() <= 1e-15);
        assert!(mean_se(&[]).0.is_nan());
        assert_eq!(mean_se(&[5.0]), (5.0, f64::INFINITY));
    }
}
