//! Event-triggered watermark detectors.
//!
//! Both detectors observe the loop only at trigger times: steps where the
//! defender's virtual-replica output is energetic enough, `‖y'_k‖² ≥ μ`.
//! The trigger depends solely on defender-side quantities, so an attacker
//! controlling the sensor channel cannot move the observation times. At each
//! trigger a scalar statistic is recorded:
//!
//! * correlation: `g = y_kᵀ y'_k`, which the watermark keeps positive on
//!   average and which any fabricated `y` decorrelates to zero;
//! * chi-square: `g = -z_kᵀ Σ⁻¹ z_k`, the classical innovation test written
//!   with the same alarm polarity.
//!
//! An alarm is raised when the sum of the last `window` statistics falls
//! below the threshold `τ`. No decision is made until a full window of
//! trigger events has accumulated.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which statistic a detector accumulates at trigger times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Correlation,
    ChiSquare,
}

impl DetectorKind {
    /// Both detectors, in the order reports list them.
    pub const ALL: [DetectorKind; 2] = [DetectorKind::Correlation, DetectorKind::ChiSquare];
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectorKind::Correlation => write!(f, "correlation"),
            DetectorKind::ChiSquare => write!(f, "chi_square"),
        }
    }
}

/// Trigger and alarm parameters shared by a simulation's detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Detector whose alarms populate a trial's alarm trace.
    pub kind: DetectorKind,
    /// Explicit trigger level `μ`; when absent, `μ` is resolved to
    /// `mu_factor` times the watermark's expected output correlation.
    pub mu: Option<f64>,
    /// Fraction of the expected correlation used as trigger level when `mu`
    /// is not given.
    pub mu_factor: f64,
    /// Number of trigger events summed for each alarm decision.
    pub window: usize,
    /// Alarm threshold: alarm when the windowed sum drops below it.
    pub tau: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kind: DetectorKind::Correlation,
            mu: None,
            mu_factor: 0.5,
            window: 10,
            tau: 0.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("detector window must be at least 1".into()));
        }
        if let Some(mu) = self.mu {
            if !(mu.is_finite() && mu >= 0.0) {
                return Err(Error::Config(format!(
                    "trigger level {mu} must be finite and nonnegative"
                )));
            }
        } else if !(self.mu_factor.is_finite() && self.mu_factor >= 0.0) {
            return Err(Error::Config(format!(
                "trigger factor {} must be finite and nonnegative",
                self.mu_factor
            )));
        }
        if !self.tau.is_finite() {
            return Err(Error::Config("alarm threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Event trigger: observe the loop when the virtual output is energetic.
pub fn triggered(y_virtual: &DVector<f64>, mu: f64) -> bool {
    y_virtual.norm_squared() >= mu
}

/// Correlation statistic at a trigger time.
pub fn correlation_score(y_received: &DVector<f64>, y_virtual: &DVector<f64>) -> f64 {
    y_received.dot(y_virtual)
}

/// Chi-square statistic at a trigger time, negated so both detectors alarm
/// on low windowed sums.
pub fn chi2_score(innovation: &DVector<f64>, innovation_cov_inv: &DMatrix<f64>) -> f64 {
    -(innovation_cov_inv * innovation).dot(innovation)
}

/// Running state of one detector: the last `window` trigger statistics.
#[derive(Debug, Clone)]
pub struct DetectorState {
    window: usize,
    recent: VecDeque<f64>,
    kappa: usize,
    last_trigger: Option<usize>,
}

impl DetectorState {
    pub fn new(window: usize) -> Self {
        DetectorState {
            window,
            recent: VecDeque::with_capacity(window),
            kappa: 0,
            last_trigger: None,
        }
    }

    /// Record the statistic of the trigger event at step `k`.
    pub fn record(&mut self, k: usize, g: f64) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(g);
        self.kappa += 1;
        self.last_trigger = Some(k);
    }

    /// Number of trigger events seen so far.
    pub fn kappa(&self) -> usize {
        self.kappa
    }

    /// Step index of the most recent trigger event.
    pub fn last_trigger(&self) -> Option<usize> {
        self.last_trigger
    }

    /// Sum of the last `window` statistics, once that many exist.
    pub fn windowed_sum(&self) -> Option<f64> {
        if self.recent.len() < self.window {
            None
        } else {
            Some(self.recent.iter().sum())
        }
    }

    /// Alarm decision at threshold `tau`, `None` during warm-up.
    pub fn alarm(&self, tau: f64) -> Option<bool> {
        self.windowed_sum().map(|s| s < tau)
    }
}
