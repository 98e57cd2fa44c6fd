//! Watermark design and attack detection for linear control loops whose
//! actuation channel drops packets.
//!
//! The crate models a discrete-time LTI plant driven by an LQG controller
//! over a lossy actuation link, superimposes a private watermark signal on
//! the control input, and detects replay or fabricated-sensor attacks by
//! correlating received measurements against the watermark's simulated
//! response. It provides:
//!
//! - [`sysmodel`]: plant/noise description, steady-state Kalman filtering,
//!   and random test-system generation.
//! - [`lqg_drop`]: optimal LQG gains and closed-loop cost under IID and
//!   Markov (Gilbert-Elliott) packet drops, plus the linear operators whose
//!   spectral radii certify closed-loop stability.
//! - [`wm_design`]: expected cost and detection-statistic formulas for the
//!   two watermark families (IID Gaussian, stationary hidden-Markov
//!   Gaussian), and budget-constrained designers that maximize the detection
//!   statistic subject to a control-cost ceiling.
//! - [`simkit`]: deterministic seeded closed-loop simulation with attack
//!   injection, event-triggered detectors, and Monte-Carlo experiment
//!   drivers (ROC curves, time to detection, fault-vs-attack demos).

pub mod error;
pub mod linalg;
pub mod lqg_drop;
mod parallel;
pub mod simkit;
pub mod sysmodel;
pub mod wm_design;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
