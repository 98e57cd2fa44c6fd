//! JSON experiment configuration and its resolution to core types.
//!
//! A config is a single document with five sections: the plant (`system`),
//! the packet-drop link (`drop`), the watermark (`watermark`, explicit or a
//! designer search), the event-triggered detectors (`detector`), and the
//! Monte-Carlo run (`experiment`). Parsing then serializing a config
//! reproduces it field for field, so designs can be pasted back into
//! configs and diffed.

use std::fs;
use std::path::Path;

use markdrop_core::lqg_drop::{solve_iid_lqg, solve_markov_lqg, DropModel};
use markdrop_core::simkit::{
    stream_rng, AttackKind, AttackScenario, DetectorConfig, DetectorKind, LqgSolution,
    StreamPurpose, Watermark,
};
use markdrop_core::sysmodel::{generate_random_system_with_radius, KalmanSolution, SystemModel};
use markdrop_core::wm_design::{design_wm1, design_wm2, hmm_from_atom, IidGaussianWatermark};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixSpec {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixSpec {
            rows: m.nrows(),
            cols: m.ncols(),
            data: (0..m.nrows())
                .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)])
                .collect(),
        }
    }

    pub fn to_matrix(&self, what: &str) -> Result<DMatrix<f64>> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!("{what} has a zero dimension")));
        }
        if self.rows * self.cols != self.data.len() {
            return Err(Error::Config(format!(
                "{what} declares {}x{} but carries {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Where the plant comes from: explicit matrices or a seeded random draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum SystemSpec {
    Explicit {
        a: MatrixSpec,
        b: MatrixSpec,
        c: MatrixSpec,
        process_noise: MatrixSpec,
        measurement_noise: MatrixSpec,
        state_cost: MatrixSpec,
        input_cost: MatrixSpec,
    },
    Generated {
        states: usize,
        inputs: usize,
        outputs: usize,
        #[serde(default = "default_spectral_radius")]
        spectral_radius: f64,
        seed: u64,
    },
}

fn default_spectral_radius() -> f64 {
    0.8
}

impl SystemSpec {
    pub fn build(&self) -> Result<SystemModel> {
        match self {
            SystemSpec::Explicit {
                a,
                b,
                c,
                process_noise,
                measurement_noise,
                state_cost,
                input_cost,
            } => Ok(SystemModel::new(
                a.to_matrix("system matrix a")?,
                b.to_matrix("system matrix b")?,
                c.to_matrix("system matrix c")?,
                process_noise.to_matrix("process_noise")?,
                measurement_noise.to_matrix("measurement_noise")?,
                state_cost.to_matrix("state_cost")?,
                input_cost.to_matrix("input_cost")?,
            )?),
            SystemSpec::Generated {
                states,
                inputs,
                outputs,
                spectral_radius,
                seed,
            } => {
                let mut rng = stream_rng(*seed, 0, StreamPurpose::ProcessNoise);
                Ok(generate_random_system_with_radius(
                    *states,
                    *inputs,
                    *outputs,
                    *spectral_radius,
                    &mut rng,
                )?)
            }
        }
    }
}

/// Packet-drop process on the actuation link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DropSpec {
    Iid { drop_prob: f64 },
    Markov { recover_prob: f64, drop_prob: f64 },
}

impl DropSpec {
    pub fn to_model(self) -> Result<DropModel> {
        Ok(match self {
            DropSpec::Iid { drop_prob } => DropModel::iid(drop_prob)?,
            DropSpec::Markov {
                recover_prob,
                drop_prob,
            } => DropModel::markov(recover_prob, drop_prob)?,
        })
    }
}

/// One Markov-chain design candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainPoint {
    pub alpha: f64,
    pub beta: f64,
}

/// The injected watermark: explicit parameters, or a designer search that
/// resolves to them. Run commands pin a designer to the configured link
/// (the `design` command explores the full grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WatermarkSpec {
    /// IID Gaussian input perturbation with this covariance; pairs with a
    /// Markov link.
    IidGaussian { covariance: MatrixSpec },
    /// Stationary hidden-state perturbation concentrated at one frequency;
    /// pairs with an IID link. `h_re + i h_im` is the complex amplitude per
    /// input, `rho_bar` the hidden-state decay.
    HmmAtom {
        omega: f64,
        h_re: Vec<f64>,
        h_im: Vec<f64>,
        rho_bar: f64,
    },
    /// Search `(alpha, beta)` chain candidates for the best IID Gaussian
    /// watermark within the cost budget.
    MarkovDesigner {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta_factor: Option<f64>,
        grid: Vec<ChainPoint>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        natural_drop: Option<f64>,
    },
    /// Search `(omega, drop_prob)` candidates for the best stationary
    /// watermark within the cost budget.
    StationaryDesigner {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta_factor: Option<f64>,
        rho_bar: f64,
        omega_grid: Vec<f64>,
        drop_grid: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        natural_drop: Option<f64>,
    },
}

/// Turn a budget spec into an absolute cost ceiling. `delta` is absolute;
/// `delta_factor` multiplies the drop-free, watermark-free optimal cost.
pub fn resolve_delta(
    delta: Option<f64>,
    delta_factor: Option<f64>,
    model: &SystemModel,
    kalman: &KalmanSolution,
) -> Result<f64> {
    match (delta, delta_factor) {
        (Some(d), None) => Ok(d),
        (None, Some(f)) => {
            let j_star = solve_iid_lqg(model, kalman, 0.0)?.cost;
            Ok(f * j_star)
        }
        (None, None) => Err(Error::Config(
            "designer needs delta or delta_factor".into(),
        )),
        (Some(_), Some(_)) => Err(Error::Config(
            "give only one of delta and delta_factor".into(),
        )),
    }
}

/// Event trigger, alarm window, and threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    #[serde(default = "default_detector_kind")]
    pub kind: DetectorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default = "default_mu_factor")]
    pub mu_factor: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub tau: f64,
    /// Alarm thresholds the `roc` and `ttd` commands sweep; when empty,
    /// `roc` derives a quantile grid from the observed scores and `ttd`
    /// uses the single configured `tau`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tau_sweep: Vec<f64>,
}

fn default_detector_kind() -> DetectorKind {
    DetectorKind::Correlation
}

fn default_mu_factor() -> f64 {
    DetectorConfig::default().mu_factor
}

fn default_window() -> usize {
    DetectorConfig::default().window
}

impl Default for DetectorSpec {
    fn default() -> Self {
        let base = DetectorConfig::default();
        DetectorSpec {
            kind: base.kind,
            mu: base.mu,
            mu_factor: base.mu_factor,
            window: base.window,
            tau: base.tau,
            tau_sweep: Vec::new(),
        }
    }
}

impl DetectorSpec {
    pub fn to_config(&self) -> DetectorConfig {
        DetectorConfig {
            kind: self.kind,
            mu: self.mu,
            mu_factor: self.mu_factor,
            window: self.window,
            tau: self.tau,
        }
    }
}

/// What the attacker does and when.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpecKind {
    None,
    Replay {
        record_len: usize,
        offset: usize,
    },
    VirtualSystem,
    Fault {
        /// Full output-space bias vector; only `sensors` entries apply.
        bias: Vec<f64>,
        sensors: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    /// Post-burn-in step the manipulation starts at.
    pub start: usize,
    #[serde(flatten)]
    pub kind: AttackSpecKind,
}

impl AttackSpec {
    pub fn to_scenario(&self, outputs: usize) -> Result<AttackScenario> {
        let kind = match &self.kind {
            AttackSpecKind::None => AttackKind::None,
            AttackSpecKind::Replay { record_len, offset } => AttackKind::Replay {
                record_len: *record_len,
                offset: *offset,
            },
            AttackSpecKind::VirtualSystem => AttackKind::VirtualSystem,
            AttackSpecKind::Fault { bias, sensors } => {
                if bias.len() != outputs {
                    return Err(Error::Config(format!(
                        "fault bias has {} entries for {} outputs",
                        bias.len(),
                        outputs
                    )));
                }
                if let Some(&s) = sensors.iter().find(|&&s| s >= outputs) {
                    return Err(Error::Config(format!(
                        "fault sensor index {s} out of range for {outputs} outputs"
                    )));
                }
                AttackKind::Fault {
                    bias: DVector::from_column_slice(bias),
                    sensors: sensors.clone(),
                }
            }
        };
        Ok(AttackScenario {
            kind,
            start: self.start,
            actuation: None,
        })
    }
}

/// Monte-Carlo run shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub trials: u64,
    pub horizon: usize,
    #[serde(default)]
    pub burn_in: usize,
    pub attack: AttackSpec,
    pub master_seed: u64,
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub drop: DropSpec,
    pub watermark: WatermarkSpec,
    #[serde(default)]
    pub detector: DetectorSpec,
    pub experiment: RunSpec,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            source: e,
        })
    }

    #[cfg(test)]
    fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}

/// A config resolved against the core library: concrete plant, filter,
/// controller, link, watermark, and attack. Designer watermarks are pinned
/// to the configured link here; the full grid search lives in the `design`
/// command.
#[derive(Debug)]
pub struct Resolved {
    pub model: SystemModel,
    pub kalman: KalmanSolution,
    pub drop: DropModel,
    pub lqg: LqgSolution,
    pub watermark: Watermark,
    pub detector: DetectorConfig,
    pub tau_sweep: Vec<f64>,
    pub attack: AttackScenario,
    /// One-line description of what a designer picked, when one ran.
    pub design_summary: Option<String>,
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<Resolved> {
        let model = self.system.build()?;
        let kalman = model.solve_dare()?;
        let drop = self.drop.to_model()?;
        let lqg = match drop {
            DropModel::Iid { drop_prob } => {
                LqgSolution::Iid(solve_iid_lqg(&model, &kalman, drop_prob)?)
            }
            DropModel::Markov {
                recover_prob,
                drop_prob,
            } => LqgSolution::Markov(solve_markov_lqg(&model, &kalman, recover_prob, drop_prob)?),
        };
        let mut design_summary = None;
        let watermark = match &self.watermark {
            WatermarkSpec::IidGaussian { covariance } => Watermark::IidGaussian(
                IidGaussianWatermark::new(covariance.to_matrix("watermark covariance")?)?,
            ),
            WatermarkSpec::HmmAtom {
                omega,
                h_re,
                h_im,
                rho_bar,
            } => {
                if h_re.len() != h_im.len() {
                    return Err(Error::Config(format!(
                        "h_re has {} entries but h_im has {}",
                        h_re.len(),
                        h_im.len()
                    )));
                }
                let h = DVector::from_iterator(
                    h_re.len(),
                    h_re.iter()
                        .zip(h_im)
                        .map(|(&re, &im)| Complex64::new(re, im)),
                );
                Watermark::Hmm(hmm_from_atom(*omega, &h, *rho_bar)?)
            }
            WatermarkSpec::MarkovDesigner {
                delta,
                delta_factor,
                natural_drop,
                ..
            } => {
                let DropModel::Markov {
                    recover_prob,
                    drop_prob,
                } = drop
                else {
                    return Err(Error::Config(
                        "a markov_designer watermark needs a markov drop model".into(),
                    ));
                };
                let delta = resolve_delta(*delta, *delta_factor, &model, &kalman)?;
                let outcome = design_wm1(
                    &model,
                    &kalman,
                    delta,
                    &[(recover_prob, drop_prob)],
                    *natural_drop,
                )?;
                design_summary = Some(format!(
                    "designed IID Gaussian watermark at (alpha {recover_prob}, beta {drop_prob}): \
                     expected correlation {}, cost {} within budget {delta}",
                    outcome.design.expected_corr, outcome.design.total_cost
                ));
                Watermark::IidGaussian(outcome.design.covariance)
            }
            WatermarkSpec::StationaryDesigner {
                delta,
                delta_factor,
                rho_bar,
                omega_grid,
                natural_drop,
                ..
            } => {
                let DropModel::Iid { drop_prob } = drop else {
                    return Err(Error::Config(
                        "a stationary_designer watermark needs an iid drop model".into(),
                    ));
                };
                let delta = resolve_delta(*delta, *delta_factor, &model, &kalman)?;
                let outcome = design_wm2(
                    &model,
                    &kalman,
                    delta,
                    *rho_bar,
                    omega_grid,
                    &[drop_prob],
                    *natural_drop,
                )?;
                design_summary = Some(format!(
                    "designed stationary watermark at (p_d {drop_prob}, omega {}): \
                     expected correlation {}, cost {} within budget {delta}",
                    outcome.design.omega, outcome.design.expected_corr, outcome.design.total_cost
                ));
                Watermark::Hmm(outcome.design.hmm)
            }
        };
        let attack = self.experiment.attack.to_scenario(model.m())?;
        Ok(Resolved {
            model,
            kalman,
            drop,
            lqg,
            watermark,
            detector: self.detector.to_config(),
            tau_sweep: self.detector.tau_sweep.clone(),
            attack,
            design_summary,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_spec(n: usize) -> MatrixSpec {
        MatrixSpec::from_matrix(&DMatrix::identity(n, n))
    }

    fn explicit_config() -> ExperimentConfig {
        ExperimentConfig {
            system: SystemSpec::Explicit {
                a: MatrixSpec {
                    rows: 2,
                    cols: 2,
                    data: vec![0.6, 0.1, 0.0, 0.5],
                },
                b: MatrixSpec {
                    rows: 2,
                    cols: 1,
                    data: vec![1.0, 0.3],
                },
                c: MatrixSpec {
                    rows: 1,
                    cols: 2,
                    data: vec![1.0, -0.4],
                },
                process_noise: identity_spec(2),
                measurement_noise: identity_spec(1),
                state_cost: identity_spec(2),
                input_cost: identity_spec(1),
            },
            drop: DropSpec::Iid { drop_prob: 0.25 },
            watermark: WatermarkSpec::HmmAtom {
                omega: 0.15,
                h_re: vec![0.8],
                h_im: vec![-0.2],
                rho_bar: 0.9,
            },
            detector: DetectorSpec {
                tau_sweep: vec![-5.0, 0.0, 5.0],
                ..DetectorSpec::default()
            },
            experiment: RunSpec {
                trials: 4,
                horizon: 120,
                burn_in: 40,
                attack: AttackSpec {
                    start: 60,
                    kind: AttackSpecKind::Fault {
                        bias: vec![1.5],
                        sensors: vec![0],
                    },
                },
                master_seed: 11,
            },
        }
    }

    fn generated_config() -> ExperimentConfig {
        ExperimentConfig {
            system: SystemSpec::Generated {
                states: 3,
                inputs: 2,
                outputs: 2,
                spectral_radius: 0.8,
                seed: 5,
            },
            drop: DropSpec::Markov {
                recover_prob: 0.69,
                drop_prob: 0.9,
            },
            watermark: WatermarkSpec::MarkovDesigner {
                delta: None,
                delta_factor: Some(2.5),
                grid: vec![
                    ChainPoint {
                        alpha: 0.69,
                        beta: 0.9,
                    },
                    ChainPoint {
                        alpha: 1.0,
                        beta: 1e-6,
                    },
                ],
                natural_drop: None,
            },
            detector: DetectorSpec::default(),
            experiment: RunSpec {
                trials: 8,
                horizon: 200,
                burn_in: 100,
                attack: AttackSpec {
                    start: 80,
                    kind: AttackSpecKind::Replay {
                        record_len: 60,
                        offset: 60,
                    },
                },
                master_seed: 3,
            },
        }
    }

    #[test]
    fn round_trip_preserves_explicit_configs() {
        let cfg = explicit_config();
        let parsed: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn round_trip_preserves_designer_configs() {
        let cfg = generated_config();
        let parsed: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn round_trip_preserves_remaining_variants() {
        let mut cfg = generated_config();
        cfg.drop = DropSpec::Iid { drop_prob: 0.3 };
        cfg.watermark = WatermarkSpec::StationaryDesigner {
            delta: Some(4.0),
            delta_factor: None,
            rho_bar: 0.85,
            omega_grid: vec![0.0, 0.1, 0.2],
            drop_grid: vec![0.0, 0.3],
            natural_drop: Some(0.05),
        };
        cfg.experiment.attack.kind = AttackSpecKind::VirtualSystem;
        let parsed: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(parsed, cfg);

        cfg.watermark = WatermarkSpec::IidGaussian {
            covariance: identity_spec(2),
        };
        cfg.experiment.attack.kind = AttackSpecKind::None;
        let parsed: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn matrix_spec_rejects_wrong_length() {
        let bad = MatrixSpec {
            rows: 2,
            cols: 2,
            data: vec![1.0, 2.0, 3.0],
        };
        assert!(bad.to_matrix("test").is_err());
    }

    #[test]
    fn delta_spec_must_be_single() {
        let cfg = generated_config();
        let model = cfg.system.build().unwrap();
        let kalman = model.solve_dare().unwrap();
        assert!(resolve_delta(Some(1.0), Some(2.0), &model, &kalman).is_err());
        assert!(resolve_delta(None, None, &model, &kalman).is_err());
        let direct = resolve_delta(Some(3.5), None, &model, &kalman).unwrap();
        assert_eq!(direct, 3.5);
    }

    #[test]
    fn fault_bias_must_match_output_count() {
        let mut cfg = explicit_config();
        cfg.experiment.attack.kind = AttackSpecKind::Fault {
            bias: vec![1.0, 2.0],
            sensors: vec![0],
        };
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("bias"), "unexpected error: {err}");
    }

    #[test]
    fn resolve_builds_consistent_experiments() {
        let cfg = generated_config();
        let resolved = cfg.resolve().unwrap();
        assert!(resolved.design_summary.is_some());
        assert_eq!(resolved.model.n(), 3);
        assert!(!resolved.watermark.is_zero());
    }

    #[test]
    fn designer_and_link_kinds_must_agree() {
        let mut cfg = generated_config();
        cfg.drop = DropSpec::Iid { drop_prob: 0.2 };
        let err = cfg.resolve().unwrap_err();
        assert!(
            err.to_string().contains("markov_designer"),
            "unexpected error: {err}"
        );
    }
}
