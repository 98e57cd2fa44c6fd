//! The run commands: grid design, single-trial traces, threshold sweeps,
//! detection delays, and the before/after fault comparison.

use std::fmt::Write as _;
use std::path::Path;

use markdrop_core::simkit::{
    run_fault_demo, run_roc, run_time_to_detection, simulate, DetectorRoc, Experiment,
};
use markdrop_core::wm_design::{design_wm1, design_wm2};

use crate::config::{
    resolve_delta, DropSpec, ExperimentConfig, MatrixSpec, Resolved, WatermarkSpec,
};
use crate::error::{Error, Result};
use crate::output::{bool_cell, opt_cell, write_text};

/// Number of interior thresholds `roc` samples when the config gives no
/// explicit sweep.
const DERIVED_TAU_POINTS: usize = 41;

/// The designer's pick in config vocabulary, ready to paste into the
/// `drop` and `watermark` sections of a follow-up experiment.
#[derive(serde::Serialize)]
struct DesignReport {
    drop: DropSpec,
    watermark: WatermarkSpec,
    expected_corr: f64,
    total_cost: f64,
    cost_budget: f64,
}

fn build_experiment<'a>(cfg: &ExperimentConfig, r: &'a Resolved) -> Result<Experiment<'a>> {
    Ok(Experiment::new(
        &r.model,
        &r.kalman,
        &r.lqg,
        r.drop,
        &r.watermark,
        r.detector,
        cfg.experiment.horizon,
        cfg.experiment.burn_in,
        cfg.experiment.master_seed,
    )?)
}

/// Search the configured designer grid, write the per-point surface to
/// `design.csv` and the winner to `design.json`.
pub fn cmd_design(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = cfg.system.build()?;
    let kalman = model.solve_dare()?;

    let mut surface = String::new();
    let report = match &cfg.watermark {
        WatermarkSpec::MarkovDesigner {
            delta,
            delta_factor,
            grid,
            natural_drop,
        } => {
            let delta = resolve_delta(*delta, *delta_factor, &model, &kalman)?;
            let pairs: Vec<(f64, f64)> = grid.iter().map(|c| (c.alpha, c.beta)).collect();
            let outcome = design_wm1(&model, &kalman, delta, &pairs, *natural_drop)?;
            surface.push_str("alpha,beta,status,cost_floor,objective,total_cost\n");
            for pt in &outcome.grid_report {
                writeln!(
                    surface,
                    "{},{},{},{},{},{}",
                    pt.alpha,
                    pt.beta,
                    pt.status,
                    opt_cell(pt.cost_floor),
                    opt_cell(pt.objective),
                    opt_cell(pt.total_cost)
                )
                .expect("write to string");
            }
            let d = &outcome.design;
            println!(
                "design: chain (alpha {}, beta {}) wins: expected correlation {}, \
                 cost {} within budget {}",
                d.alpha, d.beta, d.expected_corr, d.total_cost, d.cost_budget
            );
            DesignReport {
                drop: DropSpec::Markov {
                    recover_prob: d.alpha,
                    drop_prob: d.beta,
                },
                watermark: WatermarkSpec::IidGaussian {
                    covariance: MatrixSpec::from_matrix(&d.covariance.covariance),
                },
                expected_corr: d.expected_corr,
                total_cost: d.total_cost,
                cost_budget: d.cost_budget,
            }
        }
        WatermarkSpec::StationaryDesigner {
            delta,
            delta_factor,
            rho_bar,
            omega_grid,
            drop_grid,
            natural_drop,
        } => {
            let delta = resolve_delta(*delta, *delta_factor, &model, &kalman)?;
            let outcome = design_wm2(
                &model,
                &kalman,
                delta,
                *rho_bar,
                omega_grid,
                drop_grid,
                *natural_drop,
            )?;
            surface.push_str("drop_prob,omega,status,cost_floor,objective,total_cost\n");
            for pt in &outcome.grid_report {
                writeln!(
                    surface,
                    "{},{},{},{},{},{}",
                    pt.drop_prob,
                    pt.omega,
                    pt.status,
                    opt_cell(pt.cost_floor),
                    opt_cell(pt.objective),
                    opt_cell(pt.total_cost)
                )
                .expect("write to string");
            }
            let d = &outcome.design;
            println!(
                "design: (drop_prob {}, omega {}) wins: expected correlation {}, \
                 cost {} within budget {}",
                d.drop_prob, d.omega, d.expected_corr, d.total_cost, d.cost_budget
            );
            let (omega, h, rho) = d.hmm.as_atom().unwrap_or_else(|| {
                (
                    d.omega,
                    nalgebra::DVector::zeros(model.p()),
                    *rho_bar,
                )
            });
            DesignReport {
                drop: DropSpec::Iid {
                    drop_prob: d.drop_prob,
                },
                watermark: WatermarkSpec::HmmAtom {
                    omega,
                    h_re: h.iter().map(|z| z.re).collect(),
                    h_im: h.iter().map(|z| z.im).collect(),
                    rho_bar: rho,
                },
                expected_corr: d.expected_corr,
                total_cost: d.total_cost,
                cost_budget: d.cost_budget,
            }
        }
        WatermarkSpec::IidGaussian { .. } | WatermarkSpec::HmmAtom { .. } => {
            return Err(Error::Config(
                "the design command needs a designer watermark \
                 (markov_designer or stationary_designer)"
                    .into(),
            ));
        }
    };

    write_text(&out.join("design.csv"), &surface)?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_text(&out.join("design.json"), &json)?;
    println!("design: wrote design.csv and design.json under {}", out.display());
    Ok(())
}

/// Record trial 0 and write its per-step detector traces to `trace.csv`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let r = cfg.resolve()?;
    if let Some(line) = &r.design_summary {
        println!("simulate: {line}");
    }
    let exp = build_experiment(cfg, &r)?;
    let rec = simulate(&exp, &r.attack, 0)?;

    let mut table = String::from("k,stat_corr,stat_chi2,triggered\n");
    for k in 0..rec.horizon {
        writeln!(
            table,
            "{},{},{},{}",
            k,
            opt_cell(rec.stat_corr[k]),
            opt_cell(rec.stat_chi2[k]),
            bool_cell(rec.triggered[k])
        )
        .expect("write to string");
    }
    write_text(&out.join("trace.csv"), &table)?;

    let alarm_count = rec.alarms.iter().filter(|&&a| a).count();
    println!(
        "simulate: trial 0 over {} steps: trigger level {}, {} trigger events, \
         {} alarms at tau {}",
        rec.horizon, rec.trigger_level, rec.trigger_count, alarm_count, r.detector.tau
    );
    println!("simulate: wrote trace.csv under {}", out.display());
    Ok(())
}

/// Alarm thresholds swept when the config leaves `tau_sweep` empty: the
/// observed score range, sampled at evenly spaced quantiles.
fn derived_taus(roc: &DetectorRoc) -> Vec<f64> {
    let mut scores: Vec<f64> = roc
        .h0_scores
        .iter()
        .chain(&roc.h1_scores)
        .copied()
        .filter(|s| s.is_finite())
        .collect();
    scores.sort_by(f64::total_cmp);
    if scores.is_empty() {
        return Vec::new();
    }
    let last = scores.len() - 1;
    let mut taus: Vec<f64> = (0..DERIVED_TAU_POINTS)
        .map(|i| scores[(i * last) / (DERIVED_TAU_POINTS - 1).max(1)])
        .collect();
    taus.push(scores[last] + 1.0);
    taus.dedup();
    taus
}

/// Sweep thresholds over paired clean/attacked trials; write
/// `roc.csv` and print each detector's ranking quality.
pub fn cmd_roc(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let r = cfg.resolve()?;
    if let Some(line) = &r.design_summary {
        println!("roc: {line}");
    }
    let exp = build_experiment(cfg, &r)?;
    let rocs = run_roc(&exp, &r.attack, cfg.experiment.trials, &r.tau_sweep)?;

    let mut table = String::from("detector,tau,fpr,tpr\n");
    for roc in &rocs {
        if r.tau_sweep.is_empty() {
            for tau in derived_taus(roc) {
                let frac = |scores: &[f64]| {
                    scores.iter().filter(|&&s| s < tau).count() as f64 / scores.len() as f64
                };
                writeln!(
                    table,
                    "{},{},{},{}",
                    roc.detector,
                    tau,
                    frac(&roc.h0_scores),
                    frac(&roc.h1_scores)
                )
                .expect("write to string");
            }
        } else {
            for pt in &roc.points {
                writeln!(table, "{},{},{},{}", pt.detector, pt.tau, pt.fpr, pt.tpr)
                    .expect("write to string");
            }
        }
        println!(
            "roc: {} separates attacked from clean with probability {} \
             over {} paired trials",
            roc.detector, roc.auc, cfg.experiment.trials
        );
    }
    write_text(&out.join("roc.csv"), &table)?;
    println!("roc: wrote roc.csv under {}", out.display());
    Ok(())
}

/// Measure detection delay per trial and threshold; write `ttd.csv`.
pub fn cmd_ttd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let r = cfg.resolve()?;
    if let Some(line) = &r.design_summary {
        println!("ttd: {line}");
    }
    let exp = build_experiment(cfg, &r)?;
    let taus = if r.tau_sweep.is_empty() {
        vec![r.detector.tau]
    } else {
        r.tau_sweep.clone()
    };
    let records = run_time_to_detection(&exp, &r.attack, cfg.experiment.trials, &taus)?;

    let mut table = String::from("detector,tau,trial,delay,detected\n");
    for rec in &records {
        writeln!(
            table,
            "{},{},{},{},{}",
            rec.detector,
            rec.tau,
            rec.trial,
            rec.delay.map(|d| d.to_string()).unwrap_or_default(),
            bool_cell(rec.detected())
        )
        .expect("write to string");
    }
    write_text(&out.join("ttd.csv"), &table)?;

    // Records arrive grouped detector-major, threshold-minor.
    for group in records.chunks(cfg.experiment.trials as usize) {
        let detected: Vec<usize> = group.iter().filter_map(|rec| rec.delay).collect();
        let rate = detected.len() as f64 / group.len() as f64;
        let mean = if detected.is_empty() {
            "no detections".to_string()
        } else {
            format!(
                "mean delay {:.1} steps",
                detected.iter().sum::<usize>() as f64 / detected.len() as f64
            )
        };
        println!(
            "ttd: {} at tau {}: detection rate {:.3}, {}",
            group[0].detector, group[0].tau, rate, mean
        );
    }
    println!("ttd: wrote ttd.csv under {}", out.display());
    Ok(())
}

/// Compare both detectors before and after the attack and write the
/// across-trial average statistic traces to `trace.csv`.
pub fn cmd_fault(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let r = cfg.resolve()?;
    if let Some(line) = &r.design_summary {
        println!("fault: {line}");
    }
    let exp = build_experiment(cfg, &r)?;
    let start = cfg.experiment.attack.start;
    let horizon = cfg.experiment.horizon;
    let settle = (2 * r.detector.window.max(1))
        .min(start.saturating_sub(1))
        .min(horizon.saturating_sub(start + 1));
    let summary = run_fault_demo(&exp, &r.attack, cfg.experiment.trials, settle)?;

    for (kind, shift) in [("correlation", &summary.corr), ("chi_square", &summary.chi2)] {
        println!(
            "fault: {} statistic moves {:+.4} ({:.4} se): {:.4} over steps {}..{} \
             to {:.4} over {}..{}",
            kind,
            shift.shift(),
            shift.shift_se(),
            shift.pre_mean,
            summary.pre.0,
            summary.pre.1,
            shift.post_mean,
            summary.post.0,
            summary.post.1
        );
    }

    let mut corr_sum = vec![0.0; horizon];
    let mut corr_n = vec![0usize; horizon];
    let mut chi2_sum = vec![0.0; horizon];
    let mut chi2_n = vec![0usize; horizon];
    let mut trig = vec![0usize; horizon];
    for trial in 0..cfg.experiment.trials {
        let rec = simulate(&exp, &r.attack, trial)?;
        for k in 0..horizon {
            if let Some(s) = rec.stat_corr[k] {
                corr_sum[k] += s;
                corr_n[k] += 1;
            }
            if let Some(s) = rec.stat_chi2[k] {
                chi2_sum[k] += s;
                chi2_n[k] += 1;
            }
            if rec.triggered[k] {
                trig[k] += 1;
            }
        }
    }
    let mean_cell = |sum: f64, n: usize| {
        if n == 0 {
            String::new()
        } else {
            (sum / n as f64).to_string()
        }
    };
    let mut table = String::from("k,stat_corr,stat_chi2,triggered\n");
    for k in 0..horizon {
        writeln!(
            table,
            "{},{},{},{}",
            k,
            mean_cell(corr_sum[k], corr_n[k]),
            mean_cell(chi2_sum[k], chi2_n[k]),
            trig[k] as f64 / cfg.experiment.trials as f64
        )
        .expect("write to string");
    }
    write_text(&out.join("trace.csv"), &table)?;
    println!(
        "fault: wrote across-trial average traces ({} trials) to trace.csv under {}",
        cfg.experiment.trials,
        out.display()
    );
    Ok(())
}
