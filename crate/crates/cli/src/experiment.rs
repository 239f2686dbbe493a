//! Runs the benchmark modes over drops and sweep points.

use std::collections::BTreeMap;
use std::time::Instant;

use lsfd_core::channel::Estimator;
use lsfd_core::optimizer::{run_single_layer, run_two_layer, run_wmmse, LsfdPolicy, OptimizationResult};
use lsfd_core::rng::{self, purpose};
use lsfd_core::scenario::{build_drop, scenario_statistics, NetworkConfig, ScenarioStatistics};
use lsfd_core::se::{
    coefficients, general_expectations_mc, general_optimal_lsfd, optimal_lsfd, random_sqrt_powers, se_report,
    sinr_closed_form, Combiner, CorrMode, LsfdMatrix, SeCoefficients,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::spec::{ExperimentSpec, Mode};

/// Sum SE of one cell for one drop and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub mode: Mode,
    pub estimator: Estimator,
    pub combiner: Combiner,
    pub drop: usize,
    pub cell: usize,
    /// bit/s/Hz summed over the users of `cell`.
    pub sum_se: f64,
    pub per_user_se: Vec<f64>,
    /// WMMSE iterations; 0 for fixed-power modes.
    pub iterations: usize,
    pub wall_time_s: f64,
}

/// Per-iteration sum SE per cell of an optimized mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sweep_value: f64,
    pub mode: Mode,
    pub estimator: Estimator,
    pub drop: usize,
    pub iteration: usize,
    pub sum_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub spec: ExperimentSpec,
    pub rows: Vec<ResultRow>,
    pub traces: Vec<TraceRow>,
}

/// Mean over drops of the mean per-cell sum SE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep_value: f64,
    pub mode: Mode,
    pub mean_sum_se: f64,
    pub n_drops: usize,
}

impl ExperimentResults {
    pub fn summary(&self) -> Vec<SummaryRow> {
        // keyed by sweep position so the output follows the spec order
        let points = self.spec.sweep.points();
        let mut acc: BTreeMap<(usize, Mode), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
        for r in &self.rows {
            let pos = points.iter().position(|&v| v == r.sweep_value).unwrap_or(usize::MAX);
            let cell = acc.entry((pos, r.mode)).or_default().entry(r.drop).or_insert((0.0, 0));
            cell.0 += r.sum_se;
            cell.1 += 1;
        }
        acc.into_iter()
            .map(|((pos, mode), drops)| {
                let n = drops.len();
                let mean = drops.values().map(|(s, c)| s / *c as f64).sum::<f64>() / n as f64;
                SummaryRow {
                    sweep_value: points.get(pos).copied().unwrap_or(f64::NAN),
                    mode,
                    mean_sum_se: mean,
                    n_drops: n,
                }
            })
            .collect()
    }

    pub fn mean_sum_se(&self, sweep_value: f64, mode: Mode) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.sweep_value == sweep_value && s.mode == mode)
            .map(|s| s.mean_sum_se)
    }

    /// Percent gain of `mode` over `baseline` on mean sum SE.
    pub fn gain_percent(&self, sweep_value: f64, mode: Mode, baseline: Mode) -> Option<f64> {
        let a = self.mean_sum_se(sweep_value, mode)?;
        let b = self.mean_sum_se(sweep_value, baseline)?;
        Some(100.0 * (a - b) / b)
    }
}

#[derive(Debug, Default)]
struct DropOutcome {
    rows: Vec<ResultRow>,
    traces: Vec<TraceRow>,
}

/// Large-scale statistics of drop `drop` under `cfg`.
pub fn drop_statistics(cfg: &NetworkConfig, drop: usize) -> CliResult<ScenarioStatistics> {
    let mut geo = rng::stream(cfg.seed, &[purpose::GEOMETRY, drop as u64]);
    let user_drop = build_drop(cfg, &mut geo)?;
    Ok(scenario_statistics(cfg, &user_drop)?)
}

/// Random feasible starting point for the power optimizers of drop `drop`.
pub fn initial_sqrt_powers(cfg: &NetworkConfig, drop: usize) -> Vec<f64> {
    let n = cfg.cells * cfg.users_per_cell;
    let mut r = rng::stream(cfg.seed, &[purpose::POWER_INIT, drop as u64]);
    random_sqrt_powers(&vec![cfg.max_power_w; n], &mut r)
}

pub fn run_experiment(spec: &ExperimentSpec) -> CliResult<ExperimentResults> {
    spec.validate()?;
    let points = spec.sweep.points();
    let drops = spec.drop_indices();
    let jobs: Vec<(f64, usize)> = points.iter().flat_map(|&v| drops.iter().map(move |&d| (v, d))).collect();
    let outcomes: Vec<CliResult<DropOutcome>> = jobs.par_iter().map(|&(v, d)| run_drop(spec, v, d)).collect();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for o in outcomes {
        let o = o?;
        rows.extend(o.rows);
        traces.extend(o.traces);
    }
    Ok(ExperimentResults {
        spec: spec.clone(),
        rows,
        traces,
    })
}

struct DropContext<'a> {
    spec: &'a ExperimentSpec,
    cfg: NetworkConfig,
    sweep_value: f64,
    drop: usize,
}

impl DropContext<'_> {
    fn push_rows(&self, out: &mut DropOutcome, mode: Mode, per_user: &[f64], iterations: usize, secs: f64) {
        let k = self.cfg.users_per_cell;
        for cell in 0..self.cfg.cells {
            let users = per_user[cell * k..(cell + 1) * k].to_vec();
            out.rows.push(ResultRow {
                sweep_value: self.sweep_value,
                mode,
                estimator: self.spec.estimator,
                combiner: self.spec.combiner,
                drop: self.drop,
                cell,
                sum_se: users.iter().sum(),
                per_user_se: users,
                iterations,
                wall_time_s: secs,
            });
        }
    }

    fn push_trace(&self, out: &mut DropOutcome, mode: Mode, result: &OptimizationResult) {
        if !self.spec.record_trace {
            return;
        }
        for (i, &s) in result.trace.sum_se.iter().enumerate() {
            out.traces.push(TraceRow {
                sweep_value: self.sweep_value,
                mode,
                estimator: self.spec.estimator,
                drop: self.drop,
                iteration: i,
                sum_se: s / self.cfg.cells as f64,
            });
        }
    }
}

fn run_drop(spec: &ExperimentSpec, sweep_value: f64, drop: usize) -> CliResult<DropOutcome> {
    let cfg = spec.network_at(sweep_value)?;
    let ctx = DropContext {
        spec,
        cfg,
        sweep_value,
        drop,
    };
    let cfg = &ctx.cfg;
    let stats = drop_statistics(cfg, drop)?;
    let n = cfg.cells * cfg.users_per_cell;
    let pilot = vec![cfg.pilot_power_w; n];
    let max_powers = vec![cfg.max_power_w; n];
    let (tau_p, tau_c) = (cfg.pilot_length(), cfg.coherence_length);
    let mut out = DropOutcome::default();
    let clock = |start: Instant| if spec.record_timing { start.elapsed().as_secs_f64() } else { 0.0 };

    if spec.combiner != Combiner::Mrc {
        let start = Instant::now();
        let seed = rng::derive_seed(cfg.seed, &[purpose::SMALL_SCALE, drop as u64]);
        let model =
            general_expectations_mc(&stats, spec.estimator, spec.combiner, &pilot, &max_powers, spec.n_small_scale, seed)?;
        let shared = clock(start);
        for &mode in &spec.modes {
            let start = Instant::now();
            let report = match mode {
                Mode::SingleFixed => {
                    let sinr = model.sinr(&LsfdMatrix::single_layer(cfg.cells, cfg.users_per_cell))?;
                    se_report(&sinr, cfg.users_per_cell, tau_p, tau_c)?
                }
                _ => general_optimal_lsfd(&model, tau_p, tau_c)?.1,
            };
            ctx.push_rows(&mut out, mode, &report.se, 0, shared + clock(start));
        }
        return Ok(out);
    }

    let start = Instant::now();
    let coeffs = coefficients(&stats, &pilot, spec.estimator, CorrMode::Full)?;
    let approx: Option<SeCoefficients> = if spec.modes.iter().any(|m| m.needs_diagonal_approx()) {
        Some(coefficients(&stats, &pilot, spec.estimator, CorrMode::DiagonalApprox)?)
    } else {
        None
    };
    let shared = clock(start);
    let rho0 = initial_sqrt_powers(cfg, drop);
    let prelog = cfg.prelog();
    let opts = &spec.convergence;

    for &mode in &spec.modes {
        let start = Instant::now();
        let fixed = |lsfd: &LsfdMatrix| -> CliResult<Vec<f64>> {
            let sinr = sinr_closed_form(&coeffs, &max_powers, lsfd)?;
            Ok(se_report(&sinr, cfg.users_per_cell, tau_p, tau_c)?.se)
        };
        let (per_user, iterations) = match mode {
            Mode::SingleFixed => (fixed(&LsfdMatrix::single_layer(cfg.cells, cfg.users_per_cell))?, 0),
            Mode::LsfdFixed => (fixed(&optimal_lsfd(&coeffs, &max_powers)?)?, 0),
            Mode::ApproxLsfdFixed => {
                let approx = approx.as_ref().expect("approximate coefficients computed");
                (fixed(&optimal_lsfd(approx, &max_powers)?)?, 0)
            }
            Mode::SingleOptimized | Mode::LsfdOptimized | Mode::ApproxLsfdOptimized => {
                let result = match mode {
                    Mode::SingleOptimized => run_single_layer(&coeffs, &max_powers, &rho0, prelog, opts)?,
                    Mode::LsfdOptimized => run_two_layer(&coeffs, &max_powers, &rho0, prelog, opts)?,
                    _ => {
                        let approx = approx.as_ref().expect("approximate coefficients computed");
                        run_wmmse(&coeffs, &max_powers, &rho0, prelog, opts, LsfdPolicy::Approximate(approx))?
                    }
                };
                ctx.push_trace(&mut out, mode, &result);
                (result.trace.per_user_se, result.trace.iterations)
            }
        };
        ctx.push_rows(&mut out, mode, &per_user, iterations, shared + clock(start));
    }
    Ok(out)
}
