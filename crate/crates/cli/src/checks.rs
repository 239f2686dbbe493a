//! The numbered verification suite behind `lsfd verify`.

use std::fmt;
use std::time::Instant;

use lsfd_core::channel::{Estimator, Simulator};
use lsfd_core::linalg::CMatrix;
use lsfd_core::optimizer::{
    arithmetic_op_count, idempotence_defect, iterate, run_two_layer, stationarity_defect, sum_se, ConvergenceOptions,
    LsfdPolicy, Termination,
};
use lsfd_core::rng::{self, complex_normal, purpose};
use lsfd_core::scenario::{NetworkConfig, ScenarioStatistics};
use lsfd_core::se::{
    coefficients, optimal_lsfd, optimal_sinr, sinr_closed_form, sinr_terms, Combiner, CorrMode,
    LsfdMatrix, SeCoefficients,
};
use lsfd_core::verify::{gaussian_quartic_check, mc_sinr, toy_example_check};
use lsfd_core::C64;
use nalgebra::Matrix2;
use rand::Rng;

use crate::error::{CliError, CliResult};
use crate::experiment::{drop_statistics, initial_sqrt_powers, run_experiment, ExperimentResults};
use crate::presets::{preset_specs, Preset, Scale};
use crate::spec::{ExperimentSpec, Mode, Sweep, SweepParameter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl std::str::FromStr for Level {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quick" => Ok(Level::Quick),
            "full" => Ok(Level::Full),
            _ => Err(CliError::Usage(format!("unknown verification level {s:?}; use quick or full"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {} {}: {} [{:.1} s]",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub const CHECK_NAMES: [&str; 10] = [
    "oracle equivalence",
    "LSFD optimality",
    "estimator coincidence",
    "optimizer monotonicity and convergence",
    "two-layer dominance",
    "desk-scale trends",
    "RZF versus MRC",
    "Gaussian quartic moment",
    "operation count",
    "toy decoupling",
];

const SEED: u64 = 0;

/// Run one criterion (1-based id).
pub fn run_check(id: u8, level: Level) -> CliResult<CheckOutcome> {
    let start = Instant::now();
    let (passed, detail) = match id {
        1 => oracle_equivalence(level)?,
        2 => lsfd_optimality(level)?,
        3 => estimator_coincidence()?,
        4 => optimizer_convergence(level)?,
        5 => dominance(level)?,
        6 => desk_trends(level)?,
        7 => rzf_versus_mrc(level)?,
        8 => quartic_moment(level)?,
        9 => operation_count(),
        10 => toy_decoupling()?,
        _ => return Err(CliError::Usage(format!("no criterion {id}"))),
    };
    Ok(CheckOutcome {
        id,
        name: CHECK_NAMES[id as usize - 1],
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn verify_suite(level: Level) -> CliResult<Vec<CheckOutcome>> {
    (1..=10).map(|id| run_check(id, level)).collect()
}

fn small_config(corr: f64, seed: u64) -> NetworkConfig {
    NetworkConfig {
        cells: 4,
        users_per_cell: 2,
        antennas: 16,
        corr_magnitude: corr,
        seed,
        ..NetworkConfig::default()
    }
}

struct SmallScenario {
    cfg: NetworkConfig,
    stats: ScenarioStatistics,
    powers: Vec<f64>,
}

/// The random scenarios shared by criteria 1, 2 and 5.
fn small_scenarios(level: Level) -> CliResult<Vec<SmallScenario>> {
    let n = if level == Level::Full { 5 } else { 3 };
    let corrs = [0.0, 0.5, 0.8];
    (0..n)
        .map(|s| {
            let cfg = small_config(corrs[s % 3], SEED + s as u64);
            let stats = drop_statistics(&cfg, s)?;
            let powers = initial_sqrt_powers(&cfg, s).iter().map(|r| r * r).collect();
            Ok(SmallScenario { cfg, stats, powers })
        })
        .collect()
}

fn pilot_powers(cfg: &NetworkConfig) -> Vec<f64> {
    vec![cfg.pilot_power_w; cfg.cells * cfg.users_per_cell]
}

const ESTIMATORS: [Estimator; 2] = [Estimator::Mmse, Estimator::EwMmse];

fn oracle_equivalence(level: Level) -> CliResult<(bool, String)> {
    let n = if level == Level::Full { 200_000 } else { 20_000 };
    let mut worst_z = 0.0_f64;
    let mut worst_rel = 0.0_f64;
    let mut count = 0;
    for (s, sc) in small_scenarios(level)?.iter().enumerate() {
        let pilot = pilot_powers(&sc.cfg);
        for (e, &est) in ESTIMATORS.iter().enumerate() {
            let coeffs = coefficients(&sc.stats, &pilot, est, CorrMode::Full)?;
            let lsfd = optimal_lsfd(&coeffs, &sc.powers)?;
            let closed = sinr_closed_form(&coeffs, &sc.powers, &lsfd)?;
            let seed = rng::derive_seed(SEED, &[purpose::SMALL_SCALE, s as u64, e as u64]);
            let mc = mc_sinr(&sc.stats, est, Combiner::Mrc, &lsfd, &sc.powers, &pilot, n, seed)?;
            for (c, m) in closed.iter().zip(&mc) {
                worst_z = worst_z.max((c - m.sinr).abs() / m.sinr_std_error);
                worst_rel = worst_rel.max((c - m.sinr).abs() / c.abs());
                count += 1;
            }
        }
    }
    Ok((
        worst_z <= 3.0 && worst_rel <= 0.05,
        format!("{count} users, {n} realizations; max |z| {worst_z:.2} (<= 3), max rel {worst_rel:.2e} (<= 5e-2)"),
    ))
}

fn sinr_of(coeffs: &SeCoefficients, powers: &[f64], l: usize, k: usize, a: &lsfd_core::linalg::CVector) -> f64 {
    let (num, den) = sinr_terms(coeffs, powers, l, k, a);
    num / den
}

fn lsfd_optimality(level: Level) -> CliResult<(bool, String)> {
    let trials = if level == Level::Full { 1000 } else { 100 };
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    for (s, sc) in small_scenarios(level)?.iter().enumerate() {
        let pilot = pilot_powers(&sc.cfg);
        for &est in &ESTIMATORS {
            let coeffs = coefficients(&sc.stats, &pilot, est, CorrMode::Full)?;
            let lsfd = optimal_lsfd(&coeffs, &sc.powers)?;
            let mut r = rng::stream(SEED, &[99, s as u64]);
            for l in 0..sc.cfg.cells {
                for k in 0..sc.cfg.users_per_cell {
                    let a = lsfd.get(l, k);
                    let best = sinr_of(&coeffs, &sc.powers, l, k, a);
                    for t in 0..trials {
                        // perturbation sizes from 1e-6 to 1 relative to |a|
                        let scale = a.norm() * 10f64.powi(-(t % 7));
                        let d = lsfd_core::linalg::CVector::from_fn(a.len(), |_, _| complex_normal(&mut r, 1.0));
                        let probe = a + d * C64::from(scale);
                        let v = sinr_of(&coeffs, &sc.powers, l, k, &probe);
                        worst = worst.max((v - best) / best);
                        count += 1;
                    }
                }
            }
        }
    }
    Ok((worst <= 1e-10, format!("{count} perturbations; max relative SINR gain {worst:.2e} (<= 1e-10)")))
}

fn max_rel(a: impl Iterator<Item = (f64, f64)>) -> f64 {
    a.map(|(x, y)| {
        let s = x.abs().max(y.abs());
        if s == 0.0 {
            0.0
        } else {
            (x - y).abs() / s
        }
    })
    .fold(0.0, f64::max)
}

fn estimator_coincidence() -> CliResult<(bool, String)> {
    let cfg = small_config(0.0, SEED);
    let stats = drop_statistics(&cfg, 0)?;
    let pilot = pilot_powers(&cfg);
    let mmse = coefficients(&stats, &pilot, Estimator::Mmse, CorrMode::Full)?;
    let ew = coefficients(&stats, &pilot, Estimator::EwMmse, CorrMode::Full)?;
    let coeff_rel = max_rel(
        mmse.b
            .iter()
            .zip(&ew.b)
            .flat_map(|(x, y)| [(x.re, y.re), (x.im, y.im)])
            .chain(mmse.c.iter().cloned().zip(ew.c.iter().cloned()))
            .chain(mmse.d.iter().cloned().zip(ew.d.iter().cloned())),
    );
    let sim = Simulator::new(&stats, &pilot, Estimator::Mmse)?;
    let mut r = rng::stream(SEED, &[purpose::SMALL_SCALE, 3]);
    let mut est_rel = 0.0_f64;
    for _ in 0..20 {
        let draw = sim.draw(&mut r);
        for bs in 0..cfg.cells {
            for k in 0..cfg.users_per_cell {
                let y = draw.pilots.get(bs, k);
                for l in 0..cfg.cells {
                    let a = sim.model.estimate(Estimator::Mmse, y, l, k, bs);
                    let b = sim.model.estimate(Estimator::EwMmse, y, l, k, bs);
                    est_rel = est_rel.max((&a - &b).norm() / a.norm().max(b.norm()));
                }
            }
        }
    }
    Ok((
        coeff_rel <= 1e-12 && est_rel <= 1e-12,
        format!("coefficients max rel {coeff_rel:.2e}, estimates max rel {est_rel:.2e} (<= 1e-12)"),
    ))
}

fn desk_config(seed: u64) -> NetworkConfig {
    NetworkConfig {
        antennas: 100,
        corr_magnitude: 0.5,
        seed,
        ..NetworkConfig::default()
    }
}

/// Extra sweeps allowed after the stopping rule fires while waiting for the
/// iterates to settle to a fixed point.
const SETTLE_LIMIT: usize = 5000;

fn optimizer_convergence(level: Level) -> CliResult<(bool, String)> {
    let n = if level == Level::Full { 20 } else { 3 };
    let opts = ConvergenceOptions {
        epsilon: 1e-3,
        max_iter: 500,
        record_trace: true,
    };
    let mut monotone = true;
    let mut worst_drop = 0.0_f64;
    let mut eps_iters = Vec::new();
    let mut defect_at_eps = 0.0_f64;
    let mut settle = 0usize;
    let mut final_defect = 0.0_f64;
    let mut stationarity = 0.0_f64;
    let mut all_eps = true;
    for s in 0..n {
        let cfg = desk_config(SEED + 100 + s as u64);
        let stats = drop_statistics(&cfg, s)?;
        let nu = cfg.cells * cfg.users_per_cell;
        let pilot = pilot_powers(&cfg);
        let max_powers = vec![cfg.max_power_w; nu];
        let coeffs = coefficients(&stats, &pilot, Estimator::Mmse, CorrMode::Full)?;
        let rho0 = initial_sqrt_powers(&cfg, s);
        let res = run_two_layer(&coeffs, &max_powers, &rho0, cfg.prelog(), &opts)?;
        all_eps &= res.trace.terminated_by == Termination::Epsilon;
        eps_iters.push(res.trace.iterations);
        let mut trace = res.trace.sum_se.clone();
        let mut state = res.state;
        let policy = LsfdPolicy::Optimized;
        let mut defect = idempotence_defect(&state, &coeffs, &max_powers, policy)?;
        defect_at_eps = defect_at_eps.max(defect);
        let mut extra = 0;
        while defect > 1e-8 && extra < SETTLE_LIMIT {
            iterate(&mut state, &coeffs, &max_powers, policy)?;
            let (_, se) = sum_se(&coeffs, &state.powers(), &state.lsfd(cfg.cells, cfg.users_per_cell), cfg.prelog())?;
            trace.push(se);
            defect = idempotence_defect(&state, &coeffs, &max_powers, policy)?;
            extra += 1;
        }
        settle = settle.max(extra);
        final_defect = final_defect.max(defect);
        for w in trace.windows(2) {
            let fall = w[0] - w[1];
            worst_drop = worst_drop.max(fall);
            monotone &= fall <= 1e-9;
        }
        stationarity = stationarity.max(stationarity_defect(&state, &coeffs, &max_powers));
    }
    let passed = monotone && all_eps && final_defect <= 1e-8 && stationarity <= 1e-5;
    Ok((
        passed,
        format!(
            "{n} scenarios; largest SE decrease {worst_drop:.1e} (<= 1e-9); stopping rule met in {}..{} iterations (<= 500); \
             fixed-point defect {defect_at_eps:.1e} at stop, {final_defect:.1e} after <= {settle} more sweeps (<= 1e-8); \
             stationarity {stationarity:.1e} (<= 1e-5)",
            eps_iters.iter().min().unwrap_or(&0),
            eps_iters.iter().max().unwrap_or(&0),
        ),
    ))
}

fn dominance(level: Level) -> CliResult<(bool, String)> {
    let mut worst = f64::INFINITY;
    let mut count = 0;
    let mut cases: Vec<(NetworkConfig, ScenarioStatistics, Vec<f64>)> = small_scenarios(level)?
        .into_iter()
        .map(|s| (s.cfg, s.stats, s.powers))
        .collect();
    let n_desk = if level == Level::Full { 5 } else { 1 };
    for s in 0..n_desk {
        let cfg = desk_config(SEED + 100 + s as u64);
        let stats = drop_statistics(&cfg, s)?;
        let powers = initial_sqrt_powers(&cfg, s).iter().map(|r| r * r).collect();
        cases.push((cfg, stats, powers));
    }
    for (cfg, stats, powers) in &cases {
        let pilot = pilot_powers(cfg);
        let full = vec![cfg.max_power_w; powers.len()];
        for &est in &ESTIMATORS {
            let coeffs = coefficients(stats, &pilot, est, CorrMode::Full)?;
            for p in [powers, &full] {
                let two = optimal_sinr(&coeffs, p)?;
                let one = sinr_closed_form(&coeffs, p, &LsfdMatrix::single_layer(cfg.cells, cfg.users_per_cell))?;
                for (a, b) in two.iter().zip(&one) {
                    let gap = cfg.prelog() * ((1.0 + a).log2() - (1.0 + b).log2());
                    worst = worst.min(gap);
                    count += 1;
                }
            }
        }
    }
    Ok((worst >= -1e-12, format!("{count} users; min per-user SE gain {worst:.2e} (>= -1e-12)")))
}

fn trend_spec(estimator: Estimator, level: Level) -> ExperimentSpec {
    let full = level == Level::Full;
    ExperimentSpec {
        name: format!("trend_{estimator}"),
        network: NetworkConfig {
            corr_magnitude: 0.5,
            seed: SEED,
            ..NetworkConfig::default()
        },
        estimator,
        combiner: Combiner::Mrc,
        modes: vec![Mode::SingleOptimized, Mode::LsfdFixed, Mode::LsfdOptimized],
        sweep: Sweep {
            parameter: SweepParameter::Antennas,
            values: if full { vec![100.0, 150.0, 200.0] } else { vec![100.0] },
        },
        n_drops: if full { 50 } else { 8 },
        n_small_scale: 100,
        convergence: ConvergenceOptions {
            record_trace: false,
            ..ConvergenceOptions::default()
        },
        record_trace: false,
        record_timing: false,
        drops: None,
        output_path: None,
    }
}

fn range(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn gains(res: &ExperimentResults, mode: Mode, base: Mode) -> Vec<f64> {
    res.spec.sweep.points().iter().filter_map(|&v| res.gain_percent(v, mode, base)).collect()
}

fn desk_trends(level: Level) -> CliResult<(bool, String)> {
    let mmse = run_experiment(&trend_spec(Estimator::Mmse, level))?;
    let ew = run_experiment(&trend_spec(Estimator::EwMmse, level))?;
    let lsfd_gain = range(&gains(&mmse, Mode::LsfdOptimized, Mode::SingleOptimized));
    let pc_gain = range(&gains(&mmse, Mode::LsfdOptimized, Mode::LsfdFixed));
    let mut gaps = Vec::new();
    let mut per_mode = Vec::new();
    for mode in [Mode::SingleOptimized, Mode::LsfdFixed, Mode::LsfdOptimized] {
        let mode_gaps: Vec<f64> = mmse
            .spec
            .sweep
            .points()
            .iter()
            .filter_map(|&v| Some(100.0 * (mmse.mean_sum_se(v, mode)? / ew.mean_sum_se(v, mode)? - 1.0)))
            .collect();
        let (lo, hi) = range(&mode_gaps);
        per_mode.push(format!("({mode}) {lo:.1}..{hi:.1}%"));
        gaps.extend(mode_gaps);
    }
    let gap = range(&gaps);
    let ok_a = lsfd_gain.0 >= 2.0 && lsfd_gain.1 <= 12.0;
    let ok_b = pc_gain.0 >= 10.0 && pc_gain.1 <= 30.0;
    let ok_c = gap.0 >= 0.0 && gap.1 <= 15.0;
    Ok((
        ok_a && ok_b && ok_c,
        format!(
            "M {:?}, {} drops; (a) (v) over (ii) {:.1}..{:.1}% in [2, 12] {}; (b) (v) over (iii) {:.1}..{:.1}% in [10, 30] {}; \
             (c) MMSE over EW-MMSE {} in [0, 15] {}",
            mmse.spec.sweep.values,
            mmse.spec.n_drops,
            lsfd_gain.0,
            lsfd_gain.1,
            ok_flag(ok_a),
            pc_gain.0,
            pc_gain.1,
            ok_flag(ok_b),
            per_mode.join(", "),
            ok_flag(ok_c)
        ),
    ))
}

fn ok_flag(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "out of range"
    }
}

fn rzf_versus_mrc(level: Level) -> CliResult<(bool, String)> {
    let mut specs = preset_specs(Preset::Fig10, Scale::Desk);
    if level == Level::Quick {
        for s in &mut specs {
            s.n_drops = 8;
            s.n_small_scale = 200;
        }
    }
    let mrc = run_experiment(&specs[0])?;
    let rzf = run_experiment(&specs[1])?;
    let get = |r: &ExperimentResults, m| r.mean_sum_se(0.0, m).unwrap_or(f64::NAN);
    let (m1, m3) = (get(&mrc, Mode::SingleFixed), get(&mrc, Mode::LsfdFixed));
    let (r1, r3) = (get(&rzf, Mode::SingleFixed), get(&rzf, Mode::LsfdFixed));
    let over1 = 100.0 * (r1 - m1) / m1;
    let over3 = 100.0 * (r3 - m3) / m3;
    let layer_mrc = 100.0 * (m3 - m1) / m1;
    let layer_rzf = 100.0 * (r3 - r1) / r1;
    let passed = over1 >= 30.0 && over3 >= 30.0 && layer_rzf > layer_mrc;
    Ok((
        passed,
        format!(
            "M {}, {} drops, {} realizations; RZF over MRC {over1:.1}% single-layer, {over3:.1}% two-layer (>= 30); \
             second-layer gain {layer_rzf:.2}% RZF vs {layer_mrc:.2}% MRC",
            specs[1].network.antennas, specs[1].n_drops, specs[1].n_small_scale
        ),
    ))
}

fn random_hermitian_psd<R: Rng>(dim: usize, r: &mut R) -> CMatrix {
    let g = CMatrix::from_fn(dim, dim, |_, _| complex_normal(r, 1.0));
    &g * g.adjoint() / C64::from(dim as f64)
}

fn quartic_moment(level: Level) -> CliResult<(bool, String)> {
    let (n, tol) = if level == Level::Full { (1_000_000, 0.01) } else { (100_000, 0.03) };
    let mut r = rng::stream(SEED, &[8]);
    let mut worst = 0.0_f64;
    for (i, dim) in [2usize, 8, 16].into_iter().enumerate() {
        let lambda = random_hermitian_psd(dim, &mut r);
        let mmat = CMatrix::from_fn(dim, dim, |_, _| complex_normal(&mut r, 1.0));
        let check = gaussian_quartic_check(&lambda, &mmat, n, rng::derive_seed(SEED, &[8, i as u64]))?;
        worst = worst.max(check.relative_error());
    }
    let mut identity_ok = true;
    for dim in [2usize, 8, 16] {
        let eye = CMatrix::identity(dim, dim);
        let check = gaussian_quartic_check(&eye, &eye, 1000, SEED)?;
        let m = dim as f64;
        identity_ok &= check.exact_value == m * m + m;
    }
    Ok((
        worst <= tol && identity_ok,
        format!(
            "dims 2, 8, 16 at {n} samples; max rel error {worst:.2e} (<= {tol}); identity case M^2+M {}",
            if identity_ok { "exact" } else { "wrong" }
        ),
    ))
}

/// Term-by-term operation count evaluated in floating point.
fn op_count_oracle(l: f64, k: f64, n: f64) -> f64 {
    let per_iter = 11.0 * l.powi(3) * k * k
        + 6.0 * l.powi(3) * k
        + l * l * k * (l * l + 53.0) / 3.0
        + 3.0 * l * l * k * k
        + 16.0 * l * k
        + 2.0;
    n * per_iter
}

fn operation_count() -> (bool, String) {
    let base = arithmetic_op_count(4, 5, 1);
    let mut ok = base == 22_882;
    for (l, k) in [(1u64, 1u64), (2, 3), (4, 5), (7, 10)] {
        let one = arithmetic_op_count(l, k, 1);
        ok &= one as f64 == op_count_oracle(l as f64, k as f64, 1.0);
        for n in [2u64, 10, 100] {
            ok &= arithmetic_op_count(l, k, n) == n as u128 * one;
        }
    }
    (ok, format!("(L, K, N) = (4, 5, 1) gives {base} (expect 22882); linear in N"))
}

fn toy_decoupling() -> CliResult<(bool, String)> {
    let mut r = rng::stream(SEED, &[10]);
    let mut worst = 0.0_f64;
    let mut count = 0;
    while count < 1000 {
        let b = Matrix2::from_fn(|_, _| r.random_range(-1.0..1.0));
        let sv = b.singular_values();
        if sv.min() <= 0.0 || sv.max() / sv.min() > 10.0 {
            continue;
        }
        let s = [complex_normal(&mut r, 1.0), complex_normal(&mut r, 1.0)];
        worst = worst.max(toy_example_check(&b, s)?);
        count += 1;
    }
    Ok((worst <= 1e-12, format!("{count} matrices with condition <= 10; max residual {worst:.1e} (<= 1e-12)")))
}
