//! Joint data-power and LSFD design by weighted MMSE.
//!
//! Sum SE maximization is rewritten as minimizing `sum(w e - ln w)` over
//! receiver scalars `u`, weights `w`, LSFD vectors `a` and square-root powers
//! `rho`. Each block has a closed-form minimizer given the others, so cycling
//! `u -> w -> a -> rho` never increases the objective and never decreases the
//! sum SE.

use serde::{Deserialize, Serialize};

use crate::linalg::CVector;
use crate::se::{
    lsfd_matrix, optimal_lsfd, sinr_closed_form, sinr_terms, solve_hpd, LsfdMatrix, PowerAllocation, SeCoefficients,
};
use crate::{Error, Result, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceOptions {
    /// Sum SE tolerance in bit/s/Hz.
    pub epsilon: f64,
    pub max_iter: usize,
    pub record_trace: bool,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iter: 500,
            record_trace: true,
        }
    }
}

impl ConvergenceOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || self.max_iter == 0 {
            return Err(Error::Argument("need epsilon >= 0 and max_iter >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Epsilon,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    /// Sum SE of the initial point followed by one entry per iteration
    /// (only the last two entries when tracing is off).
    pub sum_se: Vec<f64>,
    pub per_user_se: Vec<f64>,
    pub iterations: usize,
    pub terminated_by: Termination,
}

/// Optimizer iterate, all per-user vectors indexed by `cell * K + user`.
#[derive(Debug, Clone, PartialEq)]
pub struct WmmseState {
    pub u: Vec<C64>,
    pub w: Vec<f64>,
    pub e: Vec<f64>,
    pub a: Vec<CVector>,
    pub rho: Vec<f64>,
    pub iteration: usize,
}

impl WmmseState {
    /// Fresh state with `u = 0`, `w = e = 1`.
    pub fn new(a: Vec<CVector>, rho: Vec<f64>) -> Self {
        let n = rho.len();
        Self {
            u: vec![C64::new(0.0, 0.0); n],
            w: vec![1.0; n],
            e: vec![1.0; n],
            a,
            rho,
            iteration: 0,
        }
    }

    pub fn powers(&self) -> Vec<f64> {
        self.rho.iter().map(|r| r * r).collect()
    }

    pub fn lsfd(&self, cells: usize, users_per_cell: usize) -> LsfdMatrix {
        LsfdMatrix {
            cells,
            users_per_cell,
            vectors: self.a.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub powers: PowerAllocation,
    pub lsfd: LsfdMatrix,
    pub trace: OptimizationTrace,
    pub state: WmmseState,
}

/// `u~_{l,k}`: received power after LSFD, signal included.
pub fn u_tilde(coeffs: &SeCoefficients, rho: &[f64], a: &CVector, l: usize, k: usize) -> f64 {
    let powers: Vec<f64> = rho.iter().map(|r| r * r).collect();
    let (num, den) = sinr_terms(coeffs, &powers, l, k, a);
    num + den
}

fn own_projection(coeffs: &SeCoefficients, a: &CVector, l: usize, k: usize) -> C64 {
    (0..coeffs.cells).map(|bs| a[bs].conj() * coeffs.b(l, k, bs)).sum()
}

/// Mean squared error `e_{l,k}` at the given `(u, a, rho)`.
fn mse_at(coeffs: &SeCoefficients, rho: &[f64], u: C64, a: &CVector, l: usize, k: usize) -> f64 {
    let i = l * coeffs.users_per_cell + k;
    let ut = u_tilde(coeffs, rho, a, l, k);
    u.norm_sqr() * ut - 2.0 * rho[i] * (u * own_projection(coeffs, a, l, k)).re + 1.0
}

/// `u = rho (b^H a) / u~`.
pub fn update_u(state: &WmmseState, coeffs: &SeCoefficients) -> Result<Vec<C64>> {
    let users = coeffs.users_per_cell;
    (0..coeffs.n_users())
        .map(|i| {
            let (l, k) = (i / users, i % users);
            let a = &state.a[i];
            let ut = u_tilde(coeffs, &state.rho, a, l, k);
            if !(ut > 0.0) {
                return Err(Error::Argument(format!("LSFD vector of user ({l}, {k}) must be nonzero")));
            }
            Ok(own_projection(coeffs, a, l, k).conj() * state.rho[i] / ut)
        })
        .collect()
}

/// `w = 1 / e` with `e` evaluated at the current `(u, a, rho)`. Returns `(e, w)`.
pub fn update_w(state: &WmmseState, coeffs: &SeCoefficients) -> Result<(Vec<f64>, Vec<f64>)> {
    let users = coeffs.users_per_cell;
    let e = (0..coeffs.n_users())
        .map(|i| {
            let (l, k) = (i / users, i % users);
            let e = mse_at(coeffs, &state.rho, state.u[i], &state.a[i], l, k);
            if e > 0.0 {
                Ok(e)
            } else {
                Err(Error::Numeric(format!("nonpositive MSE {e} for user ({l}, {k})")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let w = e.iter().map(|e| 1.0 / e).collect();
    Ok((e, w))
}

/// LSFD update. The direction is `C~^{-1} b` built from `direction` (the true
/// coefficients, or an approximation of them); the complex scale is the one
/// minimizing the MSE under the true coefficients. With exact coefficients
/// this is `a = (rho / u*) C~^{-1} b`.
///
/// Users with `u = 0` do not depend on `a`; their vector is kept.
pub fn update_a(state: &WmmseState, coeffs: &SeCoefficients, direction: &SeCoefficients) -> Result<Vec<CVector>> {
    let users = coeffs.users_per_cell;
    let powers = state.powers();
    (0..coeffs.n_users())
        .map(|i| {
            let (l, k) = (i / users, i % users);
            let u = state.u[i];
            if u.norm_sqr() == 0.0 {
                return Ok(state.a[i].clone());
            }
            let c_dir = lsfd_matrix(direction, &powers, l, k, true);
            let q = solve_hpd(&c_dir, &direction.b_vec(l, k), "LSFD update matrix")?;
            let c_true = lsfd_matrix(coeffs, &powers, l, k, true);
            let quad = q.dotc(&(&c_true * &q)).re;
            let s = q.dotc(&coeffs.b_vec(l, k));
            // rho / u* stays finite while both decay towards zero
            let alpha = (C64::new(state.rho[i], 0.0) / u.conj()) * (s / quad);
            if !(quad > 0.0) || !alpha.is_finite() || alpha.norm_sqr() == 0.0 {
                return Ok(state.a[i].clone());
            }
            Ok(q * alpha)
        })
        .collect()
}

/// Closed-form square-root power update, clamped to `[0, sqrt(P_max)]`.
pub fn update_rho(state: &WmmseState, coeffs: &SeCoefficients, max_powers: &[f64]) -> Vec<f64> {
    let (cells, users) = (coeffs.cells, coeffs.users_per_cell);
    // weighted noncoherent factor per listener: w |u|^2 sum_bs |a^bs|^2 c_{bs,k'}^{l,k}
    let wu2: Vec<f64> = (0..cells * users).map(|i| state.w[i] * state.u[i].norm_sqr()).collect();
    (0..cells * users)
        .map(|i| {
            let (l, k) = (i / users, i % users);
            let numer = state.w[i] * (state.u[i] * own_projection(coeffs, &state.a[i], l, k)).re;
            let mut denom = 0.0;
            for l_user in 0..cells {
                let j = l_user * users + k;
                let proj: C64 = (0..cells).map(|bs| state.a[j][bs].conj() * coeffs.b(l, k, bs)).sum();
                denom += wu2[j] * proj.norm_sqr();
            }
            for j in 0..cells * users {
                let k_listener = j % users;
                let leak: f64 = (0..cells)
                    .map(|bs| state.a[j][bs].norm_sqr() * coeffs.c(bs, k_listener, l, k))
                    .sum();
                denom += wu2[j] * leak;
            }
            let cap = max_powers[i].sqrt();
            let rho = if denom > 0.0 {
                numer / denom
            } else if numer > 0.0 {
                cap
            } else {
                0.0
            };
            rho.clamp(0.0, cap)
        })
        .collect()
}

/// `sum(w e - ln w)` with `e` evaluated at the state's `(u, a, rho)`.
pub fn wmmse_objective(state: &WmmseState, coeffs: &SeCoefficients) -> f64 {
    let users = coeffs.users_per_cell;
    (0..coeffs.n_users())
        .map(|i| {
            let e = mse_at(coeffs, &state.rho, state.u[i], &state.a[i], i / users, i % users);
            state.w[i] * e - state.w[i].ln()
        })
        .sum()
}

/// `sum(|w e| + |ln w|)`, the scale used for relative stationarity checks.
pub fn objective_scale(state: &WmmseState, coeffs: &SeCoefficients) -> f64 {
    let users = coeffs.users_per_cell;
    (0..coeffs.n_users())
        .map(|i| {
            let e = mse_at(coeffs, &state.rho, state.u[i], &state.a[i], i / users, i % users);
            (state.w[i] * e).abs() + state.w[i].ln().abs()
        })
        .sum()
}

/// Per-user SE and sum SE at a point.
pub fn sum_se(coeffs: &SeCoefficients, powers: &[f64], lsfd: &LsfdMatrix, prelog: f64) -> Result<(Vec<f64>, f64)> {
    let sinr = sinr_closed_form(coeffs, powers, lsfd)?;
    let se: Vec<f64> = sinr.iter().map(|s| prelog * (1.0 + s).log2()).collect();
    let total = se.iter().sum();
    Ok((se, total))
}

/// Stopping rule: `|sum SE(n) - sum SE(n-1)| <= epsilon`.
pub fn stopping_met(trace: &[f64], epsilon: f64) -> bool {
    match trace {
        [.., prev, last] => (last - prev).abs() <= epsilon,
        _ => false,
    }
}

/// Complex multiplications, divisions and logarithms spent by `n` iterations
/// of the two-layer algorithm with Cholesky-based LSFD updates.
pub fn arithmetic_op_count(cells: u64, users: u64, iterations: u64) -> u128 {
    let (l, k, n) = (cells as u128, users as u128, iterations as u128);
    // L^2 K (L^2 + 53) is always divisible by 3
    let per_iter = 11 * l.pow(3) * k * k
        + 6 * l.pow(3) * k
        + (l.pow(4) * k + 53 * l * l * k) / 3
        + 3 * l * l * k * k
        + 16 * l * k
        + 2;
    n * per_iter
}

/// How the LSFD block is handled by [`run_wmmse`].
#[derive(Debug, Clone, Copy)]
pub enum LsfdPolicy<'a> {
    /// `a` fixed to the own-cell indicator.
    SingleLayer,
    /// Exact block update.
    Optimized,
    /// Direction from approximate coefficients; runs all `max_iter`
    /// iterations and returns the best point seen.
    Approximate(&'a SeCoefficients),
}

/// Two-layer WMMSE with the initial LSFD from the closed-form optimum at `rho0`.
pub fn run_two_layer(
    coeffs: &SeCoefficients,
    max_powers: &[f64],
    rho0: &[f64],
    prelog: f64,
    opts: &ConvergenceOptions,
) -> Result<OptimizationResult> {
    run_wmmse(coeffs, max_powers, rho0, prelog, opts, LsfdPolicy::Optimized)
}

/// Power control only, with single-layer decoding.
pub fn run_single_layer(
    coeffs: &SeCoefficients,
    max_powers: &[f64],
    rho0: &[f64],
    prelog: f64,
    opts: &ConvergenceOptions,
) -> Result<OptimizationResult> {
    run_wmmse(coeffs, max_powers, rho0, prelog, opts, LsfdPolicy::SingleLayer)
}

/// One full `u -> w -> a -> rho` sweep.
pub fn iterate(
    state: &mut WmmseState,
    coeffs: &SeCoefficients,
    max_powers: &[f64],
    policy: LsfdPolicy<'_>,
) -> Result<()> {
    state.u = update_u(state, coeffs)?;
    let (e, w) = update_w(state, coeffs)?;
    state.e = e;
    state.w = w;
    match policy {
        LsfdPolicy::SingleLayer => {}
        LsfdPolicy::Optimized => state.a = update_a(state, coeffs, coeffs)?,
        LsfdPolicy::Approximate(approx) => state.a = update_a(state, coeffs, approx)?,
    }
    state.rho = update_rho(state, coeffs, max_powers);
    state.iteration += 1;
    Ok(())
}

pub fn run_wmmse(
    coeffs: &SeCoefficients,
    max_powers: &[f64],
    rho0: &[f64],
    prelog: f64,
    opts: &ConvergenceOptions,
    policy: LsfdPolicy<'_>,
) -> Result<OptimizationResult> {
    opts.validate()?;
    let (cells, users) = (coeffs.cells, coeffs.users_per_cell);
    let n = coeffs.n_users();
    if max_powers.len() != n || rho0.len() != n {
        return Err(Error::Argument(format!("expected {n} power entries")));
    }
    for (i, (&r, &pm)) in rho0.iter().zip(max_powers).enumerate() {
        if !(r >= 0.0 && r * r <= pm * (1.0 + 1e-12)) {
            return Err(Error::Argument(format!("initial power of user {i} infeasible")));
        }
    }
    let p0: Vec<f64> = rho0.iter().map(|r| r * r).collect();
    let a0 = match policy {
        LsfdPolicy::SingleLayer => LsfdMatrix::single_layer(cells, users),
        LsfdPolicy::Optimized => optimal_lsfd(coeffs, &p0)?,
        LsfdPolicy::Approximate(approx) => optimal_lsfd(approx, &p0)?,
    };
    let mut state = WmmseState::new(a0.vectors, rho0.to_vec());
    let (_, se0) = sum_se(coeffs, &p0, &state.lsfd(cells, users), prelog)?;
    let mut trace = vec![se0];
    let track_best = matches!(policy, LsfdPolicy::Approximate(_));
    let mut best = (se0, state.clone());
    let mut terminated_by = Termination::MaxIter;

    while state.iteration < opts.max_iter {
        iterate(&mut state, coeffs, max_powers, policy)?;
        let (_, se) = sum_se(coeffs, &state.powers(), &state.lsfd(cells, users), prelog)?;
        trace.push(se);
        if track_best {
            if se > best.0 {
                best = (se, state.clone());
            }
        } else if stopping_met(&trace, opts.epsilon) {
            terminated_by = Termination::Epsilon;
            break;
        }
        if !opts.record_trace && trace.len() > 2 {
            trace.remove(0);
        }
    }
    let iterations = state.iteration;
    if track_best {
        state = best.1;
    }
    let lsfd = state.lsfd(cells, users);
    let (per_user_se, _) = sum_se(coeffs, &state.powers(), &lsfd, prelog)?;
    Ok(OptimizationResult {
        powers: PowerAllocation::from_sqrt(&state.rho),
        lsfd,
        trace: OptimizationTrace {
            sum_se: trace,
            per_user_se,
            iterations,
            terminated_by,
        },
        state,
    })
}

fn block_change(old: impl Iterator<Item = f64>, diff: impl Iterator<Item = f64>) -> f64 {
    let norm: f64 = old.map(|x| x * x).sum::<f64>().sqrt();
    let delta: f64 = diff.map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        delta
    } else {
        delta / norm
    }
}

/// Power below which a user counts as switched off for [`idempotence_defect`].
pub const ACTIVE_FRACTION: f64 = 1e-3;

/// Largest relative change produced by re-applying each block update once
/// to `state` (u, w, a and rho, each against the unchanged others).
///
/// Changes of `u`, `w` and `rho` are measured as Euclidean norms over all
/// users. LSFD vectors are compared per user, skipping users whose `rho` is
/// below `ACTIVE_FRACTION * sqrt(P_max)`: their vectors barely influence
/// anyone and their variables decay geometrically towards zero.
pub fn idempotence_defect(
    state: &WmmseState,
    coeffs: &SeCoefficients,
    max_powers: &[f64],
    policy: LsfdPolicy<'_>,
) -> Result<f64> {
    let u = update_u(state, coeffs)?;
    let du = block_change(state.u.iter().map(|x| x.norm()), state.u.iter().zip(&u).map(|(o, n)| (o - n).norm()));
    let (_, w) = update_w(state, coeffs)?;
    let dw = block_change(state.w.iter().cloned(), state.w.iter().zip(&w).map(|(o, n)| o - n));
    let direction = match policy {
        LsfdPolicy::SingleLayer => None,
        LsfdPolicy::Optimized => Some(coeffs),
        LsfdPolicy::Approximate(approx) => Some(approx),
    };
    let da = match direction {
        None => 0.0,
        Some(direction) => {
            let a = update_a(state, coeffs, direction)?;
            (0..a.len())
                .filter(|&i| state.rho[i] >= ACTIVE_FRACTION * max_powers[i].sqrt())
                .map(|i| (&state.a[i] - &a[i]).norm() / state.a[i].norm().max(a[i].norm()))
                .fold(0.0, f64::max)
        }
    };
    let rho = update_rho(state, coeffs, max_powers);
    let drho = block_change(state.rho.iter().cloned(), state.rho.iter().zip(&rho).map(|(o, n)| o - n));
    Ok(du.max(dw).max(da).max(drho))
}

/// Largest central-difference derivative of the objective with respect to an
/// interior `rho_{l,k}` (u, w, a held fixed), relative to [`objective_scale`].
pub fn stationarity_defect(state: &WmmseState, coeffs: &SeCoefficients, max_powers: &[f64]) -> f64 {
    let scale = objective_scale(state, coeffs);
    let mut worst = 0.0_f64;
    for i in 0..state.rho.len() {
        let cap = max_powers[i].sqrt();
        let h = 1e-6 * cap;
        let r = state.rho[i];
        if r <= h || r >= cap - h {
            continue;
        }
        let mut probe = state.clone();
        probe.rho[i] = r + h;
        let up = wmmse_objective(&probe, coeffs);
        probe.rho[i] = r - h;
        let down = wmmse_objective(&probe, coeffs);
        worst = worst.max(((up - down) / (2.0 * h)).abs() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Estimator;
    use crate::rng;
    use crate::scenario::{build_drop, scenario_statistics, NetworkConfig, ScenarioStatistics};
    use crate::se::{coefficients, single_layer_lsfd, CorrMode};

    fn drop_coeffs(cells: usize, users: usize, m: usize, corr: f64, seed: u64) -> SeCoefficients {
        let cfg = NetworkConfig {
            cells,
            users_per_cell: users,
            antennas: m,
            corr_magnitude: corr,
            ..NetworkConfig::default()
        };
        let drop = build_drop(&cfg, &mut rng::stream(seed, &[])).unwrap();
        let stats = scenario_statistics(&cfg, &drop).unwrap();
        coefficients(&stats, &vec![0.2; cells * users], Estimator::Mmse, CorrMode::Full).unwrap()
    }

    fn scalar_coeffs(b: f64, c: f64, d: f64) -> SeCoefficients {
        SeCoefficients {
            cells: 1,
            users_per_cell: 1,
            b: vec![C64::new(b, 0.0)],
            c: vec![c],
            d: vec![d],
            estimator: Estimator::Mmse,
            corr_mode: CorrMode::Full,
        }
    }

    #[test]
    fn op_count_values() {
        assert_eq!(arithmetic_op_count(4, 5, 1), 17600 + 1920 + 1840 + 1200 + 320 + 2);
        assert_eq!(arithmetic_op_count(4, 5, 1), 22_882);
        assert_eq!(arithmetic_op_count(1, 1, 1), 56);
        assert_eq!(arithmetic_op_count(3, 7, 2), 2 * arithmetic_op_count(3, 7, 1));
    }

    #[test]
    fn stopping_rule_boundaries() {
        assert!(stopping_met(&[1.0, 1.0], 1e-3));
        assert!(!stopping_met(&[1.0, 1.0 + 2e-3], 1e-3));
        assert!(stopping_met(&[0.5, 0.75], 0.25));
        assert!(!stopping_met(&[1.0], 1.0));
    }

    #[test]
    fn scalar_updates_by_hand() {
        let (b, c, d) = (2.0, 0.3, 0.5);
        let co = scalar_coeffs(b, c, d);
        let rho = 0.7_f64;
        let mut st = WmmseState::new(vec![single_layer_lsfd(1, 0)], vec![rho]);
        let u = update_u(&st, &co).unwrap()[0];
        let ut = rho * rho * b * b + rho * rho * c + d;
        assert!((u - C64::new(rho * b / ut, 0.0)).norm() < 1e-15);
        st.u = vec![u];
        let (e, w) = update_w(&st, &co).unwrap();
        // at the fresh u, e = 1 - rho Re(u a^H b) = 1 / (1 + SINR)
        let sinr = rho * rho * b * b / (rho * rho * c + d);
        assert!((e[0] - (1.0 - rho * u.re * b)).abs() < 1e-12);
        assert!((e[0] - 1.0 / (1.0 + sinr)).abs() < 1e-12);
        assert!(e[0] < 1.0);
        st.e = e;
        st.w = w;
        // no interference: rho = w u b / (w u^2 (b^2 + c)) evaluated directly
        let rho_new = update_rho(&st, &co, &[100.0])[0];
        let expected = st.w[0] * u.re * b / (st.w[0] * u.norm_sqr() * (b * b + c));
        assert!((rho_new - expected).abs() < 1e-12 * expected);
        assert_eq!(update_rho(&st, &co, &[1e-4])[0], 1e-2);

        let co0 = scalar_coeffs(b, 0.0, 0.0);
        let unit = WmmseState {
            u: vec![C64::new(1.0, 0.0)],
            w: vec![1.0],
            e: vec![1.0],
            a: vec![single_layer_lsfd(1, 0)],
            rho: vec![0.1],
            iteration: 0,
        };
        assert!((update_rho(&unit, &co0, &[100.0])[0] - 1.0 / b).abs() < 1e-15);
    }

    #[test]
    fn zero_power_gives_zero_receiver_and_unit_weight() {
        let co = drop_coeffs(2, 2, 8, 0.5, 1);
        let mut st = WmmseState::new(LsfdMatrix::single_layer(2, 2).vectors, vec![0.0, 0.3, 0.2, 0.4]);
        st.u = update_u(&st, &co).unwrap();
        assert_eq!(st.u[0], C64::new(0.0, 0.0));
        let (e, w) = update_w(&st, &co).unwrap();
        assert_eq!((e[0], w[0]), (1.0, 1.0));
        let again = update_u(&st, &co).unwrap();
        for (x, y) in st.u.iter().zip(&again) {
            assert!((x - y).norm() <= 1e-14 * x.norm());
        }
    }

    #[test]
    fn zero_lsfd_vector_is_rejected() {
        let co = drop_coeffs(2, 1, 4, 0.5, 2);
        let st = WmmseState::new(vec![CVector::zeros(2), single_layer_lsfd(2, 1)], vec![0.3, 0.3]);
        assert!(matches!(update_u(&st, &co), Err(Error::Argument(_))));
    }

    #[test]
    fn a_update_is_collinear_with_closed_form_optimum() {
        let co = drop_coeffs(4, 3, 16, 0.7, 3);
        let rho: Vec<f64> = (0..12).map(|i| 0.1 + 0.02 * i as f64).collect();
        let powers: Vec<f64> = rho.iter().map(|r| r * r).collect();
        let mut st = WmmseState::new(LsfdMatrix::single_layer(4, 3).vectors, rho);
        st.u = update_u(&st, &co).unwrap();
        let before = sinr_closed_form(&co, &powers, &st.lsfd(4, 3)).unwrap();
        let a = update_a(&st, &co, &co).unwrap();
        let opt = optimal_lsfd(&co, &powers).unwrap();
        let after = sinr_closed_form(&co, &powers, &LsfdMatrix { cells: 4, users_per_cell: 3, vectors: a.clone() }).unwrap();
        for i in 0..12 {
            let x = &a[i];
            let y = &opt.vectors[i];
            // |x^H y|^2 = |x|^2 |y|^2 iff collinear
            let defect = x.norm_squared() * y.norm_squared() - x.dotc(y).norm_sqr();
            assert!(defect.abs() <= 1e-8 * x.norm_squared() * y.norm_squared());
            assert!(after[i] >= before[i] * (1.0 - 1e-12));
        }
    }

    #[test]
    fn exact_a_update_matches_paper_scalar_at_fresh_u() {
        let co = drop_coeffs(4, 2, 8, 0.4, 4);
        let rho = vec![0.3; 8];
        let mut st = WmmseState::new(LsfdMatrix::single_layer(4, 2).vectors, rho);
        st.u = update_u(&st, &co).unwrap();
        let a = update_a(&st, &co, &co).unwrap();
        let powers = st.powers();
        for i in 0..8 {
            let (l, k) = (i / 2, i % 2);
            let ut = u_tilde(&co, &st.rho, &st.a[i], l, k);
            let proj = own_projection(&co, &st.a[i], l, k);
            let c = lsfd_matrix(&co, &powers, l, k, true);
            let x = solve_hpd(&c, &co.b_vec(l, k), "test").unwrap() * (C64::new(ut, 0.0) / proj);
            assert!((&x - &a[i]).norm() <= 1e-10 * x.norm());
        }
    }

    #[test]
    fn monotone_ascent_and_feasibility() {
        let co = drop_coeffs(4, 3, 16, 0.8, 5);
        let pmax = vec![0.2; 12];
        let rho0 = crate::se::random_sqrt_powers(&pmax, &mut rng::stream(5, &[rng::purpose::POWER_INIT]));
        let res = run_two_layer(&co, &pmax, &rho0, 0.985, &ConvergenceOptions::default()).unwrap();
        let t = &res.trace.sum_se;
        for w in t.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        assert!(res.powers.check(&pmax).is_ok());
        assert_eq!(res.trace.terminated_by, Termination::Epsilon);
        let single = run_single_layer(&co, &pmax, &rho0, 0.985, &ConvergenceOptions::default()).unwrap();
        for w in single.trace.sum_se.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert!(t.last().unwrap() >= single.trace.sum_se.last().unwrap());
    }

    #[test]
    fn objective_never_increases() {
        let co = drop_coeffs(4, 2, 12, 0.6, 6);
        let pmax = vec![0.2; 8];
        let rho0 = crate::se::random_sqrt_powers(&pmax, &mut rng::stream(6, &[rng::purpose::POWER_INIT]));
        let p0: Vec<f64> = rho0.iter().map(|r| r * r).collect();
        let mut st = WmmseState::new(optimal_lsfd(&co, &p0).unwrap().vectors, rho0);
        st.u = update_u(&st, &co).unwrap();
        let (e, w) = update_w(&st, &co).unwrap();
        st.e = e;
        st.w = w;
        let mut prev = wmmse_objective(&st, &co);
        for _ in 0..30 {
            iterate(&mut st, &co, &pmax, LsfdPolicy::Optimized).unwrap();
            let f = wmmse_objective(&st, &co);
            assert!(f <= prev + 1e-9, "{prev} -> {f}");
            prev = f;
        }
    }

    #[test]
    fn objective_at_optimal_weights_matches_log_sinr() {
        let co = drop_coeffs(4, 2, 12, 0.6, 7);
        let rho = vec![0.25, 0.1, 0.4, 0.3, 0.2, 0.35, 0.15, 0.05];
        let lsfd = optimal_lsfd(&co, &rho.iter().map(|r| r * r).collect::<Vec<_>>()).unwrap();
        let mut st = WmmseState::new(lsfd.vectors.clone(), rho);
        st.u = update_u(&st, &co).unwrap();
        let (e, w) = update_w(&st, &co).unwrap();
        st.e = e;
        st.w = w;
        let sinr = sinr_closed_form(&co, &st.powers(), &lsfd).unwrap();
        let users = co.users_per_cell;
        for i in 0..8 {
            let e = mse_at(&co, &st.rho, st.u[i], &st.a[i], i / users, i % users);
            let lhs = st.w[i] * e - st.w[i].ln();
            assert!((lhs - (1.0 - (1.0 + sinr[i]).ln())).abs() < 1e-9);
        }
    }

    #[test]
    fn single_cell_layers_coincide() {
        let co = drop_coeffs(1, 3, 8, 0.5, 8);
        let pmax = vec![0.2; 3];
        let rho0 = vec![0.2, 0.3, 0.4];
        let a = run_two_layer(&co, &pmax, &rho0, 0.9, &ConvergenceOptions::default()).unwrap();
        let b = run_single_layer(&co, &pmax, &rho0, 0.9, &ConvergenceOptions::default()).unwrap();
        for (x, y) in a.trace.sum_se.iter().zip(&b.trace.sum_se) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn approximate_policy_keeps_best() {
        let cfg = NetworkConfig {
            cells: 4,
            users_per_cell: 2,
            antennas: 12,
            corr_magnitude: 0.8,
            ..NetworkConfig::default()
        };
        let drop = build_drop(&cfg, &mut rng::stream(9, &[])).unwrap();
        let stats: ScenarioStatistics = scenario_statistics(&cfg, &drop).unwrap();
        let p_hat = vec![0.2; 8];
        let co = coefficients(&stats, &p_hat, Estimator::Mmse, CorrMode::Full).unwrap();
        let approx = coefficients(&stats, &p_hat, Estimator::Mmse, CorrMode::DiagonalApprox).unwrap();
        let opts = ConvergenceOptions { max_iter: 60, ..Default::default() };
        let rho0 = vec![0.3; 8];
        let res = run_wmmse(&co, &p_hat, &rho0, 0.99, &opts, LsfdPolicy::Approximate(&approx)).unwrap();
        let best = res.trace.sum_se.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(res.trace.iterations, 60);
        let (_, got) = sum_se(&co, &res.powers.powers, &res.lsfd, 0.99).unwrap();
        assert!((got - best).abs() < 1e-12);
    }

    #[test]
    fn stationarity_is_met_after_rho_update() {
        let co = drop_coeffs(4, 2, 8, 0.5, 10);
        let pmax = vec![0.2; 8];
        let res = run_two_layer(&co, &pmax, &[0.3; 8], 0.99, &ConvergenceOptions::default()).unwrap();
        assert!(stationarity_defect(&res.state, &co, &pmax) <= 1e-5);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let co = drop_coeffs(2, 1, 4, 0.0, 11);
        let opts = ConvergenceOptions { max_iter: 0, ..Default::default() };
        assert!(run_two_layer(&co, &[0.2; 2], &[0.1; 2], 0.9, &opts).is_err());
        assert!(run_two_layer(&co, &[0.2; 2], &[1.0; 2], 0.9, &ConvergenceOptions::default()).is_err());
    }
}
