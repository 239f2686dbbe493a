//! Spectral efficiency of two-layer decoding.
//!
//! With MRC in the first layer the SINR of user `k` in cell `l` is a
//! generalized Rayleigh quotient in its LSFD vector `a_{l,k}`, fully
//! determined by three coefficient families:
//!
//! - `b_{l',k}^{l''}`: mean gain of user `(l',k)` through BS `l''`'s combiner for pilot `k`,
//! - `c_{l'',k}^{l',k'}`: variance leaking from user `(l',k')` into that combiner,
//! - `d_{l',k}`: noise power after BS `l'`'s combiner for pilot `k`.
//!
//! ```text
//!                         p_{l,k} |a^H b_{l,k}|^2
//! SINR = -----------------------------------------------------------------------
//!        sum_{l'!=l} p_{l',k} |a^H b_{l',k}|^2 + sum_{l'',l',k'} p_{l',k'} |a^{l''}|^2 c + sum |a^{l'}|^2 d
//! ```
//!
//! All coefficients carry a common `tau_p` factor relative to the raw
//! expectations, which cancels in the ratio.

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{Draw, EstimationModel, Estimator, Simulator};
use crate::linalg::{cholesky_pd, hermitian_condition, trace, trace_product, CMatrix, CVector};
use crate::rng;
use crate::scenario::ScenarioStatistics;
use crate::{Error, Result, C64};

/// Whether coefficients use the full correlation matrices or only their diagonals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrMode {
    Full,
    DiagonalApprox,
}

/// First-layer linear combiner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Combiner {
    #[serde(rename = "MRC")]
    Mrc,
    #[serde(rename = "RZF")]
    Rzf,
}

impl std::fmt::Display for Combiner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Combiner::Mrc => "MRC",
            Combiner::Rzf => "RZF",
        })
    }
}

/// Condition number above which LSFD solves log a warning.
pub const CONDITION_WARNING: f64 = 1e12;

/// Closed-form MRC coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SeCoefficients {
    pub cells: usize,
    pub users_per_cell: usize,
    /// `b[l'][k][l'']`.
    pub b: Vec<C64>,
    /// `c[l''][k][l'][k']`.
    pub c: Vec<f64>,
    /// `d[l'][k]`.
    pub d: Vec<f64>,
    pub estimator: Estimator,
    pub corr_mode: CorrMode,
}

impl SeCoefficients {
    /// Gain of user `(l', k)` through the pilot-`k` combiner at BS `bs`.
    #[inline]
    pub fn b(&self, l_user: usize, k: usize, bs: usize) -> C64 {
        self.b[(l_user * self.users_per_cell + k) * self.cells + bs]
    }

    /// Leakage of user `(l', k')` into the pilot-`k` combiner at BS `bs`.
    #[inline]
    pub fn c(&self, bs: usize, k: usize, l_user: usize, k_user: usize) -> f64 {
        let u = self.users_per_cell;
        self.c[((bs * u + k) * self.cells + l_user) * u + k_user]
    }

    #[inline]
    pub fn d(&self, bs: usize, k: usize) -> f64 {
        self.d[bs * self.users_per_cell + k]
    }

    /// `b_{l',k} = [b_{l',k}^1, ..., b_{l',k}^L]`.
    pub fn b_vec(&self, l_user: usize, k: usize) -> CVector {
        CVector::from_fn(self.cells, |bs, _| self.b(l_user, k, bs))
    }

    pub fn n_users(&self) -> usize {
        self.cells * self.users_per_cell
    }

    /// Interference-plus-noise power at BS `bs` for pilot `k`:
    /// `sum_{l',k'} p_{l',k'} c_{bs,k}^{l',k'} + d_{bs,k}`.
    pub fn noncoherent(&self, bs: usize, k: usize, powers: &[f64]) -> f64 {
        let u = self.users_per_cell;
        let mut acc = self.d(bs, k);
        for l in 0..self.cells {
            for kk in 0..u {
                acc += powers[l * u + kk] * self.c(bs, k, l, kk);
            }
        }
        acc
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Argument(format!("{what}: expected {want} entries, got {got}")));
    }
    Ok(())
}

/// Evaluate the closed-form MRC coefficients.
///
/// With [`CorrMode::DiagonalApprox`] every `R` is replaced by `beta I` first.
pub fn coefficients(
    stats: &ScenarioStatistics,
    pilot_powers: &[f64],
    estimator: Estimator,
    corr_mode: CorrMode,
) -> Result<SeCoefficients> {
    let approx;
    let stats = match corr_mode {
        CorrMode::Full => stats,
        CorrMode::DiagonalApprox => {
            approx = stats.diagonal_approx();
            &approx
        }
    };
    let model = EstimationModel::new(stats, pilot_powers)?;
    model.check(estimator)?;
    let (cells, users) = (stats.cells, stats.users_per_cell);
    let tau = stats.pilot_length as f64;
    let sigma2 = stats.sigma2;

    let mut b = vec![C64::new(0.0, 0.0); cells * users * cells];
    let mut c = vec![0.0; cells * users * cells * users];
    let mut d = vec![0.0; cells * users];
    let b_at = |l_user: usize, k: usize, bs: usize| (l_user * users + k) * cells + bs;
    let c_at = |bs: usize, k: usize, l_user: usize, k_user: usize| ((bs * users + k) * cells + l_user) * users + k_user;

    for bs in 0..cells {
        for k in 0..users {
            let p_own = model.pilot_power(bs, k);
            match estimator {
                Estimator::Mmse => {
                    let r_own = stats.corr(bs, k, bs);
                    // X = Psi^{-1} R_{bs,k}^{bs};  Z = R X = R Psi^{-1} R
                    let x = model.psi_solve(bs, k, r_own);
                    let z = r_own * &x;
                    for l_user in 0..cells {
                        let tr = trace_product(&x, stats.corr(l_user, k, bs));
                        b[b_at(l_user, k, bs)] =
                            tr * (tau * model.pilot_power(l_user, k) * p_own).sqrt();
                        for k_user in 0..users {
                            let tr = trace_product(&z, stats.corr(l_user, k_user, bs));
                            c[c_at(bs, k, l_user, k_user)] = p_own * tr.re;
                        }
                    }
                    d[bs * users + k] = sigma2 * p_own * trace_product(&x, r_own).re;
                }
                Estimator::EwMmse => {
                    let psi = model.psi(bs, k);
                    let tr_psi = trace(psi).re;
                    let g_own = model.varrho(bs, k, bs);
                    for l_user in 0..cells {
                        b[b_at(l_user, k, bs)] =
                            C64::new(tau.sqrt() * g_own * model.varrho(l_user, k, bs) * tr_psi, 0.0);
                        for k_user in 0..users {
                            let tr = trace_product(stats.corr(l_user, k_user, bs), psi);
                            c[c_at(bs, k, l_user, k_user)] = g_own * g_own * tr.re;
                        }
                    }
                    d[bs * users + k] = g_own * g_own * sigma2 * tr_psi;
                }
            }
        }
    }
    Ok(SeCoefficients {
        cells,
        users_per_cell: users,
        b,
        c,
        d,
        estimator,
        corr_mode,
    })
}

/// Per-user LSFD vectors, indexed by `cell * K + user`.
#[derive(Debug, Clone, PartialEq)]
pub struct LsfdMatrix {
    pub cells: usize,
    pub users_per_cell: usize,
    pub vectors: Vec<CVector>,
}

impl LsfdMatrix {
    /// Single-layer decoding: each user only listens to its own base station.
    pub fn single_layer(cells: usize, users_per_cell: usize) -> Self {
        let vectors = (0..cells * users_per_cell)
            .map(|i| single_layer_lsfd(cells, i / users_per_cell))
            .collect();
        Self {
            cells,
            users_per_cell,
            vectors,
        }
    }

    pub fn get(&self, l: usize, k: usize) -> &CVector {
        &self.vectors[l * self.users_per_cell + k]
    }
}

/// Indicator vector of the own cell.
pub fn single_layer_lsfd(cells: usize, own_cell: usize) -> CVector {
    CVector::from_fn(cells, |i, _| {
        if i == own_cell {
            C64::new(1.0, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Numerator and denominator of the SINR of user `(l, k)` for LSFD vector `a`.
pub fn sinr_terms(coeffs: &SeCoefficients, powers: &[f64], l: usize, k: usize, a: &CVector) -> (f64, f64) {
    let (cells, users) = (coeffs.cells, coeffs.users_per_cell);
    let proj = |l_user: usize| -> C64 { (0..cells).map(|bs| a[bs].conj() * coeffs.b(l_user, k, bs)).sum() };
    let signal = powers[l * users + k] * proj(l).norm_sqr();
    let mut denom = 0.0;
    for l_user in (0..cells).filter(|&x| x != l) {
        denom += powers[l_user * users + k] * proj(l_user).norm_sqr();
    }
    for bs in 0..cells {
        denom += a[bs].norm_sqr() * coeffs.noncoherent(bs, k, powers);
    }
    (signal, denom)
}

/// Closed-form SINR of every user.
pub fn sinr_closed_form(coeffs: &SeCoefficients, powers: &[f64], lsfd: &LsfdMatrix) -> Result<Vec<f64>> {
    check_len("powers", powers.len(), coeffs.n_users())?;
    check_len("LSFD vectors", lsfd.vectors.len(), coeffs.n_users())?;
    let users = coeffs.users_per_cell;
    (0..coeffs.n_users())
        .map(|i| {
            let (l, k) = (i / users, i % users);
            let (num, den) = sinr_terms(coeffs, powers, l, k, &lsfd.vectors[i]);
            if num == 0.0 {
                Ok(0.0)
            } else if den > 0.0 {
                Ok(num / den)
            } else {
                Err(Error::Numeric(format!("zero interference-plus-noise for user ({l}, {k})")))
            }
        })
        .collect()
}

/// `C_{l,k}`: pilot contamination from other cells plus the diagonal noncoherent part.
///
/// With `include_own` the own-signal outer product is added too, which is the
/// matrix used inside the alternating optimizer.
pub fn lsfd_matrix(coeffs: &SeCoefficients, powers: &[f64], l: usize, k: usize, include_own: bool) -> CMatrix {
    let (cells, users) = (coeffs.cells, coeffs.users_per_cell);
    let mut m = CMatrix::zeros(cells, cells);
    for l_user in 0..cells {
        if l_user == l && !include_own {
            continue;
        }
        let bv = coeffs.b_vec(l_user, k);
        m += &bv * bv.adjoint() * C64::new(powers[l_user * users + k], 0.0);
    }
    for bs in 0..cells {
        m[(bs, bs)] += C64::new(coeffs.noncoherent(bs, k, powers), 0.0);
    }
    m
}

/// Solve a Hermitian positive definite system, warning when it is badly conditioned.
pub(crate) fn solve_hpd(m: &CMatrix, rhs: &CVector, what: &str) -> Result<CVector> {
    let chol = cholesky_pd(m, what)?;
    if m.nrows() > 1 {
        let cond = hermitian_condition(m);
        if cond > CONDITION_WARNING {
            warn!("{what} has condition number {cond:.3e}");
        }
    }
    Ok(chol.solve(rhs))
}

/// SINR-maximizing LSFD vectors `a_{l,k} = C_{l,k}^{-1} b_{l,k}`.
pub fn optimal_lsfd(coeffs: &SeCoefficients, powers: &[f64]) -> Result<LsfdMatrix> {
    check_len("powers", powers.len(), coeffs.n_users())?;
    let users = coeffs.users_per_cell;
    let vectors = (0..coeffs.n_users())
        .map(|i| {
            let (l, k) = (i / users, i % users);
            let c = lsfd_matrix(coeffs, powers, l, k, false);
            solve_hpd(&c, &coeffs.b_vec(l, k), "LSFD matrix")
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LsfdMatrix {
        cells: coeffs.cells,
        users_per_cell: users,
        vectors,
    })
}

/// Closed-form SINR reached by the optimal LSFD: `p_{l,k} b^H C^{-1} b`.
pub fn optimal_sinr(coeffs: &SeCoefficients, powers: &[f64]) -> Result<Vec<f64>> {
    check_len("powers", powers.len(), coeffs.n_users())?;
    let users = coeffs.users_per_cell;
    (0..coeffs.n_users())
        .map(|i| {
            let (l, k) = (i / users, i % users);
            let c = lsfd_matrix(coeffs, powers, l, k, false);
            let b = coeffs.b_vec(l, k);
            let x = solve_hpd(&c, &b, "LSFD matrix")?;
            Ok(powers[i] * b.dotc(&x).re)
        })
        .collect()
}

/// Uplink data powers in W, indexed by `cell * K + user`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    pub powers: Vec<f64>,
}

impl PowerAllocation {
    pub fn uniform(n: usize, power: f64) -> Self {
        Self { powers: vec![power; n] }
    }

    pub fn from_sqrt(rho: &[f64]) -> Self {
        Self {
            powers: rho.iter().map(|r| r * r).collect(),
        }
    }

    pub fn sqrt(&self) -> Vec<f64> {
        self.powers.iter().map(|p| p.sqrt()).collect()
    }

    /// Check `0 <= p <= p_max` entrywise, allowing a relative slack for roundoff.
    pub fn check(&self, max_powers: &[f64]) -> Result<()> {
        check_len("powers", self.powers.len(), max_powers.len())?;
        for (i, (&p, &pm)) in self.powers.iter().zip(max_powers).enumerate() {
            if !(p >= 0.0 && p <= pm * (1.0 + 1e-12)) {
                return Err(Error::Argument(format!("power {p} of user {i} outside [0, {pm}]")));
            }
        }
        Ok(())
    }
}

/// Spectral efficiency summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeReport {
    pub sinr: Vec<f64>,
    /// bit/s/Hz per user, indexed by `cell * K + user`.
    pub se: Vec<f64>,
    pub sum_se_per_cell: Vec<f64>,
    pub prelog: f64,
}

impl SeReport {
    pub fn total(&self) -> f64 {
        self.se.iter().sum()
    }

    /// Mean over cells of the per-cell sum SE.
    pub fn mean_cell_sum(&self) -> f64 {
        self.sum_se_per_cell.iter().sum::<f64>() / self.sum_se_per_cell.len().max(1) as f64
    }
}

pub fn se_report(sinr: &[f64], users_per_cell: usize, pilot_length: usize, coherence_length: usize) -> Result<SeReport> {
    if pilot_length == 0 || pilot_length >= coherence_length {
        return Err(Error::Argument("need 0 < tau_p < tau_c".into()));
    }
    if users_per_cell == 0 || sinr.len() % users_per_cell != 0 {
        return Err(Error::Argument("SINR list does not split into whole cells".into()));
    }
    if sinr.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::Argument("SINR must be nonnegative".into()));
    }
    let prelog = 1.0 - pilot_length as f64 / coherence_length as f64;
    let se: Vec<f64> = sinr.iter().map(|&s| prelog * (1.0 + s).log2()).collect();
    let sum_se_per_cell = se.chunks(users_per_cell).map(|c| c.iter().sum()).collect();
    Ok(SeReport {
        sinr: sinr.to_vec(),
        se,
        sum_se_per_cell,
        prelog,
    })
}

/// Regularized zero-forcing over the own-cell estimates `H` (M x K):
/// `V = H (H^H H + sigma^2 / p_mean I)^{-1}`.
pub fn rzf_combiner(estimates: &CMatrix, sigma2: f64, mean_power: f64) -> Result<CMatrix> {
    let k = estimates.ncols();
    if !(mean_power > 0.0) {
        // infinite regularization: MRC direction
        return Ok(estimates.clone());
    }
    let mut gram = estimates.adjoint() * estimates;
    for i in 0..k {
        gram[(i, i)] += C64::new(sigma2 / mean_power, 0.0);
    }
    let chol = cholesky_pd(&gram, "regularized Gram matrix")?;
    // V = H G^{-1}  <=>  V^H = G^{-1} H^H
    Ok(chol.solve(&estimates.adjoint()).adjoint())
}

/// First-layer combining vectors `v_{l,k}` for one trial, indexed by `l * K + k`.
pub fn combiners(draw: &Draw, combiner: Combiner, cells: usize, users: usize, sigma2: f64, powers: &[f64]) -> Result<Vec<CVector>> {
    match combiner {
        Combiner::Mrc => Ok(draw.own_estimates.clone()),
        Combiner::Rzf => {
            let mut out = Vec::with_capacity(cells * users);
            for l in 0..cells {
                let h = CMatrix::from_columns(&draw.own_estimates[l * users..(l + 1) * users]);
                let mean_power = powers[l * users..(l + 1) * users].iter().sum::<f64>() / users as f64;
                let v = rzf_combiner(&h, sigma2, mean_power)?;
                out.extend(v.column_iter().map(|c| c.into_owned()));
            }
            Ok(out)
        }
    }
}

/// Inner products `g[bs][k][l'][k'] = v_{bs,k}^H h_{l',k'}^{bs}` of one trial.
pub(crate) struct InnerProducts {
    cells: usize,
    users: usize,
    values: Vec<C64>,
    /// `||v_{bs,k}||^2`, by `bs * K + k`.
    pub norms: Vec<f64>,
}

impl InnerProducts {
    pub(crate) fn new(draw: &Draw, v: &[CVector], cells: usize, users: usize) -> Self {
        let mut values = Vec::with_capacity(cells * users * cells * users);
        for bs in 0..cells {
            for k in 0..users {
                let vk = &v[bs * users + k];
                for l in 0..cells {
                    for kk in 0..users {
                        values.push(vk.dotc(draw.channels.get(l, kk, bs)));
                    }
                }
            }
        }
        let norms = v.iter().map(|x| x.norm_squared()).collect();
        Self {
            cells,
            users,
            values,
            norms,
        }
    }

    #[inline]
    pub(crate) fn get(&self, bs: usize, k: usize, l_user: usize, k_user: usize) -> C64 {
        self.values[((bs * self.users + k) * self.cells + l_user) * self.users + k_user]
    }
}

/// Trial chunk size for parallel Monte Carlo; fixed so results do not depend on thread count.
pub(crate) const MC_CHUNK: usize = 512;

/// Run `n` independent trials in parallel and fold them into accumulators,
/// merged in chunk order.
pub(crate) fn monte_carlo<A, F>(n: usize, seed: u64, init: impl Fn() -> A + Sync, body: F) -> Result<A>
where
    A: Send + Merge,
    F: Fn(&mut A, u64, &mut rand_chacha::ChaCha8Rng) -> Result<()> + Sync,
{
    let n_chunks = n.div_ceil(MC_CHUNK);
    let partials: Vec<Result<A>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for t in c * MC_CHUNK..((c + 1) * MC_CHUNK).min(n) {
                let mut rng = rng::trial_stream(seed, t as u64);
                body(&mut acc, t as u64, &mut rng)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = init();
    for p in partials {
        total.merge(p?);
    }
    Ok(total)
}

pub(crate) trait Merge {
    fn merge(&mut self, other: Self);
}

/// Monte Carlo estimates of the expectations that determine the SE of an
/// arbitrary first-layer combiner with optimal LSFD.
///
/// Everything except `C1` depends only on the pilot index, so the model
/// stores per-pilot quantities and forms the per-user matrices on demand.
#[derive(Debug, Clone)]
pub struct GeneralSeModel {
    pub cells: usize,
    pub users_per_cell: usize,
    /// Data powers the interference terms were evaluated at.
    pub powers: Vec<f64>,
    /// `E{v_{bs,k}^H h_{l',k}^{bs}}` stacked over `bs`, indexed by `l' * K + k`.
    pub b_vec: Vec<CVector>,
    /// Standard errors of the real and imaginary parts of `b_vec` entries.
    pub b_std_error: Vec<Vec<f64>>,
    /// `C2` per pilot: power-weighted covariance of `v^H h` around its mean.
    pub c2: Vec<CMatrix>,
    /// Diagonal of `C3` per pilot (non-coherent interference).
    pub c3: Vec<Vec<f64>>,
    pub c3_std_error: Vec<Vec<f64>>,
    /// Diagonal of `C4` per pilot (noise).
    pub c4: Vec<Vec<f64>>,
    pub c4_std_error: Vec<Vec<f64>>,
    pub n_realizations: usize,
}

impl GeneralSeModel {
    /// `C1 = sum_{l' != l} p_{l',k} b_{l',k} b_{l',k}^H`.
    pub fn c1(&self, l: usize, k: usize) -> CMatrix {
        let users = self.users_per_cell;
        let mut m = CMatrix::zeros(self.cells, self.cells);
        for l_user in (0..self.cells).filter(|&x| x != l) {
            let b = &self.b_vec[l_user * users + k];
            m += b * b.adjoint() * C64::new(self.powers[l_user * users + k], 0.0);
        }
        m
    }

    /// `C1 + C2 + C3 + C4` for user `(l, k)`.
    pub fn total_matrix(&self, l: usize, k: usize) -> CMatrix {
        let mut m = self.c1(l, k) + &self.c2[k];
        for bs in 0..self.cells {
            m[(bs, bs)] += C64::new(self.c3[k][bs] + self.c4[k][bs], 0.0);
        }
        m
    }

    /// SINR of every user for given LSFD vectors (Rayleigh quotient form).
    pub fn sinr(&self, lsfd: &LsfdMatrix) -> Result<Vec<f64>> {
        let users = self.users_per_cell;
        (0..self.cells * users)
            .map(|i| {
                let (l, k) = (i / users, i % users);
                let a = lsfd.get(l, k);
                let num = self.powers[i] * a.dotc(&self.b_vec[i]).norm_sqr();
                let den = a.dotc(&(self.total_matrix(l, k) * a)).re;
                if num == 0.0 {
                    Ok(0.0)
                } else if den > 0.0 {
                    Ok(num / den)
                } else {
                    Err(Error::Numeric("nonpositive denominator".into()))
                }
            })
            .collect()
    }
}

#[derive(Clone)]
struct GeneralAccumulator {
    n: usize,
    /// Per `(l', k)`: running sum and outer-product sum of the vector over BSs.
    sum: Vec<CVector>,
    outer: Vec<CMatrix>,
    /// Per `(bs, k)`: first and second moments of the non-coherent interference and noise terms.
    ni: Vec<[f64; 2]>,
    an: Vec<[f64; 2]>,
}

impl Merge for GeneralAccumulator {
    fn merge(&mut self, other: Self) {
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(other.sum) {
            *a += b;
        }
        for (a, b) in self.outer.iter_mut().zip(other.outer) {
            *a += b;
        }
        for (a, b) in self.ni.iter_mut().zip(other.ni).chain(self.an.iter_mut().zip(other.an)) {
            a[0] += b[0];
            a[1] += b[1];
        }
    }
}

/// Estimate the general-combiner SE model by Monte Carlo over `n` trials.
#[allow(clippy::too_many_arguments)]
pub fn general_expectations_mc(
    stats: &ScenarioStatistics,
    estimator: Estimator,
    combiner: Combiner,
    pilot_powers: &[f64],
    powers: &[f64],
    n: usize,
    seed: u64,
) -> Result<GeneralSeModel> {
    if n < 100 {
        return Err(Error::Argument(format!("need at least 100 realizations, got {n}")));
    }
    let (cells, users) = (stats.cells, stats.users_per_cell);
    check_len("powers", powers.len(), cells * users)?;
    let sim = Simulator::new(stats, pilot_powers, estimator)?;
    let sigma2 = stats.sigma2;

    let init = || GeneralAccumulator {
        n: 0,
        sum: vec![CVector::zeros(cells); cells * users],
        outer: vec![CMatrix::zeros(cells, cells); cells * users],
        ni: vec![[0.0; 2]; cells * users],
        an: vec![[0.0; 2]; cells * users],
    };
    let acc = monte_carlo(n, seed, init, |acc, _, rng| {
        let draw = sim.draw(rng);
        let v = combiners(&draw, combiner, cells, users, sigma2, powers)?;
        let g = InnerProducts::new(&draw, &v, cells, users);
        acc.n += 1;
        for l_user in 0..cells {
            for k in 0..users {
                let x = CVector::from_fn(cells, |bs, _| g.get(bs, k, l_user, k));
                acc.outer[l_user * users + k] += &x * x.adjoint();
                acc.sum[l_user * users + k] += x;
            }
        }
        for bs in 0..cells {
            for k in 0..users {
                let mut ni = 0.0;
                for l_user in 0..cells {
                    for kk in (0..users).filter(|&x| x != k) {
                        ni += powers[l_user * users + kk] * g.get(bs, k, l_user, kk).norm_sqr();
                    }
                }
                let an = sigma2 * g.norms[bs * users + k];
                let i = bs * users + k;
                acc.ni[i][0] += ni;
                acc.ni[i][1] += ni * ni;
                acc.an[i][0] += an;
                acc.an[i][1] += an * an;
            }
        }
        Ok(())
    })?;

    let nf = acc.n as f64;
    let mut b_vec = Vec::with_capacity(cells * users);
    let mut b_std_error = Vec::with_capacity(cells * users);
    let mut cov = Vec::with_capacity(cells * users);
    for i in 0..cells * users {
        let mean = &acc.sum[i] / C64::new(nf, 0.0);
        let second = &acc.outer[i] / C64::new(nf, 0.0);
        // unbiased sample covariance
        let c = (second - &mean * mean.adjoint()) * C64::new(nf / (nf - 1.0), 0.0);
        b_std_error.push((0..cells).map(|bs| (c[(bs, bs)].re / (2.0 * nf)).max(0.0).sqrt()).collect());
        b_vec.push(mean);
        cov.push(c);
    }
    let c2 = (0..users)
        .map(|k| {
            let mut m = CMatrix::zeros(cells, cells);
            for l_user in 0..cells {
                m += &cov[l_user * users + k] * C64::new(powers[l_user * users + k], 0.0);
            }
            m
        })
        .collect();
    let moments = |data: &[[f64; 2]], k: usize| -> (Vec<f64>, Vec<f64>) {
        (0..cells)
            .map(|bs| {
                let [s1, s2] = data[bs * users + k];
                let mean = s1 / nf;
                let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
                (mean, (var / nf).sqrt())
            })
            .unzip()
    };
    let (c3, c3_std_error): (Vec<_>, Vec<_>) = (0..users).map(|k| moments(&acc.ni, k)).unzip();
    let (c4, c4_std_error): (Vec<_>, Vec<_>) = (0..users).map(|k| moments(&acc.an, k)).unzip();

    Ok(GeneralSeModel {
        cells,
        users_per_cell: users,
        powers: powers.to_vec(),
        b_vec,
        b_std_error,
        c2,
        c3,
        c3_std_error,
        c4,
        c4_std_error,
        n_realizations: acc.n,
    })
}

/// Optimal LSFD for the general model, `a = (C1 + C2 + C3 + C4)^{-1} b`, and the resulting SE.
pub fn general_optimal_lsfd(model: &GeneralSeModel, pilot_length: usize, coherence_length: usize) -> Result<(LsfdMatrix, SeReport)> {
    let users = model.users_per_cell;
    let mut vectors = Vec::with_capacity(model.cells * users);
    let mut sinr = Vec::with_capacity(model.cells * users);
    for i in 0..model.cells * users {
        let (l, k) = (i / users, i % users);
        let total = model.total_matrix(l, k);
        let b = &model.b_vec[i];
        let a = solve_hpd(&total, b, "general LSFD matrix")?;
        sinr.push((model.powers[i] * b.dotc(&a).re).max(0.0));
        vectors.push(a);
    }
    let report = se_report(&sinr, users, pilot_length, coherence_length)?;
    Ok((
        LsfdMatrix {
            cells: model.cells,
            users_per_cell: users,
            vectors,
        },
        report,
    ))
}

/// Uniform random initial square-root powers on `[0, sqrt(P_max)]`.
pub fn random_sqrt_powers<R: Rng + ?Sized>(max_powers: &[f64], rng: &mut R) -> Vec<f64> {
    max_powers.iter().map(|&p| rng.random::<f64>() * p.sqrt()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_drop, scenario_statistics, NetworkConfig};

    pub(crate) fn drop_stats(cells: usize, users: usize, m: usize, corr: f64, seed: u64) -> ScenarioStatistics {
        let cfg = NetworkConfig {
            cells,
            users_per_cell: users,
            antennas: m,
            corr_magnitude: corr,
            ..NetworkConfig::default()
        };
        let drop = build_drop(&cfg, &mut rng::stream(seed, &[])).unwrap();
        scenario_statistics(&cfg, &drop).unwrap()
    }

    fn white_single_cell(beta: f64, m: usize, tau: usize, sigma2: f64) -> ScenarioStatistics {
        let r = CMatrix::identity(m, m) * C64::new(beta, 0.0);
        ScenarioStatistics::from_correlations(1, 1, tau, vec![r], sigma2).unwrap()
    }

    #[test]
    fn single_cell_coefficients_by_hand() {
        let (beta, m, tau, sigma2, p_hat) = (2.0, 6usize, 3usize, 0.5, 0.4);
        let stats = white_single_cell(beta, m, tau, sigma2);
        let denom = tau as f64 * p_hat * beta + sigma2;
        let common = m as f64 * beta * beta / denom;
        for est in [Estimator::Mmse, Estimator::EwMmse] {
            let co = coefficients(&stats, &[p_hat], est, CorrMode::Full).unwrap();
            let b = (tau as f64).sqrt() * p_hat * common;
            let c = p_hat * beta * common;
            let d = sigma2 * p_hat * common;
            assert!((co.b(0, 0, 0) - C64::new(b, 0.0)).norm() < 1e-12 * b, "{est}");
            assert!((co.c(0, 0, 0, 0) - c).abs() < 1e-12 * c, "{est}");
            assert!((co.d(0, 0) - d).abs() < 1e-12 * d, "{est}");

            let p = 0.3;
            let lsfd = LsfdMatrix::single_layer(1, 1);
            let sinr = sinr_closed_form(&co, &[p], &lsfd).unwrap()[0];
            let expected = p * b * b / (p * c + d);
            assert!((sinr - expected).abs() < 1e-12 * expected);
        }
    }

    #[test]
    fn estimators_agree_without_correlation() {
        let stats = drop_stats(4, 3, 8, 0.0, 1);
        let p_hat = vec![0.2; 12];
        let a = coefficients(&stats, &p_hat, Estimator::Mmse, CorrMode::Full).unwrap();
        let b = coefficients(&stats, &p_hat, Estimator::EwMmse, CorrMode::Full).unwrap();
        for (x, y) in a.b.iter().zip(&b.b) {
            assert!((x - y).norm() <= 1e-12 * x.norm());
        }
        for (x, y) in a.c.iter().zip(&b.c).chain(a.d.iter().zip(&b.d)) {
            assert!((x - y).abs() <= 1e-12 * x.abs());
        }
    }

    #[test]
    fn diagonal_approx_equals_full_without_correlation() {
        let stats = drop_stats(4, 2, 6, 0.0, 2);
        let p_hat = vec![0.2; 8];
        for est in [Estimator::Mmse, Estimator::EwMmse] {
            let full = coefficients(&stats, &p_hat, est, CorrMode::Full).unwrap();
            let approx = coefficients(&stats, &p_hat, est, CorrMode::DiagonalApprox).unwrap();
            assert_eq!(full.b, approx.b);
            assert_eq!(full.c, approx.c);
            assert_eq!(full.d, approx.d);
        }
    }

    #[test]
    fn coefficient_signs() {
        let stats = drop_stats(4, 3, 10, 0.8, 3);
        let p_hat = vec![0.2; 12];
        for est in [Estimator::Mmse, Estimator::EwMmse] {
            let co = coefficients(&stats, &p_hat, est, CorrMode::Full).unwrap();
            assert!(co.c.iter().all(|&c| c >= 0.0));
            assert!(co.d.iter().all(|&d| d > 0.0));
            if est == Estimator::EwMmse {
                assert!(co.b.iter().all(|b| b.im == 0.0 && b.re >= 0.0));
            }
        }
    }

    #[test]
    fn sinr_scale_invariance_and_zero_power() {
        let stats = drop_stats(4, 2, 8, 0.5, 4);
        let co = coefficients(&stats, &[0.2; 8], Estimator::Mmse, CorrMode::Full).unwrap();
        let mut powers = vec![0.2; 8];
        let lsfd = optimal_lsfd(&co, &powers).unwrap();
        let base = sinr_closed_form(&co, &powers, &lsfd).unwrap();
        let mut scaled = lsfd.clone();
        for v in &mut scaled.vectors {
            *v *= C64::new(-3.7, 2.1);
        }
        let s2 = sinr_closed_form(&co, &powers, &scaled).unwrap();
        for (a, b) in base.iter().zip(&s2) {
            assert!((a - b).abs() <= 1e-12 * a);
        }
        powers[3] = 0.0;
        assert_eq!(sinr_closed_form(&co, &powers, &lsfd).unwrap()[3], 0.0);
    }

    #[test]
    fn optimal_lsfd_attains_quadratic_form_and_beats_single_layer() {
        let stats = drop_stats(4, 3, 12, 0.6, 5);
        let co = coefficients(&stats, &[0.2; 12], Estimator::Mmse, CorrMode::Full).unwrap();
        let powers: Vec<f64> = (0..12).map(|i| 0.05 + 0.01 * i as f64).collect();
        let lsfd = optimal_lsfd(&co, &powers).unwrap();
        let sinr = sinr_closed_form(&co, &powers, &lsfd).unwrap();
        let quad = optimal_sinr(&co, &powers).unwrap();
        let single = sinr_closed_form(&co, &powers, &LsfdMatrix::single_layer(4, 3)).unwrap();
        for i in 0..12 {
            assert!((sinr[i] - quad[i]).abs() <= 1e-10 * quad[i]);
            assert!(single[i] <= sinr[i] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn single_layer_vectors() {
        let a = single_layer_lsfd(4, 1);
        assert_eq!(a.iter().map(|x| x.re).collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
        let stats = drop_stats(1, 2, 4, 0.3, 6);
        let co = coefficients(&stats, &[0.2; 2], Estimator::Mmse, CorrMode::Full).unwrap();
        let opt = sinr_closed_form(&co, &[0.2; 2], &optimal_lsfd(&co, &[0.2; 2]).unwrap()).unwrap();
        let single = sinr_closed_form(&co, &[0.2; 2], &LsfdMatrix::single_layer(1, 2)).unwrap();
        for (a, b) in opt.iter().zip(&single) {
            assert!((a - b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn sinr_never_rises_with_noise() {
        let mut stats = drop_stats(4, 2, 8, 0.5, 7);
        let p_hat = vec![0.2; 8];
        let co = coefficients(&stats, &p_hat, Estimator::Mmse, CorrMode::Full).unwrap();
        let lsfd = LsfdMatrix::single_layer(4, 2);
        let base = sinr_closed_form(&co, &p_hat, &lsfd).unwrap();
        stats.sigma2 *= 2.0;
        let noisy = coefficients(&stats, &p_hat, Estimator::Mmse, CorrMode::Full).unwrap();
        let after = sinr_closed_form(&noisy, &p_hat, &lsfd).unwrap();
        for (a, b) in base.iter().zip(&after) {
            assert!(b <= a);
        }
    }

    #[test]
    fn report_values() {
        let r = se_report(&[0.0, 1.0], 2, 1, 2).unwrap();
        assert_eq!(r.se, vec![0.0, 0.5]);
        assert_eq!(r.sum_se_per_cell, vec![0.5]);
        let r = se_report(&[1.0, 3.0, 7.0, 0.5, 0.0, 2.0], 3, 3, 200).unwrap();
        assert!((r.sum_se_per_cell.iter().sum::<f64>() - r.se.iter().sum::<f64>()).abs() < 1e-12);
        assert!(se_report(&[-1.0], 1, 1, 2).is_err());
        assert!(se_report(&[1.0], 1, 2, 2).is_err());
    }

    #[test]
    fn rzf_reductions() {
        let h = CMatrix::from_fn(6, 1, |i, _| C64::new(i as f64 - 2.0, 0.5 * i as f64));
        let v = rzf_combiner(&h, 0.1, 1.0).unwrap();
        let ratio = v[(0, 0)] / h[(0, 0)];
        assert!((v.clone() - &h * ratio).norm() < 1e-12 * v.norm());

        let h = CMatrix::from_fn(6, 3, |i, j| C64::new((i * j) as f64 % 5.0 - 1.0, (i + 2 * j) as f64 % 3.0));
        let v = rzf_combiner(&h, 1e9, 1e-9).unwrap();
        for j in 0..3 {
            let vj = v.column(j);
            let hj = h.column(j);
            let alpha = vj.dotc(&hj) / hj.dotc(&hj);
            assert!((vj - hj * alpha).norm() < 1e-6 * vj.norm());
        }
    }

    #[test]
    fn rzf_suppresses_other_users() {
        let mut rng = rng::stream(8, &[]);
        for _ in 0..20 {
            let h = CMatrix::from_fn(16, 4, |_, _| rng::complex_normal(&mut rng, 1.0));
            let v = rzf_combiner(&h, 0.01, 1.0).unwrap();
            let g = h.adjoint() * &v;
            for k in 0..4 {
                for j in (0..4).filter(|&j| j != k) {
                    assert!(g[(k, k)].norm() >= g[(j, k)].norm());
                }
            }
        }
    }

    #[test]
    fn general_model_rejects_few_realizations() {
        let stats = drop_stats(2, 1, 4, 0.5, 9);
        assert!(general_expectations_mc(&stats, Estimator::Mmse, Combiner::Mrc, &[0.2; 2], &[0.2; 2], 50, 1).is_err());
    }

    #[test]
    fn general_model_matches_closed_form_under_mrc() {
        let stats = drop_stats(4, 2, 8, 0.5, 10);
        let p_hat = vec![0.2; 8];
        let powers: Vec<f64> = (0..8).map(|i| 0.1 + 0.012 * i as f64).collect();
        let co = coefficients(&stats, &p_hat, Estimator::Mmse, CorrMode::Full).unwrap();
        let closed = se_report(&optimal_sinr(&co, &powers).unwrap(), 2, 2, 200).unwrap();
        let model = general_expectations_mc(&stats, Estimator::Mmse, Combiner::Mrc, &p_hat, &powers, 40_000, 11).unwrap();
        let (_, report) = general_optimal_lsfd(&model, 2, 200).unwrap();
        for (a, b) in closed.se.iter().zip(&report.se) {
            assert!((a - b).abs() <= 0.05 * a, "closed {a} vs MC {b}");
        }
    }

    #[test]
    fn general_model_without_interference_or_noise() {
        let mut stats = drop_stats(2, 2, 4, 0.3, 12);
        stats.sigma2 = 1e-30;
        let powers = vec![0.0; 4];
        let model = general_expectations_mc(&stats, Estimator::Mmse, Combiner::Mrc, &[0.2; 4], &powers, 200, 13).unwrap();
        let scale: f64 = model.b_vec.iter().map(|b| b.norm_squared()).sum::<f64>();
        for k in 0..2 {
            assert!(model.c3[k].iter().all(|&x| x == 0.0));
            assert!(model.c4[k].iter().all(|&x| x <= 1e-20 * scale));
        }
    }

    #[test]
    fn monte_carlo_is_thread_count_independent() {
        let stats = drop_stats(2, 2, 4, 0.5, 14);
        let run = || general_expectations_mc(&stats, Estimator::Mmse, Combiner::Rzf, &[0.2; 4], &[0.2; 4], 3000, 15).unwrap();
        let a = run();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(run);
        assert_eq!(a.b_vec, b.b_vec);
        assert_eq!(a.c3, b.c3);
    }
}
