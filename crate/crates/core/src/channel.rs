//! Correlated Rayleigh fading, the pilot phase and channel estimation.
//!
//! All cells share `K` orthogonal pilots and user `k` of every cell uses
//! pilot `k`. Correlating the received pilot block with pilot `k` at base
//! station `l` gives
//!
//! ```text
//! y_{l,k} = tau_p * sum_{l'} sqrt(p_{l',k}) h_{l',k}^l + n,   n ~ CN(0, tau_p sigma^2 I)
//! ```
//!
//! which is simulated directly; the pilot sequences themselves are never formed.

use nalgebra::{Cholesky, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky_pd, cholesky_with_jitter, CMatrix, CVector};
use crate::rng::complex_normal;
use crate::scenario::{link_index, ScenarioStatistics};
use crate::{Error, Result, C64};

/// Channel estimator used by every base station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "MMSE")]
    Mmse,
    #[serde(rename = "EW-MMSE")]
    EwMmse,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Mmse => "MMSE",
            Estimator::EwMmse => "EW-MMSE",
        })
    }
}

/// One realization of every channel vector, indexed by [`link_index`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub cells: usize,
    pub users_per_cell: usize,
    pub h: Vec<CVector>,
}

impl ChannelRealization {
    /// Channel from user `k` of cell `l` to base station `bs`.
    pub fn get(&self, l: usize, k: usize, bs: usize) -> &CVector {
        &self.h[link_index(self.cells, self.users_per_cell, l, k, bs)]
    }
}

/// Lower-triangular square roots of every correlation matrix.
pub struct CorrelationFactors {
    cells: usize,
    users_per_cell: usize,
    antennas: usize,
    lower: Vec<CMatrix>,
}

impl CorrelationFactors {
    pub fn new(stats: &ScenarioStatistics) -> Result<Self> {
        let lower = stats
            .corr
            .iter()
            .map(|r| cholesky_with_jitter(r).map(|c| c.unpack()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cells: stats.cells,
            users_per_cell: stats.users_per_cell,
            antennas: stats.antennas,
            lower,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        let m = self.antennas;
        let h = self
            .lower
            .iter()
            .map(|a| {
                let g = CVector::from_fn(m, |_, _| complex_normal(rng, 1.0));
                lower_times(a, &g)
            })
            .collect();
        ChannelRealization {
            cells: self.cells,
            users_per_cell: self.users_per_cell,
            h,
        }
    }
}

fn lower_times(a: &CMatrix, g: &CVector) -> CVector {
    let m = g.len();
    let mut out = CVector::zeros(m);
    for j in 0..m {
        let gj = g[j];
        for i in j..m {
            out[i] += a[(i, j)] * gj;
        }
    }
    out
}

/// Draw `h ~ CN(0, R)` for every link.
pub fn sample_channels<R: Rng + ?Sized>(
    stats: &ScenarioStatistics,
    rng: &mut R,
) -> Result<ChannelRealization> {
    Ok(CorrelationFactors::new(stats)?.sample(rng))
}

/// Pilot-correlated observations `y_{l,k}`, indexed by `bs * K + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotObservation {
    pub users_per_cell: usize,
    pub y: Vec<CVector>,
}

impl PilotObservation {
    pub fn get(&self, bs: usize, k: usize) -> &CVector {
        &self.y[bs * self.users_per_cell + k]
    }
}

/// Simulate the processed pilot signal at every base station.
///
/// `pilot_powers` is indexed by `cell * K + user`.
pub fn pilot_observation<R: Rng + ?Sized>(
    channels: &ChannelRealization,
    pilot_powers: &[f64],
    sigma2: f64,
    pilot_length: usize,
    rng: &mut R,
) -> PilotObservation {
    let (cells, users) = (channels.cells, channels.users_per_cell);
    let tau = pilot_length as f64;
    let m = channels.h.first().map(|h| h.len()).unwrap_or(0);
    let noise_var = tau * sigma2;
    let mut y = Vec::with_capacity(cells * users);
    for bs in 0..cells {
        for k in 0..users {
            let mut obs = CVector::from_fn(m, |_, _| complex_normal(rng, noise_var));
            for l in 0..cells {
                let amp = tau * pilot_powers[l * users + k].sqrt();
                obs.axpy(C64::new(amp, 0.0), channels.get(l, k, bs), C64::new(1.0, 0.0));
            }
            y.push(obs);
        }
    }
    PilotObservation {
        users_per_cell: users,
        y,
    }
}

/// `Psi_{bs,k} = sum_{l} tau_p p_{l,k} R_{l,k}^{bs} + sigma^2 I`, indexed by `bs * K + k`.
pub fn compute_psi(stats: &ScenarioStatistics, pilot_powers: &[f64]) -> Result<Vec<CMatrix>> {
    check_powers(stats, pilot_powers)?;
    let (cells, users, m) = (stats.cells, stats.users_per_cell, stats.antennas);
    let tau = stats.pilot_length as f64;
    let mut out = Vec::with_capacity(cells * users);
    for bs in 0..cells {
        for k in 0..users {
            let mut psi = CMatrix::identity(m, m) * C64::new(stats.sigma2, 0.0);
            for l in 0..cells {
                let w = tau * pilot_powers[l * users + k];
                psi += stats.corr(l, k, bs) * C64::new(w, 0.0);
            }
            out.push(psi);
        }
    }
    Ok(out)
}

fn check_powers(stats: &ScenarioStatistics, powers: &[f64]) -> Result<()> {
    if powers.len() != stats.cells * stats.users_per_cell {
        return Err(Error::Argument(format!(
            "expected {} powers, got {}",
            stats.cells * stats.users_per_cell,
            powers.len()
        )));
    }
    if powers.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Argument("powers must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Everything a base station needs to estimate channels: `Psi`, its
/// factorization and the element-wise gains.
pub struct EstimationModel<'a> {
    pub stats: &'a ScenarioStatistics,
    pub pilot_powers: Vec<f64>,
    psi: Vec<CMatrix>,
    psi_chol: Vec<Cholesky<C64, Dyn>>,
    /// Element-wise gain for the estimate of `h_{l,k}^{bs}`, by [`link_index`].
    varrho: Vec<f64>,
    equal_diagonals: bool,
}

impl<'a> EstimationModel<'a> {
    pub fn new(stats: &'a ScenarioStatistics, pilot_powers: &[f64]) -> Result<Self> {
        let psi = compute_psi(stats, pilot_powers)?;
        let psi_chol = psi
            .iter()
            .map(|p| cholesky_pd(p, "pilot covariance Psi"))
            .collect::<Result<Vec<_>>>()?;
        let (cells, users) = (stats.cells, stats.users_per_cell);
        let tau = stats.pilot_length as f64;
        let mut varrho = vec![0.0; cells * users * cells];
        for bs in 0..cells {
            for k in 0..users {
                let denom: f64 = (0..cells)
                    .map(|l| tau * pilot_powers[l * users + k] * stats.beta(l, k, bs))
                    .sum::<f64>()
                    + stats.sigma2;
                for l in 0..cells {
                    varrho[stats.idx(l, k, bs)] =
                        pilot_powers[l * users + k].sqrt() * stats.beta(l, k, bs) / denom;
                }
            }
        }
        Ok(Self {
            stats,
            pilot_powers: pilot_powers.to_vec(),
            psi,
            psi_chol,
            varrho,
            equal_diagonals: stats.has_equal_diagonals(1e-9),
        })
    }

    /// Reject estimators the statistics cannot support.
    pub fn check(&self, estimator: Estimator) -> Result<()> {
        if estimator == Estimator::EwMmse && !self.equal_diagonals {
            return Err(Error::Argument(
                "EW-MMSE estimation needs correlation matrices with equal diagonal entries".into(),
            ));
        }
        Ok(())
    }

    pub fn psi(&self, bs: usize, k: usize) -> &CMatrix {
        &self.psi[bs * self.stats.users_per_cell + k]
    }

    /// `Psi_{bs,k}^{-1} B` by triangular solves.
    pub fn psi_solve(&self, bs: usize, k: usize, rhs: &CMatrix) -> CMatrix {
        self.psi_chol[bs * self.stats.users_per_cell + k].solve(rhs)
    }

    pub fn psi_solve_vec(&self, bs: usize, k: usize, rhs: &CVector) -> CVector {
        self.psi_chol[bs * self.stats.users_per_cell + k].solve(rhs)
    }

    pub fn pilot_power(&self, l: usize, k: usize) -> f64 {
        self.pilot_powers[l * self.stats.users_per_cell + k]
    }

    /// Element-wise MMSE gain for `h_{l,k}^{bs}`.
    pub fn varrho(&self, l: usize, k: usize, bs: usize) -> f64 {
        self.varrho[self.stats.idx(l, k, bs)]
    }

    /// Linear map `sqrt(p_{l,k}) R_{l,k}^{bs} Psi_{bs,k}^{-1}` taking `y_{bs,k}` to the MMSE estimate.
    pub fn mmse_gain(&self, l: usize, k: usize, bs: usize) -> CMatrix {
        // R and Psi are Hermitian, so R Psi^{-1} = (Psi^{-1} R)^H.
        let psi_inv_r = self.psi_solve(bs, k, self.stats.corr(l, k, bs));
        psi_inv_r.adjoint() * C64::new(self.pilot_power(l, k).sqrt(), 0.0)
    }

    /// MMSE estimate of `h_{l,k}^{bs}` from `y_{bs,k}`.
    pub fn mmse_estimate(&self, y: &CVector, l: usize, k: usize, bs: usize) -> CVector {
        let x = self.psi_solve_vec(bs, k, y);
        self.stats.corr(l, k, bs) * x * C64::new(self.pilot_power(l, k).sqrt(), 0.0)
    }

    /// Element-wise MMSE estimate of `h_{l,k}^{bs}` from `y_{bs,k}`.
    pub fn ewmmse_estimate(&self, y: &CVector, l: usize, k: usize, bs: usize) -> CVector {
        y * C64::new(self.varrho(l, k, bs), 0.0)
    }

    pub fn estimate(&self, estimator: Estimator, y: &CVector, l: usize, k: usize, bs: usize) -> CVector {
        match estimator {
            Estimator::Mmse => self.mmse_estimate(y, l, k, bs),
            Estimator::EwMmse => self.ewmmse_estimate(y, l, k, bs),
        }
    }

    /// Covariance of the estimate of `h_{l,k}^{bs}`.
    pub fn estimate_cov(&self, estimator: Estimator, l: usize, k: usize, bs: usize) -> CMatrix {
        let tau = self.stats.pilot_length as f64;
        match estimator {
            Estimator::Mmse => {
                let r = self.stats.corr(l, k, bs);
                let psi_inv_r = self.psi_solve(bs, k, r);
                r * psi_inv_r * C64::new(tau * self.pilot_power(l, k), 0.0)
            }
            Estimator::EwMmse => {
                let g = self.varrho(l, k, bs);
                self.psi(bs, k) * C64::new(g * g * tau, 0.0)
            }
        }
    }

    /// Covariance of the estimation error `h - h_hat`.
    pub fn error_cov(&self, estimator: Estimator, l: usize, k: usize, bs: usize) -> CMatrix {
        self.stats.corr(l, k, bs) - self.estimate_cov(estimator, l, k, bs)
    }
}

/// One small-scale fading trial with own-cell estimates.
pub struct Draw {
    pub channels: ChannelRealization,
    pub pilots: PilotObservation,
    /// Estimate of `h_{l,k}^l`, indexed by `l * K + k`.
    pub own_estimates: Vec<CVector>,
}

/// Repeatable generator of channel/pilot/estimate trials for one scenario.
pub struct Simulator<'a> {
    pub model: EstimationModel<'a>,
    pub estimator: Estimator,
    factors: CorrelationFactors,
    own_gains: Vec<CMatrix>,
}

impl<'a> Simulator<'a> {
    pub fn new(stats: &'a ScenarioStatistics, pilot_powers: &[f64], estimator: Estimator) -> Result<Self> {
        let model = EstimationModel::new(stats, pilot_powers)?;
        model.check(estimator)?;
        let factors = CorrelationFactors::new(stats)?;
        let own_gains = match estimator {
            Estimator::Mmse => (0..stats.cells)
                .flat_map(|l| (0..stats.users_per_cell).map(move |k| (l, k)))
                .map(|(l, k)| model.mmse_gain(l, k, l))
                .collect(),
            Estimator::EwMmse => Vec::new(),
        };
        Ok(Self {
            model,
            estimator,
            factors,
            own_gains,
        })
    }

    pub fn stats(&self) -> &ScenarioStatistics {
        self.model.stats
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let stats = self.model.stats;
        let channels = self.factors.sample(rng);
        let pilots = pilot_observation(
            &channels,
            &self.model.pilot_powers,
            stats.sigma2,
            stats.pilot_length,
            rng,
        );
        let users = stats.users_per_cell;
        let own_estimates = (0..stats.cells * users)
            .map(|i| {
                let (l, k) = (i / users, i % users);
                let y = pilots.get(l, k);
                match self.estimator {
                    Estimator::Mmse => &self.own_gains[i] * y,
                    Estimator::EwMmse => self.model.ewmmse_estimate(y, l, k, l),
                }
            })
            .collect();
        Draw {
            channels,
            pilots,
            own_estimates,
        }
    }
}
