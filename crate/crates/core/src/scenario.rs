//! Network geometry and large-scale channel statistics.
//!
//! Cells are squares laid out on a `rows x cols` grid that wraps around in
//! both directions, so every cell sees the same interference environment.
//! Each base station sits at the centre of its cell with a uniform linear
//! array whose boresight points along +x.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{CMatrix, trace};
use crate::{Error, Result, C64};

/// Maximum rejection-sampling attempts per user position.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Static system parameters of one simulated network.
///
/// The pilot length always equals the number of users per cell, so it is
/// derived rather than stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub cells: usize,
    pub users_per_cell: usize,
    pub antennas: usize,
    /// Coherence block length in symbols.
    pub coherence_length: usize,
    pub bandwidth_hz: f64,
    /// Total in-band noise floor.
    pub noise_power_dbm: f64,
    pub noise_figure_db: f64,
    /// Pilot power per symbol, in watts.
    pub pilot_power_w: f64,
    /// Maximum data power per symbol and user, in watts.
    pub max_power_w: f64,
    /// Magnitude of the exponential correlation coefficient, in `[0, 1)`.
    pub corr_magnitude: f64,
    pub cell_edge_m: f64,
    pub min_distance_m: f64,
    pub shadow_std_db: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            cells: 4,
            users_per_cell: 5,
            antennas: 200,
            coherence_length: 200,
            bandwidth_hz: 20e6,
            noise_power_dbm: -96.0,
            noise_figure_db: 5.0,
            pilot_power_w: 0.2,
            max_power_w: 0.2,
            corr_magnitude: 0.5,
            cell_edge_m: 250.0,
            min_distance_m: 35.0,
            shadow_std_db: 7.0,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn pilot_length(&self) -> usize {
        self.users_per_cell
    }

    /// Fraction of the coherence block left for data.
    pub fn prelog(&self) -> f64 {
        1.0 - self.pilot_length() as f64 / self.coherence_length as f64
    }

    /// Receiver noise power in watts.
    pub fn noise_power_w(&self) -> f64 {
        dbm_to_watt(self.noise_power_dbm + self.noise_figure_db)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.cells == 0 || self.users_per_cell == 0 || self.antennas == 0 {
            return fail("cells, users_per_cell and antennas must all be at least 1");
        }
        if self.pilot_length() > self.coherence_length {
            return fail("pilot length (= users_per_cell) exceeds the coherence block");
        }
        if !(0.0..1.0).contains(&self.corr_magnitude) {
            return fail("corr_magnitude must lie in [0, 1)");
        }
        if !(self.pilot_power_w > 0.0 && self.max_power_w > 0.0) {
            return fail("pilot and data powers must be positive");
        }
        if !(self.min_distance_m > 0.0 && self.cell_edge_m > 0.0) {
            return fail("cell edge and minimum distance must be positive");
        }
        if !(self.bandwidth_hz > 0.0) || !(self.shadow_std_db >= 0.0) {
            return fail("bandwidth must be positive and shadowing std nonnegative");
        }
        if !self.noise_power_dbm.is_finite() || !self.noise_figure_db.is_finite() {
            return fail("noise parameters must be finite");
        }
        Ok(())
    }

    /// Grid shape `(rows, cols)` with `rows * cols == cells`, as square as possible.
    pub fn grid(&self) -> (usize, usize) {
        let mut rows = (self.cells as f64).sqrt().floor() as usize;
        while rows > 1 && self.cells % rows != 0 {
            rows -= 1;
        }
        let rows = rows.max(1);
        (rows, self.cells / rows)
    }
}

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

/// One random placement of users with its shadowing realization.
///
/// Per-link quantities are indexed by [`link_index`] over
/// `(user cell, user index, base station)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserDrop {
    pub cells: usize,
    pub users_per_cell: usize,
    pub bs_positions: Vec<[f64; 2]>,
    /// Indexed by `cell * users_per_cell + user`.
    pub user_positions: Vec<[f64; 2]>,
    pub distances_m: Vec<f64>,
    pub angles_rad: Vec<f64>,
    pub shadow_db: Vec<f64>,
}

/// Flat index of the link from user `k` of cell `l` to base station `bs`.
#[inline]
pub fn link_index(cells: usize, users: usize, l: usize, k: usize, bs: usize) -> usize {
    (l * users + k) * cells + bs
}

/// Shortest displacement from `from` to any periodic image of `to` on a torus.
///
/// All nine neighbouring translates are examined explicitly.
pub fn wrapped_displacement(from: [f64; 2], to: [f64; 2], period: [f64; 2]) -> [f64; 2] {
    let mut best = [to[0] - from[0], to[1] - from[1]];
    let mut best_d2 = f64::INFINITY;
    for sx in [-1.0, 0.0, 1.0] {
        for sy in [-1.0, 0.0, 1.0] {
            let dx = to[0] + sx * period[0] - from[0];
            let dy = to[1] + sy * period[1] - from[1];
            let d2 = dx * dx + dy * dy;
            if d2 < best_d2 {
                best_d2 = d2;
                best = [dx, dy];
            }
        }
    }
    best
}

/// Place base stations and users, and draw shadow fading.
pub fn build_drop<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<UserDrop> {
    config.validate()?;
    let (rows, cols) = config.grid();
    let edge = config.cell_edge_m;
    let period = [cols as f64 * edge, rows as f64 * edge];
    let (cells, users) = (config.cells, config.users_per_cell);

    let cell_origin = |l: usize| [(l % cols) as f64 * edge, (l / cols) as f64 * edge];
    let bs_positions: Vec<[f64; 2]> = (0..cells)
        .map(|l| {
            let o = cell_origin(l);
            [o[0] + edge / 2.0, o[1] + edge / 2.0]
        })
        .collect();

    let mut user_positions = Vec::with_capacity(cells * users);
    for l in 0..cells {
        let origin = cell_origin(l);
        for _ in 0..users {
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let p = [
                    origin[0] + rng.random::<f64>() * edge,
                    origin[1] + rng.random::<f64>() * edge,
                ];
                let d = wrapped_displacement(bs_positions[l], p, period);
                if d[0].hypot(d[1]) >= config.min_distance_m {
                    placed = Some(p);
                    break;
                }
            }
            let p = placed.ok_or_else(|| {
                Error::Config(format!(
                    "could not place a user {} m from its base station in a {} m cell",
                    config.min_distance_m, edge
                ))
            })?;
            user_positions.push(p);
        }
    }

    let n_links = cells * users * cells;
    let mut distances_m = vec![0.0; n_links];
    let mut angles_rad = vec![0.0; n_links];
    for l in 0..cells {
        for k in 0..users {
            for bs in 0..cells {
                let d = wrapped_displacement(bs_positions[bs], user_positions[l * users + k], period);
                let idx = link_index(cells, users, l, k, bs);
                distances_m[idx] = d[0].hypot(d[1]);
                angles_rad[idx] = d[1].atan2(d[0]);
            }
        }
    }

    let shadow = Normal::new(0.0, config.shadow_std_db)
        .map_err(|e| Error::Config(format!("shadowing distribution: {e}")))?;
    let shadow_db = (0..n_links).map(|_| shadow.sample(rng)).collect();

    Ok(UserDrop {
        cells,
        users_per_cell: users,
        bs_positions,
        user_positions,
        distances_m,
        angles_rad,
        shadow_db,
    })
}

/// Linear-scale large-scale fading gain for a link.
///
/// `[beta]_dB = -148.1 - 37.6 log10(d / 1 km) + z`.
pub fn large_scale_fading(distance_m: f64, shadow_db: f64) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(Error::Argument(format!(
            "distance must be positive, got {distance_m}"
        )));
    }
    let beta_db = -148.1 - 37.6 * (distance_m / 1000.0).log10() + shadow_db;
    Ok(10f64.powf(beta_db / 10.0))
}

/// Exponential correlation model of a uniform linear array.
///
/// Entry `(m, n)` is `beta * r^(m-n)` for `m >= n` with `r = magnitude * e^{j angle}`,
/// and the conjugate above the diagonal.
pub fn correlation_matrix(beta: f64, angle: f64, magnitude: f64, antennas: usize) -> Result<CMatrix> {
    if !(0.0..1.0).contains(&magnitude) {
        return Err(Error::Argument(format!(
            "correlation magnitude must lie in [0, 1), got {magnitude}"
        )));
    }
    let r = C64::from_polar(magnitude, angle);
    // r^0 = 1 also for magnitude 0
    let powers: Vec<C64> = (0..antennas).map(|n| r.powu(n as u32)).collect();
    Ok(CMatrix::from_fn(antennas, antennas, |m, n| {
        if m >= n {
            powers[m - n] * beta
        } else {
            powers[n - m].conj() * beta
        }
    }))
}

/// Every large-scale quantity needed downstream.
#[derive(Debug, Clone)]
pub struct ScenarioStatistics {
    pub cells: usize,
    pub users_per_cell: usize,
    pub antennas: usize,
    pub pilot_length: usize,
    /// Indexed by [`link_index`].
    pub beta: Vec<f64>,
    /// Indexed by [`link_index`].
    pub corr: Vec<CMatrix>,
    /// Noise power in watts.
    pub sigma2: f64,
}

impl ScenarioStatistics {
    /// Assemble statistics from explicit parts, checking shapes.
    ///
    /// `beta` is read off the correlation diagonals.
    pub fn from_correlations(
        cells: usize,
        users_per_cell: usize,
        pilot_length: usize,
        corr: Vec<CMatrix>,
        sigma2: f64,
    ) -> Result<Self> {
        if corr.len() != cells * users_per_cell * cells {
            return Err(Error::Argument(format!(
                "expected {} correlation matrices, got {}",
                cells * users_per_cell * cells,
                corr.len()
            )));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::Argument("noise power must be positive".into()));
        }
        let antennas = corr.first().map(|r| r.nrows()).unwrap_or(0);
        if corr.iter().any(|r| r.nrows() != antennas || r.ncols() != antennas) {
            return Err(Error::Argument("correlation matrices must all be M x M".into()));
        }
        let beta = corr.iter().map(|r| trace(r).re / antennas as f64).collect();
        Ok(Self {
            cells,
            users_per_cell,
            antennas,
            pilot_length,
            beta,
            corr,
            sigma2,
        })
    }

    #[inline]
    pub fn idx(&self, l: usize, k: usize, bs: usize) -> usize {
        link_index(self.cells, self.users_per_cell, l, k, bs)
    }

    /// Gain from user `k` of cell `l` to base station `bs`.
    pub fn beta(&self, l: usize, k: usize, bs: usize) -> f64 {
        self.beta[self.idx(l, k, bs)]
    }

    pub fn corr(&self, l: usize, k: usize, bs: usize) -> &CMatrix {
        &self.corr[self.idx(l, k, bs)]
    }

    /// Copy with every correlation matrix replaced by `beta * I`.
    pub fn diagonal_approx(&self) -> Self {
        let m = self.antennas;
        let corr = self
            .beta
            .iter()
            .map(|&b| CMatrix::identity(m, m) * C64::new(b, 0.0))
            .collect();
        Self {
            corr,
            ..self.clone()
        }
    }

    /// True when every correlation matrix has a constant diagonal equal to its beta.
    pub fn has_equal_diagonals(&self, rel_tol: f64) -> bool {
        self.corr.iter().zip(&self.beta).all(|(r, &b)| {
            r.diagonal()
                .iter()
                .all(|d| (d.re - b).abs() <= rel_tol * b.abs() && d.im.abs() <= rel_tol * b.abs())
        })
    }
}

/// Build the large-scale statistics of a drop.
pub fn scenario_statistics(config: &NetworkConfig, drop: &UserDrop) -> Result<ScenarioStatistics> {
    config.validate()?;
    if drop.cells != config.cells || drop.users_per_cell != config.users_per_cell {
        return Err(Error::Argument("drop does not match the configuration".into()));
    }
    let mut beta = Vec::with_capacity(drop.distances_m.len());
    let mut corr = Vec::with_capacity(drop.distances_m.len());
    for ((&d, &theta), &z) in drop.distances_m.iter().zip(&drop.angles_rad).zip(&drop.shadow_db) {
        let b = large_scale_fading(d, z)?;
        beta.push(b);
        corr.push(correlation_matrix(b, theta, config.corr_magnitude, config.antennas)?);
    }
    Ok(ScenarioStatistics {
        cells: config.cells,
        users_per_cell: config.users_per_cell,
        antennas: config.antennas,
        pilot_length: config.pilot_length(),
        beta,
        corr,
        sigma2: config.noise_power_w(),
    })
}
