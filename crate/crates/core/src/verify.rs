//! Monte Carlo oracles for the closed-form expressions.
//!
//! Nothing here is used by the closed-form path; these routines exist to
//! check it against sampled channels, pilots and estimates.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::channel::{Estimator, Simulator};
use crate::linalg::{cholesky_with_jitter, trace_product, CMatrix, CVector};
use crate::rng::complex_normal;
use crate::scenario::ScenarioStatistics;
use crate::se::{combiners, monte_carlo, Combiner, InnerProducts, LsfdMatrix, Merge};
use crate::{Error, Result, C64};

/// Sampled Lemma-3 terms for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSinrEstimate {
    /// Desired signal.
    pub ds: f64,
    /// Pilot contamination.
    pub pc: f64,
    /// Beamforming gain uncertainty.
    pub bu: f64,
    /// Non-coherent interference.
    pub ni: f64,
    /// Additive noise.
    pub an: f64,
    pub sinr: f64,
    /// Standard errors of `[ds, pc, bu, ni, an]`.
    pub term_std_error: [f64; 5],
    pub sinr_std_error: f64,
    pub n_realizations: usize,
}

/// Sums over one half of the trials of `z` and `z z^T`.
#[derive(Clone)]
struct Moments {
    n: usize,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            outer: vec![0.0; dim * dim],
        }
    }

    fn push(&mut self, z: &[f64]) {
        let dim = z.len();
        self.n += 1;
        for i in 0..dim {
            self.sum[i] += z[i];
            for j in i..dim {
                self.outer[i * dim + j] += z[i] * z[j];
            }
        }
    }

    fn add(&mut self, other: &Moments) {
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.outer.iter_mut().zip(&other.outer) {
            *a += b;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    /// `g^T Cov(z) g / n`: variance of `g^T mean(z)`.
    fn mean_variance(&self, g: &[f64]) -> f64 {
        let dim = self.sum.len();
        let n = self.n as f64;
        let mean = self.mean();
        let mut acc = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                let raw = if i <= j { self.outer[i * dim + j] } else { self.outer[j * dim + i] };
                let cov = (raw / n - mean[i] * mean[j]) * n / (n - 1.0);
                acc += g[i] * cov * g[j];
            }
        }
        (acc / n).max(0.0)
    }
}

/// Per-user moment sums for even and odd trials.
struct SinrAccumulator {
    halves: Vec<[Moments; 2]>,
}

impl Merge for SinrAccumulator {
    fn merge(&mut self, other: Self) {
        for (a, b) in self.halves.iter_mut().zip(&other.halves) {
            a[0].add(&b[0]);
            a[1].add(&b[1]);
        }
    }
}

/// Sample the Lemma-3 SINR decomposition of every user.
///
/// Per trial and user the sample vector is
/// `z = (Re X_1..X_L, Im X_1..X_L, S, NI, AN)` with
/// `X_{l'} = sum_{l''} conj(a^{l''}) v_{l'',k}^H h_{l',k}^{l''}`,
/// `S = sum_{l'} p_{l',k} |X_{l'}|^2`. Squared means `|E X|^2` multiply the
/// means of the even and odd trials, which removes the `Var/n` bias of
/// squaring a single noisy mean.
#[allow(clippy::too_many_arguments)]
pub fn mc_sinr(
    stats: &ScenarioStatistics,
    estimator: Estimator,
    combiner: Combiner,
    lsfd: &LsfdMatrix,
    powers: &[f64],
    pilot_powers: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<McSinrEstimate>> {
    if n < 1000 {
        return Err(Error::Argument(format!("need at least 1000 realizations, got {n}")));
    }
    let (cells, users) = (stats.cells, stats.users_per_cell);
    if powers.len() != cells * users || lsfd.vectors.len() != cells * users {
        return Err(Error::Argument("powers and LSFD vectors must cover every user".into()));
    }
    let sim = Simulator::new(stats, pilot_powers, estimator)?;
    let sigma2 = stats.sigma2;
    let dim = 2 * cells + 3;

    let init = || SinrAccumulator {
        halves: (0..cells * users).map(|_| [Moments::new(dim), Moments::new(dim)]).collect(),
    };
    let acc = monte_carlo(n, seed, init, |acc, trial, rng| {
        let draw = sim.draw(rng);
        let v = combiners(&draw, combiner, cells, users, sigma2, powers)?;
        let g = InnerProducts::new(&draw, &v, cells, users);
        let half = (trial % 2) as usize;
        let mut z = vec![0.0; dim];
        for l in 0..cells {
            for k in 0..users {
                let i = l * users + k;
                let a = &lsfd.vectors[i];
                let mut s = 0.0;
                for l_user in 0..cells {
                    let x: C64 = (0..cells).map(|bs| a[bs].conj() * g.get(bs, k, l_user, k)).sum();
                    z[l_user] = x.re;
                    z[cells + l_user] = x.im;
                    s += powers[l_user * users + k] * x.norm_sqr();
                }
                let mut ni = 0.0;
                for l_user in 0..cells {
                    for kk in (0..users).filter(|&kk| kk != k) {
                        let x: C64 = (0..cells).map(|bs| a[bs].conj() * g.get(bs, k, l_user, kk)).sum();
                        ni += powers[l_user * users + kk] * x.norm_sqr();
                    }
                }
                let an: f64 = (0..cells).map(|bs| a[bs].norm_sqr() * g.norms[bs * users + k]).sum::<f64>() * sigma2;
                z[2 * cells] = s;
                z[2 * cells + 1] = ni;
                z[2 * cells + 2] = an;
                acc.halves[i][half].push(&z);
            }
        }
        Ok(())
    })?;

    let mut out = Vec::with_capacity(cells * users);
    for l in 0..cells {
        for k in 0..users {
            let i = l * users + k;
            let [ha, hb] = &acc.halves[i];
            out.push(summarize(ha, hb, powers, l, k, cells, users));
        }
    }
    Ok(out)
}

fn summarize(ha: &Moments, hb: &Moments, powers: &[f64], l: usize, k: usize, cells: usize, users: usize) -> McSinrEstimate {
    let dim = 2 * cells + 3;
    let (ma, mb) = (ha.mean(), hb.mean());
    let n = ha.n + hb.n;
    let weight = [ha.n as f64 / n as f64, hb.n as f64 / n as f64];
    let p = |l_user: usize| powers[l_user * users + k];
    let combined = |idx: usize| weight[0] * ma[idx] + weight[1] * mb[idx];
    // split estimate of |E X_{l'}|^2
    let sq: Vec<f64> = (0..cells)
        .map(|j| ma[j] * mb[j] + ma[cells + j] * mb[cells + j])
        .collect();
    let s_mean = combined(2 * cells);
    let ds = p(l) * sq[l];
    let pc: f64 = (0..cells).filter(|&j| j != l).map(|j| p(j) * sq[j]).sum();
    let bu = s_mean - (0..cells).map(|j| p(j) * sq[j]).sum::<f64>();
    let ni = combined(2 * cells + 1);
    let an = combined(2 * cells + 2);
    let denom = pc + bu + ni + an;

    // gradients of each quantity with respect to the half means
    let grads = |half: usize| -> [Vec<f64>; 6] {
        let other = if half == 0 { &mb } else { &ma };
        let w = weight[half];
        let mut g = [
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
        ];
        for j in 0..cells {
            let (dre, dim_) = (p(j) * other[j], p(j) * other[cells + j]);
            if j == l {
                g[0][j] = dre;
                g[0][cells + j] = dim_;
            } else {
                g[1][j] = dre;
                g[1][cells + j] = dim_;
            }
            g[2][j] = -dre;
            g[2][cells + j] = -dim_;
        }
        g[2][2 * cells] = w;
        g[3][2 * cells + 1] = w;
        g[4][2 * cells + 2] = w;
        for idx in 0..dim {
            let d_denom = g[1][idx] + g[2][idx] + g[3][idx] + g[4][idx];
            g[5][idx] = if denom > 0.0 { g[0][idx] / denom - ds * d_denom / (denom * denom) } else { 0.0 };
        }
        g
    };
    let (ga, gb) = (grads(0), grads(1));
    let se = |q: usize| (ha.mean_variance(&ga[q]) + hb.mean_variance(&gb[q])).sqrt();
    let clamp = |x: f64| x.max(0.0);
    let (ds_c, pc_c, bu_c, ni_c, an_c) = (clamp(ds), clamp(pc), clamp(bu), clamp(ni), clamp(an));
    let total = pc_c + bu_c + ni_c + an_c;
    let sinr = if ds_c == 0.0 {
        0.0
    } else if total > 0.0 {
        ds_c / total
    } else {
        f64::INFINITY
    };
    McSinrEstimate {
        ds: ds_c,
        pc: pc_c,
        bu: bu_c,
        ni: ni_c,
        an: an_c,
        sinr,
        term_std_error: [se(0), se(1), se(2), se(3), se(4)],
        sinr_std_error: se(5),
        n_realizations: n,
    }
}

struct ScalarSum {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Merge for ScalarSum {
    fn merge(&mut self, other: Self) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }
}

/// Outcome of a Monte Carlo moment check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub mc_value: f64,
    pub exact_value: f64,
    pub std_error: f64,
}

impl MomentCheck {
    pub fn relative_error(&self) -> f64 {
        if self.exact_value == 0.0 {
            self.mc_value.abs()
        } else {
            (self.mc_value - self.exact_value).abs() / self.exact_value.abs()
        }
    }
}

/// For `u ~ CN(0, Lambda)`: `E{|u^H M u|^2} = |tr(Lambda M)|^2 + tr(Lambda M Lambda M^H)`.
pub fn gaussian_quartic_check(lambda: &CMatrix, mmat: &CMatrix, n: usize, seed: u64) -> Result<MomentCheck> {
    let dim = lambda.nrows();
    if lambda.ncols() != dim || mmat.nrows() != dim || mmat.ncols() != dim {
        return Err(Error::Argument("Lambda and M must be square of equal size".into()));
    }
    if n < 2 {
        return Err(Error::Argument("need at least two samples".into()));
    }
    let tr = trace_product(lambda, mmat);
    let lm = lambda * mmat;
    let exact = tr.norm_sqr() + trace_product(&lm, &(lambda * mmat.adjoint())).re;
    let factor = cholesky_with_jitter(lambda)?.l();
    let acc = monte_carlo(
        n,
        seed,
        || ScalarSum {
            n: 0,
            sum: 0.0,
            sum_sq: 0.0,
        },
        |acc, _, rng| {
            let g = CVector::from_fn(dim, |_, _| complex_normal(rng, 1.0));
            let u = &factor * g;
            let q = u.dotc(&(mmat * &u)).norm_sqr();
            acc.n += 1;
            acc.sum += q;
            acc.sum_sq += q * q;
            Ok(())
        },
    )?;
    let nf = acc.n as f64;
    let mean = acc.sum / nf;
    let var = (acc.sum_sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok(MomentCheck {
        mc_value: mean,
        exact_value: exact,
        std_error: (var / nf).sqrt(),
    })
}

/// Two cells, one user each, infinitely many antennas: BS `i` sees
/// `s_hat_i = sum_j B_{ij} s_j`, and `B^{-1}` undoes the mixing.
/// Returns `|| B^{-1} (B s) - s ||`.
pub fn toy_example_check(b: &Matrix2<f64>, s: [C64; 2]) -> Result<f64> {
    let scale = b.abs().max();
    if !(scale > 0.0) || b.determinant().abs() <= 1e-14 * scale * scale {
        return Err(Error::Argument("B is singular".into()));
    }
    let inv = b.try_inverse().ok_or_else(|| Error::Argument("B is singular".into()))?;
    let detected = [
        s[0] * b[(0, 0)] + s[1] * b[(0, 1)],
        s[0] * b[(1, 0)] + s[1] * b[(1, 1)],
    ];
    let decoded = [
        detected[0] * inv[(0, 0)] + detected[1] * inv[(0, 1)],
        detected[0] * inv[(1, 0)] + detected[1] * inv[(1, 1)],
    ];
    Ok(((decoded[0] - s[0]).norm_sqr() + (decoded[1] - s[1]).norm_sqr()).sqrt())
}

/// Empirical and analytic cross-correlation of an own-cell estimate with its error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityCheck {
    /// Largest `||E{h_hat e^H}||_F / ||R||_F` over own-cell links, sampled.
    pub empirical: f64,
    /// Same quantity from the estimator statistics.
    pub analytic: f64,
    pub n_realizations: usize,
}

struct CrossAccumulator {
    sums: Vec<CMatrix>,
}

impl Merge for CrossAccumulator {
    fn merge(&mut self, other: Self) {
        for (a, b) in self.sums.iter_mut().zip(other.sums) {
            *a += b;
        }
    }
}

/// Sample `E{h_hat e^H}` for every own-cell link.
///
/// It vanishes for MMSE estimation. For EW-MMSE it equals
/// `varrho tau_p (sqrt(p) R - varrho Psi)`, which is nonzero once `R` has
/// off-diagonal entries.
pub fn mmse_orthogonality_check(
    stats: &ScenarioStatistics,
    estimator: Estimator,
    pilot_powers: &[f64],
    n: usize,
    seed: u64,
) -> Result<OrthogonalityCheck> {
    if n < 2 {
        return Err(Error::Argument("need at least two samples".into()));
    }
    let (cells, users, m) = (stats.cells, stats.users_per_cell, stats.antennas);
    let sim = Simulator::new(stats, pilot_powers, estimator)?;
    let acc = monte_carlo(
        n,
        seed,
        || CrossAccumulator {
            sums: vec![CMatrix::zeros(m, m); cells * users],
        },
        |acc, _, rng| {
            let draw = sim.draw(rng);
            for i in 0..cells * users {
                let (l, k) = (i / users, i % users);
                let est = &draw.own_estimates[i];
                let err = draw.channels.get(l, k, l) - est;
                acc.sums[i].ger(C64::new(1.0, 0.0), est, &err.conjugate(), C64::new(1.0, 0.0));
            }
            Ok(())
        },
    )?;
    let tau = stats.pilot_length as f64;
    let mut empirical = 0.0_f64;
    let mut analytic = 0.0_f64;
    for i in 0..cells * users {
        let (l, k) = (i / users, i % users);
        let r = stats.corr(l, k, l);
        let r_norm = r.norm();
        let mean = &acc.sums[i] / C64::new(n as f64, 0.0);
        empirical = empirical.max(mean.norm() / r_norm);
        let exact = match estimator {
            Estimator::Mmse => 0.0,
            Estimator::EwMmse => {
                let g = sim.model.varrho(l, k, l);
                let p = sim.model.pilot_power(l, k);
                let x = (r * C64::new(p.sqrt(), 0.0) - sim.model.psi(l, k) * C64::new(g, 0.0)) * C64::new(g * tau, 0.0);
                x.norm() / r_norm
            }
        };
        analytic = analytic.max(exact);
    }
    Ok(OrthogonalityCheck {
        empirical,
        analytic,
        n_realizations: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::scenario::{build_drop, scenario_statistics, NetworkConfig};
    use crate::se::{coefficients, optimal_lsfd, sinr_closed_form, CorrMode};

    fn stats(cells: usize, users: usize, m: usize, corr: f64, seed: u64) -> ScenarioStatistics {
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

    #[test]
    fn identity_quartic() {
        let eye = CMatrix::identity(4, 4);
        let chk = gaussian_quartic_check(&eye, &eye, 200_000, 1).unwrap();
        assert_eq!(chk.exact_value, 20.0);
        assert!((chk.mc_value - 20.0).abs() < 4.0 * chk.std_error);
    }

    #[test]
    fn zero_matrix_quartic() {
        let lambda = CMatrix::identity(3, 3);
        let chk = gaussian_quartic_check(&lambda, &CMatrix::zeros(3, 3), 100, 2).unwrap();
        assert_eq!((chk.mc_value, chk.exact_value), (0.0, 0.0));
    }

    #[test]
    fn toy_residuals() {
        let s = [C64::new(0.3, -1.2), C64::new(-0.7, 0.4)];
        assert_eq!(toy_example_check(&Matrix2::identity(), s).unwrap(), 0.0);
        let b = Matrix2::new(1.0, 0.2, 0.3, 0.9);
        assert!(toy_example_check(&b, s).unwrap() < 1e-12);
        assert!(toy_example_check(&Matrix2::new(1.0, 2.0, 2.0, 4.0), s).is_err());
    }

    #[test]
    fn rejects_small_sample_counts() {
        let st = stats(1, 1, 4, 0.0, 3);
        let lsfd = LsfdMatrix::single_layer(1, 1);
        assert!(mc_sinr(&st, Estimator::Mmse, Combiner::Mrc, &lsfd, &[0.2], &[0.2], 999, 1).is_err());
    }

    #[test]
    fn noise_only_terms_vanish() {
        let st = stats(2, 2, 4, 0.5, 4);
        let lsfd = LsfdMatrix::single_layer(2, 2);
        let est = mc_sinr(&st, Estimator::Mmse, Combiner::Mrc, &lsfd, &[0.0; 4], &[0.2; 4], 2000, 5).unwrap();
        for e in est {
            assert_eq!((e.ds, e.pc, e.bu, e.ni), (0.0, 0.0, 0.0, 0.0));
            assert!(e.an > 0.0);
        }
    }

    #[test]
    fn single_link_has_no_contamination() {
        let st = stats(1, 1, 4, 0.5, 6);
        let lsfd = LsfdMatrix::single_layer(1, 1);
        let est = mc_sinr(&st, Estimator::Mmse, Combiner::Mrc, &lsfd, &[0.2], &[0.2], 2000, 7).unwrap();
        assert_eq!(est[0].pc, 0.0);
    }

    #[test]
    fn closed_form_within_three_standard_errors() {
        let st = stats(2, 2, 8, 0.5, 8);
        let p_hat = [0.2; 4];
        let powers = [0.1, 0.2, 0.15, 0.05];
        for est in [Estimator::Mmse, Estimator::EwMmse] {
            let co = coefficients(&st, &p_hat, est, CorrMode::Full).unwrap();
            let lsfd = optimal_lsfd(&co, &powers).unwrap();
            let closed = sinr_closed_form(&co, &powers, &lsfd).unwrap();
            let mc = mc_sinr(&st, est, Combiner::Mrc, &lsfd, &powers, &p_hat, 40_000, 9).unwrap();
            for (c, m) in closed.iter().zip(&mc) {
                assert!((c - m.sinr).abs() <= 3.0 * m.sinr_std_error, "{est}: {c} vs {} +- {}", m.sinr, m.sinr_std_error);
            }
        }
    }

    #[test]
    fn standard_errors_shrink_with_sample_count() {
        let st = stats(2, 1, 4, 0.3, 10);
        let lsfd = LsfdMatrix::single_layer(2, 1);
        let a = mc_sinr(&st, Estimator::Mmse, Combiner::Mrc, &lsfd, &[0.2; 2], &[0.2; 2], 20_000, 11).unwrap();
        let b = mc_sinr(&st, Estimator::Mmse, Combiner::Mrc, &lsfd, &[0.2; 2], &[0.2; 2], 80_000, 12).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let ratio = x.sinr_std_error / y.sinr_std_error;
            assert!((1.8..=2.2).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn orthogonality_of_estimators() {
        let st = stats(2, 1, 6, 0.8, 13);
        let mmse = mmse_orthogonality_check(&st, Estimator::Mmse, &[0.2; 2], 100_000, 14).unwrap();
        assert_eq!(mmse.analytic, 0.0);
        assert!(mmse.empirical < 0.02);
        let ew = mmse_orthogonality_check(&st, Estimator::EwMmse, &[0.2; 2], 100_000, 14).unwrap();
        assert!(ew.analytic > 0.05);
        assert!((ew.empirical - ew.analytic).abs() < 0.2 * ew.analytic);
    }
}
