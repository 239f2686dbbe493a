//! Experiment specs that regenerate the data behind the paper's figures.
//!
//! Desk scale keeps every preset within minutes on one core:
//! M = 100 (M sweep {50, 100, 150}), 20 drops, 200 small-scale realizations;
//! Fig. 3 uses 5 drops and Fig. 10 uses M = 64, 50 drops, 500 realizations.

use std::str::FromStr;

use lsfd_core::channel::Estimator;
use lsfd_core::optimizer::ConvergenceOptions;
use lsfd_core::scenario::NetworkConfig;
use lsfd_core::se::Combiner;

use crate::error::CliError;
use crate::spec::{ExperimentSpec, Mode, Sweep, SweepParameter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    Desk,
    Paper,
}

pub const PRESET_NAMES: [&str; 8] = ["fig3", "fig4", "fig5", "fig6", "fig7", "fig8", "fig9", "fig10"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Fig3,
    Fig4,
    Fig5,
    Fig6,
    Fig7,
    Fig8,
    Fig9,
    Fig10,
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "fig3" => Preset::Fig3,
            "fig4" => Preset::Fig4,
            "fig5" => Preset::Fig5,
            "fig6" => Preset::Fig6,
            "fig7" => Preset::Fig7,
            "fig8" => Preset::Fig8,
            "fig9" => Preset::Fig9,
            "fig10" => Preset::Fig10,
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown preset {s:?}; expected one of {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        })
    }
}

struct Sizes {
    antennas: usize,
    n_drops: usize,
    n_small_scale: usize,
}

fn sizes(scale: Scale) -> Sizes {
    match scale {
        Scale::Desk => Sizes {
            antennas: 100,
            n_drops: 20,
            n_small_scale: 200,
        },
        Scale::Paper => Sizes {
            antennas: 200,
            n_drops: 300,
            n_small_scale: 1000,
        },
    }
}

fn base(name: String, estimator: Estimator, scale: Scale) -> ExperimentSpec {
    let s = sizes(scale);
    ExperimentSpec {
        name,
        network: NetworkConfig {
            antennas: s.antennas,
            ..NetworkConfig::default()
        },
        estimator,
        combiner: Combiner::Mrc,
        modes: Mode::ALL.to_vec(),
        sweep: Sweep::default(),
        n_drops: s.n_drops,
        n_small_scale: s.n_small_scale,
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

fn tag(e: Estimator) -> &'static str {
    match e {
        Estimator::Mmse => "mmse",
        Estimator::EwMmse => "ewmmse",
    }
}

/// Specs for one preset; Fig. 3 and Fig. 10 have two runs each.
pub fn preset_specs(preset: Preset, scale: Scale) -> Vec<ExperimentSpec> {
    let paper = scale == Scale::Paper;
    let sweep = |parameter, values: Vec<f64>| Sweep { parameter, values };
    match preset {
        Preset::Fig3 => [Estimator::Mmse, Estimator::EwMmse]
            .into_iter()
            .map(|e| {
                let mut s = base(format!("fig3_{}", tag(e)), e, scale);
                s.network.corr_magnitude = 0.8;
                s.modes = vec![Mode::SingleOptimized, Mode::LsfdOptimized];
                s.record_trace = true;
                s.convergence.record_trace = true;
                if !paper {
                    s.n_drops = 5;
                }
                s
            })
            .collect(),
        Preset::Fig4 | Preset::Fig5 => {
            let e = if preset == Preset::Fig4 { Estimator::Mmse } else { Estimator::EwMmse };
            let mut s = base(format!("{}_{}", if preset == Preset::Fig4 { "fig4" } else { "fig5" }, tag(e)), e, scale);
            s.sweep = sweep(SweepParameter::CorrMagnitude, vec![0.0, 0.2, 0.4, 0.6, 0.8]);
            vec![s]
        }
        Preset::Fig6 | Preset::Fig7 => {
            let e = if preset == Preset::Fig6 { Estimator::Mmse } else { Estimator::EwMmse };
            let mut s = base(format!("{}_{}", if preset == Preset::Fig6 { "fig6" } else { "fig7" }, tag(e)), e, scale);
            let values = if paper { vec![100.0, 150.0, 200.0, 250.0, 300.0] } else { vec![50.0, 100.0, 150.0] };
            s.sweep = sweep(SweepParameter::Antennas, values);
            vec![s]
        }
        Preset::Fig8 | Preset::Fig9 => {
            let e = if preset == Preset::Fig8 { Estimator::Mmse } else { Estimator::EwMmse };
            let mut s = base(format!("{}_{}", if preset == Preset::Fig8 { "fig8" } else { "fig9" }, tag(e)), e, scale);
            s.sweep = sweep(SweepParameter::UsersPerCell, vec![2.0, 4.0, 6.0, 8.0, 10.0]);
            vec![s]
        }
        Preset::Fig10 => [Combiner::Mrc, Combiner::Rzf]
            .into_iter()
            .map(|c| {
                let mut s = base(format!("fig10_{}", c.to_string().to_lowercase()), Estimator::Mmse, scale);
                s.combiner = c;
                s.modes = vec![Mode::SingleFixed, Mode::LsfdFixed];
                if paper {
                    s.n_drops = 3000;
                } else {
                    s.network.antennas = 64;
                    s.n_drops = 50;
                    s.n_small_scale = 500;
                }
                s
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESET_NAMES {
            let p: Preset = name.parse().unwrap();
            for scale in [Scale::Desk, Scale::Paper] {
                for s in preset_specs(p, scale) {
                    s.validate().unwrap();
                    assert!(s.name.starts_with(name));
                }
            }
        }
        assert!("fig11".parse::<Preset>().is_err());
    }

    #[test]
    fn paper_scale_values() {
        let s = &preset_specs(Preset::Fig4, Scale::Paper)[0];
        assert_eq!(s.network.antennas, 200);
        assert_eq!(s.network.users_per_cell, 5);
        assert_eq!(s.network.pilot_power_w, 0.2);
        assert_eq!(s.network.max_power_w, 0.2);
        assert_eq!(s.n_drops, 300);
        assert_eq!(s.estimator, Estimator::Mmse);
        assert_eq!(s.sweep.values, vec![0.0, 0.2, 0.4, 0.6, 0.8]);
        let f10 = preset_specs(Preset::Fig10, Scale::Paper);
        assert_eq!(f10.len(), 2);
        assert!(f10.iter().all(|s| s.n_drops == 3000 && s.n_small_scale == 1000));
        let f3 = preset_specs(Preset::Fig3, Scale::Paper);
        assert!(f3.iter().all(|s| s.record_trace && s.network.corr_magnitude == 0.8));
    }
}
