//! Plot-ready tables (two or four numeric columns) for spectra, probe
//! profiles, calibration curves, shift lines and mode maps.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::analysis::ComparisonReport;
use crate::artifact::Table;
use crate::lattice::LatticeSpec;
use crate::probe::{GammaFit, HeightSample};
use crate::scanner::ShiftCurve;
use crate::transmission::TransmissionSpectrum;

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("cannot draw a {kind} plot from a {source_kind}")]
    KindMismatch { kind: PlotKind, source_kind: &'static str },
    #[error("unknown plot kind {0:?}")]
    UnknownKind(String),
    #[error("report has {report} sites, lattice has {lattice}")]
    Sites { report: usize, lattice: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// `freq_ghz, abs_s21`
    Spectrum,
    /// `x_mm, shift_mhz`
    Profile,
    /// `z_um, shift_mhz, fit_mhz, residual_mhz`
    Calibration,
    /// `defect_mhz, shift_mhz`
    Shifts,
    /// `x, y, w_exp, w_th` with site positions in lattice units
    Map,
    /// `site, w_exp, w_th, deviation`
    Stems,
}

impl PlotKind {
    pub const ALL: [PlotKind; 6] =
        [PlotKind::Spectrum, PlotKind::Profile, PlotKind::Calibration, PlotKind::Shifts, PlotKind::Map, PlotKind::Stems];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::Spectrum => "spectrum",
            PlotKind::Profile => "profile",
            PlotKind::Calibration => "calibration",
            PlotKind::Shifts => "shifts",
            PlotKind::Map => "map",
            PlotKind::Stems => "stems",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlotKind {
    type Err = PlotError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PlotKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| PlotError::UnknownKind(s.to_string()))
    }
}

pub enum PlotSource<'a> {
    Spectrum(&'a TransmissionSpectrum),
    /// `(x_mm, shift_mhz)` samples along a resonator.
    Profile(&'a [(f64, f64)]),
    Calibration { samples: &'a [HeightSample], fit: &'a GammaFit, omega_r_ghz: f64 },
    Shifts(&'a ShiftCurve),
    Comparison { report: &'a ComparisonReport, lattice: &'a LatticeSpec },
}

impl PlotSource<'_> {
    fn name(&self) -> &'static str {
        match self {
            PlotSource::Spectrum(_) => "spectrum",
            PlotSource::Profile(_) => "profile",
            PlotSource::Calibration { .. } => "calibration table",
            PlotSource::Shifts(_) => "shift curve",
            PlotSource::Comparison { .. } => "comparison report",
        }
    }
}

pub fn emit_plot_data(source: &PlotSource, kind: PlotKind) -> Result<Table, PlotError> {
    let mismatch = || PlotError::KindMismatch { kind, source_kind: source.name() };
    let table = match (source, kind) {
        (PlotSource::Spectrum(s), PlotKind::Spectrum) => {
            let mut table = Table::new(&["freq_ghz", "abs_s21"]);
            table.rows = s.frequencies.iter().zip(&s.s21).map(|(f, a)| vec![*f, a.norm()]).collect();
            table
        }
        (PlotSource::Profile(p), PlotKind::Profile) => {
            let mut table = Table::new(&["x_mm", "shift_mhz"]);
            table.rows = p.iter().map(|&(x, y)| vec![x, y]).collect();
            table
        }
        (PlotSource::Calibration { samples, fit, omega_r_ghz }, PlotKind::Calibration) => {
            let mut table = Table::new(&["z_um", "shift_mhz", "fit_mhz", "residual_mhz"]);
            let mut rows: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| {
                    let dz = s.z_um - fit.z_offset_um;
                    let model = fit.gamma * omega_r_ghz / (dz * dz) * 1e3;
                    let measured = s.shift_ghz * 1e3;
                    vec![s.z_um, measured, model, measured - model]
                })
                .collect();
            rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
            table.rows = rows;
            table
        }
        (PlotSource::Shifts(c), PlotKind::Shifts) => {
            let mut table = Table::new(&["defect_mhz", "shift_mhz"]);
            let mut rows: Vec<Vec<f64>> = c.points.iter().map(|p| vec![p.defect_mhz, p.shift_mhz]).collect();
            rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
            table.rows = rows;
            table
        }
        (PlotSource::Comparison { report, lattice }, PlotKind::Map) => {
            if report.experiment.len() != lattice.len() {
                return Err(PlotError::Sites { report: report.experiment.len(), lattice: lattice.len() });
            }
            let mut table = Table::new(&["x", "y", "w_exp", "w_th"]);
            table.rows = lattice
                .sites
                .iter()
                .enumerate()
                .map(|(n, s)| {
                    let [x, y] = s.position();
                    vec![x, y, report.experiment[n], report.theory[n]]
                })
                .collect();
            table
        }
        (PlotSource::Comparison { report, .. }, PlotKind::Stems) => {
            let mut table = Table::new(&["site", "w_exp", "w_th", "deviation"]);
            table.rows = report
                .stems()
                .into_iter()
                .map(|(label, e, t)| vec![label as f64, e, t, e - t])
                .collect();
            table
        }
        _ => return Err(mismatch()),
    };
    Ok(table)
}
