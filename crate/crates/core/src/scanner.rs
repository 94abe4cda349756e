//! Virtual scanning runs: per-site height sweeps over the true lattice,
//! Lorentzian mode tracking, and slope-based weight extraction.
//!
//! The [`WorldModel`] holds the ground truth (true parameters and probe
//! calibration); the [`ScanPlan`] holds what the analyst knows (the assumed
//! calibration, windows, grids). Only spectra pass from one to the other.

use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::fit_line;
use crate::lattice::{LatticeSpec, PortConfig};
use crate::probe::{defect_from_height, ProbeCalibration, ProbeError, SHIFT_SIGN};
use crate::spectral::{build_mode_matrix, solve_modes, DefectSet, LatticeParams, ModeSet, SpectralError, DEFAULT_CLUSTER_TOL_GHZ};
use crate::artifact::{annotated_json, Provenance};
use crate::transmission::{check_grid, fit_lorentzian, LorentzianFit, sweep_modes, TransmissionError, TransmissionSpectrum};
use crate::weights::WeightMap;

/// Windows reach this fraction of the gap to the nearest other mode.
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.45;
pub const DEFAULT_Z_MIN_UM: f64 = 60.0;
pub const DEFAULT_Z_MAX_UM: f64 = 300.0;
pub const DEFAULT_Z_COUNT: usize = 12;
/// Stream id of the probe-withdrawn reference measurement.
const BASELINE_STREAM: u64 = 0xFFFF_FFFF;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("windows {0} and {1} overlap")]
    OverlappingWindows(usize, usize),
    #[error("window for mode {mode} holds {count} unperturbed peaks, need exactly one")]
    WindowPeaks { mode: usize, count: usize },
    #[error("invalid world model: {0}")]
    World(String),
    #[error("mode {mode} gap {gap_ghz} GHz is below the minimum {min_gap_ghz} GHz")]
    DegenerateMode { mode: usize, gap_ghz: f64, min_gap_ghz: f64 },
    #[error("mode {0}: no site has enough points in the linear regime")]
    TooFewPoints(usize),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Transmission(#[from] TransmissionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeWindow {
    /// 1-based mode label.
    pub mode: usize,
    pub center_ghz: f64,
    pub lo_ghz: f64,
    pub hi_ghz: f64,
    /// Distance to the nearest other unperturbed mode.
    pub gap_ghz: f64,
}

impl ModeWindow {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi_ghz - self.lo_ghz)
    }

    pub fn contains(&self, f: f64) -> bool {
        f >= self.lo_ghz && f <= self.hi_ghz
    }
}

/// 12 log-spaced heights in [60, 300] um, rounded to whole micrometres,
/// in descending order.
pub fn default_z_grid() -> Vec<f64> {
    log_z_grid(DEFAULT_Z_MIN_UM, DEFAULT_Z_MAX_UM, DEFAULT_Z_COUNT)
}

pub fn log_z_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| (b + (a - b) * k as f64 / (count.max(2) - 1) as f64).exp().round())
        .collect()
}

/// Labels of the `count` non-degenerate modes with the largest gaps.
pub fn highest_gap_modes(modes: &ModeSet, count: usize) -> Vec<usize> {
    modes
        .by_gap()
        .into_iter()
        .filter(|&mu| !modes.is_degenerate(mu))
        .take(count)
        .map(|mu| mu + 1)
        .collect()
}

/// Windows of `fraction * gap` around each labelled mode.
pub fn mode_windows(modes: &ModeSet, labels: &[usize], fraction: f64) -> Result<Vec<ModeWindow>, ScanError> {
    if !(fraction > 0.0 && fraction < 0.5) {
        return Err(ScanError::Plan(format!("window fraction must lie in (0, 0.5), got {fraction}")));
    }
    labels
        .iter()
        .map(|&label| {
            let mu = label
                .checked_sub(1)
                .filter(|&m| m < modes.len())
                .ok_or_else(|| ScanError::Plan(format!("no mode {label}")))?;
            let gap = modes.gap(mu);
            let c = modes.frequencies[mu];
            Ok(ModeWindow { mode: label, center_ghz: c, lo_ghz: c - fraction * gap, hi_ghz: c + fraction * gap, gap_ghz: gap })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub grid_step_ghz: f64,
    /// Loss rate the analyst expects; sets the tracking fit width.
    pub kappa_ghz: f64,
    pub amplitude: Complex64,
    /// Overrides the lattice's own port pair.
    pub ports: Option<PortConfig>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { grid_step_ghz: 5e-5, kappa_ghz: 5e-4, amplitude: Complex64::new(1.0, 0.0), ports: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub lattice: LatticeSpec,
    pub sites: Vec<usize>,
    /// Descending.
    pub z_grid_um: Vec<f64>,
    pub grid_ghz: Vec<f64>,
    pub windows: Vec<ModeWindow>,
    pub ports: PortConfig,
    pub kappa_ghz: f64,
    pub amplitude: Complex64,
    pub assumed: ProbeCalibration,
}

impl ScanPlan {
    pub fn n_sites(&self) -> usize {
        self.lattice.len()
    }

    pub fn measurement_count(&self) -> usize {
        self.sites.len() * self.z_grid_um.len()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }
}

/// Validate and assemble a plan. `reference` holds the unperturbed modes
/// the windows are checked against.
pub fn plan_scan(
    lattice: &LatticeSpec,
    reference: &ModeSet,
    sites: &[usize],
    z_grid_um: &[f64],
    windows: &[ModeWindow],
    assumed: &ProbeCalibration,
    options: &PlanOptions,
) -> Result<ScanPlan, ScanError> {
    let n = lattice.len();
    if reference.len() != n {
        return Err(ScanError::Plan(format!("reference has {} modes for {} sites", reference.len(), n)));
    }
    if sites.is_empty() {
        return Err(ScanError::Plan("no target sites".into()));
    }
    if let Some(&s) = sites.iter().find(|&&s| s >= n) {
        return Err(ScanError::Plan(format!("site {s} out of range")));
    }
    let mut seen = sites.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(ScanError::Plan("repeated target site".into()));
    }
    if z_grid_um.is_empty() {
        return Err(ScanError::Plan("empty height grid".into()));
    }
    if z_grid_um.iter().any(|&z| !(z > 0.0 && z.is_finite())) {
        return Err(ScanError::Plan("heights must be positive".into()));
    }
    if z_grid_um.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(ScanError::Plan("height grid must be strictly descending".into()));
    }
    let mut names: Vec<i64> = z_grid_um.iter().map(|z| z.round() as i64).collect();
    names.dedup();
    if names.len() != z_grid_um.len() {
        return Err(ScanError::Plan("heights must differ by at least 1 um".into()));
    }
    assumed.check()?;
    if windows.is_empty() {
        return Err(ScanError::Plan("no mode windows".into()));
    }
    for w in windows {
        if !(w.hi_ghz > w.lo_ghz) {
            return Err(ScanError::Plan(format!("empty window for mode {}", w.mode)));
        }
        let count = reference.frequencies.iter().filter(|&&f| w.contains(f)).count();
        if count != 1 {
            return Err(ScanError::WindowPeaks { mode: w.mode, count });
        }
    }
    for (i, a) in windows.iter().enumerate() {
        for b in windows.iter().skip(i + 1) {
            if a.lo_ghz <= b.hi_ghz && b.lo_ghz <= a.hi_ghz {
                return Err(ScanError::OverlappingWindows(a.mode, b.mode));
            }
        }
    }
    if !(options.grid_step_ghz > 0.0 && options.kappa_ghz > 0.0) {
        return Err(ScanError::Plan("grid step and loss must be positive".into()));
    }
    let ports = options
        .ports
        .or(lattice.ports)
        .ok_or_else(|| ScanError::Plan("lattice has no ports and none were given".into()))?;
    if ports.input >= n || ports.output >= n {
        return Err(ScanError::Plan("port site out of range".into()));
    }

    let mut sorted = windows.to_vec();
    sorted.sort_by(|a, b| a.lo_ghz.total_cmp(&b.lo_ghz));
    let mut grid = Vec::new();
    for w in &sorted {
        let steps = ((w.hi_ghz - w.lo_ghz) / options.grid_step_ghz).round().max(4.0) as usize;
        grid.extend((0..=steps).map(|k| w.lo_ghz + (w.hi_ghz - w.lo_ghz) * k as f64 / steps as f64));
    }
    check_grid(&grid)?;

    Ok(ScanPlan {
        lattice: lattice.clone(),
        sites: sites.to_vec(),
        z_grid_um: z_grid_um.to_vec(),
        grid_ghz: grid,
        windows: windows.to_vec(),
        ports,
        kappa_ghz: options.kappa_ghz,
        amplitude: options.amplitude,
        assumed: assumed.clone(),
    })
}

/// Ground truth for a virtual run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub lattice: LatticeSpec,
    pub params: LatticeParams,
    pub calibration: ProbeCalibration,
    /// Per-site factors on the true defect size (device-level variation
    /// unknown to the analyst). Empty means all ones.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub site_factors: Vec<f64>,
    /// Standard deviation of the complex Gaussian noise on s21.
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl WorldModel {
    pub fn ideal(lattice: LatticeSpec) -> Self {
        Self {
            lattice,
            params: LatticeParams::default(),
            calibration: ProbeCalibration::default(),
            site_factors: Vec::new(),
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    pub fn check(&self) -> Result<(), ScanError> {
        self.params.check()?;
        self.calibration.check()?;
        if !self.site_factors.is_empty() && self.site_factors.len() != self.lattice.len() {
            return Err(ScanError::World(format!(
                "{} site factors for {} sites",
                self.site_factors.len(),
                self.lattice.len()
            )));
        }
        if self.site_factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(ScanError::World("site factors must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(ScanError::World("noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn site_factor(&self, site: usize) -> f64 {
        self.site_factors.get(site).copied().unwrap_or(1.0)
    }

    /// True (signed) defect with the probe centred on `site` at height `z_um`.
    pub fn defect(&self, site: usize, z_um: f64) -> Result<f64, ScanError> {
        let s = &self.lattice.sites[site];
        let size = defect_from_height(z_um, s.category, s.orientation, &self.calibration)?;
        Ok(SHIFT_SIGN * size * self.site_factor(site))
    }
}

/// Log-normal per-site factors with unit mean and log-standard-deviation `sigma`.
pub fn site_scatter(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            (sigma * g - 0.5 * sigma * sigma).exp()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanDataset {
    pub plan: ScanPlan,
    pub noise_seed: u64,
    /// Probe-withdrawn spectrum per planned site.
    pub baselines: Vec<TransmissionSpectrum>,
    /// `spectra[i][k]`: site `plan.sites[i]` at height `plan.z_grid_um[k]`.
    pub spectra: Vec<Vec<TransmissionSpectrum>>,
}

impl ScanDataset {
    pub fn check_complete(&self) -> Result<(), ScanError> {
        let ns = self.plan.sites.len();
        let nz = self.plan.z_grid_um.len();
        if self.baselines.len() != ns || self.spectra.len() != ns || self.spectra.iter().any(|row| row.len() != nz) {
            return Err(ScanError::Dataset("incomplete dataset".into()));
        }
        Ok(())
    }
}

fn noise_stream(seed: u64, site: usize, z_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((site as u64) << 32) | z_index);
    rng
}

/// One spectrum with the probe over `site` at `z_um` (`None`: withdrawn).
pub fn measure_at(plan: &ScanPlan, world: &WorldModel, site: usize, z: Option<(usize, f64)>) -> Result<TransmissionSpectrum, ScanError> {
    let defects = match z {
        Some((_, z_um)) => DefectSet::single(site, world.defect(site, z_um)?),
        None => DefectSet::new(),
    };
    let h = build_mode_matrix(&world.lattice, &world.params, &defects)?;
    let modes = solve_modes(&h, DEFAULT_CLUSTER_TOL_GHZ)?;
    let mut spec = sweep_modes(&modes, world.params.loss_ghz, plan.ports, &plan.grid_ghz, plan.amplitude);
    if world.noise_sigma > 0.0 {
        let stream = z.map_or(BASELINE_STREAM, |(k, _)| k as u64);
        let mut rng = noise_stream(world.noise_seed, site, stream);
        let s = world.noise_sigma / std::f64::consts::SQRT_2;
        for v in &mut spec.s21 {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(s * re, s * im);
        }
    }
    Ok(spec)
}

/// Worker count from `SDM_THREADS`, if set.
pub fn thread_limit() -> Option<usize> {
    std::env::var("SDM_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn run_in_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match thread_limit().and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

pub fn run_virtual_scan(plan: &ScanPlan, world: &WorldModel) -> Result<ScanDataset, ScanError> {
    world.check()?;
    if world.lattice.len() != plan.n_sites() {
        return Err(ScanError::World(format!("plan is for {} sites, world has {}", plan.n_sites(), world.lattice.len())));
    }
    let nz = plan.z_grid_um.len();
    let jobs: Vec<(usize, Option<(usize, f64)>)> = plan
        .sites
        .iter()
        .flat_map(|&s| std::iter::once((s, None)).chain(plan.z_grid_um.iter().enumerate().map(move |(k, &z)| (s, Some((k, z))))))
        .collect();
    let results: Vec<TransmissionSpectrum> = run_in_pool(|| {
        jobs.par_iter().map(|&(site, z)| measure_at(plan, world, site, z)).collect::<Result<Vec<_>, _>>()
    })?;
    let mut baselines = Vec::with_capacity(plan.sites.len());
    let mut spectra = Vec::with_capacity(plan.sites.len());
    for chunk in results.chunks(nz + 1) {
        baselines.push(chunk[0].clone());
        spectra.push(chunk[1..].to_vec());
    }
    Ok(ScanDataset { plan: plan.clone(), noise_seed: world.noise_seed, baselines, spectra })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftPoint {
    pub z_um: f64,
    /// Defect size from the assumed calibration, signed [MHz].
    pub defect_mhz: f64,
    /// Mode shift relative to the withdrawn-probe centre [MHz].
    pub shift_mhz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftCurve {
    pub site: usize,
    pub mode: usize,
    /// Probe-withdrawn centre; `None` if the reference fit failed.
    pub baseline_ghz: Option<f64>,
    /// Ascending in `defect_mhz`.
    pub points: Vec<ShiftPoint>,
    /// Heights whose spectra were not tracked.
    pub dropped_z_um: Vec<f64>,
    pub complete: bool,
    pub slope: Option<f64>,
    pub intercept_mhz: Option<f64>,
    pub slope_stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackOptions {
    /// Fit residual (relative to peak power) above which track is lost.
    pub max_relative_residual: f64,
    /// Half-width of each Lorentzian fit in units of the loss rate, capped
    /// at the window half-width.
    pub fit_half_width_kappa: f64,
    /// Relative change of the fitted linewidth against the baseline above
    /// which a second peak is assumed to have entered the fit...
    pub max_width_change: f64,
    /// ...provided the change also exceeds this many standard errors.
    pub width_sigmas: f64,
    /// Growth of the relative fit residual over the baseline fit that
    /// marks a distorted peak...
    pub max_residual_growth: f64,
    /// ...once the residual exceeds this floor.
    pub residual_floor: f64,
    /// Consecutive rejected heights after which the track is abandoned.
    pub max_consecutive_misses: usize,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self {
            max_relative_residual: 0.25,
            fit_half_width_kappa: 4.0,
            max_width_change: 0.1,
            width_sigmas: 4.0,
            max_residual_growth: 1.5,
            residual_floor: 0.02,
            max_consecutive_misses: 2,
        }
    }
}

/// Whether `fit` still looks like the single peak seen in `base`. A
/// linewidth change counts only if it is both large and well outside the
/// fit uncertainty; residual growth counts once it clears a floor that
/// keeps clean spectra from tripping it.
fn same_peak(fit: &LorentzianFit, base: &LorentzianFit, opts: &TrackOptions) -> bool {
    let diff = (fit.fwhm_ghz - base.fwhm_ghz).abs();
    let sigma = fit.fwhm_stderr_ghz.hypot(base.fwhm_stderr_ghz);
    let width_ok = diff <= opts.max_width_change * base.fwhm_ghz || diff <= opts.width_sigmas * sigma;
    let rr = fit.relative_residual();
    let residual_ok = rr <= opts.residual_floor || rr <= opts.max_residual_growth * base.relative_residual();
    width_ok && residual_ok
}

fn track_centre(
    spec: &TransmissionSpectrum,
    guess: f64,
    fit_half: f64,
    opts: &TrackOptions,
) -> Option<LorentzianFit> {
    let fit = fit_lorentzian(spec, (guess - fit_half, guess + fit_half)).ok()?;
    (fit.relative_residual() <= opts.max_relative_residual && fit.peak > 0.0).then_some(fit)
}

/// Follow each window's peak from the largest height down, re-centring
/// after every step. A failed fit, a large residual, a changed linewidth or
/// a jump beyond half the window width drops that height; repeated drops
/// end the track.
pub fn track_mode_shifts(dataset: &ScanDataset, opts: &TrackOptions) -> Result<Vec<ShiftCurve>, ScanError> {
    dataset.check_complete()?;
    let plan = &dataset.plan;
    let fit_half = opts.fit_half_width_kappa * plan.kappa_ghz;
    let mut jobs = Vec::new();
    for (i, &site) in plan.sites.iter().enumerate() {
        for w in &plan.windows {
            jobs.push((i, site, *w));
        }
    }
    let curves = run_in_pool(|| {
        jobs.par_iter()
            .map(|&(i, site, w)| track_one(dataset, i, site, &w, fit_half.min(w.half_width()), opts))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(curves)
}

fn track_one(
    dataset: &ScanDataset,
    i: usize,
    site: usize,
    window: &ModeWindow,
    fit_half: f64,
    opts: &TrackOptions,
) -> Result<ShiftCurve, ScanError> {
    let plan = &dataset.plan;
    let mut curve = ShiftCurve {
        site,
        mode: window.mode,
        baseline_ghz: None,
        points: Vec::new(),
        dropped_z_um: Vec::new(),
        complete: false,
        slope: None,
        intercept_mhz: None,
        slope_stderr: None,
    };
    let Some(base_fit) =
        track_centre(&dataset.baselines[i], window.center_ghz, fit_half, opts).filter(|f| window.contains(f.center_ghz))
    else {
        curve.dropped_z_um = plan.z_grid_um.clone();
        return Ok(curve);
    };
    let base = base_fit.center_ghz;
    curve.baseline_ghz = Some(base);
    let geometry = &plan.lattice.sites[site];
    let mut current = base;
    let mut misses = 0;
    for (k, &z) in plan.z_grid_um.iter().enumerate() {
        if misses >= opts.max_consecutive_misses {
            curve.dropped_z_um.push(z);
            continue;
        }
        match track_centre(&dataset.spectra[i][k], current, fit_half, opts) {
            Some(f) if (f.center_ghz - current).abs() <= window.half_width() && same_peak(&f, &base_fit, opts) => {
                misses = 0;
                current = f.center_ghz;
                let defect = SHIFT_SIGN * defect_from_height(z, geometry.category, geometry.orientation, &plan.assumed)?;
                curve.points.push(ShiftPoint { z_um: z, defect_mhz: defect * 1e3, shift_mhz: (current - base) * 1e3 });
            }
            _ => {
                misses += 1;
                curve.dropped_z_um.push(z);
            }
        }
    }
    curve.points.sort_by(|a, b| a.defect_mhz.total_cmp(&b.defect_mhz));
    let (x, y): (Vec<f64>, Vec<f64>) = curve.points.iter().map(|p| (p.defect_mhz, p.shift_mhz)).unzip();
    if let Ok(f) = fit_line(&x, &y) {
        curve.slope = Some(f.slope);
        curve.intercept_mhz = Some(f.intercept);
        curve.slope_stderr = Some(f.slope_stderr);
    }
    curve.complete = curve.dropped_z_um.is_empty();
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractOptions {
    /// Largest |defect| used in the slope fit [MHz].
    pub linear_max_defect_mhz: f64,
    /// Modes closer than this to a neighbour are refused [GHz].
    pub min_gap_ghz: f64,
    pub min_points: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { linear_max_defect_mhz: 10.0, min_gap_ghz: 1e-3, min_points: 3 }
    }
}

/// Slope of the linear-regime part of a curve, with intercept.
pub fn linear_slope(curve: &ShiftCurve, linear_max_defect_mhz: f64, min_points: usize) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = curve
        .points
        .iter()
        .filter(|p| p.defect_mhz.abs() <= linear_max_defect_mhz)
        .map(|p| (p.defect_mhz, p.shift_mhz))
        .unzip();
    if x.len() < min_points.max(2) {
        return None;
    }
    fit_line(&x, &y).ok().map(|f| f.slope)
}

/// One normalized weight map per plan window, in window order, tagged
/// with the mean probe-withdrawn centre of the mode. Sites
/// without a usable curve are listed as unmeasured with weight zero;
/// negative slopes are clamped to zero and listed.
pub fn extract_weights(curves: &[ShiftCurve], plan: &ScanPlan, opts: &ExtractOptions) -> Result<Vec<WeightMap>, ScanError> {
    let n = plan.n_sites();
    plan.windows
        .iter()
        .map(|w| {
            if w.gap_ghz < opts.min_gap_ghz {
                return Err(ScanError::DegenerateMode { mode: w.mode, gap_ghz: w.gap_ghz, min_gap_ghz: opts.min_gap_ghz });
            }
            let mut map = WeightMap {
                mode: w.mode,
                frequency_ghz: w.center_ghz,
                weights: vec![0.0; n],
                normalized: false,
                signs: None,
                clamped: Vec::new(),
                unmeasured: Vec::new(),
            };
            let baselines: Vec<f64> =
                curves.iter().filter(|c| c.mode == w.mode).filter_map(|c| c.baseline_ghz).collect();
            if !baselines.is_empty() {
                map.frequency_ghz = baselines.iter().sum::<f64>() / baselines.len() as f64;
            }
            let mut measured = vec![false; n];
            for c in curves.iter().filter(|c| c.mode == w.mode) {
                if let Some(slope) = linear_slope(c, opts.linear_max_defect_mhz, opts.min_points) {
                    measured[c.site] = true;
                    if slope < 0.0 {
                        map.clamped.push(c.site);
                    } else {
                        map.weights[c.site] = slope;
                    }
                }
            }
            map.unmeasured = (0..n).filter(|&s| !measured[s]).collect();
            map.clamped.sort_unstable();
            if map.sum() <= 0.0 {
                return Err(ScanError::TooFewPoints(w.mode));
            }
            map.normalize();
            Ok(map)
        })
        .collect()
}

pub const PLAN_FILE: &str = "plan.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub noise_seed: u64,
    pub sites: Vec<usize>,
    pub z_grid_um: Vec<f64>,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

pub fn spectrum_file_name(site: usize, z_um: Option<f64>) -> String {
    match z_um {
        Some(z) => format!("site{site:02}_z{:04}um.csv", z.round() as i64),
        None => format!("site{site:02}_zinf.csv"),
    }
}

/// Write a dataset as a directory: plan, manifest and one CSV per spectrum.
/// Writes the plan, one CSV per spectrum and a manifest. A provenance
/// stamp, when given, is embedded in every file.
pub fn save_dataset(dataset: &ScanDataset, dir: &Path, provenance: Option<&Provenance>) -> Result<(), ScanError> {
    dataset.check_complete()?;
    std::fs::create_dir_all(dir)?;
    let plan = &dataset.plan;
    let plan_text = match provenance {
        Some(p) => annotated_json(plan, p).map_err(|e| ScanError::Dataset(e.to_string()))?,
        None => plan.to_json(),
    };
    std::fs::write(dir.join(PLAN_FILE), plan_text)?;
    let comment = provenance.map(Provenance::comment);
    let mut files = Vec::new();
    for (i, &site) in plan.sites.iter().enumerate() {
        let name = spectrum_file_name(site, None);
        dataset.baselines[i].save_with_comment(&dir.join(&name), comment.as_deref())?;
        files.push(name);
        for (k, &z) in plan.z_grid_um.iter().enumerate() {
            let name = spectrum_file_name(site, Some(z));
            dataset.spectra[i][k].save_with_comment(&dir.join(&name), comment.as_deref())?;
            files.push(name);
        }
    }
    let manifest = DatasetManifest {
        format: 1,
        noise_seed: dataset.noise_seed,
        sites: plan.sites.clone(),
        z_grid_um: plan.z_grid_um.clone(),
        files,
        provenance: provenance.cloned(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn load_plan(path: &Path) -> Result<ScanPlan, ScanError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn load_dataset(dir: &Path) -> Result<(ScanDataset, DatasetManifest), ScanError> {
    let plan = load_plan(&dir.join(PLAN_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != 1 {
        return Err(ScanError::Dataset(format!("unsupported dataset format {}", manifest.format)));
    }
    if manifest.sites != plan.sites || manifest.z_grid_um != plan.z_grid_um {
        return Err(ScanError::Dataset("manifest does not match plan".into()));
    }
    let load = |name: String| -> Result<TransmissionSpectrum, ScanError> {
        let path = dir.join(&name);
        if !path.exists() {
            return Err(ScanError::Dataset(format!("missing {name}")));
        }
        let spec = TransmissionSpectrum::load(&path, plan.ports, plan.kappa_ghz, plan.amplitude)?;
        if spec.frequencies != plan.grid_ghz {
            return Err(ScanError::Dataset(format!("{name}: grid differs from plan")));
        }
        Ok(spec)
    };
    let mut baselines = Vec::new();
    let mut spectra = Vec::new();
    for &site in &plan.sites {
        baselines.push(load(spectrum_file_name(site, None))?);
        spectra.push(
            plan.z_grid_um
                .iter()
                .map(|&z| load(spectrum_file_name(site, Some(z))))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    let noise_seed = manifest.noise_seed;
    Ok((ScanDataset { plan, noise_seed, baselines, spectra }, manifest))
}
