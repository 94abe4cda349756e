//! Coherent steady state of the driven, damped lattice and port-to-port
//! transmission spectra.
//!
//! The amplitudes solve `[(H - w_d) - i k/2] a = -e_in`, i.e. the modal
//! form `a_out = -sum_mu v_mu[out] v_mu[in] e / ((W_mu - w_d) - i k/2)`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{levenberg_marquardt, FitError, LmOptions};
use crate::lattice::PortConfig;
use crate::spectral::{solve_modes, ModeMatrix, ModeSet, DEFAULT_CLUSTER_TOL_GHZ};

pub const SPECTRUM_HEADER: [&str; 3] = ["freq_ghz", "re_s21", "im_s21"];

/// Default peak prominence is this multiple of the median |s21|.
pub const DEFAULT_PROMINENCE_FACTOR: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TransmissionError {
    #[error("loss rate must be positive, got {0}")]
    NonPositiveLoss(f64),
    #[error("singular steady-state system")]
    Singular,
    #[error("site {0} out of range")]
    Site(usize),
    #[error("frequency grid is empty")]
    EmptyGrid,
    #[error("frequency grid is not strictly ascending at index {0}")]
    GridOrder(usize),
    #[error("fit window holds {0} grid points, need at least 5")]
    WindowTooSmall(usize),
    #[error("fitted centre {center} GHz outside window [{lo}, {hi}]")]
    CenterOutsideWindow { center: f64, lo: f64, hi: f64 },
    #[error("lorentzian fit failed: {0}")]
    Fit(#[from] FitError),
    #[error("spectrum file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Spectral(#[from] crate::spectral::SpectralError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveSpec {
    pub drive_frequency_ghz: f64,
    pub amplitude: Complex64,
    pub input_site: usize,
}

/// Coherent amplitudes on every site for a single drive tone.
pub fn steady_state(h: &ModeMatrix, kappa: f64, drive: &DriveSpec) -> Result<Vec<Complex64>, TransmissionError> {
    if !(kappa > 0.0) {
        return Err(TransmissionError::NonPositiveLoss(kappa));
    }
    let n = h.dim();
    if drive.input_site >= n {
        return Err(TransmissionError::Site(drive.input_site));
    }
    let shift = Complex64::new(drive.drive_frequency_ghz, 0.5 * kappa);
    let mut a = DMatrix::from_fn(n, n, |i, j| Complex64::new(h.0[(i, j)], 0.0));
    for i in 0..n {
        a[(i, i)] -= shift;
    }
    let mut rhs = DVector::from_element(n, Complex64::new(0.0, 0.0));
    rhs[drive.input_site] = -drive.amplitude;
    let sol = a.lu().solve(&rhs).ok_or(TransmissionError::Singular)?;
    Ok(sol.iter().copied().collect())
}

/// Output-site amplitude as a sum over normal modes.
pub fn modal_s21(modes: &ModeSet, ports: PortConfig, drive_ghz: f64, kappa: f64, amplitude: Complex64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (f, v) in modes.frequencies.iter().zip(&modes.vectors) {
        let overlap = v[ports.output] * v[ports.input];
        if overlap == 0.0 {
            continue;
        }
        acc += overlap / Complex64::new(f - drive_ghz, -0.5 * kappa);
    }
    -acc * amplitude
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionSpectrum {
    pub frequencies: Vec<f64>,
    pub s21: Vec<Complex64>,
    pub ports: PortConfig,
    pub kappa_ghz: f64,
    pub amplitude: Complex64,
}

impl TransmissionSpectrum {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.s21.iter().map(|c| c.norm()).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TransmissionError> {
        self.write_csv_with_comment(out, None)
    }

    /// Like `write_csv`, with an optional leading `# ` comment line that
    /// readers skip.
    pub fn write_csv_with_comment<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<(), TransmissionError> {
        if let Some(c) = comment {
            writeln!(out, "# {}", c.replace('\n', " "))?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SPECTRUM_HEADER)?;
        for (f, s) in self.frequencies.iter().zip(&self.s21) {
            w.write_record([f.to_string(), s.re.to_string(), s.im.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TransmissionError> {
        self.save_with_comment(path, None)
    }

    pub fn save_with_comment(&self, path: &Path, comment: Option<&str>) -> Result<(), TransmissionError> {
        let file = std::fs::File::create(path)?;
        self.write_csv_with_comment(std::io::BufWriter::new(file), comment)
    }

    /// Reads the three data columns; ports and drive settings are not part
    /// of the file and are supplied by the caller.
    pub fn read_csv<R: Read>(input: R, ports: PortConfig, kappa_ghz: f64, amplitude: Complex64) -> Result<Self, TransmissionError> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != SPECTRUM_HEADER {
            return Err(TransmissionError::Format(format!("unexpected header {:?}", header)));
        }
        let mut frequencies = Vec::new();
        let mut s21 = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64, TransmissionError> {
                rec.get(k)
                    .ok_or_else(|| TransmissionError::Format("short row".into()))?
                    .parse::<f64>()
                    .map_err(|e| TransmissionError::Format(e.to_string()))
            };
            frequencies.push(num(0)?);
            s21.push(Complex64::new(num(1)?, num(2)?));
        }
        check_grid(&frequencies)?;
        Ok(Self { frequencies, s21, ports, kappa_ghz, amplitude })
    }

    pub fn load(path: &Path, ports: PortConfig, kappa_ghz: f64, amplitude: Complex64) -> Result<Self, TransmissionError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), ports, kappa_ghz, amplitude)
    }
}

pub fn check_grid(grid: &[f64]) -> Result<(), TransmissionError> {
    if grid.is_empty() {
        return Err(TransmissionError::EmptyGrid);
    }
    if let Some(k) = (1..grid.len()).find(|&k| !(grid[k] > grid[k - 1])) {
        return Err(TransmissionError::GridOrder(k));
    }
    Ok(())
}

/// Uniform grid from `lo` to `hi` inclusive with spacing close to `step`.
pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round().max(1.0) as usize;
    (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect()
}

/// Output-port transmission over `grid`, evaluated through one
/// eigendecomposition of `h` (equal to the direct solve at every point).
pub fn sweep_spectrum(
    h: &ModeMatrix,
    kappa: f64,
    ports: PortConfig,
    grid: &[f64],
    amplitude: Complex64,
) -> Result<TransmissionSpectrum, TransmissionError> {
    if !(kappa > 0.0) {
        return Err(TransmissionError::NonPositiveLoss(kappa));
    }
    check_grid(grid)?;
    if ports.input >= h.dim() || ports.output >= h.dim() {
        return Err(TransmissionError::Site(ports.input.max(ports.output)));
    }
    let modes = solve_modes(h, DEFAULT_CLUSTER_TOL_GHZ)?;
    Ok(sweep_modes(&modes, kappa, ports, grid, amplitude))
}

pub fn sweep_modes(modes: &ModeSet, kappa: f64, ports: PortConfig, grid: &[f64], amplitude: Complex64) -> TransmissionSpectrum {
    let s21 = grid.iter().map(|&f| modal_s21(modes, ports, f, kappa, amplitude)).collect();
    TransmissionSpectrum { frequencies: grid.to_vec(), s21, ports, kappa_ghz: kappa, amplitude }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub index: usize,
    pub frequency_ghz: f64,
    pub magnitude: f64,
    pub prominence: f64,
}

pub fn default_prominence(spectrum: &TransmissionSpectrum) -> f64 {
    let mut mags = spectrum.magnitudes();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let m = mags.len();
    let median = if m % 2 == 1 { mags[m / 2] } else { 0.5 * (mags[m / 2 - 1] + mags[m / 2]) };
    DEFAULT_PROMINENCE_FACTOR * median
}

/// Local maxima of |s21| whose topographic prominence exceeds `threshold`,
/// ascending in frequency.
pub fn find_peaks(spectrum: &TransmissionSpectrum, threshold: f64) -> Vec<Peak> {
    let y = spectrum.magnitudes();
    let n = y.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if y[i] > y[i - 1] {
            // plateau handling: walk to the end of equal values
            let mut j = i;
            while j + 1 < n && y[j + 1] == y[i] {
                j += 1;
            }
            if j + 1 < n && y[j + 1] < y[i] {
                let peak = (i + j) / 2;
                let prominence = prominence(&y, peak);
                if prominence > threshold {
                    out.push(Peak {
                        index: peak,
                        frequency_ghz: spectrum.frequencies[peak],
                        magnitude: y[peak],
                        prominence,
                    });
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

fn prominence(y: &[f64], peak: usize) -> f64 {
    let h = y[peak];
    let mut left_min = h;
    for k in (0..peak).rev() {
        if y[k] > h {
            break;
        }
        left_min = left_min.min(y[k]);
    }
    let mut right_min = h;
    for &v in &y[peak + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Least-squares fit of `|s21|^2 = baseline + height * (G/2)^2 / ((f - f0)^2 + (G/2)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    pub center_ghz: f64,
    pub fwhm_ghz: f64,
    /// Peak power above baseline.
    pub peak: f64,
    pub baseline: f64,
    /// RMS residual of the power fit.
    pub rms_residual: f64,
    /// Standard errors from the residual scatter and the Jacobian at the
    /// optimum.
    pub center_stderr_ghz: f64,
    pub fwhm_stderr_ghz: f64,
}

impl LorentzianFit {
    pub fn relative_residual(&self) -> f64 {
        self.rms_residual / self.peak.abs().max(f64::MIN_POSITIVE)
    }

    pub fn eval(&self, f: f64) -> f64 {
        let g = 0.5 * self.fwhm_ghz;
        self.baseline + self.peak * g * g / ((f - self.center_ghz).powi(2) + g * g)
    }
}

pub fn fit_lorentzian(spectrum: &TransmissionSpectrum, window: (f64, f64)) -> Result<LorentzianFit, TransmissionError> {
    let (lo, hi) = window;
    let idx: Vec<usize> = (0..spectrum.len())
        .filter(|&k| spectrum.frequencies[k] >= lo && spectrum.frequencies[k] <= hi)
        .collect();
    if idx.len() < 5 {
        return Err(TransmissionError::WindowTooSmall(idx.len()));
    }
    let f: Vec<f64> = idx.iter().map(|&k| spectrum.frequencies[k]).collect();
    let p: Vec<f64> = idx.iter().map(|&k| spectrum.s21[k].norm_sqr()).collect();
    fit_power_lorentzian(&f, &p, lo, hi)
}

/// Core fit on raw `(frequency, power)` samples.
pub fn fit_power_lorentzian(f: &[f64], p: &[f64], lo: f64, hi: f64) -> Result<LorentzianFit, TransmissionError> {
    let center = 0.5 * (f[0] + f[f.len() - 1]);
    let half = (0.5 * (f[f.len() - 1] - f[0])).max(f64::MIN_POSITIVE);
    let pmax = p.iter().copied().fold(f64::MIN, f64::max);
    let pmin = p.iter().copied().fold(f64::MAX, f64::min);
    let scale = if pmax.abs() > 0.0 { pmax.abs() } else { 1.0 };
    let u: Vec<f64> = f.iter().map(|x| (x - center) / half).collect();
    let y: Vec<f64> = p.iter().map(|x| x / scale).collect();

    // initial guess from the maximum and the half-maximum crossings
    let kmax = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).expect("non-empty");
    let base0 = pmin / scale;
    let height0 = (y[kmax] - base0).max(1e-12);
    let half_level = base0 + 0.5 * height0;
    let cross = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev = kmax;
        for k in range {
            if y[k] < half_level {
                let t = (y[prev] - half_level) / (y[prev] - y[k]);
                return Some(u[prev] + t * (u[k] - u[prev]));
            }
            prev = k;
        }
        None
    };
    let left = cross(&mut (0..kmax).rev());
    let right = cross(&mut ((kmax + 1)..y.len()));
    let g0 = match (left, right) {
        (Some(l), Some(r)) => 0.5 * (r - l),
        (Some(l), None) => u[kmax] - l,
        (None, Some(r)) => r - u[kmax],
        (None, None) => 0.5,
    }
    .max(1e-6);

    let init = [base0, height0, u[kmax], g0];
    let res = levenberg_marquardt(&init, u.len(), &LmOptions::default(), |q, r, j| {
        let (b, h, u0, g) = (q[0], q[1], q[2], q[3]);
        if !(g > 0.0) {
            return false;
        }
        for (i, (&ui, &yi)) in u.iter().zip(&y).enumerate() {
            let du = ui - u0;
            let d = du * du + g * g;
            let l = g * g / d;
            r[i] = b + h * l - yi;
            j[(i, 0)] = 1.0;
            j[(i, 1)] = l;
            j[(i, 2)] = h * g * g * 2.0 * du / (d * d);
            j[(i, 3)] = h * 2.0 * g * du * du / (d * d);
        }
        true
    })?;
    let q = &res.params;
    let (h, u0, g) = (q[1], q[2], q[3]);
    let mut jtj = nalgebra::Matrix4::<f64>::zeros();
    for &ui in &u {
        let du = ui - u0;
        let d = du * du + g * g;
        let row = nalgebra::RowVector4::new(1.0, g * g / d, h * g * g * 2.0 * du / (d * d), h * 2.0 * g * du * du / (d * d));
        jtj += row.transpose() * row;
    }
    let dof = (u.len() as f64 - 4.0).max(1.0);
    let s2 = res.residuals.iter().map(|r| r * r).sum::<f64>() / dof;
    let (se_u0, se_g) = match jtj.try_inverse() {
        Some(cov) => ((s2 * cov[(2, 2)]).max(0.0).sqrt(), (s2 * cov[(3, 3)]).max(0.0).sqrt()),
        None => (f64::INFINITY, f64::INFINITY),
    };
    let fit = LorentzianFit {
        center_ghz: center + u0 * half,
        fwhm_ghz: 2.0 * g * half,
        peak: h * scale,
        baseline: q[0] * scale,
        rms_residual: res.rms() * scale,
        center_stderr_ghz: se_u0 * half,
        fwhm_stderr_ghz: 2.0 * se_g * half,
    };
    if !(fit.center_ghz >= lo && fit.center_ghz <= hi) {
        return Err(TransmissionError::CenterOutsideWindow { center: fit.center_ghz, lo, hi });
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_patch, PatchKind};
    use crate::spectral::{build_mode_matrix, DefectSet, LatticeParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn one() -> Complex64 {
        Complex64::new(1.0, 0.0)
    }

    fn synthetic(grid: &[f64], peaks: &[(f64, f64, f64)], base: f64) -> TransmissionSpectrum {
        // |s21| = sqrt(power) so fits on |s21|^2 see an exact Lorentzian sum
        let s21 = grid
            .iter()
            .map(|&f| {
                let p: f64 = base
                    + peaks
                        .iter()
                        .map(|&(c, w, h)| h * (w / 2.0).powi(2) / ((f - c).powi(2) + (w / 2.0).powi(2)))
                        .sum::<f64>();
                Complex64::new(p.sqrt(), 0.0)
            })
            .collect();
        TransmissionSpectrum {
            frequencies: grid.to_vec(),
            s21,
            ports: PortConfig { input: 0, output: 0 },
            kappa_ghz: 1e-3,
            amplitude: one(),
        }
    }

    #[test]
    fn single_site_resonance() {
        let l = build_patch(&PatchKind::Single).unwrap();
        let p = LatticeParams::default();
        let h = build_mode_matrix(&l, &p, &DefectSet::new()).unwrap();
        let k = p.loss_ghz;
        let drive = DriveSpec { drive_frequency_ghz: 6.0, amplitude: one(), input_site: 0 };
        let a = steady_state(&h, k, &drive).unwrap();
        let expect = Complex64::new(0.0, -2.0 / k);
        assert!((a[0] - expect).norm() < 1e-9 * expect.norm());

        let det = 0.0013;
        let drive = DriveSpec { drive_frequency_ghz: 6.0 + det, ..drive };
        let a = steady_state(&h, k, &drive).unwrap();
        assert!((a[0].norm() - 1.0 / (det * det + k * k / 4.0).sqrt()).abs() < 1e-9);

        let modes = solve_modes(&h, 1e-6).unwrap();
        let s = modal_s21(&modes, PortConfig { input: 0, output: 0 }, 6.0, k, one());
        assert!((s - expect).norm() < 1e-9 * expect.norm());
    }

    #[test]
    fn dimer_output_peaks_at_upper_mode() {
        let l = build_patch(&PatchKind::Dimer).unwrap();
        let p = LatticeParams { hopping_ghz: 0.1, loss_ghz: 0.01, ..Default::default() };
        let h = build_mode_matrix(&l, &p, &DefectSet::new()).unwrap();
        let grid = uniform_grid(6.05, 6.15, 1e-4);
        let mags: Vec<f64> = grid
            .iter()
            .map(|&f| {
                steady_state(&h, p.loss_ghz, &DriveSpec { drive_frequency_ghz: f, amplitude: one(), input_site: 0 }).unwrap()[1].norm()
            })
            .collect();
        let k = (0..mags.len()).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        assert!((grid[k] - 6.1).abs() <= 1e-4);
    }

    #[test]
    fn modal_sum_skips_dark_modes() {
        // triangle: the degenerate pair can be rotated so one member vanishes on the input
        let l = build_patch(&PatchKind::Triangle).unwrap();
        let p = LatticeParams::default();
        let h = build_mode_matrix(&l, &p, &DefectSet::new()).unwrap();
        let mut modes = solve_modes(&h, 1e-6).unwrap();
        let s = 1.0 / 2f64.sqrt();
        modes.vectors[0] = vec![0.0, s, -s];
        modes.vectors[1] = vec![2.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt()];
        let ports = PortConfig { input: 0, output: 1 };
        let full = modal_s21(&modes, ports, 5.99, p.loss_ghz, one());
        let mut without = modes.clone();
        without.vectors.remove(0);
        without.frequencies.remove(0);
        assert_eq!(full, modal_s21(&without, ports, 5.99, p.loss_ghz, one()));
        let direct = steady_state(&h, p.loss_ghz, &DriveSpec { drive_frequency_ghz: 5.99, amplitude: one(), input_site: 0 }).unwrap();
        assert!((direct[1] - full).norm() < 1e-10 * full.norm());
    }

    #[test]
    fn sweep_peaks_and_widths() {
        let l = build_patch(&PatchKind::Dimer).unwrap();
        let p = LatticeParams { hopping_ghz: 0.1, loss_ghz: 0.004, ..Default::default() };
        let h = build_mode_matrix(&l, &p, &DefectSet::new()).unwrap();
        let ports = l.ports.unwrap();
        let grid = uniform_grid(5.8, 6.2, 1e-4);
        let s = sweep_spectrum(&h, p.loss_ghz, ports, &grid, one()).unwrap();
        let peaks = find_peaks(&s, default_prominence(&s));
        assert_eq!(peaks.len(), 2);
        assert!((peaks[0].frequency_ghz - 5.9).abs() <= 1e-4);
        assert!((peaks[1].frequency_ghz - 6.1).abs() <= 1e-4);
        for pk in peaks {
            let fit = fit_lorentzian(&s, (pk.frequency_ghz - 0.02, pk.frequency_ghz + 0.02)).unwrap();
            assert!((fit.fwhm_ghz / p.loss_ghz - 1.0).abs() < 0.05, "fwhm {}", fit.fwhm_ghz);
        }
    }

    #[test]
    fn empty_grid() {
        let l = build_patch(&PatchKind::Dimer).unwrap();
        let h = build_mode_matrix(&l, &LatticeParams::default(), &DefectSet::new()).unwrap();
        assert!(matches!(
            sweep_spectrum(&h, 0.001, l.ports.unwrap(), &[], one()),
            Err(TransmissionError::EmptyGrid)
        ));
        assert!(matches!(
            sweep_spectrum(&h, 0.001, l.ports.unwrap(), &[6.0, 6.0], one()),
            Err(TransmissionError::GridOrder(1))
        ));
    }

    #[test]
    fn peak_finder_cases() {
        let grid = uniform_grid(5.9, 6.1, 1e-4);
        let one_peak = synthetic(&grid, &[(6.0, 0.002, 1.0)], 1e-4);
        let peaks = find_peaks(&one_peak, 0.05);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].index, 1000);

        let flat = synthetic(&grid, &[], 0.3);
        assert!(find_peaks(&flat, default_prominence(&flat)).is_empty());

        let two = synthetic(&grid, &[(5.98, 0.002, 1.0), (6.0, 0.002, 1.0)], 1e-4);
        assert_eq!(find_peaks(&two, 0.05).len(), 2);
    }

    #[test]
    fn exact_lorentzian_is_recovered() {
        let grid = uniform_grid(5.99, 6.01, 2e-5);
        let s = synthetic(&grid, &[(6.000_123_4, 0.0011, 2.5)], 0.01);
        let fit = fit_lorentzian(&s, (5.99, 6.01)).unwrap();
        assert!((fit.center_ghz - 6.000_123_4).abs() < 1e-9);
        assert!((fit.fwhm_ghz - 0.0011).abs() < 1e-9);
        assert!((fit.peak - 2.5).abs() < 1e-7);
        assert!(fit.relative_residual() < 1e-8);
    }

    #[test]
    fn noisy_lorentzian_center() {
        let grid = uniform_grid(5.995, 6.005, 5e-5);
        let width = 0.001;
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.01).unwrap();
            let clean = synthetic(&grid, &[(6.0, width, 1.0)], 0.0);
            let f = clean.frequencies.clone();
            let p: Vec<f64> = clean.s21.iter().map(|c| c.norm_sqr() + noise.sample(&mut rng)).collect();
            let fit = fit_power_lorentzian(&f, &p, 5.995, 6.005).unwrap();
            worst = worst.max((fit.center_ghz - 6.0).abs());
        }
        assert!(worst < width / 100.0, "worst centre error {worst}");
    }

    #[test]
    fn overlapping_peaks_give_large_residual() {
        let grid = uniform_grid(5.99, 6.01, 2e-5);
        let single = synthetic(&grid, &[(6.0, 0.002, 1.0)], 0.0);
        let double = synthetic(&grid, &[(5.9985, 0.002, 1.0), (6.0015, 0.002, 1.0)], 0.0);
        let a = fit_lorentzian(&single, (5.99, 6.01)).unwrap();
        let b = fit_lorentzian(&double, (5.99, 6.01)).unwrap();
        assert!(a.relative_residual() < 1e-8);
        assert!(b.relative_residual() > 1e-2, "{}", b.relative_residual());
    }

    #[test]
    fn small_window_is_rejected() {
        let grid = uniform_grid(5.99, 6.01, 1e-3);
        let s = synthetic(&grid, &[(6.0, 0.002, 1.0)], 0.0);
        assert!(matches!(fit_lorentzian(&s, (5.9995, 6.0015)), Err(TransmissionError::WindowTooSmall(2))));
    }

    #[test]
    fn csv_round_trip() {
        let l = build_patch(&PatchKind::Dimer).unwrap();
        let h = build_mode_matrix(&l, &LatticeParams::default(), &DefectSet::new()).unwrap();
        let s = sweep_spectrum(&h, 0.0005, l.ports.unwrap(), &uniform_grid(5.9, 6.1, 0.001), one()).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("freq_ghz,re_s21,im_s21\n"));
        assert_eq!(text.lines().count(), s.len() + 1);
        let back = TransmissionSpectrum::read_csv(&buf[..], s.ports, s.kappa_ghz, s.amplitude).unwrap();
        assert_eq!(back, s);
    }
}
