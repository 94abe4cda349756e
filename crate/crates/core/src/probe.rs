//! Dielectric probe model.
//!
//! Defect size follows `dw = gamma * w_r * z_ref^(p-2) / (z - z0)^p`, which
//! is the plain `gamma * w_r / (z - z0)^2` law for the default exponent
//! `p = 2`. Heights are in micrometres, frequencies in GHz, so `gamma`
//! carries um^2. Shifts are magnitudes here; the probe lowers resonator
//! frequencies, so [`footprint_defects`] stores them with a negative sign.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::fit::{levenberg_marquardt, FitError, LmOptions};
use crate::lattice::{LatticeSpec, Orientation, SiteCategory};
use crate::spectral::DefectSet;

/// Sign applied to defect magnitudes: the dielectric lowers frequencies.
pub const SHIFT_SIGN: f64 = -1.0;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("height {z} um is at or below the offset {offset} um")]
    AtOffset { z: f64, offset: f64 },
    #[error("height {z} um is below the calibrated range starting at {lo} um")]
    BelowRange { z: f64, lo: f64 },
    #[error("no calibration constant for {0}")]
    MissingGamma(CalibrationKey),
    #[error("invalid calibration: {0}")]
    Invalid(String),
    #[error("footprint must be positive, got {0} mm")]
    Footprint(f64),
    #[error("position {x} mm outside resonator [0, {length}] mm")]
    Position { x: f64, length: f64 },
    #[error("degenerate calibration samples: {0}")]
    Degenerate(String),
    #[error("calibration fit failed: {0}")]
    Fit(#[from] FitError),
}

/// Geometry classes that get their own calibration constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResonatorClass {
    Bulk,
    Edge,
}

impl From<SiteCategory> for ResonatorClass {
    fn from(c: SiteCategory) -> Self {
        if c.is_edge() {
            ResonatorClass::Edge
        } else {
            ResonatorClass::Bulk
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CalibrationKey {
    pub class: ResonatorClass,
    pub orientation: Orientation,
}

impl CalibrationKey {
    pub fn new(category: SiteCategory, orientation: Orientation) -> Self {
        Self { class: category.into(), orientation }
    }

    pub fn all() -> Vec<CalibrationKey> {
        [ResonatorClass::Bulk, ResonatorClass::Edge]
            .into_iter()
            .flat_map(|class| Orientation::ALL.into_iter().map(move |orientation| CalibrationKey { class, orientation }))
            .collect()
    }
}

impl fmt::Display for CalibrationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let class = match self.class {
            ResonatorClass::Bulk => "bulk",
            ResonatorClass::Edge => "edge",
        };
        write!(f, "{class}:{}", self.orientation)
    }
}

impl FromStr for CalibrationKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (class, orient) = s.split_once(':').ok_or_else(|| format!("expected class:orientation, got `{s}`"))?;
        let class = match class {
            "bulk" => ResonatorClass::Bulk,
            "edge" => ResonatorClass::Edge,
            other => return Err(format!("unknown resonator class `{other}`")),
        };
        Ok(Self { class, orientation: orient.parse()? })
    }
}

impl Serialize for CalibrationKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CalibrationKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_exponent() -> f64 {
    2.0
}

fn default_z_ref() -> f64 {
    70.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCalibration {
    /// Scaling-law constants per resonator class and orientation [um^2].
    pub gamma: BTreeMap<CalibrationKey, f64>,
    pub omega_r_ghz: f64,
    pub z_range_um: [f64; 2],
    pub z_offset_um: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    /// Height at which a non-quadratic law coincides with the quadratic one.
    #[serde(default = "default_z_ref")]
    pub z_ref_um: f64,
}

impl Default for ProbeCalibration {
    /// Largest defect on the default 60-300 um scan grid is 3 MHz.
    fn default() -> Self {
        let gamma = CalibrationKey::all()
            .into_iter()
            .map(|k| {
                let g = match (k.class, k.orientation) {
                    (ResonatorClass::Bulk, Orientation::Horizontal) => 1.80,
                    (ResonatorClass::Bulk, _) => 1.70,
                    (ResonatorClass::Edge, Orientation::Horizontal) => 1.62,
                    (ResonatorClass::Edge, _) => 1.55,
                };
                (k, g)
            })
            .collect();
        Self {
            gamma,
            omega_r_ghz: 6.0,
            z_range_um: [40.0, 400.0],
            z_offset_um: 0.0,
            exponent: 2.0,
            z_ref_um: 70.0,
        }
    }
}

impl ProbeCalibration {
    pub fn check(&self) -> Result<(), ProbeError> {
        if let Some((k, g)) = self.gamma.iter().find(|(_, &g)| !(g > 0.0)) {
            return Err(ProbeError::Invalid(format!("gamma for {k} must be positive, got {g}")));
        }
        let [lo, hi] = self.z_range_um;
        if !(lo > 0.0 && hi > lo) {
            return Err(ProbeError::Invalid(format!("bad z range [{lo}, {hi}]")));
        }
        if !(self.exponent > 0.0 && self.z_ref_um > 0.0 && self.omega_r_ghz > 0.0) {
            return Err(ProbeError::Invalid("exponent, z_ref and omega_r must be positive".into()));
        }
        Ok(())
    }

    pub fn gamma_for(&self, key: CalibrationKey) -> Result<f64, ProbeError> {
        self.gamma.get(&key).copied().ok_or(ProbeError::MissingGamma(key))
    }

    /// Copy with every gamma scaled by `factor(key)`.
    pub fn scaled(&self, mut factor: impl FnMut(CalibrationKey) -> f64) -> Self {
        let mut out = self.clone();
        for (k, g) in out.gamma.iter_mut() {
            *g *= factor(*k);
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("calibration serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeGeometry {
    pub footprint_side_mm: f64,
    pub tilt_deg: f64,
    pub contact_height_um: f64,
    /// Physical length of one lattice coordinate unit (resonator span).
    pub lattice_constant_mm: f64,
}

impl Default for ProbeGeometry {
    fn default() -> Self {
        Self { footprint_side_mm: 2.2, tilt_deg: 0.0, contact_height_um: 4.0, lattice_constant_mm: 6.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightSample {
    pub z_um: f64,
    /// Shift magnitude [GHz]; the physical shift is `SHIFT_SIGN * shift_ghz`.
    pub shift_ghz: f64,
}

pub fn defect_from_height(
    z_um: f64,
    category: SiteCategory,
    orientation: Orientation,
    cal: &ProbeCalibration,
) -> Result<f64, ProbeError> {
    if z_um <= cal.z_offset_um {
        return Err(ProbeError::AtOffset { z: z_um, offset: cal.z_offset_um });
    }
    if z_um < cal.z_range_um[0] {
        return Err(ProbeError::BelowRange { z: z_um, lo: cal.z_range_um[0] });
    }
    let gamma = cal.gamma_for(CalibrationKey::new(category, orientation))?;
    Ok(law(gamma, cal.omega_r_ghz, z_um - cal.z_offset_um, cal.exponent, cal.z_ref_um))
}

fn law(gamma: f64, omega_r: f64, dz: f64, p: f64, z_ref: f64) -> f64 {
    if p == 2.0 {
        gamma * omega_r / (dz * dz)
    } else {
        gamma * omega_r * z_ref.powf(p - 2.0) / dz.powf(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub gamma: f64,
    pub z_offset_um: f64,
    /// RMS residual of the shift fit [GHz].
    pub rms_residual_ghz: f64,
}

impl GammaFit {
    /// RMS residual relative to the mean sample shift.
    pub fn relative_residual(&self, samples: &[HeightSample]) -> f64 {
        let mean = samples.iter().map(|s| s.shift_ghz.abs()).sum::<f64>() / samples.len().max(1) as f64;
        self.rms_residual_ghz / mean.max(f64::MIN_POSITIVE)
    }
}

/// Least-squares fit of `shift = gamma * w_r / (z - z0)^2`.
pub fn fit_gamma(samples: &[HeightSample], omega_r_ghz: f64) -> Result<GammaFit, ProbeError> {
    if samples.len() < 3 {
        return Err(ProbeError::Degenerate(format!("need at least 3 samples, got {}", samples.len())));
    }
    let mut zs: Vec<f64> = samples.iter().map(|s| s.z_um).collect();
    zs.sort_by(f64::total_cmp);
    if zs.windows(2).any(|w| w[0] == w[1]) {
        return Err(ProbeError::Degenerate("repeated heights".into()));
    }
    if samples.iter().any(|s| !(s.z_um > 0.0) || !s.shift_ghz.is_finite()) {
        return Err(ProbeError::Degenerate("non-positive height or non-finite shift".into()));
    }
    let z_min = zs[0];
    // scale shifts to order one so the residual tolerance is meaningful
    let scale = samples.iter().map(|s| s.shift_ghz.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let gamma0 = {
        let g: Vec<f64> = samples.iter().map(|s| omega_r_ghz / (s.z_um * s.z_um)).collect();
        let num: f64 = samples.iter().zip(&g).map(|(s, g)| s.shift_ghz * g).sum();
        let den: f64 = g.iter().map(|g| g * g).sum();
        num / den
    };
    let res = levenberg_marquardt(&[gamma0 / scale, 0.0], samples.len(), &LmOptions::default(), |p, r, j| {
        let (gs, z0) = (p[0], p[1]);
        if z0 >= z_min {
            return false;
        }
        for (i, s) in samples.iter().enumerate() {
            let d = s.z_um - z0;
            let base = omega_r_ghz / (d * d);
            r[i] = gs * base - s.shift_ghz / scale;
            j[(i, 0)] = base;
            j[(i, 1)] = 2.0 * gs * base / d;
        }
        true
    })?;
    Ok(GammaFit {
        gamma: res.params[0] * scale,
        z_offset_um: res.params[1],
        rms_residual_ghz: res.rms() * scale,
    })
}

/// Synthetic stand-in for finite-element calibration tables: samples of
/// the `truth` law for one resonator class, with relative Gaussian noise
/// and a footprint-tilt correction `1 / (1 - h^2 / dz^2)`,
/// `h = (side/2) tan(tilt)`.
pub fn synthetic_table(
    truth: &ProbeCalibration,
    key: CalibrationKey,
    heights_um: &[f64],
    geom: &ProbeGeometry,
    relative_noise: f64,
    seed: u64,
) -> Result<Vec<HeightSample>, ProbeError> {
    let gamma = truth.gamma_for(key)?;
    let h = 0.5 * geom.footprint_side_mm * 1e3 * geom.tilt_deg.to_radians().tan();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, relative_noise.max(0.0)).map_err(|e| ProbeError::Invalid(e.to_string()))?;
    heights_um
        .iter()
        .map(|&z| {
            let dz = z - truth.z_offset_um;
            if dz <= h {
                return Err(ProbeError::AtOffset { z, offset: truth.z_offset_um + h });
            }
            let tilt = 1.0 / (1.0 - (h * h) / (dz * dz));
            let clean = law(gamma, truth.omega_r_ghz, dz, truth.exponent, truth.z_ref_um) * tilt;
            let eps = if relative_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            Ok(HeightSample { z_um: z, shift_ghz: clean * (1.0 + eps) })
        })
        .collect()
}

/// Antiderivative of cos^2(pi s / L).
fn cos2_integral(s: f64, length: f64) -> f64 {
    0.5 * s + length / (4.0 * PI) * (2.0 * PI * s / length).sin()
}

/// Mean of cos^2(pi s / L) over the footprint `[x - w/2, x + w/2]`. Past
/// the open ends the standing-wave pattern is continued as fringe field, so
/// a footprint hanging over an end still sees the antinode there.
fn footprint_average(x: f64, length: f64, w: f64) -> f64 {
    (cos2_integral(x + 0.5 * w, length) - cos2_integral(x - 0.5 * w, length)) / w
}

/// Frequency shift [MHz] with the probe centred at `x_mm` along a straight
/// half-wave resonator of length `length_mm`. The shift is the
/// footprint-averaged field energy `cos^2(pi s / L)`, scaled so its maximum
/// over `x` equals `peak_shift_mhz`. For footprints shorter than the
/// resonator the maxima sit at the ends and the only interior minimum at
/// the midpoint.
pub fn lateral_profile(x_mm: f64, length_mm: f64, geom: &ProbeGeometry, peak_shift_mhz: f64) -> Result<f64, ProbeError> {
    let w = geom.footprint_side_mm;
    if !(w > 0.0) {
        return Err(ProbeError::Footprint(w));
    }
    if !(length_mm > 0.0) || !(0.0..=length_mm).contains(&x_mm) {
        return Err(ProbeError::Position { x: x_mm, length: length_mm });
    }
    let max = footprint_average(0.0, length_mm, w).max(footprint_average(0.5 * length_mm, length_mm, w));
    Ok(peak_shift_mhz * footprint_average(x_mm, length_mm, w) / max)
}

/// Length of the segment `a -> b` inside the axis-aligned square centred at
/// `c` with half-side `h` (Liang-Barsky clipping).
fn clipped_length(a: [f64; 2], b: [f64; 2], c: [f64; 2], h: f64) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for k in 0..2 {
        let (lo, hi) = (c[k] - h, c[k] + h);
        if d[k].abs() < 1e-15 {
            if a[k] < lo || a[k] > hi {
                return 0.0;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - a[k]) / d[k], (hi - a[k]) / d[k]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 >= t1 {
            return 0.0;
        }
    }
    (t1 - t0) * (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Defects induced with the probe footprint centred at `position`
/// (lattice units). Each resonator crossing the footprint is shifted by
/// its calibrated defect size, weighted by the covered length relative to
/// the covered length when the probe is centred on that resonator.
pub fn footprint_defects(
    position: [f64; 2],
    lattice: &LatticeSpec,
    geom: &ProbeGeometry,
    cal: &ProbeCalibration,
    z_um: f64,
) -> Result<DefectSet, ProbeError> {
    if !(geom.footprint_side_mm > 0.0) {
        return Err(ProbeError::Footprint(geom.footprint_side_mm));
    }
    let half = 0.5 * geom.footprint_side_mm / geom.lattice_constant_mm;
    let mut out = DefectSet::new();
    for site in &lattice.sites {
        let (a, b) = site.segment();
        let covered = clipped_length(a, b, position, half);
        if covered <= 1e-12 {
            continue;
        }
        let full = clipped_length(a, b, site.position(), half);
        let fraction = (covered / full).min(1.0);
        let size = defect_from_height(z_um, site.category, site.orientation, cal)?;
        out.0.insert(site.index, SHIFT_SIGN * size * fraction);
    }
    Ok(out)
}
