//! Run configuration, provenance stamps and plain-text artifact helpers
//! shared by the command-line recipes.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lattice::{self, LatticeError, LatticeSpec};
use crate::probe::{ProbeCalibration, ProbeError, ResonatorClass};
use crate::scanner::{default_z_grid, site_scatter, ExtractOptions, TrackOptions, WorldModel, DEFAULT_WINDOW_FRACTION};
use crate::spectral::{LatticeParams, SpectralError};

pub const TOOL: &str = concat!("sdm ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("referenced file {0} does not exist")]
    Missing(PathBuf),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Seeds {
    /// Static on-site disorder of the simulated device.
    pub disorder: u64,
    /// Per-site probe coupling variation of the simulated device.
    pub device: u64,
    /// Measurement noise.
    pub noise: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self { disorder: seed, device: seed, noise: seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanSettings {
    /// Explicit 1-based mode labels; empty picks `top_gap_modes`.
    pub modes: Vec<usize>,
    pub top_gap_modes: usize,
    /// Sites to visit; empty means every site.
    pub sites: Vec<usize>,
    /// Descending probe heights [um].
    pub z_grid_um: Vec<f64>,
    pub window_fraction: f64,
    pub grid_step_ghz: f64,
    pub track: TrackOptions,
    pub extract: ExtractOptions,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self {
            modes: Vec::new(),
            top_gap_modes: 3,
            sites: Vec::new(),
            z_grid_um: default_z_grid(),
            window_fraction: DEFAULT_WINDOW_FRACTION,
            grid_step_ghz: 5e-5,
            track: TrackOptions::default(),
            extract: ExtractOptions::default(),
        }
    }
}

/// Imperfections of the simulated instrument beyond the calibration pair.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSettings {
    /// Log-normal spread of per-site probe coupling.
    pub site_scatter_sigma: f64,
    /// Complex Gaussian noise on s21.
    pub noise_sigma: f64,
    /// Relative noise on synthetic calibration tables.
    pub table_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Lattice file, relative to the working directory.
    pub lattice: PathBuf,
    /// Device parameters; the analyst's theory uses them without disorder.
    pub params: LatticeParams,
    /// Probe law of the simulated instrument.
    pub true_calibration: ProbeCalibration,
    /// Probe law the analyst believes in.
    pub assumed_calibration: ProbeCalibration,
    pub scan: ScanSettings,
    pub world: WorldSettings,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lattice: PathBuf::from("lattice.json"),
            params: LatticeParams::default(),
            true_calibration: ProbeCalibration::default(),
            assumed_calibration: ProbeCalibration::default(),
            scan: ScanSettings::default(),
            world: WorldSettings::default(),
            seeds: Seeds::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Imperfect instrument: 5% class-dependent calibration error, a
    /// `1/z^2.1` true law read as `1/z^2`, per-site probe coupling spread of
    /// 30% fixed by the device seed, and complex noise on s21.
    pub fn degraded() -> Self {
        let truth = ProbeCalibration { exponent: 2.1, ..ProbeCalibration::default() };
        let assumed = ProbeCalibration {
            exponent: 2.0,
            ..truth.scaled(|k| if k.class == ResonatorClass::Edge { 1.05 } else { 0.95 })
        };
        Self {
            true_calibration: truth,
            assumed_calibration: assumed,
            world: WorldSettings { site_scatter_sigma: 0.3, noise_sigma: 0.2, table_noise: 0.02 },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "ideal" => Ok(Self::default()),
            "degraded" => Ok(Self::degraded()),
            other => Err(ConfigError::Invalid(format!("unknown preset {other:?} (ideal, degraded)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        if !path.exists() {
            return Err(ConfigError::Missing(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Checks values only; file references are checked by `check_files`.
    pub fn check(&self) -> Result<(), ConfigError> {
        self.params.check()?;
        self.true_calibration.check()?;
        self.assumed_calibration.check()?;
        let s = &self.scan;
        if s.modes.is_empty() && s.top_gap_modes == 0 {
            return Err(ConfigError::Invalid("no modes selected".into()));
        }
        if !(s.window_fraction > 0.0 && s.window_fraction < 0.5) {
            return Err(ConfigError::Invalid(format!("window fraction {} outside (0, 0.5)", s.window_fraction)));
        }
        if !(s.grid_step_ghz > 0.0) {
            return Err(ConfigError::Invalid("grid step must be positive".into()));
        }
        let w = &self.world;
        for (name, v) in [("site scatter", w.site_scatter_sigma), ("noise", w.noise_sigma), ("table noise", w.table_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} sigma must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn check_files(&self, workdir: &Path) -> Result<(), ConfigError> {
        let path = workdir.join(&self.lattice);
        if !path.exists() {
            return Err(ConfigError::Missing(path));
        }
        Ok(())
    }

    pub fn load_lattice(&self, workdir: &Path) -> Result<LatticeSpec, ConfigError> {
        self.check_files(workdir)?;
        Ok(lattice::load(&workdir.join(&self.lattice))?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn provenance(&self, command: &str) -> Provenance {
        Provenance { tool: TOOL.to_string(), command: command.to_string(), config_sha256: self.hash(), seeds: self.seeds }
    }

    /// Device parameters with the configured disorder seed.
    pub fn device_params(&self) -> LatticeParams {
        LatticeParams { disorder_seed: self.seeds.disorder, ..self.params.clone() }
    }

    /// The analyst's clean model of the device.
    pub fn theory_params(&self) -> LatticeParams {
        LatticeParams { disorder_sigma_ghz: 0.0, ..self.params.clone() }
    }

    pub fn world_model(&self, lattice: LatticeSpec) -> WorldModel {
        let site_factors = if self.world.site_scatter_sigma > 0.0 {
            site_scatter(lattice.len(), self.world.site_scatter_sigma, self.seeds.device)
        } else {
            Vec::new()
        };
        WorldModel {
            lattice,
            params: self.device_params(),
            calibration: self.true_calibration.clone(),
            site_factors,
            noise_sigma: self.world.noise_sigma,
            noise_seed: self.seeds.noise,
        }
    }
}

/// Stamp embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub command: String,
    pub config_sha256: String,
    pub seeds: Seeds,
}

impl Provenance {
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serializes")
    }

    /// Single-line form for `#` comment headers.
    pub fn comment(&self) -> String {
        format!("provenance {}", serde_json::to_string(self).expect("provenance serializes"))
    }
}

/// Pretty JSON of `value` with a top-level `provenance` key added.
/// Readers of the module formats ignore the extra key.
pub fn annotated_json<T: Serialize>(value: &T, provenance: &Provenance) -> Result<String, ConfigError> {
    let mut v = serde_json::to_value(value)?;
    match &mut v {
        serde_json::Value::Object(map) => {
            map.insert("provenance".into(), provenance.to_value());
        }
        other => {
            v = serde_json::json!({ "data": other.take(), "provenance": provenance.to_value() });
        }
    }
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Annotates an already serialized JSON document.
pub fn annotate_text(json: &str, provenance: &Provenance) -> Result<String, ConfigError> {
    annotated_json(&serde_json::from_str::<serde_json::Value>(json)?, provenance)
}

/// Reads a JSON artifact, unwrapping the `data` envelope used for
/// non-object payloads.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    if !path.exists() {
        return Err(ConfigError::Missing(path.to_path_buf()));
    }
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if let Some(map) = v.as_object_mut() {
        if map.contains_key("data") && map.contains_key("provenance") && map.len() == 2 {
            v = map.remove("data").expect("checked");
        }
    }
    Ok(serde_json::from_value(v)?)
}

/// Plain delimited numeric table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn write<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<(), ConfigError> {
        if let Some(c) = comment {
            writeln!(out, "# {}", c.replace('\n', " "))?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path, comment: Option<&str>) -> Result<(), ConfigError> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file), comment)
    }

    pub fn read<R: std::io::Read>(input: R) -> Result<Self, ConfigError> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let header = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let row = rec?
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| ConfigError::Invalid(format!("{v}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seeds.noise = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"lattice": "k.json", "seeds": {"noise": 4, "device": 1, "disorder": 0}}"#).unwrap();
        assert_eq!(c.lattice, PathBuf::from("k.json"));
        assert_eq!(c.scan, ScanSettings::default());
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
    }

    #[test]
    fn degraded_preset_differs_only_in_imperfections() {
        let d = RunConfig::degraded();
        d.check().unwrap();
        let key = crate::probe::CalibrationKey::all()[0];
        let ratio = d.assumed_calibration.gamma_for(key).unwrap() / d.true_calibration.gamma_for(key).unwrap();
        assert!((ratio - 0.95).abs() < 1e-12);
        assert_eq!(d.assumed_calibration.exponent, 2.0);
        assert_eq!(RunConfig { true_calibration: ProbeCalibration::default(), assumed_calibration: ProbeCalibration::default(), world: WorldSettings::default(), ..d }, RunConfig::default());
        assert!(RunConfig::preset("bogus").is_err());
    }

    #[test]
    fn invalid_values_and_missing_files() {
        let mut c = RunConfig::default();
        c.scan.window_fraction = 0.7;
        assert!(matches!(c.check(), Err(ConfigError::Invalid(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(RunConfig::default().check_files(dir.path()), Err(ConfigError::Missing(_))));
    }

    #[test]
    fn annotation_is_ignored_by_readers() {
        let c = RunConfig::default();
        let p = c.provenance("test");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        std::fs::write(&path, annotated_json(&vec![1.0, 2.5], &p).unwrap()).unwrap();
        assert_eq!(read_json::<Vec<f64>>(&path).unwrap(), vec![1.0, 2.5]);
        std::fs::write(&path, annotated_json(&c.seeds, &p).unwrap()).unwrap();
        assert_eq!(read_json::<Seeds>(&path).unwrap(), c.seeds);
    }

    #[test]
    fn table_round_trip_is_byte_identical() {
        let mut t = Table::new(&["x", "y"]);
        t.rows = vec![vec![0.1, 1.0 / 3.0], vec![-2.0, 1e-17]];
        let mut a = Vec::new();
        t.write(&mut a, Some("provenance {}")).unwrap();
        let back = Table::read(a.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut b = Vec::new();
        back.write(&mut b, Some("provenance {}")).unwrap();
        assert_eq!(a, b);
    }
}
