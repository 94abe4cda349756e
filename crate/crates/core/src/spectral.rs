//! Normal modes of the lattice mode matrix
//! `H = diag(w_r + offset_cat + disorder + defect) + t*T`.
//!
//! All frequencies are linear frequencies in GHz.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{adjacency, LatticeError, LatticeSpec, SiteCategory};
use crate::weights::WeightMap;

/// Default tolerance for grouping eigenvalues into degenerate clusters.
pub const DEFAULT_CLUSTER_TOL_GHZ: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("defect on site {site} but lattice has {len} sites")]
    DefectSite { site: usize, len: usize },
    #[error("mode matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub bare_frequency_ghz: f64,
    /// Nearest-neighbour hopping; positive puts the flat band at the bottom.
    pub hopping_ghz: f64,
    pub loss_ghz: f64,
    #[serde(default)]
    pub category_offsets_ghz: BTreeMap<SiteCategory, f64>,
    #[serde(default)]
    pub disorder_sigma_ghz: f64,
    #[serde(default)]
    pub disorder_seed: u64,
}

impl Default for LatticeParams {
    fn default() -> Self {
        Self {
            bare_frequency_ghz: 6.0,
            hopping_ghz: 0.03,
            loss_ghz: 0.0005,
            category_offsets_ghz: BTreeMap::new(),
            disorder_sigma_ghz: 0.0,
            disorder_seed: 0,
        }
    }
}

impl LatticeParams {
    pub fn check(&self) -> Result<(), SpectralError> {
        if !(self.loss_ghz > 0.0) {
            return Err(SpectralError::Params(format!("loss must be positive, got {}", self.loss_ghz)));
        }
        if !(self.disorder_sigma_ghz >= 0.0) {
            return Err(SpectralError::Params("disorder sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-site on-site frequencies without defects.
    pub fn onsite_frequencies(&self, lattice: &LatticeSpec) -> Vec<f64> {
        let mut out: Vec<f64> = lattice
            .sites
            .iter()
            .map(|s| self.bare_frequency_ghz + self.category_offsets_ghz.get(&s.category).copied().unwrap_or(0.0))
            .collect();
        if self.disorder_sigma_ghz > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.disorder_seed);
            let normal = Normal::new(0.0, self.disorder_sigma_ghz).expect("finite sigma");
            for w in &mut out {
                *w += normal.sample(&mut rng);
            }
        }
        out
    }
}

/// Signed single-site frequency shifts, keyed by site index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DefectSet(pub BTreeMap<usize, f64>);

impl DefectSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(site: usize, shift_ghz: f64) -> Self {
        Self(BTreeMap::from([(site, shift_ghz)]))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn sites(&self) -> Vec<usize> {
        self.0.keys().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeMatrix(pub DMatrix<f64>);

impl ModeMatrix {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

pub fn build_mode_matrix(
    lattice: &LatticeSpec,
    params: &LatticeParams,
    defects: &DefectSet,
) -> Result<ModeMatrix, SpectralError> {
    let n = lattice.len();
    if let Some((&site, _)) = defects.0.iter().find(|(&s, _)| s >= n) {
        return Err(SpectralError::DefectSite { site, len: n });
    }
    let mut h = adjacency(lattice) * params.hopping_ghz;
    for (i, w) in params.onsite_frequencies(lattice).into_iter().enumerate() {
        h[(i, i)] = w;
    }
    for (&site, &shift) in &defects.0 {
        h[(site, site)] += shift;
    }
    Ok(ModeMatrix(h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    /// Ascending.
    pub frequencies: Vec<f64>,
    /// `vectors[mu][n]` is the amplitude of mode `mu` on site `n`.
    pub vectors: Vec<Vec<f64>>,
    #[serde(default)]
    pub degenerate_clusters: Vec<Vec<usize>>,
}

pub fn solve_modes(h: &ModeMatrix, cluster_tol: f64) -> Result<ModeSet, SpectralError> {
    let n = h.dim();
    for i in 0..n {
        for j in (i + 1)..n {
            if h.0[(i, j)] != h.0[(j, i)] {
                return Err(SpectralError::NotSymmetric(i, j));
            }
        }
    }
    // diagonalise relative to the mean on-site frequency: rounding then scales
    // with the hopping and detunings instead of the bare frequency
    let centre = if n == 0 { 0.0 } else { h.0.diagonal().mean() };
    let mut shifted = h.0.clone();
    for i in 0..n {
        shifted[(i, i)] -= centre;
    }
    let eig = SymmetricEigen::new(shifted);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));

    let frequencies: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k] + centre).collect();
    let vectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            fix_sign(&mut v);
            v
        })
        .collect();
    let degenerate_clusters = cluster(&frequencies, cluster_tol);
    Ok(ModeSet { frequencies, vectors, degenerate_clusters })
}

/// Largest-magnitude component positive; near-ties go to the lowest index.
fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if let Some(lead) = v.iter().position(|x| x.abs() >= max - 1e-12) {
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Chains of consecutive eigenvalues closer than `tol`; singletons omitted.
fn cluster(freqs: &[f64], tol: f64) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0];
    for i in 1..freqs.len() {
        if freqs[i] - freqs[i - 1] < tol {
            current.push(i);
        } else {
            if current.len() > 1 {
                out.push(std::mem::take(&mut current));
            }
            current = vec![i];
        }
    }
    if current.len() > 1 {
        out.push(current);
    }
    out
}

impl ModeSet {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Distance from mode `mu` (0-based) to its nearest neighbour in frequency.
    pub fn gap(&self, mu: usize) -> f64 {
        let f = &self.frequencies;
        let below = if mu > 0 { f[mu] - f[mu - 1] } else { f64::INFINITY };
        let above = if mu + 1 < f.len() { f[mu + 1] - f[mu] } else { f64::INFINITY };
        below.min(above)
    }

    pub fn is_degenerate(&self, mu: usize) -> bool {
        self.degenerate_clusters.iter().any(|c| c.contains(&mu))
    }

    /// 0-based mode indices ordered by decreasing gap (ties: higher index first).
    pub fn by_gap(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.gap(b).total_cmp(&self.gap(a)).then(b.cmp(&a)));
        idx
    }

    pub fn vector(&self, mu: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.vectors[mu])
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("mode set serializes");
        s.push('\n');
        s
    }
}

/// Weight maps `W[mu][n] = v_mu[n]^2` for every mode; labels are 1-based.
pub fn mode_weights(modes: &ModeSet) -> Vec<WeightMap> {
    modes
        .vectors
        .iter()
        .enumerate()
        .map(|(mu, v)| WeightMap::theory(mu + 1, modes.frequencies[mu], v))
        .collect()
}

/// Alternating +-1/sqrt6 state on interior hexagon `hexagon` (index into
/// [`LatticeSpec::hexagons`]).
pub fn hexagon_state(lattice: &LatticeSpec, hexagon: usize) -> Result<Vec<f64>, SpectralError> {
    let hexagons = lattice.hexagons();
    let hex = hexagons.get(hexagon).ok_or(LatticeError::NoSuchHexagon(hexagon))?;
    if !hex.interior {
        return Err(LatticeError::HexagonNotInterior(hexagon).into());
    }
    let amp = 1.0 / 6f64.sqrt();
    let mut v = vec![0.0; lattice.len()];
    for (k, &s) in hex.sites.iter().enumerate() {
        v[s] = if k % 2 == 0 { amp } else { -amp };
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_patch, MirrorAxis, PatchKind};

    fn params(w: f64, t: f64) -> LatticeParams {
        LatticeParams { bare_frequency_ghz: w, hopping_ghz: t, ..Default::default() }
    }

    #[test]
    fn small_matrices() {
        let single = build_patch(&PatchKind::Single).unwrap();
        let h = build_mode_matrix(&single, &params(6.0, 0.1), &DefectSet::new()).unwrap();
        assert_eq!(h.0, DMatrix::from_row_slice(1, 1, &[6.0]));

        let dimer = build_patch(&PatchKind::Dimer).unwrap();
        let h = build_mode_matrix(&dimer, &params(6.0, 0.1), &DefectSet::new()).unwrap();
        assert_eq!(h.0, DMatrix::from_row_slice(2, 2, &[6.0, 0.1, 0.1, 6.0]));
        let h = build_mode_matrix(&dimer, &params(6.0, 0.1), &DefectSet::single(0, 0.01)).unwrap();
        assert_eq!(h.0, DMatrix::from_row_slice(2, 2, &[6.01, 0.1, 0.1, 6.0]));
    }

    #[test]
    fn defect_on_missing_site() {
        let dimer = build_patch(&PatchKind::Dimer).unwrap();
        let err = build_mode_matrix(&dimer, &params(6.0, 0.1), &DefectSet::single(2, 0.01));
        assert!(matches!(err, Err(SpectralError::DefectSite { site: 2, len: 2 })));
    }

    #[test]
    fn dimer_modes() {
        let dimer = build_patch(&PatchKind::Dimer).unwrap();
        let h = build_mode_matrix(&dimer, &params(6.0, 0.1), &DefectSet::new()).unwrap();
        let m = solve_modes(&h, DEFAULT_CLUSTER_TOL_GHZ).unwrap();
        assert!((m.frequencies[0] - 5.9).abs() < 1e-12);
        assert!((m.frequencies[1] - 6.1).abs() < 1e-12);
        for w in mode_weights(&m) {
            for x in &w.weights {
                assert!((x - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triangle_spectrum() {
        // characteristic polynomial of K3: (x + t)^2 (x - 2t) around w_r
        let tri = build_patch(&PatchKind::Triangle).unwrap();
        let (w, t) = (6.0, 0.07);
        let h = build_mode_matrix(&tri, &params(w, t), &DefectSet::new()).unwrap();
        let m = solve_modes(&h, DEFAULT_CLUSTER_TOL_GHZ).unwrap();
        let expect = [w - t, w - t, w + 2.0 * t];
        for (a, b) in m.frequencies.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(m.degenerate_clusters, vec![vec![0, 1]]);
    }

    #[test]
    fn sign_convention() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let h = build_mode_matrix(&l, &LatticeParams::default(), &DefectSet::new()).unwrap();
        let m = solve_modes(&h, DEFAULT_CLUSTER_TOL_GHZ).unwrap();
        for v in &m.vectors {
            let max = v.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
            let lead = v.iter().position(|x| x.abs() >= max - 1e-12).unwrap();
            assert!(v[lead] > 0.0);
        }
    }

    #[test]
    fn disorder_is_deterministic() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let p = LatticeParams { disorder_sigma_ghz: 0.001, disorder_seed: 17, ..Default::default() };
        let a = build_mode_matrix(&l, &p, &DefectSet::new()).unwrap();
        let b = build_mode_matrix(&l, &p, &DefectSet::new()).unwrap();
        assert_eq!(a, b);
        let c = build_mode_matrix(&l, &LatticeParams { disorder_seed: 18, ..p }, &DefectSet::new()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hexagon_states_are_flat_band_eigenvectors() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let p = LatticeParams::default();
        let h = build_mode_matrix(&l, &p, &DefectSet::new()).unwrap();
        let m = solve_modes(&h, DEFAULT_CLUSTER_TOL_GHZ).unwrap();
        let flat = p.bare_frequency_ghz - 2.0 * p.hopping_ghz;
        for (k, hex) in l.hexagons().iter().enumerate() {
            assert!(hex.interior);
            let v = DVector::from_vec(hexagon_state(&l, k).unwrap());
            assert!((v.norm() - 1.0).abs() < 1e-15);
            let r = &h.0 * &v - &v * flat;
            assert!(r.amax() < 1e-10);
            // orthogonal to every mode outside the flat cluster
            for (mu, f) in m.frequencies.iter().enumerate() {
                if (f - flat).abs() > 1e-6 {
                    assert!(m.vector(mu).dot(&v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn non_interior_hexagon_is_rejected() {
        // bare six-ring: every site has degree 2
        let mut ring = build_patch(&PatchKind::KagomeStar).unwrap();
        let hex = ring.hexagons()[0].clone();
        ring.edges.retain(|e| hex.sites.contains(&e[0]) && hex.sites.contains(&e[1]));
        let k = ring.hexagons().iter().position(|h| h.sites == hex.sites).unwrap();
        assert!(matches!(
            hexagon_state(&ring, k),
            Err(SpectralError::Lattice(LatticeError::HexagonNotInterior(_)))
        ));
        assert!(matches!(
            hexagon_state(&ring, 99),
            Err(SpectralError::Lattice(LatticeError::NoSuchHexagon(99)))
        ));
    }

    #[test]
    fn top_mode_respects_mirrors() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let h = build_mode_matrix(&l, &LatticeParams::default(), &DefectSet::new()).unwrap();
        let m = solve_modes(&h, DEFAULT_CLUSTER_TOL_GHZ).unwrap();
        let w = &mode_weights(&m)[48];
        for axis in [MirrorAxis::Vertical, MirrorAxis::Horizontal] {
            let p = l.mirror_permutation(axis).unwrap();
            for (n, &m) in p.iter().enumerate() {
                assert!((w.weights[n] - w.weights[m]).abs() < 1e-10);
            }
        }
    }
}
