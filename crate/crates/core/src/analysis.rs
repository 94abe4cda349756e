//! Scoring reconstructed weight maps against theory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{is_automorphism, LatticeSpec};
use crate::spectral::ModeSet;
use crate::weights::WeightMap;

/// Experimental and theory frequencies must agree within this many loss rates.
pub const PAIRING_KAPPAS: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("map for mode {0} is not normalized")]
    Unnormalized(usize),
    #[error("maps have {0} and {1} sites")]
    Length(usize, usize),
    #[error("theory map for mode {0} is constant")]
    ConstantTheory(usize),
    #[error("permutation {0} is not a lattice automorphism")]
    NotAutomorphism(usize),
    #[error("mode {0} does not exist in the theory spectrum")]
    NoSuchMode(usize),
    #[error("mode {mode}: measured {measured_ghz} GHz vs theory {theory_ghz} GHz exceeds the pairing tolerance")]
    Pairing { mode: usize, measured_ghz: f64, theory_ghz: f64 },
    #[error("mode {0} is degenerate in theory and cannot be compared")]
    Degenerate(usize),
}

fn check_pair(exp: &WeightMap, th: &WeightMap) -> Result<(), AnalysisError> {
    if exp.len() != th.len() {
        return Err(AnalysisError::Length(exp.len(), th.len()));
    }
    for m in [exp, th] {
        if !m.is_normalized() {
            return Err(AnalysisError::Unnormalized(m.mode));
        }
    }
    Ok(())
}

/// `sum_n s_n sqrt(W_exp) * s_n sqrt(W_th)`: the overlap of the root-weight
/// vectors when both carry the theory signs `s_n` (all +1 if `None`).
pub fn fidelity(exp: &WeightMap, th: &WeightMap, signs: Option<&[i8]>) -> Result<f64, AnalysisError> {
    check_pair(exp, th)?;
    if let Some(s) = signs {
        if s.len() != th.len() {
            return Err(AnalysisError::Length(s.len(), th.len()));
        }
    }
    let f = exp
        .weights
        .iter()
        .zip(&th.weights)
        .enumerate()
        .map(|(n, (&a, &b))| {
            let s = signs.map_or(1.0, |s| f64::from(s[n]));
            (s * a.sqrt()) * (s * b.sqrt())
        })
        .sum::<f64>();
    Ok(f.min(1.0))
}

/// RMS weight deviation over the range of the theory map.
pub fn n_rms(exp: &WeightMap, th: &WeightMap) -> Result<f64, AnalysisError> {
    if exp.len() != th.len() {
        return Err(AnalysisError::Length(exp.len(), th.len()));
    }
    let max = th.weights.iter().copied().fold(f64::MIN, f64::max);
    let min = th.weights.iter().copied().fold(f64::MAX, f64::min);
    let range = max - min;
    if !(range > 0.0) {
        return Err(AnalysisError::ConstantTheory(th.mode));
    }
    let ms = exp.weights.iter().zip(&th.weights).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / exp.len() as f64;
    Ok(ms.sqrt() / range)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub mode: usize,
    pub measured_frequency_ghz: f64,
    pub theory_frequency_ghz: f64,
    pub fidelity: f64,
    pub n_rms: f64,
    /// `|W_exp - W_th|` per site.
    pub deviations: Vec<f64>,
    pub experiment: Vec<f64>,
    pub theory: Vec<f64>,
    pub signs: Vec<i8>,
}

impl ComparisonReport {
    /// Stem-plot rows `(site label, W_exp, W_th)`.
    pub fn stems(&self) -> Vec<(usize, f64, f64)> {
        (0..self.experiment.len())
            .map(|n| (LatticeSpec::display_label(n), self.experiment[n], self.theory[n]))
            .collect()
    }
}

pub fn deviation_report(exp: &WeightMap, th: &WeightMap) -> Result<ComparisonReport, AnalysisError> {
    check_pair(exp, th)?;
    let signs = th.signs.clone().unwrap_or_else(|| vec![1; th.len()]);
    Ok(ComparisonReport {
        mode: exp.mode,
        measured_frequency_ghz: exp.frequency_ghz,
        theory_frequency_ghz: th.frequency_ghz,
        fidelity: fidelity(exp, th, Some(&signs))?,
        n_rms: n_rms(exp, th)?,
        deviations: exp.weights.iter().zip(&th.weights).map(|(a, b)| (a - b).abs()).collect(),
        experiment: exp.weights.clone(),
        theory: th.weights.clone(),
        signs,
    })
}

/// Largest `|W_n - W_perm(n)|` over all sites and permutations.
pub fn symmetry_residual(map: &WeightMap, lattice: &LatticeSpec, perms: &[Vec<usize>]) -> Result<f64, AnalysisError> {
    if map.len() != lattice.len() {
        return Err(AnalysisError::Length(map.len(), lattice.len()));
    }
    let mut worst: f64 = 0.0;
    for (k, p) in perms.iter().enumerate() {
        if !is_automorphism(lattice, p) {
            return Err(AnalysisError::NotAutomorphism(k));
        }
        for (n, &m) in p.iter().enumerate() {
            worst = worst.max((map.weights[n] - map.weights[m]).abs());
        }
    }
    Ok(worst)
}

/// Pair each measured map with the theory mode of the same label and
/// score it. Pairs must agree in frequency within `PAIRING_KAPPAS * kappa`.
pub fn compare(measured: &[WeightMap], theory: &ModeSet, kappa_ghz: f64) -> Result<Vec<ComparisonReport>, AnalysisError> {
    let th_maps = crate::spectral::mode_weights(theory);
    measured
        .iter()
        .map(|exp| {
            let mu = exp.mode.checked_sub(1).filter(|&m| m < theory.len()).ok_or(AnalysisError::NoSuchMode(exp.mode))?;
            if exp.len() != theory.len() {
                return Err(AnalysisError::Length(exp.len(), theory.len()));
            }
            if theory.is_degenerate(mu) {
                return Err(AnalysisError::Degenerate(exp.mode));
            }
            let th = &th_maps[mu];
            if (exp.frequency_ghz - th.frequency_ghz).abs() >= PAIRING_KAPPAS * kappa_ghz {
                return Err(AnalysisError::Pairing {
                    mode: exp.mode,
                    measured_ghz: exp.frequency_ghz,
                    theory_ghz: th.frequency_ghz,
                });
            }
            deviation_report(exp, th)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_patch, MirrorAxis, PatchKind};
    use crate::spectral::{build_mode_matrix, mode_weights, solve_modes, DefectSet, LatticeParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(mode: usize, w: &[f64]) -> WeightMap {
        let mut m = WeightMap {
            mode,
            frequency_ghz: 6.0,
            weights: w.to_vec(),
            normalized: false,
            signs: None,
            clamped: vec![],
            unmeasured: vec![],
        };
        m.normalize();
        m
    }

    #[test]
    fn fidelity_limits() {
        let a = map(1, &[0.5, 0.3, 0.2, 0.0]);
        assert!((fidelity(&a, &a, None).unwrap() - 1.0).abs() < 1e-15);
        let b = map(1, &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(fidelity(&a, &b, None).unwrap(), 0.0);
        let raw = WeightMap { weights: vec![0.5, 0.6], ..map(1, &[1.0, 1.0]) };
        assert_eq!(fidelity(&raw, &raw, None), Err(AnalysisError::Unnormalized(1)));
    }

    #[test]
    fn fidelity_with_signs_is_state_overlap() {
        let v = [0.6, -0.48, 0.64];
        let th = WeightMap::theory(2, 6.0, &v);
        let exp = map(2, &[0.40, 0.20, 0.40]);
        let f = fidelity(&exp, &th, th.signs.as_deref()).unwrap();
        let overlap: f64 = v.iter().zip(&exp.weights).map(|(x, w)| x.signum() * w.sqrt() * x).sum();
        assert!((f - overlap).abs() < 1e-15);
    }

    #[test]
    fn n_rms_cases() {
        let th = map(1, &[0.5, 0.3, 0.2]);
        assert_eq!(n_rms(&th, &th).unwrap(), 0.0);
        let d = 0.01;
        let shifted = WeightMap { weights: th.weights.iter().map(|w| w + d).collect(), ..th.clone() };
        assert!((n_rms(&shifted, &th).unwrap() - d / 0.3).abs() < 1e-14);
        let flat = map(1, &[1.0, 1.0]);
        assert_eq!(n_rms(&flat, &flat), Err(AnalysisError::ConstantTheory(1)));
    }

    #[test]
    fn single_site_error_in_report() {
        let th = map(1, &[0.4, 0.3, 0.2, 0.1]);
        let eps = 0.05;
        let mut w = th.weights.clone();
        w[2] += eps;
        w[3] -= eps;
        let exp = WeightMap { weights: w, ..th.clone() };
        let r = deviation_report(&exp, &th).unwrap();
        assert!((r.deviations[2] - eps).abs() < 1e-15);
        assert!(r.deviations[0] == 0.0 && r.deviations[1] == 0.0);

        // unnormalized injection: the others only move through normalization
        let mut raw = th.weights.clone();
        raw[1] += eps;
        let exp = map(1, &raw);
        let r = deviation_report(&exp, &th).unwrap();
        let s = 1.0 + eps;
        for n in [0, 2, 3] {
            assert!((r.deviations[n] - (th.weights[n] - th.weights[n] / s)).abs() < 1e-15);
        }
        assert!((r.deviations[1] - ((th.weights[1] + eps) / s - th.weights[1])).abs() < 1e-15);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let th = map(1, &[0.4, 0.3, 0.2, 0.1]);
        let exp = map(1, &[0.35, 0.33, 0.22, 0.10]);
        let p = [2, 0, 3, 1];
        let (tp, ep) = (th.permuted(&p), exp.permuted(&p));
        assert!((fidelity(&exp, &th, None).unwrap() - fidelity(&ep, &tp, None).unwrap()).abs() < 1e-15);
        assert!((n_rms(&exp, &th).unwrap() - n_rms(&ep, &tp).unwrap()).abs() < 1e-15);
        let r = deviation_report(&exp, &th).unwrap();
        let rp = deviation_report(&ep, &tp).unwrap();
        for (n, &m) in p.iter().enumerate() {
            assert_eq!(r.deviations[n], rp.deviations[m]);
        }
    }

    #[test]
    fn theory_modes_respect_mirrors() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let h = build_mode_matrix(&l, &LatticeParams::default(), &DefectSet::new()).unwrap();
        let modes = solve_modes(&h, 1e-6).unwrap();
        let perms: Vec<Vec<usize>> = [MirrorAxis::Vertical, MirrorAxis::Horizontal]
            .iter()
            .map(|&a| l.mirror_permutation(a).unwrap())
            .collect();
        for (mu, w) in mode_weights(&modes).iter().enumerate() {
            if !modes.is_degenerate(mu) {
                assert!(symmetry_residual(w, &l, &perms).unwrap() <= 1e-10, "mode {}", mu + 1);
            }
        }
        let id: Vec<usize> = (0..l.len()).collect();
        assert_eq!(symmetry_residual(&mode_weights(&modes)[5], &l, &[id]).unwrap(), 0.0);
        let mut bad: Vec<usize> = (0..l.len()).collect();
        bad.swap(0, 1);
        assert_eq!(symmetry_residual(&mode_weights(&modes)[5], &l, &[bad]), Err(AnalysisError::NotAutomorphism(0)));
    }

    #[test]
    fn disorder_breaks_symmetry_monotonically() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let perms: Vec<Vec<usize>> = [MirrorAxis::Vertical, MirrorAxis::Horizontal]
            .iter()
            .map(|&a| l.mirror_permutation(a).unwrap())
            .collect();
        let mean_residual = |sigma: f64| {
            (0..8u64)
                .map(|seed| {
                    let p = LatticeParams { disorder_sigma_ghz: sigma, disorder_seed: seed, ..Default::default() };
                    let h = build_mode_matrix(&l, &p, &DefectSet::new()).unwrap();
                    let m = solve_modes(&h, 1e-6).unwrap();
                    symmetry_residual(&mode_weights(&m)[48], &l, &perms).unwrap()
                })
                .sum::<f64>()
                / 8.0
        };
        let r: Vec<f64> = [1e-4, 5e-4, 2e-3].iter().map(|&s| mean_residual(s)).collect();
        assert!(r[0] < r[1] && r[1] < r[2], "{r:?}");
    }

    #[test]
    fn ten_percent_scatter_keeps_high_fidelity() {
        // multiplicative scatter scaled to n-rms near 10% gives F near 0.99
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let h = build_mode_matrix(&l, &LatticeParams::default(), &DefectSet::new()).unwrap();
        let modes = solve_modes(&h, 1e-6).unwrap();
        let th = &mode_weights(&modes)[48];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut nr, mut fi) = (0.0, 0.0);
        let trials = 200;
        for _ in 0..trials {
            let w: Vec<f64> = th
                .weights
                .iter()
                .map(|&w| w * (1.0 + 0.27 * rng.sample::<f64, _>(rand_distr::StandardNormal)).max(0.0))
                .collect();
            let exp = map(49, &w);
            nr += n_rms(&exp, th).unwrap();
            fi += fidelity(&exp, th, None).unwrap();
        }
        let (nr, fi) = (nr / trials as f64, fi / trials as f64);
        assert!((0.08..0.12).contains(&nr), "{nr}");
        assert!((0.985..0.995).contains(&fi), "{fi}");
    }

    #[test]
    fn compare_pairs_by_label_and_frequency() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let h = build_mode_matrix(&l, &LatticeParams::default(), &DefectSet::new()).unwrap();
        let modes = solve_modes(&h, 1e-6).unwrap();
        let th = mode_weights(&modes);
        let exp = WeightMap { signs: None, ..th[48].clone() };
        let r = compare(std::slice::from_ref(&exp), &modes, 5e-4).unwrap();
        assert!((r[0].fidelity - 1.0).abs() < 1e-12);
        let off = WeightMap { frequency_ghz: exp.frequency_ghz + 0.01, ..exp.clone() };
        assert!(matches!(compare(&[off], &modes, 5e-4), Err(AnalysisError::Pairing { .. })));
        let short = map(49, &[0.5, 0.5]);
        assert!(matches!(compare(&[short], &modes, 5e-4), Err(AnalysisError::Length(2, 49))));
        let flat = WeightMap { mode: 1, ..exp };
        assert_eq!(compare(&[flat], &modes, 5e-4), Err(AnalysisError::Degenerate(1)));
    }
}
