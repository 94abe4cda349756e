//! Transmission-line resonator design: bare frequency, the resonance
//! condition with end capacitors, and edge-length compensation.
//!
//! Interface units are mm, fF and fF/mm; [`ResonatorDesign`] stores SI.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DesignError {
    #[error("{0} must be positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("{0} must be non-negative, got {1}")]
    Negative(&'static str, f64),
    #[error("branch index must be at least 1")]
    Branch,
    #[error("no sign change bracketing branch {k} for chi = ({chi_l}, {chi_r})")]
    Bracket { k: u32, chi_l: f64, chi_r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonatorDesign {
    pub length_m: f64,
    pub cap_per_m: f64,
    pub ind_per_m: f64,
    pub c_left_f: f64,
    pub c_right_f: f64,
}

impl ResonatorDesign {
    /// Build from interface units: mm, fF/mm, nH/mm and fF.
    pub fn from_interface(length_mm: f64, c_ff_per_mm: f64, l_nh_per_mm: f64, c_left_ff: f64, c_right_ff: f64) -> Self {
        Self {
            length_m: length_mm * 1e-3,
            cap_per_m: c_ff_per_mm * 1e-12,
            ind_per_m: l_nh_per_mm * 1e-6,
            c_left_f: c_left_ff * 1e-15,
            c_right_f: c_right_ff * 1e-15,
        }
    }

    pub fn check(&self) -> Result<(), DesignError> {
        positive("length", self.length_m)?;
        positive("capacitance per length", self.cap_per_m)?;
        positive("inductance per length", self.ind_per_m)?;
        non_negative("left capacitance", self.c_left_f)?;
        non_negative("right capacitance", self.c_right_f)
    }

    /// Dimensionless end capacitances `C / (c L)`.
    pub fn chi(&self) -> (f64, f64) {
        let cl = self.cap_per_m * self.length_m;
        (self.c_left_f / cl, self.c_right_f / cl)
    }

    /// Frequency [GHz] for a dimensionless root `w = omega sqrt(l c) L`.
    pub fn frequency_from_root(&self, w: f64) -> f64 {
        w / (2.0 * PI * self.length_m * (self.ind_per_m * self.cap_per_m).sqrt()) * 1e-9
    }

    /// Loaded frequency [GHz] of branch `k`.
    pub fn loaded_frequency(&self, k: u32) -> Result<f64, DesignError> {
        self.check()?;
        let (l, r) = self.chi();
        Ok(self.frequency_from_root(resonance_roots(l, r, k)?))
    }
}

fn positive(name: &'static str, v: f64) -> Result<(), DesignError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(DesignError::NonPositive(name, v))
    }
}

fn non_negative(name: &'static str, v: f64) -> Result<(), DesignError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(DesignError::Negative(name, v))
    }
}

/// Fundamental of the unloaded half-wave resonator, `1 / (2 L sqrt(l c))`, in GHz.
pub fn bare_frequency(design: &ResonatorDesign) -> Result<f64, DesignError> {
    design.check()?;
    Ok(1.0 / (2.0 * design.length_m * (design.ind_per_m * design.cap_per_m).sqrt()) * 1e-9)
}

/// Pole-free form of `tan w = -(chi_l + chi_r) w / (1 - chi_l chi_r w^2)`.
fn resonance_condition(w: f64, chi_l: f64, chi_r: f64) -> f64 {
    w.sin() * (1.0 - chi_l * chi_r * w * w) + (chi_l + chi_r) * w * w.cos()
}

/// `k`-th positive root of the resonance condition, in `((k - 1/2) pi, k pi]`.
pub fn resonance_roots(chi_l: f64, chi_r: f64, k: u32) -> Result<f64, DesignError> {
    non_negative("chi_l", chi_l)?;
    non_negative("chi_r", chi_r)?;
    if k == 0 {
        return Err(DesignError::Branch);
    }
    let f = |w| resonance_condition(w, chi_l, chi_r);
    let (mut lo, mut hi) = ((k as f64 - 0.5) * PI, k as f64 * PI);
    let (mut flo, fhi) = (f(lo), f(hi));
    if fhi == 0.0 || chi_l + chi_r == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(DesignError::Bracket { k, chi_l, chi_r });
    }
    while hi - lo > 4.0 * f64::EPSILON * hi {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeLength {
    pub exact_mm: f64,
    pub leading_order_mm: f64,
}

/// Edge-resonator length that restores the bulk frequency under the edge
/// end capacitances. `w_bulk` is the bulk dimensionless root; capacitances
/// in fF, `c_per_len` in fF/mm, lengths in mm.
///
/// Keeping the frequency fixed makes `chi * w` independent of the edge
/// length, so the condition is solved by an inverse tangent. The branch is
/// taken in `((k - 1/2) pi, k pi]` with `k` the branch of `w_bulk`, so
/// vanishing capacitances give `L_b k pi / w_bulk` (the bulk length for an
/// unloaded bulk resonator) instead of a length near zero.
pub fn compensated_edge_length(
    l_bulk_mm: f64,
    w_bulk: f64,
    c_left_ff: f64,
    c_right_ff: f64,
    c_per_len_ff_per_mm: f64,
) -> Result<EdgeLength, DesignError> {
    positive("bulk length", l_bulk_mm)?;
    positive("bulk root", w_bulk)?;
    positive("capacitance per length", c_per_len_ff_per_mm)?;
    non_negative("left capacitance", c_left_ff)?;
    non_negative("right capacitance", c_right_ff)?;
    let k = (w_bulk / PI + 0.5).floor().max(1.0);
    let scale = w_bulk / (c_per_len_ff_per_mm * l_bulk_mm);
    let (a_l, a_r) = (c_left_ff * scale, c_right_ff * scale);
    let theta = (a_l + a_r).atan2(1.0 - a_l * a_r);
    let w_edge = k * PI - theta;
    let exact_mm = l_bulk_mm * w_edge / w_bulk;

    let chi_l = c_left_ff / (c_per_len_ff_per_mm * l_bulk_mm);
    let chi_r = c_right_ff / (c_per_len_ff_per_mm * l_bulk_mm);
    let w_unadjusted = resonance_roots(chi_l, chi_r, k as u32)?;
    Ok(EdgeLength { exact_mm, leading_order_mm: l_bulk_mm * w_unadjusted / w_bulk })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Roots of the tangent form from a dense grid scan, skipping poles.
    fn grid_roots(chi_l: f64, chi_r: f64, w_max: f64) -> Vec<f64> {
        let h = |w: f64| w.tan() + (chi_l + chi_r) * w / (1.0 - chi_l * chi_r * w * w);
        let n = 200_000;
        let dw = w_max / n as f64;
        let mut roots = Vec::new();
        for i in 1..n {
            let (a, b) = (i as f64 * dw, (i + 1) as f64 * dw);
            let (fa, fb) = (h(a), h(b));
            if fa.signum() != fb.signum() && fa.abs() < 10.0 && fb.abs() < 10.0 {
                let (mut lo, mut hi, mut flo) = (a, b, fa);
                for _ in 0..200 {
                    let m = 0.5 * (lo + hi);
                    let fm = h(m);
                    if fm.signum() == flo.signum() {
                        lo = m;
                        flo = fm;
                    } else {
                        hi = m;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
        }
        roots
    }

    #[test]
    fn bare_frequency_cases() {
        let d = ResonatorDesign::from_interface(10.0, 160.0, 0.4, 0.0, 0.0);
        let f = bare_frequency(&d).unwrap();
        assert!((f - 1.0 / (2.0 * 0.01 * 6.4e-17_f64.sqrt()) * 1e-9).abs() < 1e-12);
        assert!((f - 6.25).abs() < 1e-12);
        let half = ResonatorDesign { length_m: d.length_m / 2.0, ..d };
        assert!((bare_frequency(&half).unwrap() / f - 2.0).abs() < 1e-14);
        let heavy = ResonatorDesign { cap_per_m: d.cap_per_m * 4.0, ind_per_m: d.ind_per_m * 4.0, ..d };
        assert!((bare_frequency(&heavy).unwrap() / f - 0.25).abs() < 1e-14);
        let bad = ResonatorDesign { length_m: 0.0, ..d };
        assert!(bare_frequency(&bad).is_err());
    }

    #[test]
    fn unloaded_roots_are_multiples_of_pi() {
        for k in 1..5 {
            assert_eq!(resonance_roots(0.0, 0.0, k).unwrap(), k as f64 * PI);
        }
        assert_eq!(resonance_roots(0.0, 0.0, 0), Err(DesignError::Branch));
    }

    #[test]
    fn small_chi_first_order() {
        let w = resonance_roots(1e-3, 1e-3, 1).unwrap();
        let approx = PI * (1.0 - 2e-3);
        assert!(((w - approx) / approx).abs() < 1e-5);
        assert!(w > PI / 2.0 && w <= PI);
    }

    #[test]
    fn roots_match_grid_oracle() {
        for &(l, r) in &[(0.01, 0.02), (0.05, 0.05), (0.0, 0.03), (0.1, 0.05)] {
            let grid = grid_roots(l, r, 3.0 * PI + 0.1);
            let found: Vec<f64> = (1..=3).map(|k| resonance_roots(l, r, k).unwrap()).collect();
            assert_eq!(grid.len(), 3, "{grid:?}");
            for (a, b) in grid.iter().zip(&found) {
                assert!((a - b).abs() < 1e-10, "{a} {b}");
            }
        }
    }

    #[test]
    fn pathological_chi_fails_to_bracket() {
        assert!(matches!(resonance_roots(2.0, 2.0, 1), Err(DesignError::Bracket { .. })));
    }

    #[test]
    fn edge_length_without_capacitance_is_bulk_length() {
        let e = compensated_edge_length(10.0, PI, 0.0, 0.0, 160.0).unwrap();
        assert_eq!(e.exact_mm, 10.0);
    }

    fn round_trip_error(chi_l: f64, chi_r: f64) -> f64 {
        let (lb, c) = (10.0, 160.0);
        let wb = resonance_roots(0.01, 0.01, 1).unwrap();
        let (cl, cr) = (chi_l * c * lb, chi_r * c * lb);
        let e = compensated_edge_length(lb, wb, cl, cr, c).unwrap();
        let we = resonance_roots(cl / (c * e.exact_mm), cr / (c * e.exact_mm), 1).unwrap();
        ((we / e.exact_mm) / (wb / lb) - 1.0).abs()
    }

    #[test]
    fn compensated_length_restores_bulk_frequency() {
        for i in 0..=5 {
            for j in 0..=5 {
                let err = round_trip_error(0.01 * i as f64, 0.01 * j as f64);
                assert!(err < 1e-10, "{i} {j}: {err}");
            }
        }
    }

    #[test]
    fn leading_order_error_is_quadratic() {
        let (lb, c) = (10.0, 160.0);
        let wb = PI;
        let err = |chi: f64| {
            let e = compensated_edge_length(lb, wb, chi * c * lb, chi * c * lb, c).unwrap();
            (e.leading_order_mm - e.exact_mm).abs()
        };
        for chi in [0.04, 0.02, 0.01] {
            let ratio = err(chi) / err(chi / 2.0);
            assert!((ratio - 4.0).abs() < 0.3, "chi {chi}: ratio {ratio}");
        }
    }
}
