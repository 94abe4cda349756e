//! Per-site mode weight maps, shared by the theory and imaging sides.

use serde::{Deserialize, Serialize};

/// Tolerance on `sum(W) == 1` for a normalized map.
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    /// 1-based mode label (ascending frequency order of the clean lattice).
    pub mode: usize,
    /// Mode frequency this map was paired with [GHz].
    pub frequency_ghz: f64,
    pub weights: Vec<f64>,
    pub normalized: bool,
    /// Component signs of the underlying eigenvector (theory maps only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signs: Option<Vec<i8>>,
    /// Sites whose fitted slope was negative and clamped to zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamped: Vec<usize>,
    /// Sites without a measurement; their weight is zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unmeasured: Vec<usize>,
}

impl WeightMap {
    pub fn theory(mode: usize, frequency_ghz: f64, vector: &[f64]) -> Self {
        let weights: Vec<f64> = vector.iter().map(|x| x * x).collect();
        let signs = vector.iter().map(|&x| if x < 0.0 { -1 } else { 1 }).collect();
        let mut map = Self {
            mode,
            frequency_ghz,
            weights,
            normalized: false,
            signs: Some(signs),
            clamped: Vec::new(),
            unmeasured: Vec::new(),
        };
        map.normalize();
        map
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Rescale to unit sum. A map of all zeros is left untouched.
    pub fn normalize(&mut self) {
        let s = self.sum();
        if s > 0.0 {
            self.weights.iter_mut().for_each(|w| *w /= s);
            // absorb the last rounding ulp so the sum check is tight
            let s2 = self.sum();
            if (s2 - 1.0).abs() > NORMALIZATION_TOL {
                self.weights.iter_mut().for_each(|w| *w /= s2);
            }
            self.normalized = true;
        }
    }

    pub fn is_normalized(&self) -> bool {
        (self.sum() - 1.0).abs() <= 1e-9 && self.weights.iter().all(|&w| w >= 0.0)
    }

    /// Apply a site relabeling: new[perm[n]] = old[n].
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (n, &p) in perm.iter().enumerate() {
            out.weights[p] = self.weights[n];
        }
        if let (Some(src), Some(dst)) = (&self.signs, &mut out.signs) {
            for (n, &p) in perm.iter().enumerate() {
                dst[p] = src[n];
            }
        }
        out.clamped = self.clamped.iter().map(|&n| perm[n]).collect();
        out.unmeasured = self.unmeasured.iter().map(|&n| perm[n]).collect();
        out
    }
}
