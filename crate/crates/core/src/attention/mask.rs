use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Soft span mask weight for a key at `distance` timesteps in the past:
/// 1 up to the span `z`, a linear ramp of width `ramp`, then 0.
#[inline]
pub fn mask_weight(z: f64, ramp: f64, distance: f64) -> f64 {
    ((ramp + z - distance) / ramp).clamp(0.0, 1.0)
}

/// `true` when `distance` lies strictly inside the ramp, where the mask
/// has slope `1 / ramp` with respect to `z`.
#[inline]
pub fn in_ramp(z: f64, ramp: f64, distance: f64) -> bool {
    z < distance && distance < z + ramp
}

/// Mask weights for a list of integer distances.
pub fn span_mask(z: f64, ramp: usize, distances: &[i64]) -> Result<Vec<f64>> {
    if ramp < 1 {
        return Err(contract("ramp length must be at least 1"));
    }
    distances
        .iter()
        .map(|&d| {
            if d < 0 {
                Err(contract(format!("negative attention distance {d}")))
            } else {
                Ok(mask_weight(z, ramp as f64, d as f64))
            }
        })
        .collect()
}

/// Per-head spans of one layer, in timesteps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanState {
    pub z: Vec<f64>,
    pub ramp: usize,
    pub max_span: usize,
}

impl SpanState {
    /// Largest distance that can receive non-zero weight, capped at the
    /// maximum span: `min(S_max, ceil(z) + R)`.
    pub fn window(&self, head: usize) -> usize {
        (self.z[head].ceil() as usize + self.ramp).min(self.max_span)
    }

    pub fn windows(&self) -> Vec<usize> {
        (0..self.z.len()).map(|h| self.window(h)).collect()
    }

    pub fn max_z(&self) -> f64 {
        self.z.iter().copied().fold(0.0, f64::max)
    }
}
