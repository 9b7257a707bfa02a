//! Feature-space defenses: global norm clipping and outlier-region clipping.

use serde::{Deserialize, Serialize};

use super::DefenseError;
use crate::gateway::features::location_norms;
use crate::gateway::{ClipPlan, Detector, FeatureFilter, LevelClip};
use crate::model::{ImagePlane, Tensor3};

/// Clips every location at every level to that level's bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FncFilter {
    /// One bound per level; the last one repeats for deeper levels.
    pub taus: Vec<f64>,
}

impl FncFilter {
    pub fn new(taus: Vec<f64>) -> Result<Self, DefenseError> {
        if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0)) {
            return Err(DefenseError::InvalidParameter(format!("FNC bounds must be positive, got {taus:?}")));
        }
        Ok(Self { taus })
    }

    /// Bounds set to the `quantile` of clean per-location norms at each level.
    pub fn calibrate(detector: &mut dyn Detector, clean: &[ImagePlane], quantile: f64) -> Result<Self, DefenseError> {
        let norms = level_norms(detector, clean)?;
        Self::new(norms.into_iter().map(|mut n| quantile_of(&mut n, quantile)).collect())
    }
}

impl FeatureFilter for FncFilter {
    fn name(&self) -> &str {
        "fnc"
    }

    fn plan(&self, _probe: Option<&[Tensor3]>, levels: usize) -> ClipPlan {
        ClipPlan {
            levels: (0..levels)
                .map(|l| {
                    Some(LevelClip {
                        tau: self.taus[l.min(self.taus.len() - 1)],
                        region: None,
                    })
                })
                .collect(),
        }
    }
}

/// Per-level lists of clean location norms.
pub fn level_norms(detector: &mut dyn Detector, clean: &[ImagePlane]) -> Result<Vec<Vec<f64>>, DefenseError> {
    if clean.is_empty() {
        return Err(DefenseError::InvalidParameter("calibration needs at least one image".into()));
    }
    let mut out: Vec<Vec<f64>> = Vec::new();
    for img in clean {
        let taps = detector.feature_taps(img)?;
        if out.is_empty() {
            out = vec![Vec::new(); taps.len()];
        }
        for t in taps {
            out[t.level].extend(location_norms(&t.features));
        }
    }
    Ok(out)
}

/// Linear-interpolated quantile; sorts `v` in place.
pub fn quantile_of(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] * (1.0 - f) + v[i + 1] * f
    } else {
        v[i]
    }
}

/// Outlier-energy region detection with first-level clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApeFilter {
    /// Outlier threshold in standard deviations.
    pub k: f64,
    /// Norm bound for first-level features inside the region.
    pub tau: f64,
}

/// Locations on the first level's grid whose energy is an outlier
/// (`> mean + k·std` of that level) at a strict majority of levels.
/// Coarser levels are upsampled by nearest neighbor.
pub fn ape_region(levels: &[Tensor3], k: f64) -> Result<Vec<bool>, DefenseError> {
    if levels.len() < 2 {
        return Err(DefenseError::InvalidParameter(format!("need at least 2 tap levels, got {}", levels.len())));
    }
    let (h0, w0) = (levels[0].height(), levels[0].width());
    let mut votes = vec![0usize; h0 * w0];
    for f in levels {
        let e = location_norms(f);
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let cut = mean + k * var.sqrt();
        let (h, w) = (f.height(), f.width());
        for y in 0..h0 {
            let yy = y * h / h0;
            for x in 0..w0 {
                let xx = x * w / w0;
                if e[yy * w + xx] > cut {
                    votes[y * w0 + x] += 1;
                }
            }
        }
    }
    Ok(votes.into_iter().map(|v| 2 * v > levels.len()).collect())
}

impl ApeFilter {
    /// `tau` set to the `quantile` of clean first-level norms.
    pub fn calibrate(detector: &mut dyn Detector, clean: &[ImagePlane], k: f64, quantile: f64) -> Result<Self, DefenseError> {
        let mut norms = level_norms(detector, clean)?;
        Ok(Self {
            k,
            tau: quantile_of(&mut norms[0], quantile),
        })
    }
}

impl FeatureFilter for ApeFilter {
    fn name(&self) -> &str {
        "ape"
    }

    fn needs_probe(&self) -> bool {
        true
    }

    fn plan(&self, probe: Option<&[Tensor3]>, levels: usize) -> ClipPlan {
        let mut plan = ClipPlan {
            levels: vec![None; levels],
        };
        let Some(region) = probe.and_then(|p| ape_region(p, self.k).ok()) else {
            return plan;
        };
        if region.iter().any(|&r| r) {
            plan.levels[0] = Some(LevelClip {
                tau: self.tau,
                region: Some(region),
            });
        }
        plan
    }
}
