//! Feature-map taps and norm clipping.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::model::Tensor3;

/// Activations of one network level, stored height × width × channels so each
/// spatial location's feature vector is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTap {
    pub layer: String,
    pub level: usize,
    pub features: Tensor3,
}

/// Clipping applied at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelClip {
    pub tau: f64,
    /// Row-major spatial mask at this level's resolution; `None` clips
    /// everywhere.
    pub region: Option<Vec<bool>>,
}

/// What to clip at each level during one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub levels: Vec<Option<LevelClip>>,
}

impl ClipPlan {
    pub fn level(&self, l: usize) -> Option<&LevelClip> {
        self.levels.get(l).and_then(|c| c.as_ref())
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|l| l.is_none())
    }
}

/// A feature-space defense.
///
/// Filters that need clean activations to decide where to clip (an outlier
/// detector, say) return `true` from `needs_probe`; the detector then runs an
/// unfiltered pass first and hands its activations to `plan`.
pub trait FeatureFilter: Send + Sync + Debug {
    fn name(&self) -> &str;

    fn needs_probe(&self) -> bool {
        false
    }

    fn plan(&self, probe: Option<&[Tensor3]>, levels: usize) -> ClipPlan;
}

/// Rescales every spatial feature vector with norm above `tau` to norm `tau`.
pub fn clip_feature_norms(features: &Tensor3, tau: f64) -> Tensor3 {
    clip_in_region(features, tau, None)
}

pub(crate) fn clip_in_region(features: &Tensor3, tau: f64, region: Option<&[bool]>) -> Tensor3 {
    let mut out = features.clone();
    let c = features.channels();
    for (p, v) in out.data_mut().chunks_exact_mut(c).enumerate() {
        if region.is_some_and(|r| !r[p]) {
            continue;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > tau {
            let s = tau / n;
            for x in v {
                *x *= s;
            }
        }
    }
    out
}

/// Vector-Jacobian product of the clip at the pre-clip features `f`.
///
/// Where `‖f‖ > τ` the map is `τ·f/‖f‖`, whose Jacobian is
/// `(τ/‖f‖)(I − f̂f̂ᵀ)`.
pub fn clip_backward(f: &Tensor3, tau: f64, region: Option<&[bool]>, grad: &Tensor3) -> Tensor3 {
    let mut out = grad.clone();
    let c = f.channels();
    for (p, (fv, gv)) in f.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)).enumerate() {
        if region.is_some_and(|r| !r[p]) {
            continue;
        }
        let n = fv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > tau {
            let dot: f64 = fv.iter().zip(gv.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            let s = tau / n;
            for (g, x) in gv.iter_mut().zip(fv) {
                *g = s * (*g - x / n * dot);
            }
        }
    }
    out
}

/// Per-location L2 norms, row-major.
pub fn location_norms(features: &Tensor3) -> Vec<f64> {
    features
        .data()
        .chunks_exact(features.channels())
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_vector_is_clipped_to_tau() {
        let t = Tensor3::new(1, 1, 2, vec![6.0, 8.0]).unwrap();
        let c = clip_feature_norms(&t, 5.0);
        assert!((c.data()[0] - 3.0).abs() < 1e-12 && (c.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn short_vector_is_untouched() {
        let t = Tensor3::new(1, 1, 2, vec![0.0, 3.0]).unwrap();
        assert_eq!(clip_feature_norms(&t, 5.0), t);
    }

    #[test]
    fn backward_matches_finite_difference() {
        let f = Tensor3::new(1, 2, 3, vec![3.0, -4.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let w = [0.3, -1.2, 0.7, 0.5, 0.9, -0.4];
        let obj = |t: &Tensor3| clip_feature_norms(t, 2.5).data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let g = clip_backward(&f, 2.5, None, &Tensor3::new(1, 2, 3, w.to_vec()).unwrap());
        for i in 0..6 {
            let mut p = f.clone();
            let mut m = f.clone();
            p.data_mut()[i] += 1e-6;
            m.data_mut()[i] -= 1e-6;
            let fd = (obj(&p) - obj(&m)) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", g.data()[i]);
        }
    }
}
