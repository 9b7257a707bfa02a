//! Weighted ensembles used as attack targets.

use sha2::{Digest, Sha256};

use super::{AdapterManifest, Capabilities, Detector, GatewayError, ScoreSource, PROTOCOL_VERSION};
use crate::model::{Detection, ImagePlane, Tensor3};

/// Weighted mean of member scores and gradients. `detect` reports the first
/// member's detections; evaluation always targets individual members.
pub struct EnsembleDetector {
    members: Vec<Box<dyn Detector>>,
    weights: Vec<f64>,
    manifest: AdapterManifest,
}

pub fn make_ensemble(members: Vec<Box<dyn Detector>>, weights: Vec<f64>) -> Result<EnsembleDetector, GatewayError> {
    if members.len() < 2 {
        return Err(GatewayError::InvalidEnsemble(format!("need at least 2 members, got {}", members.len())));
    }
    if weights.len() != members.len() {
        return Err(GatewayError::InvalidEnsemble(format!(
            "{} weights for {} members",
            weights.len(),
            members.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(GatewayError::InvalidEnsemble("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(GatewayError::InvalidEnsemble("weights are all zero".into()));
    }
    if let Some(m) = members.iter().find(|m| !m.manifest().capabilities.grads_available) {
        return Err(GatewayError::GradientsUnavailable {
            adapter: m.manifest().name.clone(),
        });
    }
    let sizes: Vec<usize> = members.iter().map(|m| m.manifest().input_size).collect();
    if sizes.iter().any(|&s| s != sizes[0]) {
        return Err(GatewayError::MixedInputSizes(sizes));
    }
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut h = Sha256::new();
    for (m, w) in members.iter().zip(&weights) {
        h.update(m.manifest().weights_hash.as_bytes());
        h.update(w.to_le_bytes());
    }
    let names: Vec<&str> = members.iter().map(|m| m.manifest().name.as_str()).collect();
    let manifest = AdapterManifest {
        name: format!("ensemble({})", names.join(",")),
        weights_hash: format!("{:x}", h.finalize()),
        input_size: sizes[0],
        normalization: members[0].manifest().normalization,
        capabilities: Capabilities {
            grads_available: true,
            feature_taps_available: false,
        },
        protocol_version: PROTOCOL_VERSION,
        score_source: ScoreSource::PreNmsClass,
    };
    Ok(EnsembleDetector {
        members,
        weights,
        manifest,
    })
}

impl EnsembleDetector {
    /// Normalized member weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn members_mut(&mut self) -> &mut [Box<dyn Detector>] {
        &mut self.members
    }
}

impl Detector for EnsembleDetector {
    fn manifest(&self) -> &AdapterManifest {
        &self.manifest
    }

    fn detect(&mut self, image: &ImagePlane) -> Result<Vec<Detection>, GatewayError> {
        self.members[0].detect(image)
    }

    fn person_score(&mut self, image: &ImagePlane) -> Result<f64, GatewayError> {
        let mut s = 0.0;
        for (m, w) in self.members.iter_mut().zip(&self.weights) {
            if *w > 0.0 {
                s += w * m.person_score(image)?;
            }
        }
        Ok(s)
    }

    fn person_score_and_grad(&mut self, image: &ImagePlane) -> Result<(f64, Tensor3), GatewayError> {
        let mut s = 0.0;
        let mut g = Tensor3::zeros(image.height(), image.width(), 3);
        for (m, w) in self.members.iter_mut().zip(&self.weights) {
            if *w > 0.0 {
                let (ms, mg) = m.person_score_and_grad(image)?;
                s += w * ms;
                g.axpy(*w, &mg);
            }
        }
        Ok((s, g))
    }

    fn try_clone(&self) -> Result<Box<dyn Detector>, GatewayError> {
        let members = self.members.iter().map(|m| m.try_clone()).collect::<Result<Vec<_>, _>>()?;
        Ok(Box::new(EnsembleDetector {
            members,
            weights: self.weights.clone(),
            manifest: self.manifest.clone(),
        }))
    }

    fn gradient_notes(&self) -> Vec<String> {
        self.members
            .iter()
            .flat_map(|m| {
                let name = m.manifest().name.clone();
                m.gradient_notes().into_iter().map(move |n| format!("{name}/{n}"))
            })
            .collect()
    }
}
