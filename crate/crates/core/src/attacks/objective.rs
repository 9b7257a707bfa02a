use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::run::EpochLoss;
use super::AttackError;
use crate::gateway::Detector;
use crate::model::{ImagePlane, OptimConfig, Tensor3};
use crate::optim::{project_unit, Optimizer};
use crate::transforms::{nps_loss_with_grad, tv_loss_with_grad, PrintableSet};

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// `Σ wᵢ·sᵢ + tv_weight·tv + nps_weight·nps` over `(weight, score)` pairs.
pub fn attack_objective(scores: &[(f64, f64)], tv: f64, nps: f64, config: &OptimConfig) -> Result<f64, AttackError> {
    if scores.is_empty() {
        return Err(AttackError::NoTargets);
    }
    if let Some(&(w, _)) = scores.iter().find(|(w, _)| !(*w >= 0.0)) {
        return Err(AttackError::NegativeWeight(w));
    }
    let total: f64 = scores.iter().map(|(w, _)| w).sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(AttackError::WeightsNotNormalized(total));
    }
    let score: f64 = scores.iter().map(|(w, s)| w * s).sum();
    Ok(score + config.tv_weight * tv + config.nps_weight * nps)
}

/// TV and NPS values of `pixels` and the gradient of their weighted sum.
pub fn regularizers(pixels: &Tensor3, config: &OptimConfig, set: &PrintableSet) -> Result<(f64, f64, Tensor3), AttackError> {
    let (tv, gtv) = tv_loss_with_grad(pixels)?;
    let (nps, gnps) = nps_loss_with_grad(pixels, set)?;
    let mut g = Tensor3::zeros_like(pixels);
    g.axpy(config.tv_weight, &gtv);
    g.axpy(config.nps_weight, &gnps);
    Ok((tv, nps, g))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub score: f64,
    pub tv: f64,
    pub nps: f64,
}

pub struct Target {
    pub detector: Box<dyn Detector>,
    pub weight: f64,
}

/// What a run records about each target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub name: String,
    pub weights_hash: String,
    pub weight: f64,
    /// Gradient approximations used by the target's defense stages.
    pub gradient: Vec<String>,
}

/// Detectors attacked jointly, with weights normalized to sum to 1.
pub struct Targets {
    members: Vec<Target>,
}

impl Targets {
    pub fn new(members: Vec<(Box<dyn Detector>, f64)>) -> Result<Self, AttackError> {
        if members.is_empty() {
            return Err(AttackError::NoTargets);
        }
        if let Some((_, w)) = members.iter().find(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
            return Err(AttackError::NegativeWeight(*w));
        }
        let total: f64 = members.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return Err(AttackError::WeightsNotNormalized(total));
        }
        Ok(Self {
            members: members
                .into_iter()
                .map(|(detector, w)| Target {
                    detector,
                    weight: w / total,
                })
                .collect(),
        })
    }

    pub fn single(detector: Box<dyn Detector>) -> Self {
        Self {
            members: vec![Target { detector, weight: 1.0 }],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|t| t.weight).collect()
    }

    pub fn members_mut(&mut self) -> &mut [Target] {
        &mut self.members
    }

    pub fn records(&self) -> Vec<TargetRecord> {
        self.members
            .iter()
            .map(|t| {
                let m = t.detector.manifest();
                TargetRecord {
                    name: m.name.clone(),
                    weights_hash: m.weights_hash.clone(),
                    weight: t.weight,
                    gradient: t.detector.gradient_notes(),
                }
            })
            .collect()
    }

    /// `(weight, score)` per target and the weighted image gradient.
    pub fn score_and_grad(&mut self, image: &ImagePlane) -> Result<(Vec<(f64, f64)>, Tensor3), AttackError> {
        let mut scores = Vec::with_capacity(self.members.len());
        let mut grad = Tensor3::zeros(image.height(), image.width(), 3);
        for t in &mut self.members {
            if t.weight > 0.0 {
                let (s, g) = t.detector.person_score_and_grad(image)?;
                grad.axpy(t.weight, &g);
                scores.push((t.weight, s));
            } else {
                scores.push((0.0, 0.0));
            }
        }
        Ok((scores, grad))
    }
}

pub(crate) struct Descent {
    pub pixels: Tensor3,
    pub history: Vec<EpochLoss>,
    pub best_loss: Vec<f64>,
}

/// Mini-batch descent over `samples` examples per epoch in shuffled order.
///
/// `sample(pixels, i, rng)` returns the per-target scores for example `i` and
/// the gradient of the weighted score with respect to `pixels`. Pixels are
/// projected to `[0, 1]` after every step.
pub(crate) fn descend<F>(
    init: Tensor3,
    config: &OptimConfig,
    samples: usize,
    rng: &mut ChaCha8Rng,
    mut sample: F,
) -> Result<Descent, AttackError>
where
    F: FnMut(&Tensor3, usize, &mut ChaCha8Rng) -> Result<(Vec<(f64, f64)>, Tensor3), AttackError>,
{
    if config.batch_size == 0 {
        return Err(AttackError::InvalidArgument("batch_size must be positive".into()));
    }
    if samples == 0 {
        return Err(AttackError::EmptyDataset("no training examples"));
    }
    let set = PrintableSet::shipped();
    let mut pixels = init;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, pixels.len());
    let mut order: Vec<usize> = (0..samples).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_loss = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut acc = ObjectiveTerms::default();
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut grad = Tensor3::zeros_like(&pixels);
            let mut mean_scores: Vec<(f64, f64)> = Vec::new();
            for &i in chunk {
                let (scores, g) = sample(&pixels, i, rng)?;
                if mean_scores.is_empty() {
                    mean_scores = scores.iter().map(|&(w, _)| (w, 0.0)).collect();
                }
                for (m, (_, s)) in mean_scores.iter_mut().zip(&scores) {
                    m.1 += s / chunk.len() as f64;
                }
                grad.axpy(1.0 / chunk.len() as f64, &g);
            }
            let (tv, nps, reg) = regularizers(&pixels, config, &set)?;
            grad.axpy(1.0, &reg);
            let total = attack_objective(&mean_scores, tv, nps, config)?;
            acc.total += total;
            acc.score += mean_scores.iter().map(|(w, s)| w * s).sum::<f64>();
            acc.tv += tv;
            acc.nps += nps;
            steps += 1;
            opt.step(pixels.data_mut(), grad.data());
            project_unit(pixels.data_mut());
        }
        let n = steps as f64;
        let e = EpochLoss {
            epoch,
            total: acc.total / n,
            score: acc.score / n,
            tv: acc.tv / n,
            nps: acc.nps / n,
        };
        best = best.min(e.total);
        best_loss.push(best);
        history.push(e);
    }
    Ok(Descent {
        pixels,
        history,
        best_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tv: f64, nps: f64) -> OptimConfig {
        OptimConfig {
            tv_weight: tv,
            nps_weight: nps,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn single_score_passes_through() {
        assert_eq!(attack_objective(&[(1.0, 0.7)], 0.0, 0.0, &cfg(1.0, 1.0)).unwrap(), 0.7);
    }

    #[test]
    fn tv_term_adds() {
        let v = attack_objective(&[(1.0, 0.5)], 0.2, 0.0, &cfg(1.0, 0.0)).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
    }

    #[test]
    fn three_terms_match_hand_sum() {
        let scores = [(0.5, 0.8), (0.25, 0.4), (0.25, 0.2)];
        let v = attack_objective(&scores, 0.3, 0.6, &cfg(2.5, 0.1)).unwrap();
        let want = 0.5 * 0.8 + 0.25 * 0.4 + 0.25 * 0.2 + 2.5 * 0.3 + 0.1 * 0.6;
        assert_eq!(v, want);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let r = attack_objective(&[(1.5, 0.8), (-0.5, 0.1)], 0.0, 0.0, &cfg(0.0, 0.0));
        assert!(matches!(r, Err(AttackError::NegativeWeight(w)) if w == -0.5));
        assert!(matches!(
            attack_objective(&[(0.5, 0.8)], 0.0, 0.0, &cfg(0.0, 0.0)),
            Err(AttackError::WeightsNotNormalized(_))
        ));
    }
}
