use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::objective::Targets;
use super::patch::{evaluate_patch, optimize_patch, random_patch, PatchAttackConfig};
use super::run::Artifact;
use super::AttackError;
use crate::evaluation::{LoadedFrame, MetricKind};
use crate::gateway::Detector;
use crate::model::EvalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptivity {
    /// Unoptimized patch.
    Random,
    /// Optimized on the undefended detector, evaluated on the defended one.
    NonAdaptive,
    /// Optimized on the defended detector.
    Adaptive,
}

impl Adaptivity {
    pub const ALL: [Adaptivity; 3] = [Self::Random, Self::NonAdaptive, Self::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::NonAdaptive => "non_adaptive",
            Self::Adaptive => "adaptive",
        }
    }
}

impl FromStr for Adaptivity {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| AttackError::UnknownAdaptivity(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaPoint {
    pub kappa: f64,
    pub ap: f64,
    /// Final epoch loss of the optimization, absent for random patches.
    pub final_loss: Option<f64>,
}

/// AP of `defended` on `test` for a patch of each relative size. Optimized
/// patches are retrained from scratch for every `κ`.
#[allow(clippy::too_many_arguments)]
pub fn kappa_sweep(
    kappas: &[f64],
    defended: &dyn Detector,
    undefended: &dyn Detector,
    adaptivity: Adaptivity,
    config: &PatchAttackConfig,
    train: &[LoadedFrame],
    test: &[LoadedFrame],
    eval: &EvalConfig,
) -> Result<Vec<KappaPoint>, AttackError> {
    if kappas.is_empty() {
        return Err(AttackError::InvalidArgument("empty kappa list".into()));
    }
    if kappas.iter().any(|k| !(*k > 0.0)) || kappas.windows(2).any(|w| w[0] > w[1]) {
        return Err(AttackError::InvalidArgument(format!("kappas must be positive and ascending, got {kappas:?}")));
    }
    let mut out = Vec::with_capacity(kappas.len());
    for &kappa in kappas {
        let cfg = PatchAttackConfig {
            kappa,
            ..config.clone()
        };
        let (patch, final_loss) = match adaptivity {
            Adaptivity::Random => (random_patch(&cfg)?, None),
            Adaptivity::NonAdaptive | Adaptivity::Adaptive => {
                let source = if adaptivity == Adaptivity::Adaptive { defended } else { undefended };
                let run = optimize_patch(&cfg, &mut Targets::single(source.try_clone()?), train)?;
                let loss = run.history.last().map(|e| e.total);
                let Artifact::Patch(p) = run.artifact else {
                    unreachable!("patch optimization yields a patch")
                };
                (p, loss)
            }
        };
        let report = evaluate_patch(&patch, defended.try_clone()?.as_mut(), test, MetricKind::Ap, eval)?;
        out.push(KappaPoint {
            kappa,
            ap: report.value,
            final_loss,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ToyDetector, ToyNet};
    use std::sync::Arc;

    #[test]
    fn unknown_mode_is_an_error() {
        assert!(matches!("sideways".parse::<Adaptivity>(), Err(AttackError::UnknownAdaptivity(_))));
        assert_eq!("non_adaptive".parse::<Adaptivity>().unwrap(), Adaptivity::NonAdaptive);
    }

    #[test]
    fn single_kappa_is_one_standard_evaluation() {
        let det = ToyDetector::new("toy", Arc::new(ToyNet::new(2)));
        let frames: Vec<LoadedFrame> = crate::toyworld::generate_scenes(&Default::default(), 4, 3, "k")
            .into_iter()
            .map(|s| LoadedFrame {
                image: s.image,
                truth: s.truth,
            })
            .collect();
        let cfg = PatchAttackConfig::default();
        let eval = EvalConfig::default();
        let pts = kappa_sweep(&[1.0], &det, &det, Adaptivity::Random, &cfg, &frames, &frames, &eval).unwrap();
        assert_eq!(pts.len(), 1);
        let want = evaluate_patch(&random_patch(&cfg).unwrap(), &mut det.clone(), &frames, MetricKind::Ap, &eval).unwrap();
        assert_eq!(pts[0].ap, want.value);
        assert!(kappa_sweep(&[1.5, 1.0], &det, &det, Adaptivity::Random, &cfg, &frames, &frames, &eval).is_err());
    }
}
