//! PGD adversarial training of the built-in toy detector.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::toynet::{train_from, PgdTrainConfig, ToyNet, ToyTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtParams {
    pub epsilon: f64,
    pub steps: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for AtParams {
    fn default() -> Self {
        Self {
            epsilon: 4.0 / 255.0,
            steps: 3,
            epochs: 4,
            lr: 1e-3,
        }
    }
}

/// Fine-tunes `init` on PGD-perturbed batches of the toy training set.
///
/// `base` supplies the dataset and loss settings; `params` replaces the
/// schedule. With `epsilon = 0` this is ordinary fine-tuning.
pub fn at_train_toy(base: &ToyTrainConfig, init: &ToyNet, params: &AtParams, cache: Option<&Path>) -> ToyNet {
    let cfg = at_config(base, params);
    train_from(&cfg, Some(init), cache)
}

pub fn at_config(base: &ToyTrainConfig, params: &AtParams) -> ToyTrainConfig {
    ToyTrainConfig {
        epochs: params.epochs,
        lr: params.lr,
        adversarial: (params.epsilon > 0.0).then_some(PgdTrainConfig {
            epsilon: params.epsilon,
            steps: params.steps,
        }),
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epsilon_is_plain_training() {
        let base = ToyTrainConfig::default();
        let p = AtParams {
            epsilon: 0.0,
            ..AtParams::default()
        };
        assert!(at_config(&base, &p).adversarial.is_none());
        assert!(at_config(&base, &AtParams::default()).adversarial.is_some());
    }
}
