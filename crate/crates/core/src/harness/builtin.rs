use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use super::{ExperimentConfig, HarnessError};
use crate::defenses::{at_train_toy, AtParams, DefenseDefaults};
use crate::gateway::toynet::train_toy;
use crate::gateway::{Registry, ToyDetector, ToyNet, ToyTrainConfig};

/// The toy detector (`toy`) and its adversarially fine-tuned variant
/// (`toy-at`). Weights are trained on first use and cached in `cache`.
pub fn builtin_registry(cache: Option<&Path>, at: AtParams) -> Registry {
    let cache: Option<PathBuf> = cache.map(Path::to_path_buf);
    let standard: Arc<OnceLock<Arc<ToyNet>>> = Arc::default();
    let robust: Arc<OnceLock<Arc<ToyNet>>> = Arc::default();
    let load_standard = {
        let (cell, cache) = (standard.clone(), cache.clone());
        move || {
            cell.get_or_init(|| Arc::new(train_toy(&ToyTrainConfig::default(), cache.as_deref())))
                .clone()
        }
    };
    let mut r = Registry::new();
    let ls = load_standard.clone();
    r.register(
        "toy",
        "built-in toy person detector",
        Arc::new(move || Ok(Box::new(ToyDetector::new("toy", ls())))),
    );
    r.register(
        "toy-at",
        "toy detector after PGD adversarial fine-tuning",
        Arc::new(move || {
            let net = robust
                .get_or_init(|| {
                    Arc::new(at_train_toy(&ToyTrainConfig::default(), &load_standard(), &at, cache.as_deref()))
                })
                .clone();
            Ok(Box::new(ToyDetector::new("toy-at", net)))
        }),
    );
    r
}

/// Built-in detectors plus the config's external adapters.
pub fn registry_for(cfg: &ExperimentConfig) -> Result<Registry, HarnessError> {
    let defaults = load_defaults(cfg)?;
    let mut r = builtin_registry(cfg.cache_dir.as_deref(), defaults.at);
    for (name, command) in &cfg.adapters {
        if command.is_empty() {
            return Err(HarnessError::Config(format!("adapters.{name}: empty command")));
        }
        r.register_process(name.clone(), command.clone());
    }
    Ok(r)
}

pub(crate) fn load_defaults(cfg: &ExperimentConfig) -> Result<DefenseDefaults, HarnessError> {
    match &cfg.defense_defaults {
        Some(p) => DefenseDefaults::load(p).map_err(|e| HarnessError::Config(format!("defense_defaults: {e}"))),
        None => Ok(DefenseDefaults::shipped()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_both_toy_detectors() {
        let r = builtin_registry(None, AtParams::default());
        assert_eq!(r.names(), vec!["toy", "toy-at"]);
    }
}
