use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::attacks::{Adaptivity, PatchAttackConfig, TextureAttackConfig};
use crate::defenses::DefenseKind;
use crate::gateway::Registry;
use crate::model::{EvalConfig, OptimConfig, PatchSpec};
use crate::toyworld::WorldConfig;
use crate::transforms::{EotRanges, TpsConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    AttackPatch,
    AttackTexture,
    KappaSweep,
    EvalAp,
    EvalAsr,
    TransferMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSettings {
    pub resolution: usize,
    pub c0: f64,
    pub kappa: f64,
    pub eot: EotRanges,
}

impl Default for PatchSettings {
    fn default() -> Self {
        Self {
            resolution: 32,
            c0: PatchSpec::DEFAULT_C0,
            kappa: 1.0,
            eot: EotRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureSettings {
    pub base_size: usize,
    pub tps: Option<TpsConfig>,
    pub eot: EotRanges,
    /// When non-empty, `attack_texture` also trains one texture per `γ` and
    /// evaluates it under shifted placement.
    pub jitter_gammas: Vec<f64>,
    /// Evaluation shift bound as a fraction of the texture size.
    pub jitter_shift: f64,
}

impl Default for TextureSettings {
    fn default() -> Self {
        Self {
            base_size: 32,
            tps: Some(TpsConfig::default()),
            eot: EotRanges::default(),
            jitter_gammas: Vec::new(),
            jitter_shift: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub kappas: Vec<f64>,
    pub modes: Vec<Adaptivity>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            kappas: vec![1.0, 1.25, 1.5],
            modes: Adaptivity::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramesetPaths {
    pub annotation: PathBuf,
    pub image_root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub world: WorldConfig,
    pub seed: u64,
    /// Staged scenes for texture attacks.
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Frames with people, for patch attacks and sweeps.
    pub patch_train_frames: usize,
    pub patch_test_frames: usize,
    /// Clean frames for `eval_ap` / `eval_asr` when no frame set is given.
    pub eval_frames: usize,
    pub calibration_images: usize,
    pub udf_scenes: usize,
    /// Evaluate on these frames instead of generated ones.
    pub frameset: Option<FramesetPaths>,
    pub angle_bucket_width: f64,
    /// Distance bucket edges in meters; empty disables the breakdown.
    pub distance_edges: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            seed: 0,
            train_scenes: 32,
            test_scenes: 64,
            patch_train_frames: 64,
            patch_test_frames: 100,
            eval_frames: 200,
            calibration_images: 50,
            udf_scenes: 32,
            frameset: None,
            angle_bucket_width: 45.0,
            distance_edges: Vec::new(),
        }
    }
}

fn default_detector() -> String {
    "toy".into()
}

fn default_defenses() -> Vec<DefenseKind> {
    vec![DefenseKind::Undefended]
}

fn default_optim() -> OptimConfig {
    OptimConfig {
        tv_weight: 5.0,
        ..OptimConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub kind: ExperimentKind,
    /// Seeds every optimization; replaces `optim.seed`.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_detector")]
    pub detector: String,
    /// Adversarially trained replacement for the `at` stack; `toy-at` when
    /// the detector is `toy`.
    #[serde(default)]
    pub robust_detector: Option<String>,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<DefenseKind>,
    /// Attack all defenses jointly with these weights instead of one by one.
    #[serde(default)]
    pub ensemble_weights: Option<Vec<f64>>,
    #[serde(default = "default_optim")]
    pub optim: OptimConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub patch: PatchSettings,
    #[serde(default)]
    pub texture: TextureSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub data: DataConfig,
    /// Defense parameter file; the shipped defaults when absent.
    #[serde(default)]
    pub defense_defaults: Option<PathBuf>,
    /// Where trained toy weights are cached.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// External process adapters: name → command line.
    #[serde(default)]
    pub adapters: BTreeMap<String, Vec<String>>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(value)
            .map_err(|e| HarnessError::Config(format!("{}: {}", e.path(), e.inner())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!(
                "version: expected {CONFIG_VERSION}, got {}",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, ignoring where outputs and caches live.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.cache_dir = None;
        format!("{:x}", Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            seed: self.seed,
            ..self.optim.clone()
        }
    }

    pub fn patch_attack(&self) -> PatchAttackConfig {
        PatchAttackConfig {
            optim: self.optim(),
            resolution: self.patch.resolution,
            c0: self.patch.c0,
            kappa: self.patch.kappa,
            eot: self.patch.eot,
        }
    }

    pub fn texture_attack(&self) -> TextureAttackConfig {
        TextureAttackConfig {
            optim: self.optim(),
            base_size: self.texture.base_size,
            tps: self.texture.tps,
            eot: self.texture.eot,
        }
    }

    pub fn robust_detector_id(&self) -> Option<String> {
        self.robust_detector
            .clone()
            .or_else(|| (self.detector == "toy").then(|| "toy-at".to_string()))
    }

    /// Checks cross-field constraints against the detectors in `registry`.
    pub fn validate(&self, registry: &Registry) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if !registry.contains(&self.detector) {
            return err(format!("detector: unknown detector {:?}; known: {:?}", self.detector, registry.names()));
        }
        if self.defenses.is_empty() {
            return err("defenses: at least one stack is required".into());
        }
        if self.defenses.contains(&DefenseKind::At) {
            match self.robust_detector_id() {
                Some(r) if registry.contains(&r) => {}
                Some(r) => return err(format!("robust_detector: unknown detector {r:?}")),
                None => return err("robust_detector: required by the at stack".into()),
            }
        }
        if let Some(w) = &self.ensemble_weights {
            if w.len() != self.defenses.len() {
                return err(format!("ensemble_weights: {} weights for {} defenses", w.len(), self.defenses.len()));
            }
            if w.iter().any(|v| !(*v >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
                return err("ensemble_weights: must be non-negative with a positive sum".into());
            }
        }
        if self.optim.batch_size == 0 {
            return err("optim.batch_size: must be positive".into());
        }
        let k = &self.sweep.kappas;
        if self.kind == ExperimentKind::KappaSweep {
            if k.is_empty() || k.iter().any(|v| !(*v > 0.0)) || k.windows(2).any(|w| w[0] > w[1]) {
                return err(format!("sweep.kappas: must be positive and ascending, got {k:?}"));
            }
            if self.sweep.modes.is_empty() {
                return err("sweep.modes: at least one mode is required".into());
            }
        }
        if !(self.data.angle_bucket_width > 0.0) {
            return err("data.angle_bucket_width: must be positive".into());
        }
        Ok(())
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), HarnessError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(HarnessError::Config(format!("override path {path:?} has an empty segment")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {path:?}: {k:?} is inside a non-object")))?;
        node = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| HarnessError::Config(format!("override {path:?}: parent is not an object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"version": 1, "kind": "eval_ap", "output_dir": "out"}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse(MINIMAL, &[]).unwrap();
        assert_eq!(c.detector, "toy");
        assert_eq!(c.defenses, vec![DefenseKind::Undefended]);
        assert_eq!(c.optim.epochs, 100);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let e = ExperimentConfig::parse(r#"{"version": 1, "kind": "eval_ap", "output_dir": "o", "optim": {"epochz": 3}}"#, &[])
            .unwrap_err();
        assert!(e.to_string().contains("optim"), "{e}");
    }

    #[test]
    fn dotted_overrides_apply() {
        let c = ExperimentConfig::parse(
            MINIMAL,
            &["optim.epochs=7".into(), "defenses=[\"fnc\",\"lgs\"]".into(), "detector=other".into()],
        )
        .unwrap();
        assert_eq!(c.optim.epochs, 7);
        assert_eq!(c.defenses, vec![DefenseKind::Fnc, DefenseKind::Lgs]);
        assert_eq!(c.detector, "other");
        assert!(ExperimentConfig::parse(MINIMAL, &["optim.epochz=7".into()]).is_err());
        assert!(ExperimentConfig::parse(MINIMAL, &["noequals".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::parse(MINIMAL, &[]).unwrap();
        let b = ExperimentConfig::parse(MINIMAL, &["output_dir=elsewhere".into()]).unwrap();
        let c = ExperimentConfig::parse(MINIMAL, &["seed=3".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_detector_fails_validation() {
        let c = ExperimentConfig::parse(MINIMAL, &["detector=nope".into()]).unwrap();
        assert!(matches!(c.validate(&Registry::new()), Err(HarnessError::Config(_))));
    }
}
