//! The built-in defense stacks and their versioned default parameters.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    ApeFilter, AtParams, DefenseError, DefenseStack, DefensiveFrame, FncFilter, FrameStage, GradientSegmenter, IdbdParams,
    IdbdStage, JediParams, JediStage, LgsParams, LgsStage, MorphCompleter, PatchBoxStage, SacStage, SegmenterLocator,
    UdfParams,
};
use crate::gateway::Detector;
use crate::model::ImagePlane;

const SHIPPED: &str = include_str!("../../data/defense_defaults.json");

/// Every tunable defense parameter, with a version bumped on any change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseDefaults {
    pub version: u32,
    pub lgs: LgsParams,
    pub idbd: IdbdParams,
    pub jedi: JediParams,
    pub jedi_completer: MorphCompleter,
    pub sac_segmenter: GradientSegmenter,
    pub sac_min_area: usize,
    pub napguard: SegmenterLocator,
    /// FNC bounds: this quantile of clean per-location norms, per level.
    pub fnc_quantile: f64,
    pub ape_k: f64,
    /// APE first-level bound: this quantile of clean first-level norms.
    pub ape_quantile: f64,
    pub udf: UdfParams,
    pub at: AtParams,
}

impl DefenseDefaults {
    pub fn shipped() -> Self {
        Self::parse(SHIPPED).expect("shipped defense defaults parse")
    }

    pub fn parse(text: &str) -> Result<Self, DefenseError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| DefenseError::Defaults(format!("{}: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self, DefenseError> {
        let text = std::fs::read_to_string(path).map_err(|e| DefenseError::Defaults(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Undefended,
    At,
    Fnc,
    Lgs,
    Idbd,
    Sac,
    Ape,
    Udf,
    Jedi,
    Napguard,
}

impl DefenseKind {
    /// The nine defenses, excluding the undefended baseline.
    pub const DEFENDED: [DefenseKind; 9] = [
        Self::At,
        Self::Fnc,
        Self::Lgs,
        Self::Idbd,
        Self::Sac,
        Self::Ape,
        Self::Udf,
        Self::Jedi,
        Self::Napguard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Undefended => "undefended",
            Self::At => "at",
            Self::Fnc => "fnc",
            Self::Lgs => "lgs",
            Self::Idbd => "idbd",
            Self::Sac => "sac",
            Self::Ape => "ape",
            Self::Udf => "udf",
            Self::Jedi => "jedi",
            Self::Napguard => "napguard",
        }
    }

    pub fn is_input_preprocessor(self) -> bool {
        matches!(self, Self::Lgs | Self::Idbd | Self::Sac | Self::Udf | Self::Jedi | Self::Napguard)
    }
}

/// What a stack may need besides its parameters.
pub struct StackContext<'a> {
    pub base: &'a dyn Detector,
    /// Adversarially trained replacement, required for [`DefenseKind::At`].
    pub robust: Option<&'a dyn Detector>,
    /// Clean images for calibrating feature-norm bounds.
    pub calibration: &'a [ImagePlane],
    /// Trained frame, required for [`DefenseKind::Udf`].
    pub frame: Option<&'a DefensiveFrame>,
    pub defaults: &'a DefenseDefaults,
}

pub fn build_stack(kind: DefenseKind, ctx: &StackContext<'_>) -> Result<DefenseStack, DefenseError> {
    let d = ctx.defaults;
    let b = DefenseStack::builder(kind.name(), ctx.base.try_clone()?);
    let b = match kind {
        DefenseKind::Undefended => b,
        DefenseKind::At => {
            let robust = ctx
                .robust
                .ok_or_else(|| DefenseError::Stack("AT stack needs a robust detector".into()))?;
            b.wrap_model(robust.manifest().name.clone(), robust.try_clone()?)?
        }
        DefenseKind::Fnc => {
            let mut probe = ctx.base.try_clone()?;
            b.filter(Arc::new(FncFilter::calibrate(probe.as_mut(), ctx.calibration, d.fnc_quantile)?))?
        }
        DefenseKind::Ape => {
            let mut probe = ctx.base.try_clone()?;
            b.filter(Arc::new(ApeFilter::calibrate(probe.as_mut(), ctx.calibration, d.ape_k, d.ape_quantile)?))?
        }
        DefenseKind::Lgs => b.preprocess(Arc::new(LgsStage(d.lgs))),
        DefenseKind::Idbd => b.preprocess(Arc::new(IdbdStage(d.idbd))),
        DefenseKind::Sac => b.preprocess(Arc::new(SacStage {
            segmenter: Arc::new(d.sac_segmenter),
            min_area: d.sac_min_area,
        })),
        DefenseKind::Napguard => b.preprocess(Arc::new(PatchBoxStage(Arc::new(d.napguard)))),
        DefenseKind::Jedi => b.preprocess(Arc::new(JediStage {
            params: d.jedi,
            completer: Arc::new(d.jedi_completer),
        })),
        DefenseKind::Udf => {
            let frame = ctx
                .frame
                .ok_or_else(|| DefenseError::Stack("UDF stack needs a trained frame".into()))?;
            b.preprocess(Arc::new(FrameStage(frame.clone())))
        }
    };
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ToyDetector, ToyNet};

    #[test]
    fn shipped_defaults_parse() {
        let d = DefenseDefaults::shipped();
        assert!(d.version >= 1);
        assert!(DefenseDefaults::parse(r#"{"version": 1, "typo": 2}"#).is_err());
    }

    #[test]
    fn every_preprocessor_is_identity_on_constant_images() {
        let d = DefenseDefaults::shipped();
        let base = ToyDetector::new("toy", Arc::new(ToyNet::new(1)));
        let calib = vec![ImagePlane::filled(64, 64, [0.3; 3])];
        let ctx = StackContext {
            base: &base,
            robust: None,
            calibration: &calib,
            frame: None,
            defaults: &d,
        };
        let img = ImagePlane::filled(64, 64, [0.7, 0.2, 0.4]);
        for kind in DefenseKind::DEFENDED.into_iter().filter(|&k| k.is_input_preprocessor() && k != DefenseKind::Udf) {
            let stack = build_stack(kind, &ctx).unwrap();
            let (out, _) = stack.preprocess(&img).unwrap();
            assert_eq!(out, img, "{}", kind.name());
        }
    }
}
