use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::builtin::{load_defaults, registry_for};
use super::{io_err, ExperimentConfig, ExperimentKind, HarnessError, CODE_VERSION};
use crate::attacks::{
    evaluate_patch, evaluate_texture, load_run_artifact, optimize_patch, optimize_texture, random_patch,
    random_texture, Adaptivity, Artifact, AttackError, AttackRun, SceneBatch, Targets, TexturePlacement,
};
use crate::defenses::{build_stack, udf_train, DefenseDefaults, DefenseKind, DefenseStack, DefensiveFrame, StackContext};
use crate::evaluation::{load_frameset, Buckets, EvalReport, LoadedFrame, MetadataAxis, MetricKind};
use crate::gateway::{Detector, Registry};
use crate::model::{floor_scaled, load_png, quantize_rgb8, save_png, ImagePlane, LatentTextureMap, PatchSpec};
use crate::toyworld::{generate_scenes, generate_single_person_scenes};
use crate::transforms::BillboardRenderer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stem: String,
    pub sha1: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub defense_defaults_version: u32,
    pub status: RunStatus,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub stages: Vec<StageEntry>,
    pub artifacts: Vec<ArtifactEntry>,
    /// File names under `reports/`.
    pub reports: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub source: String,
    pub evaluated_on: String,
    pub random_ap: f64,
    pub adversarial_ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

/// Data behind one line plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub x: String,
    pub y: String,
    pub series: Vec<CurveSeries>,
}

/// AP of every target defense under the texture crafted against each source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `ap[target][source]`.
    pub ap: Vec<Vec<f64>>,
}

enum Mode {
    Optimize,
    /// Load artifacts from this directory instead of optimizing.
    Reuse(PathBuf),
}

struct Env {
    base: Box<dyn Detector>,
    stacks: Vec<(DefenseKind, DefenseStack)>,
}

impl Env {
    fn stack(&self, i: usize) -> Result<Box<dyn Detector>, HarnessError> {
        self.stacks[i].1.try_clone().map_err(stage_err("clone"))
    }
}

fn stage_err<E: std::fmt::Display>(stage: &str) -> impl Fn(E) -> HarnessError + '_ {
    move |e| HarnessError::Stage {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    mode: Mode,
    manifest: RunManifest,
    current: String,
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

impl<'a> Runner<'a> {
    fn artifacts(&self) -> PathBuf {
        self.dir.join("artifacts")
    }

    fn write_manifest(&self) -> Result<(), HarnessError> {
        let p = self.dir.join("manifest.json");
        fs::write(&p, json(&self.manifest)).map_err(|e| io_err(&p, e))
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T, HarnessError>) -> Result<T, HarnessError> {
        self.current = name.to_string();
        self.manifest.stages.push(StageEntry {
            name: name.to_string(),
            status: RunStatus::Running,
        });
        self.write_manifest()?;
        let out = f(self);
        let last = self.manifest.stages.last_mut().expect("stage pushed");
        last.status = if out.is_ok() { RunStatus::Complete } else { RunStatus::Failed };
        let out = out.map_err(|e| match e {
            HarnessError::Stage { .. } | HarnessError::Config(_) => e,
            other => HarnessError::Stage {
                stage: name.to_string(),
                message: other.to_string(),
            },
        });
        self.write_manifest()?;
        out
    }

    fn err<E: std::fmt::Display>(&self) -> impl Fn(E) -> HarnessError + '_ {
        move |e| HarnessError::Stage {
            stage: self.current.clone(),
            message: e.to_string(),
        }
    }

    fn report(&mut self, name: &str, body: String) -> Result<(), HarnessError> {
        let p = self.dir.join("reports").join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
        self.manifest.reports.push(name.to_string());
        Ok(())
    }

    fn eval_report(&mut self, stem: &str, report: &EvalReport) -> Result<(), HarnessError> {
        self.report(&format!("{stem}.json"), report.to_json())?;
        let p = self.dir.join("reports").join(format!("{stem}.csv"));
        report.save_csv(&p).map_err(|e| io_err(&p, e))?;
        self.manifest.reports.push(format!("{stem}.csv"));
        Ok(())
    }

    /// Runs `optimize` and saves its artifact, or loads the saved one.
    fn artifact(&mut self, stem: &str, optimize: impl FnOnce() -> Result<AttackRun, AttackError>) -> Result<Artifact, HarnessError> {
        match &self.mode {
            Mode::Reuse(dir) => Ok(load_run_artifact(dir, stem).map_err(self.err())?.0),
            Mode::Optimize if self.manifest.artifacts.iter().any(|a| a.stem == stem) => {
                Ok(load_run_artifact(&self.artifacts(), stem).map_err(self.err())?.0)
            }
            Mode::Optimize => {
                let run = optimize().map_err(self.err())?;
                let m = run.save(&self.artifacts(), stem).map_err(self.err())?;
                self.manifest.artifacts.push(ArtifactEntry {
                    stem: stem.to_string(),
                    sha1: m.artifact_sha1,
                });
                Ok(run.artifact)
            }
        }
    }

    fn texture(&mut self, stem: &str, optimize: impl FnOnce() -> Result<AttackRun, AttackError>) -> Result<LatentTextureMap, HarnessError> {
        match self.artifact(stem, optimize)? {
            Artifact::Texture(t) => Ok(t),
            Artifact::Patch(_) => Err(HarnessError::Stage {
                stage: self.current.clone(),
                message: format!("artifact {stem} is a patch, expected a texture"),
            }),
        }
    }

    fn patch(&mut self, stem: &str, optimize: impl FnOnce() -> Result<AttackRun, AttackError>) -> Result<PatchSpec, HarnessError> {
        match self.artifact(stem, optimize)? {
            Artifact::Patch(p) => Ok(p),
            Artifact::Texture(_) => Err(HarnessError::Stage {
                stage: self.current.clone(),
                message: format!("artifact {stem} is a texture, expected a patch"),
            }),
        }
    }
}

/// Runs the experiment with detectors from [`registry_for`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    let registry = registry_for(cfg)?;
    run_experiment_with(cfg, &registry)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, registry: &Registry) -> Result<RunManifest, HarnessError> {
    run_in(cfg, registry, Mode::Optimize)
}

fn run_in(cfg: &ExperimentConfig, registry: &Registry, mode: Mode) -> Result<RunManifest, HarnessError> {
    cfg.validate(registry)?;
    let defaults = load_defaults(cfg)?;
    let dir = cfg.output_dir.clone();
    for sub in ["", "artifacts", "reports"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| HarnessError::Config(format!("output_dir: {}: {e}", p.display())))?;
    }
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, cfg.to_json()).map_err(|e| HarnessError::Config(format!("output_dir: {}: {e}", cfg_path.display())))?;
    let mut runner = Runner {
        cfg,
        dir,
        mode,
        manifest: RunManifest {
            kind: cfg.kind,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            code_version: CODE_VERSION.to_string(),
            defense_defaults_version: defaults.version,
            status: RunStatus::Running,
            failed_stage: None,
            error: None,
            stages: Vec::new(),
            artifacts: Vec::new(),
            reports: Vec::new(),
        },
        current: String::new(),
    };
    let result = execute(&mut runner, registry, &defaults);
    match result {
        Ok(()) => {
            runner.manifest.status = RunStatus::Complete;
            runner.write_manifest()?;
            Ok(runner.manifest)
        }
        Err(e) => {
            runner.manifest.status = RunStatus::Failed;
            runner.manifest.failed_stage = Some(match &e {
                HarnessError::Stage { stage, .. } => stage.clone(),
                _ => runner.current.clone(),
            });
            runner.manifest.error = Some(e.to_string());
            runner.write_manifest()?;
            Err(e)
        }
    }
}

fn execute(r: &mut Runner<'_>, registry: &Registry, defaults: &DefenseDefaults) -> Result<(), HarnessError> {
    let env = r.stage("setup", |r| build_env(r, registry, defaults))?;
    match r.cfg.kind {
        ExperimentKind::AttackPatch => r.stage("attack_patch", |r| attack_patch(r, &env)),
        ExperimentKind::AttackTexture => {
            r.stage("attack_texture", |r| attack_texture(r, &env))?;
            if r.cfg.texture.jitter_gammas.is_empty() {
                Ok(())
            } else {
                r.stage("jitter", |r| jitter(r, &env))
            }
        }
        ExperimentKind::KappaSweep => r.stage("kappa_sweep", |r| kappa_sweep(r, &env)),
        ExperimentKind::EvalAp => r.stage("eval_ap", |r| eval_frames(r, &env, MetricKind::Ap, "")),
        ExperimentKind::EvalAsr => r.stage("eval_asr", |r| eval_frames(r, &env, MetricKind::Asr, "")),
        ExperimentKind::TransferMatrix => r.stage("transfer_matrix", |r| transfer_matrix(r, &env)),
    }
}

fn build_env(r: &mut Runner<'_>, registry: &Registry, defaults: &DefenseDefaults) -> Result<Env, HarnessError> {
    let cfg = r.cfg;
    let base = registry.create(&cfg.detector).map_err(r.err())?;
    let robust = if cfg.defenses.contains(&DefenseKind::At) {
        let id = cfg.robust_detector_id().expect("validated");
        Some(registry.create(&id).map_err(r.err())?)
    } else {
        None
    };
    let d = &cfg.data;
    let calibration: Vec<ImagePlane> = generate_scenes(&d.world, d.calibration_images, d.seed.wrapping_add(2), "cal-")
        .into_iter()
        .map(|s| s.image)
        .collect();
    let frame = if cfg.defenses.contains(&DefenseKind::Udf) {
        Some(udf_frame(r, base.as_ref(), defaults)?)
    } else {
        None
    };
    let ctx = StackContext {
        base: base.as_ref(),
        robust: robust.as_deref(),
        calibration: &calibration,
        frame: frame.as_ref(),
        defaults,
    };
    let stacks = cfg
        .defenses
        .iter()
        .map(|&k| build_stack(k, &ctx).map(|s| (k, s)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(r.err())?;
    Ok(Env { base, stacks })
}

fn udf_frame(r: &mut Runner<'_>, base: &dyn Detector, defaults: &DefenseDefaults) -> Result<DefensiveFrame, HarnessError> {
    let width = defaults.udf.frame_width;
    match &r.mode {
        Mode::Reuse(dir) => {
            let pixels = load_png(&dir.join("udf_frame.png")).map_err(r.err())?;
            DefensiveFrame::new(width, pixels).map_err(r.err())
        }
        Mode::Optimize => {
            let d = &r.cfg.data;
            let scenes = generate_scenes(&d.world, d.udf_scenes, d.seed.wrapping_add(3), "udf-");
            let mut det = base.try_clone().map_err(r.err())?;
            let mut frame = udf_train(&defaults.udf, det.as_mut(), &scenes).map_err(r.err())?;
            // what gets saved is what gets used
            frame.pixels = quantize_rgb8(&frame.pixels);
            save_png(&r.artifacts().join("udf_frame.png"), &frame.pixels).map_err(r.err())?;
            Ok(frame)
        }
    }
}

fn patch_frames(cfg: &ExperimentConfig) -> (Vec<LoadedFrame>, Vec<LoadedFrame>) {
    let d = &cfg.data;
    let conv = |n, seed, prefix| -> Vec<LoadedFrame> {
        generate_single_person_scenes(&d.world, n, seed, prefix)
            .into_iter()
            .map(|s| LoadedFrame {
                image: s.image,
                truth: s.truth,
            })
            .collect()
    };
    (
        conv(d.patch_train_frames, d.seed.wrapping_add(5), "ptrain-"),
        conv(d.patch_test_frames, d.seed.wrapping_add(6), "ptest-"),
    )
}

fn scene_batch(r: &Runner<'_>) -> Result<SceneBatch, HarnessError> {
    let d = &r.cfg.data;
    SceneBatch::toy(&d.world, d.train_scenes, d.test_scenes, d.seed, Arc::new(BillboardRenderer::default())).map_err(r.err())
}

/// `(name, targets)` for each attack source: every stack on its own, or one
/// weighted ensemble over all of them.
fn sources(r: &Runner<'_>, env: &Env) -> Result<Vec<(String, Vec<usize>)>, HarnessError> {
    let _ = r;
    Ok(match &r.cfg.ensemble_weights {
        Some(_) => vec![("ensemble".to_string(), (0..env.stacks.len()).collect())],
        None => env.stacks.iter().enumerate().map(|(i, (k, _))| (k.name().to_string(), vec![i])).collect(),
    })
}

fn targets(r: &Runner<'_>, env: &Env, members: &[usize]) -> Result<Targets, HarnessError> {
    let weights = r.cfg.ensemble_weights.clone().unwrap_or_else(|| vec![1.0; env.stacks.len()]);
    let list = members
        .iter()
        .map(|&i| Ok((env.stack(i)?, weights[i])))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Targets::new(list).map_err(r.err())
}

fn attack_patch(r: &mut Runner<'_>, env: &Env) -> Result<(), HarnessError> {
    let (train, test) = patch_frames(r.cfg);
    let pcfg = r.cfg.patch_attack();
    let random = random_patch(&pcfg).map_err(r.err())?;
    let mut rows = Vec::new();
    for (name, members) in sources(r, env)? {
        let mut t = targets(r, env, &members)?;
        let patch = r.patch(&format!("patch_{name}"), || optimize_patch(&pcfg, &mut t, &train))?;
        for &m in &members {
            let on = env.stacks[m].0.name();
            let mut det = env.stack(m)?;
            let rnd = evaluate_patch(&random, det.as_mut(), &test, MetricKind::Ap, &r.cfg.eval).map_err(r.err())?;
            let adv = evaluate_patch(&patch, det.as_mut(), &test, MetricKind::Ap, &r.cfg.eval).map_err(r.err())?;
            r.eval_report(&format!("patch_{name}_on_{on}_ap"), &adv)?;
            r.eval_report(&format!("random_patch_on_{on}_ap"), &rnd)?;
            rows.push(SummaryRow {
                source: name.clone(),
                evaluated_on: on.to_string(),
                random_ap: rnd.value,
                adversarial_ap: adv.value,
            });
        }
    }
    r.report("summary.json", json(&rows))
}

fn attack_texture(r: &mut Runner<'_>, env: &Env) -> Result<(), HarnessError> {
    let batch = scene_batch(r)?;
    let tcfg = r.cfg.texture_attack();
    let random = random_texture(&tcfg).map_err(r.err())?;
    let mut rows = Vec::new();
    for (name, members) in sources(r, env)? {
        let mut t = targets(r, env, &members)?;
        let tex = r.texture(&format!("texture_{name}"), || optimize_texture(&tcfg, &mut t, &batch))?;
        for &m in &members {
            let on = env.stacks[m].0.name();
            let mut det = env.stack(m)?;
            let ev = |tex: &LatentTextureMap, det: &mut dyn Detector| {
                evaluate_texture(tex, det, &batch.test, batch.renderer.as_ref(), TexturePlacement::Eval, MetricKind::Ap, &r.cfg.eval)
            };
            let rnd = ev(&random, det.as_mut()).map_err(r.err())?;
            let adv = ev(&tex, det.as_mut()).map_err(r.err())?;
            r.eval_report(&format!("texture_{name}_on_{on}_ap"), &adv)?;
            r.eval_report(&format!("random_texture_on_{on}_ap"), &rnd)?;
            rows.push(SummaryRow {
                source: name.clone(),
                evaluated_on: on.to_string(),
                random_ap: rnd.value,
                adversarial_ap: adv.value,
            });
        }
    }
    r.report("summary.json", json(&rows))
}

/// AP against `γ` for textures trained on the first source, evaluated at the
/// center crop and under shifted placement.
fn jitter(r: &mut Runner<'_>, env: &Env) -> Result<(), HarnessError> {
    let batch = scene_batch(r)?;
    let (name, members) = sources(r, env)?.remove(0);
    let base = r.cfg.texture.base_size;
    let shift = floor_scaled(r.cfg.texture.jitter_shift, base);
    let mut center = Vec::new();
    let mut shifted = Vec::new();
    for &gamma in &r.cfg.texture.jitter_gammas.clone() {
        let mut tcfg = r.cfg.texture_attack();
        tcfg.optim.gamma = gamma;
        let mut t = targets(r, env, &members)?;
        let tex = r.texture(&format!("jitter_{name}_g{gamma}"), || optimize_texture(&tcfg, &mut t, &batch))?;
        let mut det = env.stack(members[0])?;
        for (placement, out) in [
            (TexturePlacement::Eval, &mut center),
            (
                TexturePlacement::Shifted {
                    max: (shift, shift),
                    seed: r.cfg.data.seed.wrapping_add(7),
                },
                &mut shifted,
            ),
        ] {
            let rep = evaluate_texture(&tex, det.as_mut(), &batch.test, batch.renderer.as_ref(), placement, MetricKind::Ap, &r.cfg.eval)
                .map_err(r.err())?;
            out.push(CurvePoint { x: gamma, y: rep.value });
        }
    }
    let report = CurveReport {
        x: "gamma".into(),
        y: "ap".into(),
        series: vec![
            CurveSeries {
                label: "center".into(),
                points: center,
            },
            CurveSeries {
                label: "shifted".into(),
                points: shifted,
            },
        ],
    };
    r.report("jitter.json", json(&report))
}

fn kappa_sweep(r: &mut Runner<'_>, env: &Env) -> Result<(), HarnessError> {
    let (train, test) = patch_frames(r.cfg);
    let mut series = Vec::new();
    for (i, (kind, _)) in env.stacks.iter().enumerate() {
        for &mode in &r.cfg.sweep.modes.clone() {
            let mut points = Vec::new();
            for &kappa in &r.cfg.sweep.kappas.clone() {
                let mut pcfg = r.cfg.patch_attack();
                pcfg.kappa = kappa;
                let patch = match mode {
                    Adaptivity::Random => random_patch(&pcfg).map_err(r.err())?,
                    Adaptivity::NonAdaptive => {
                        let mut t = Targets::single(env.base.try_clone().map_err(r.err())?);
                        r.patch(&format!("kappa_nonadaptive_k{kappa}"), || optimize_patch(&pcfg, &mut t, &train))?
                    }
                    Adaptivity::Adaptive => {
                        let mut t = Targets::single(env.stack(i)?);
                        r.patch(&format!("kappa_{}_k{kappa}", kind.name()), || optimize_patch(&pcfg, &mut t, &train))?
                    }
                };
                let mut det = env.stack(i)?;
                let rep = evaluate_patch(&patch, det.as_mut(), &test, MetricKind::Ap, &r.cfg.eval).map_err(r.err())?;
                points.push(CurvePoint { x: kappa, y: rep.value });
            }
            series.push(CurveSeries {
                label: format!("{}/{}", kind.name(), mode.name()),
                points,
            });
        }
    }
    let report = CurveReport {
        x: "kappa".into(),
        y: "ap".into(),
        series,
    };
    r.report("kappa_sweep.json", json(&report))
}

fn eval_frames(r: &mut Runner<'_>, env: &Env, metric: MetricKind, prefix: &str) -> Result<(), HarnessError> {
    let d = &r.cfg.data;
    let frames = match &d.frameset {
        Some(f) => load_frameset(&f.annotation, &f.image_root).map_err(r.err())?,
        None => generate_scenes(&d.world, d.eval_frames, d.seed.wrapping_add(4), "eval-")
            .into_iter()
            .map(|s| LoadedFrame {
                image: s.image,
                truth: s.truth,
            })
            .collect(),
    };
    // success is only defined on frames that show a person
    let frames: Vec<LoadedFrame> = match metric {
        MetricKind::Asr => frames.into_iter().filter(|f| f.truth.person_boxes().next().is_some()).collect(),
        MetricKind::Ap => frames,
    };
    let has = |f: fn(&LoadedFrame) -> bool| !frames.is_empty() && frames.iter().all(f);
    let with_angle = has(|f| f.truth.angle_deg.is_some());
    let with_distance = has(|f| f.truth.distance_m.is_some()) && d.distance_edges.len() >= 2;
    for i in 0..env.stacks.len() {
        let name = env.stacks[i].0.name();
        let mut det = env.stack(i)?;
        let mut dets = Vec::with_capacity(frames.len());
        for f in &frames {
            dets.push(det.detect(&f.image).map_err(r.err())?);
        }
        let truths = frames.iter().map(|f| f.truth.clone()).collect();
        let mut rep = EvalReport::compute(metric, dets, truths, &r.cfg.eval).map_err(r.err())?;
        if with_angle {
            let b = Buckets::angles(d.angle_bucket_width).map_err(r.err())?;
            rep = rep.with_breakdown(&b).map_err(r.err())?;
        }
        if with_distance {
            let b = Buckets::new(MetadataAxis::Distance, d.distance_edges.clone()).map_err(r.err())?;
            rep = rep.with_breakdown(&b).map_err(r.err())?;
        }
        r.eval_report(&format!("{prefix}{name}_{}", metric_name(metric)), &rep)?;
    }
    Ok(())
}

fn metric_name(m: MetricKind) -> &'static str {
    match m {
        MetricKind::Ap => "ap",
        MetricKind::Asr => "asr",
    }
}

fn transfer_matrix(r: &mut Runner<'_>, env: &Env) -> Result<(), HarnessError> {
    let batch = scene_batch(r)?;
    let tcfg = r.cfg.texture_attack();
    let mut names = Vec::new();
    let mut textures = Vec::new();
    let mut all: Vec<(String, Vec<usize>)> = env.stacks.iter().enumerate().map(|(i, (k, _))| (k.name().to_string(), vec![i])).collect();
    if r.cfg.ensemble_weights.is_some() {
        all.push(("ensemble".into(), (0..env.stacks.len()).collect()));
    }
    for (name, members) in all {
        let mut t = targets(r, env, &members)?;
        textures.push(r.texture(&format!("texture_{name}"), || optimize_texture(&tcfg, &mut t, &batch))?);
        names.push(name);
    }
    let mut ap = Vec::new();
    for i in 0..env.stacks.len() {
        let mut det = env.stack(i)?;
        let mut row = Vec::new();
        for tex in &textures {
            let rep = evaluate_texture(tex, det.as_mut(), &batch.test, batch.renderer.as_ref(), TexturePlacement::Eval, MetricKind::Ap, &r.cfg.eval)
                .map_err(r.err())?;
            row.push(rep.value);
        }
        ap.push(row);
    }
    let m = TransferMatrix {
        sources: names,
        targets: env.stacks.iter().map(|(k, _)| k.name().to_string()).collect(),
        ap,
    };
    r.report("transfer_matrix.json", json(&m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReevalOutcome {
    /// Report files regenerated and compared byte-for-byte.
    pub compared: Vec<String>,
    pub mismatched: Vec<String>,
}

fn load_run_config(run_dir: &Path) -> Result<ExperimentConfig, HarnessError> {
    ExperimentConfig::load(&run_dir.join("config.json"), &[])
}

/// Regenerates every report of a run from its saved artifacts (no
/// optimization) into `<run_dir>/reeval` and compares them with the
/// originals.
pub fn reevaluate(run_dir: &Path) -> Result<ReevalOutcome, HarnessError> {
    let mut cfg = load_run_config(run_dir)?;
    let original: RunManifest = {
        let p = run_dir.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&p, e))?
    };
    cfg.output_dir = run_dir.join("reeval");
    let registry = registry_for(&cfg)?;
    let fresh = run_in(&cfg, &registry, Mode::Reuse(run_dir.join("artifacts")))?;
    let mut out = ReevalOutcome {
        compared: Vec::new(),
        mismatched: Vec::new(),
    };
    for name in &original.reports {
        let a = fs::read(run_dir.join("reports").join(name)).map_err(|e| io_err(&run_dir.join(name), e))?;
        let b = fs::read(cfg.output_dir.join("reports").join(name));
        if !fresh.reports.contains(name) || b.map(|b| b != a).unwrap_or(true) {
            out.mismatched.push(name.clone());
        }
        out.compared.push(name.clone());
    }
    Ok(out)
}

/// Evaluates every defense stack of a run on an annotated frame set, writing
/// `frameset_<defense>_{ap,asr}` reports into the run's `reports/`.
pub fn evaluate_frameset(run_dir: &Path, annotation: &Path, image_root: &Path) -> Result<Vec<String>, HarnessError> {
    let mut cfg = load_run_config(run_dir)?;
    cfg.data.frameset = Some(super::FramesetPaths {
        annotation: annotation.to_path_buf(),
        image_root: image_root.to_path_buf(),
    });
    let registry = registry_for(&cfg)?;
    cfg.validate(&registry)?;
    let defaults = load_defaults(&cfg)?;
    let manifest_path = run_dir.join("manifest.json");
    let mut manifest: RunManifest = fs::read_to_string(&manifest_path)
        .map_err(|e| io_err(&manifest_path, e))
        .and_then(|t| serde_json::from_str(&t).map_err(|e| io_err(&manifest_path, e)))?;
    let before = manifest.reports.len();
    let mut runner = Runner {
        cfg: &cfg,
        dir: run_dir.to_path_buf(),
        mode: Mode::Reuse(run_dir.join("artifacts")),
        manifest: manifest.clone(),
        current: String::new(),
    };
    runner.stage("frameset_setup", |r| {
        let env = build_env(r, &registry, &defaults)?;
        r.stage("frameset_ap", |r| eval_frames(r, &env, MetricKind::Ap, "frameset_"))?;
        r.stage("frameset_asr", |r| eval_frames(r, &env, MetricKind::Asr, "frameset_"))
    })?;
    manifest = runner.manifest;
    Ok(manifest.reports[before..].to_vec())
}
