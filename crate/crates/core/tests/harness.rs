mod common;

use std::fs;
use std::path::Path;

use advtex_core::gateway::{Detector, ToyDetector};
use advtex_core::harness::{
    emit_plot_data, reevaluate, run_experiment, CurveReport, ExperimentConfig, FigureKind, HarnessError, RunManifest,
    RunStatus, TransferMatrix,
};
use advtex_core::model::{save_png, AnnotationFile, AnnotationFrame, ImagePlane};
use advtex_core::toyworld::{clothing_texture, generate_scenes, generate_staged_scenes, ClothingKind, WorldConfig};
use advtex_core::transforms::{render_scene, BillboardRenderer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn config(dir: &Path, body: serde_json::Value) -> ExperimentConfig {
    let mut v = json!({
        "version": 1,
        "seed": 0,
        "output_dir": dir,
        "cache_dir": common::cache_dir(),
        "optim": {"epochs": 2},
        "data": {"train_scenes": 6, "test_scenes": 6, "patch_train_frames": 6, "patch_test_frames": 8, "eval_frames": 30}
    });
    let (obj, extra) = (v.as_object_mut().unwrap(), body.as_object().unwrap().clone());
    for (k, val) in extra {
        obj.insert(k, val);
    }
    ExperimentConfig::parse(&v.to_string(), &[]).unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn identical_config_reproduces_every_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let body = json!({"kind": "attack_texture", "defenses": ["undefended", "lgs"], "texture": {"jitter_gammas": [0.0, 0.1]}});
    let a = config(&tmp.path().join("a"), body.clone());
    let b = config(&tmp.path().join("b"), body);
    run_experiment(&a).unwrap();
    run_experiment(&b).unwrap();
    for sub in ["reports", "artifacts"] {
        let (ta, tb) = (tree(&a.output_dir.join(sub)), tree(&b.output_dir.join(sub)));
        assert!(!ta.is_empty());
        assert_eq!(ta, tb, "{sub} differ");
    }
    assert!(tree(&a.output_dir.join("artifacts")).iter().any(|(n, _)| n.ends_with("_loss.csv")));
    assert_eq!(fs::read(a.output_dir.join("manifest.json")).unwrap(), fs::read(b.output_dir.join("manifest.json")).unwrap());

    let again = reevaluate(&a.output_dir).unwrap();
    assert_eq!(again.compared.len(), manifest(&a.output_dir).reports.len());
    assert!(again.mismatched.is_empty(), "{:?}", again.mismatched);

    let csv = fs::read_to_string(emit_plot_data(&a.output_dir, FigureKind::JitterCurve).unwrap()).unwrap();
    assert_eq!(csv.lines().next(), Some("series,x,value"));
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn failing_stage_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        json!({"kind": "eval_ap", "detector": "broken", "adapters": {"broken": ["/nonexistent/adapter-binary"]}}),
    );
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let m = manifest(tmp.path());
    assert_eq!(m.status, RunStatus::Failed);
    assert_eq!(m.failed_stage.as_deref(), Some("setup"));
    assert_eq!(m.stages.last().unwrap().status, RunStatus::Failed);
    assert!(m.error.is_some());
}

#[test]
fn bad_sweep_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({"kind": "kappa_sweep", "sweep": {"kappas": [1.5, 1.0]}}));
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn kappa_plot_matches_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({"kind": "kappa_sweep", "defenses": ["undefended", "fnc"], "sweep": {"kappas": [1.0, 1.5]}}));
    run_experiment(&cfg).unwrap();
    let report: CurveReport = serde_json::from_str(&fs::read_to_string(tmp.path().join("reports/kappa_sweep.json")).unwrap()).unwrap();
    assert_eq!(report.series.len(), 2 * 3);
    let path = emit_plot_data(tmp.path(), FigureKind::KappaCurve).unwrap();
    let mut rows = csv::Reader::from_path(path).unwrap();
    let parsed: Vec<(String, f64, f64)> = rows.deserialize().map(|r| r.unwrap()).collect();
    let expected: Vec<(String, f64, f64)> = report
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| (s.label.clone(), p.x, p.y)))
        .collect();
    assert_eq!(parsed, expected);
    for s in &report.series {
        assert_eq!(s.points.iter().map(|p| p.x).collect::<Vec<_>>(), vec![1.0, 1.5]);
    }
}

#[test]
fn transfer_matrix_has_one_column_per_source() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({"kind": "transfer_matrix", "defenses": ["undefended", "fnc"], "ensemble_weights": [1.0, 1.0]}));
    run_experiment(&cfg).unwrap();
    let m: TransferMatrix = serde_json::from_str(&fs::read_to_string(tmp.path().join("reports/transfer_matrix.json")).unwrap()).unwrap();
    assert_eq!(m.sources, vec!["undefended", "fnc", "ensemble"]);
    assert_eq!(m.targets, vec!["undefended", "fnc"]);
    assert_eq!(m.ap.len(), 2);
    assert!(m.ap.iter().all(|row| row.len() == 3 && row.iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn clean_toy_frames_are_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), json!({"kind": "eval_ap", "data": {"eval_frames": 100}}));
    run_experiment(&cfg).unwrap();
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("reports/undefended_ap.json")).unwrap()).unwrap();
    assert!(r["value"].as_f64().unwrap() >= 0.9, "{}", r["value"]);
}

#[test]
fn frameset_angles_are_bucketed_over_the_full_circle() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    fs::create_dir_all(&images).unwrap();
    let scenes = generate_scenes(&WorldConfig::default(), 24, 11, "fs-");
    let mut frames = Vec::new();
    for (i, s) in scenes.iter().filter(|s| s.truth.person_boxes().next().is_some()).enumerate() {
        let file = format!("{}.png", s.truth.image_id);
        save_png(&images.join(&file), &s.image).unwrap();
        let mut t = s.truth.clone();
        t.angle_deg = Some(-180.0 + 15.0 * i as f64);
        frames.push(AnnotationFrame::from_truth(&t, file));
    }
    let ann = tmp.path().join("ann.json");
    fs::write(&ann, serde_json::to_string(&AnnotationFile { frames }).unwrap()).unwrap();
    let run = tmp.path().join("run");
    let cfg = config(
        &run,
        json!({"kind": "eval_ap", "data": {"frameset": {"annotation": ann, "image_root": images}, "angle_bucket_width": 90.0}}),
    );
    run_experiment(&cfg).unwrap();
    let csv = fs::read_to_string(emit_plot_data(&run, FigureKind::AngleCurve).unwrap()).unwrap();
    let xs: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(xs, vec![-135.0, -45.0, 45.0, 135.0]);

    let written = advtex_core::harness::evaluate_frameset(&run, &ann, &images).unwrap();
    assert!(written.contains(&"frameset_undefended_ap.json".to_string()));
    assert!(written.contains(&"frameset_undefended_asr.json".to_string()));
}

/// Fading the person into the background never raises the best person score.
#[test]
fn toy_score_falls_as_contrast_fades() {
    let mut det = ToyDetector::new("toy", common::toy_net());
    let world = WorldConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for scene in generate_staged_scenes(&world, 5, 21, "fade-") {
        let texture = clothing_texture(ClothingKind::TwoTone, &mut rng, world.texture_size);
        let shown = render_scene(&BillboardRenderer::default(), &scene.background, &[(scene.person.clone(), &texture)])
            .unwrap()
            .image;
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let t = 1.0 - k as f64 / 10.0;
            let bg = scene.background.data();
            let img = ImagePlane::new(
                shown.height(),
                shown.width(),
                shown.data().iter().zip(bg).map(|(s, b)| b + t * (s - b)).collect(),
            )
            .unwrap();
            let s = det.person_score(&img).unwrap();
            assert!(s <= prev + 1e-9, "{}: step {k} score {s} > {prev}", scene.id);
            prev = s;
        }
    }
}
