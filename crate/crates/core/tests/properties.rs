mod common;

use std::sync::Arc;

use advtex_core::attacks::{texture_sample, Targets, TextureDraw};
use advtex_core::defenses::{apply_frame, idbd_preprocess, jedi_preprocess, lgs_preprocess, sac_preprocess, DefenseDefaults, DefensiveFrame};
use advtex_core::evaluation::{attack_success_rate, average_precision, frame_success};
use advtex_core::gateway::{clip_feature_norms, make_ensemble, Detector, ToyDetector, ToyNet};
use advtex_core::model::{
    AnnotationFile, AnnotationFrame, BoundingBox, EvalConfig, FrameTruth, ImagePlane, LatentTextureMap, Tensor3,
};
use advtex_core::optim::{project_unit, Optimizer};
use advtex_core::toyworld::{generate_staged_scenes, WorldConfig};
use advtex_core::transforms::{
    compute_patch_edge, jitter_crop, nps_loss_with_grad, toroidal_crop, tv_loss_with_grad, BillboardRenderer, JitterMode,
    PrintableSet,
};
use common::{ap_oracle, central_diff, random_instance, rel_err};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> ImagePlane {
    ImagePlane::from_fn(h, w, |_, _| [r.gen(), r.gen(), r.gen()])
}

fn in_unit_range(img: &ImagePlane) -> bool {
    img.data().iter().all(|v| (0.0..=1.0).contains(v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn ap_equals_exhaustive_oracle(seed in any::<u64>()) {
        let (dets, truths) = random_instance(&mut rng(seed));
        let cfg = EvalConfig::default();
        let ap = average_precision(&dets, &truths, &cfg).unwrap();
        let oracle = ap_oracle(&dets, &truths, &cfg).to_f64();
        prop_assert!((ap - oracle).abs() <= 1e-12, "ap {ap} oracle {oracle}");
    }

    #[test]
    fn ap_ignores_monotone_confidence_maps(seed in any::<u64>()) {
        let (dets, truths) = random_instance(&mut rng(seed));
        let cfg = EvalConfig::default();
        let cubed: Vec<_> = dets
            .iter()
            .map(|d| d.iter().map(|d| { let mut d = *d; d.confidence = d.confidence.powi(3); d }).collect())
            .collect();
        prop_assert_eq!(average_precision(&dets, &truths, &cfg).unwrap(), average_precision(&cubed, &truths, &cfg).unwrap());
    }

    #[test]
    fn ap_of_duplicated_frames_is_unchanged(seed in any::<u64>()) {
        let (dets, truths) = random_instance(&mut rng(seed));
        let cfg = EvalConfig::default();
        let dd: Vec<_> = dets.iter().chain(&dets).cloned().collect();
        let tt: Vec<_> = truths.iter().chain(&truths).cloned().collect();
        let a = average_precision(&dets, &truths, &cfg).unwrap();
        let b = average_precision(&dd, &tt, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn removing_a_matching_detection_never_lowers_asr(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (dets, truths) = random_instance(&mut r);
        let cfg = EvalConfig { confidence_threshold: 0.2, ..EvalConfig::default() };
        let frames: Vec<(Vec<_>, FrameTruth)> = dets.into_iter().zip(truths).filter(|(_, t)| t.person_boxes().next().is_some()).collect();
        prop_assume!(!frames.is_empty());
        let before = attack_success_rate(&frames, &cfg).unwrap();
        for f in 0..frames.len() {
            for k in 0..frames[f].0.len() {
                let mut fewer = frames.clone();
                fewer[f].0.remove(k);
                prop_assert!(attack_success_rate(&fewer, &cfg).unwrap() >= before);
            }
            // a success stays a success when detections are dropped
            if frame_success(&frames[f].0, &frames[f].1, &cfg) {
                prop_assert!(frame_success(&[], &frames[f].1, &cfg));
            }
        }
    }

    #[test]
    fn clip_is_idempotent(seed in any::<u64>(), tau in 0.05f64..3.0) {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..6 * 5 * 4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let f = Tensor3::new(6, 5, 4, data).unwrap();
        let once = clip_feature_norms(&f, tau);
        let twice = clip_feature_norms(&once, tau);
        prop_assert!(once.max_abs_diff(&twice) <= 1e-7);
    }

    #[test]
    fn patch_edge_is_linear_in_kappa(w in 2.0f64..200.0, h in 2.0f64..200.0, kappa in 0.1f64..3.0) {
        let b = BoundingBox::from_center(100.0, 100.0, w, h);
        let one = compute_patch_edge(&b, 0.2, kappa).unwrap();
        let two = compute_patch_edge(&b, 0.2, 2.0 * kappa).unwrap();
        prop_assert!((two - 2.0 * one).abs() <= 1e-9 * two.abs().max(1.0));
    }

    #[test]
    fn toroidal_crops_compose(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, a in 0usize..20, b in 0usize..20, c in 0usize..20, d in 0usize..20) {
        let mut r = rng(seed);
        let t = Tensor3::new(h, w, 3, (0..h * w * 3).map(|_| r.gen()).collect()).unwrap();
        let two = toroidal_crop(&toroidal_crop(&t, (a, b), (h, w)), (c, d), (h, w));
        let one = toroidal_crop(&t, ((a + c) % h, (b + d) % w), (h, w));
        prop_assert_eq!(two.data(), one.data());
    }

    #[test]
    fn latent_margin_follows_floor(base in 1usize..320, gamma_milli in 0usize..300) {
        let gamma = gamma_milli as f64 / 1000.0;
        let (h, w) = LatentTextureMap::latent_dims(base, base + 3, gamma);
        prop_assert_eq!(h - base, (gamma * base as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(w - base - 3, (gamma * (base + 3) as f64 + 1e-9).floor() as usize);
        if gamma_milli == 0 {
            prop_assert_eq!((h, w), (base, base + 3));
        }
    }

    #[test]
    fn eval_jitter_crop_is_deterministic(seed in any::<u64>(), gamma_milli in 0usize..200) {
        let gamma = gamma_milli as f64 / 1000.0;
        let (h, w) = LatentTextureMap::latent_dims(20, 20, gamma);
        let mut r = rng(seed);
        let latent = LatentTextureMap::new(random_image(&mut r, h, w), 20, 20, gamma).unwrap();
        let a = jitter_crop(&latent, JitterMode::Eval, &mut rng(1));
        let b = jitter_crop(&latent, JitterMode::Eval, &mut rng(2));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn losses_are_finite_nonnegative_with_correct_gradients(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..8 * 8 * 3).map(|_| r.gen()).collect();
        let t = Tensor3::new(8, 8, 3, x.clone()).unwrap();
        let set = PrintableSet::shipped();
        let (tv, gtv) = tv_loss_with_grad(&t).unwrap();
        let (nps, gnps) = nps_loss_with_grad(&t, &set).unwrap();
        prop_assert!(tv.is_finite() && tv >= 0.0 && nps.is_finite() && nps >= 0.0);
        for _ in 0..6 {
            let i = r.gen_range(0..x.len());
            let ftv = central_diff(&x, i, 1e-6, |p| tv_loss_with_grad(&Tensor3::new(8, 8, 3, p.to_vec()).unwrap()).unwrap().0);
            let fnps = central_diff(&x, i, 1e-6, |p| nps_loss_with_grad(&Tensor3::new(8, 8, 3, p.to_vec()).unwrap(), &set).unwrap().0);
            prop_assert!(rel_err(gtv.data()[i], ftv) <= 1e-3, "tv {} vs {}", gtv.data()[i], ftv);
            prop_assert!(rel_err(gnps.data()[i], fnps) <= 1e-3, "nps {} vs {}", gnps.data()[i], fnps);
        }
    }

    #[test]
    fn projected_steps_stay_in_unit_range(seed in any::<u64>(), lr in 0.001f64..2.0) {
        let mut r = rng(seed);
        let mut x: Vec<f64> = (0..64).map(|_| r.gen()).collect();
        let mut opt = Optimizer::new(advtex_core::model::OptimizerKind::Adam, lr, x.len());
        for _ in 0..20 {
            let g: Vec<f64> = (0..64).map(|_| r.gen_range(-100.0..100.0)).collect();
            opt.step(&mut x, &g);
            project_unit(&mut x);
            prop_assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn annotation_round_trip_is_lossless(seed in any::<u64>()) {
        let (_, truths) = random_instance(&mut rng(seed));
        let mut r = rng(seed ^ 1);
        let with_meta: Vec<FrameTruth> = truths
            .into_iter()
            .map(|mut t| { t.angle_deg = Some(r.gen_range(-180.0..180.0)); t.distance_m = Some(r.gen_range(1.0..30.0)); t })
            .collect();
        let file = AnnotationFile {
            frames: with_meta.iter().map(|t| AnnotationFrame::from_truth(t, format!("{}.png", t.image_id))).collect(),
        };
        let back: AnnotationFile = serde_json::from_str(&serde_json::to_string(&file).unwrap()).unwrap();
        let again: Vec<FrameTruth> = back.frames.iter().map(|f| f.to_truth()).collect();
        prop_assert_eq!(again, with_meta);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn preprocessors_keep_shape_and_range(seed in any::<u64>(), h in 24usize..48, w in 24usize..48) {
        let d = DefenseDefaults::shipped();
        let mut r = rng(seed);
        let img = random_image(&mut r, h, w);
        let frame = DefensiveFrame::gray(2, h, w).unwrap();
        let outs = [
            lgs_preprocess(&img, &d.lgs),
            idbd_preprocess(&img, &d.idbd).unwrap(),
            jedi_preprocess(&img, &d.jedi_completer, &d.jedi).unwrap(),
            sac_preprocess(&img, &d.sac_segmenter, d.sac_min_area).unwrap(),
            apply_frame(&img, &frame).unwrap(),
        ];
        for o in &outs {
            prop_assert_eq!((o.height(), o.width()), (h, w));
            prop_assert!(in_unit_range(o));
        }
    }
}

#[test]
fn ensemble_weight_scale_keeps_ordering() {
    let make = |w: f64| {
        let members: Vec<Box<dyn Detector>> = (0..3)
            .map(|i| Box::new(ToyDetector::new(format!("m{i}"), Arc::new(ToyNet::new(i)))) as Box<dyn Detector>)
            .collect();
        make_ensemble(members, vec![w; 3]).unwrap()
    };
    let (mut a, mut b) = (make(1.0), make(2.0));
    let mut r = rng(9);
    let imgs: Vec<ImagePlane> = (0..6).map(|_| random_image(&mut r, 64, 64)).collect();
    let sa: Vec<f64> = imgs.iter().map(|i| a.person_score(i).unwrap()).collect();
    let sb: Vec<f64> = imgs.iter().map(|i| b.person_score(i).unwrap()).collect();
    let order = |s: &[f64]| {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
        idx
    };
    assert_eq!(order(&sa), order(&sb));
}

/// The objective's gradient on the latent texture, with the EoT draw frozen,
/// against central differences through the whole render chain.
#[test]
fn texture_objective_gradient_matches_finite_differences() {
    let world = WorldConfig::default();
    let scene = &generate_staged_scenes(&world, 1, 3, "fd-")[0];
    let renderer = BillboardRenderer::default();
    let mut targets = Targets::single(Box::new(ToyDetector::new("fd", Arc::new(ToyNet::new(5)))));
    let (h, w) = LatentTextureMap::latent_dims(16, 16, 0.1);
    let mut r = rng(4);
    let latent = LatentTextureMap::new(
        ImagePlane::from_fn(h, w, |_, _| [r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), r.gen_range(0.3..0.7)]),
        16,
        16,
        0.1,
    )
    .unwrap();
    let draw = TextureDraw::at((1, 1));
    let (_, grad) = texture_sample(&latent, scene, &draw, &renderer, &mut targets).unwrap();
    let x = latent.pixels.data().to_vec();
    let mut score = |p: &[f64]| {
        let l = LatentTextureMap::new(ImagePlane::new(h, w, p.to_vec()).unwrap(), 16, 16, 0.1).unwrap();
        texture_sample(&l, scene, &draw, &renderer, &mut targets).unwrap().0[0].1
    };
    // coordinates with the largest analytic gradient carry signal
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
    for &i in idx.iter().take(8) {
        let fd = central_diff(&x, i, 1e-5, &mut score);
        assert!(rel_err(grad.data()[i], fd) <= 1e-2, "pixel {i}: analytic {} numeric {fd}", grad.data()[i]);
    }
}
