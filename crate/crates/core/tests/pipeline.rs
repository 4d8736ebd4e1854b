use std::fmt::Write as _;

use nalgebra::Vector2;
use proptest::prelude::*;
use xmreg_core::dataio::config::{Manifest, RunConfig};
use xmreg_core::dataio::image::write_ppm;
use xmreg_core::dataio::write_point_cloud;
use xmreg_core::evaluation::{evaluate, load_frame, synthetic_config};
use xmreg_core::metrics::{rre, rte, EulerConvention};
use xmreg_core::pipeline::{register_with_config, FrameInputs};
use xmreg_core::pose::epnp;

fn small_config() -> RunConfig {
    RunConfig {
        image_width: 128,
        image_height: 40,
        map_width: 256,
        map_height: 16,
        top_k: 60,
        ..RunConfig::default()
    }
}

#[test]
fn f32_pipeline_recovers_pose() {
    let cfg = small_config();
    let scene = synthetic_config(&cfg, 5, 0).generate::<f32>().unwrap();
    let gt = scene.gt_extrinsics;
    let inputs = FrameInputs::from_synthetic(scene, &cfg).unwrap();
    let reg = register_with_config(&inputs, &cfg).unwrap();
    let est = reg.estimate.expect("pose");
    assert!(rte(gt.translation(), est.pose.translation()) < 1e-2);
    assert!(rre(gt.rotation(), est.pose.rotation(), EulerConvention::Zyx).unwrap() < 0.05);
}

#[test]
fn corrupted_patches_are_rejected() {
    let cfg = small_config();
    let clean = synthetic_config(&cfg, 9, 0).generate::<f64>().unwrap();
    let n_out = (0.3 * clean.paired_patches.len() as f64).round() as usize;
    let scene = synthetic_config(&cfg, 9, n_out).generate::<f64>().unwrap();
    assert!(!scene.corrupted.is_empty());
    let inputs = FrameInputs::from_synthetic(scene, &cfg).unwrap();
    let reg = register_with_config(&inputs, &cfg).unwrap();
    let errors = reg.errors(&inputs.gt_extrinsics, &cfg).unwrap();
    assert!(errors.success, "{errors:?}");
    let est = reg.estimate.unwrap();
    assert!(est.inlier_mask.iter().any(|&m| !m));
}

#[test]
fn ideal_correspondences_reproject_within_half_pixel() {
    let mut cfg = small_config();
    let scene = synthetic_config(&cfg, 2, 0).generate::<f64>().unwrap();
    // Beyond the paired patches, selection falls back to empty ones.
    cfg.top_k = scene.paired_patches.len();
    let inputs = FrameInputs::from_synthetic(scene, &cfg).unwrap();
    let reg = register_with_config(&inputs, &cfg).unwrap();
    assert_eq!(reg.correspondences.items.len(), cfg.top_k);
    for c in &reg.correspondences.items {
        let q = inputs.gt_extrinsics.apply(&c.point);
        let px = inputs.intrinsics.project_unbounded(&q).expect("in front");
        let d = px - Vector2::new(c.image_pixel.0 as f64, c.image_pixel.1 as f64);
        assert!(d.norm() <= 0.5, "{:?} -> {px:?}", c.image_pixel);
    }
}

#[test]
fn ground_truth_pixels_define_the_perturbed_pose() {
    // Original pixels paired with the perturbed points must yield
    // calibration ∘ perturbation⁻¹ under an exact solver.
    let cfg = small_config();
    let scene = synthetic_config(&cfg, 13, 0).generate::<f64>().unwrap();
    let pts: Vec<_> = scene.gt.points.iter().step_by(7).copied().collect();
    let px: Vec<_> = scene
        .gt
        .pixel_corrs
        .iter()
        .step_by(7)
        .map(|&((u, v), _)| Vector2::new(u as f64, v as f64))
        .collect();
    let est = epnp(&pts, &px, &scene.intrinsics).unwrap();
    let expected = scene.calibration.compose(&scene.perturbation.inverse());
    assert!(rte(expected.translation(), est.translation()) < 1e-6);
    assert!(rre(expected.rotation(), est.rotation(), EulerConvention::Zyx).unwrap() < 1e-6);
}

#[test]
fn kitti_files_round_trip_through_manifest() {
    let cfg = small_config();
    let scene = synthetic_config(&cfg, 21, 0).generate::<f64>().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let original = scene.cloud.transformed(&scene.perturbation.inverse());
    write_point_cloud(&dir.path().join("000000.bin"), &original).unwrap();
    write_ppm(&dir.path().join("000000.ppm"), &scene.image).unwrap();
    let k = &scene.intrinsics;
    let mut calib = format!("P2: {} 0 {} 0 0 {} {} 0 0 0 1 0\nTr:", k.fx, k.cx, k.fy, k.cy);
    for v in scene.calibration.to_row() {
        write!(calib, " {v:.17e}").unwrap();
    }
    std::fs::write(dir.path().join("calib.txt"), calib + "\n").unwrap();
    let manifest_path = dir.path().join("frames.txt");
    std::fs::write(
        &manifest_path,
        "kitti cloud=000000.bin image=000000.ppm calib=calib.txt perturb_seed=4\n",
    )
    .unwrap();
    let manifest = Manifest::load(&manifest_path).unwrap();
    let frame = load_frame::<f64>(&manifest.entries[0], &cfg).unwrap();
    assert_eq!(frame.cloud.len(), original.len());
    // Whatever perturbation was drawn, the ground truth undoes it.
    for (p, o) in frame.cloud.points().iter().zip(original.points()).step_by(97) {
        let a = frame.gt_extrinsics.apply(&p.position);
        let b = scene.calibration.apply(&o.position);
        assert!((a - b).norm() < 1e-4, "{a:?} vs {b:?}");
    }
    let ev = evaluate::<f64>(&manifest, &cfg).unwrap();
    assert_eq!(ev.frames.len(), 1);
    assert_eq!(ev.frames[0].label, "000000");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn clean_scenes_register_exactly(seed in 100u64..10_000) {
        let cfg = small_config();
        let scene = synthetic_config(&cfg, seed, 0).generate::<f64>().unwrap();
        let inputs = FrameInputs::from_synthetic(scene, &cfg).unwrap();
        let reg = register_with_config(&inputs, &cfg).unwrap();
        let errors = reg.errors(&inputs.gt_extrinsics, &cfg).unwrap();
        prop_assert!(errors.rte < 1e-6 && errors.rre < 1e-6, "{:?}", errors);
    }
}
