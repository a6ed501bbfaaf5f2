//! Small-scale end-to-end behavior of the reconstruction pipelines.

mod common;

use fse_recon_core::linops::{expand_coeffs, EchoSeriesKSpace, SensMaps};
use fse_recon_core::masking::{gen_shuffling_mask, AcqSpec};
use fse_recon_core::metrics::nmse;
use fse_recon_core::phantom::{make_phantom, make_sens_maps, simulate_kspace, Phantom};
use fse_recon_core::recon::{
    calib_lowres_maps, recon_shuffling, recon_ssdu_per_echo, recon_zs_subspace, run_joint_pipeline,
    sens_map_error, train_image_stage, train_sens_stage, ImageStage, JointOptions, UnrollConfig,
};
use fse_recon_core::signal_model::{build_dictionary, build_subspace, default_t2_grid, SequenceParams};
use fse_recon_core::solvers::FistaConfig;
use ndarray::Array2;

struct Scene {
    phantom: Phantom,
    y: EchoSeriesKSpace,
    truth: fse_recon_core::linops::EchoImages,
    sens: SensMaps,
    phi: Array2<fse_recon_core::Cplx>,
}

/// 32x32, 8 echoes, 2 coils, R=4 with 2 ACS lines: small enough for quick
/// training, undersampled enough to be non-trivial.
fn small_scene(seed: u64) -> Scene {
    let (w, h, t, c, k) = (32, 32, 8, 2, 2);
    let phantom = make_phantom(w, h, seed).unwrap();
    let seq = SequenceParams::new(t, 8.0, 160.0);
    let sens = make_sens_maps(c, w, h, seed + 1).unwrap();
    let (y_full, truth) = simulate_kspace(&phantom, &seq, 1000.0, &sens, 0.0, seed + 2).unwrap();
    let dict = build_dictionary(&seq, &default_t2_grid(), 1000.0).unwrap();
    let basis = build_subspace(&dict, k).unwrap();
    let acq = AcqSpec {
        echo_count: t,
        height: h,
        lines_per_echo: 8,
        center_lines: 2,
        seed: seed + 3,
    };
    let mask = gen_shuffling_mask(&acq).unwrap();
    let y = y_full.with_mask(mask).unwrap();
    Scene {
        phantom,
        y,
        truth,
        sens,
        phi: basis.phi,
    }
}

fn quick_cfg(seed: u64) -> UnrollConfig {
    UnrollConfig {
        n_blocks: 3,
        steps_per_stage: 16,
        hidden_channels: 8,
        residual_blocks: 2,
        ssdu_hidden_channels: 6,
        ssdu_residual_blocks: 1,
        lr_decay_step: 10,
        val_interval: 5,
        seed,
        ..Default::default()
    }
}

#[test]
fn image_stage_training_reduces_loss() {
    let scene = small_scene(40);
    let cfg = quick_cfg(1);
    let result = recon_zs_subspace(&scene.y, &scene.phi, &scene.sens, &cfg).unwrap();
    let n = result.loss_trace.len();
    let head: f64 = result.loss_trace[..4].iter().sum::<f64>() / 4.0;
    let tail: f64 = result.loss_trace[n - 4..].iter().sum::<f64>() / 4.0;
    assert!(
        tail < head,
        "training loss went {head:.4} -> {tail:.4} over {n} steps"
    );
    // Held-out validation loss drops too.
    let first_val = result.val_trace.first().unwrap().1;
    let last_val = result.val_trace.last().unwrap().1;
    assert!(
        last_val < first_val,
        "validation loss went {first_val:.4} -> {last_val:.4}"
    );
}

#[test]
fn image_stage_is_deterministic() {
    let scene = small_scene(41);
    let cfg = quick_cfg(2);
    let a = recon_zs_subspace(&scene.y, &scene.phi, &scene.sens, &cfg).unwrap();
    let b = recon_zs_subspace(&scene.y, &scene.phi, &scene.sens, &cfg).unwrap();
    assert_eq!(a.coeffs.as_ref().unwrap().data, b.coeffs.as_ref().unwrap().data);
    assert_eq!(a.params.data, b.params.data);
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn joint_with_ground_truth_maps_and_skipped_stages_reduces_to_image_stage() {
    let scene = small_scene(42);
    let cfg = quick_cfg(3);
    let direct = train_image_stage(
        &scene.y,
        &scene.phi,
        &scene.sens,
        &cfg,
        ImageStage::I1,
        None,
    )
    .unwrap();
    let joint = run_joint_pipeline(
        &scene.y,
        &scene.phi,
        &cfg,
        &JointOptions {
            n_center: 2,
            initial_maps: Some(scene.sens.clone()),
            run_sens_stage: false,
            run_second_image_stage: false,
        },
    )
    .unwrap();
    assert_eq!(
        joint.coeffs.data,
        direct.coeffs.as_ref().unwrap().data,
        "joint pipeline with skipped stages must equal the bare image stage"
    );
}

#[test]
fn stage_freezing_keeps_image_network_untouched() {
    let scene = small_scene(43);
    let cfg = quick_cfg(4);
    let joint = run_joint_pipeline(
        &scene.y,
        &scene.phi,
        &cfg,
        &JointOptions::with_center_lines(2),
    )
    .unwrap();
    // The I1 network parameters must be bit-identical to a standalone I1 run
    // with the same calibration maps (C1 and I2 never touch them).
    let calib = calib_lowres_maps(&scene.y, 2).unwrap();
    let direct = train_image_stage(&scene.y, &scene.phi, &calib, &cfg, ImageStage::I1, None).unwrap();
    assert_eq!(joint.stage_i1.params.data, direct.params.data);
    assert!(joint.stage_c1.is_some());
    assert!(joint.stage_i2.is_some());
}

#[test]
fn shuffling_baseline_recovers_fully_sampled_data() {
    let (w, h, t, c, k) = (32, 32, 8, 2, 2);
    let phantom = make_phantom(w, h, 44).unwrap();
    let seq = SequenceParams::new(t, 8.0, 160.0);
    let sens = make_sens_maps(c, w, h, 45).unwrap();
    let (y_full, truth) = simulate_kspace(&phantom, &seq, 1000.0, &sens, 0.0, 46).unwrap();
    let dict = build_dictionary(&seq, &default_t2_grid(), 1000.0).unwrap();
    let basis = build_subspace(&dict, k).unwrap();
    let (_, images, objective) =
        recon_shuffling(&y_full, &basis.phi, &sens, &FistaConfig::default()).unwrap();
    let err = nmse(&images, &truth).unwrap();
    assert!(err < 1.0, "fully sampled shuffling NMSE {err}%");
    assert!(objective.last().unwrap() <= &objective[0]);
}

#[test]
fn ssdu_per_echo_near_exact_on_full_mask() {
    let (w, h, t, c) = (32, 32, 4, 2);
    let phantom = make_phantom(w, h, 47).unwrap();
    let seq = SequenceParams::new(t, 8.0, 160.0);
    let sens = make_sens_maps(c, w, h, 48).unwrap();
    let (y_full, truth) = simulate_kspace(&phantom, &seq, 1000.0, &sens, 0.0, 49).unwrap();
    let cfg = UnrollConfig {
        n_blocks: 2,
        steps_per_stage: 2,
        ssdu_hidden_channels: 6,
        ssdu_residual_blocks: 1,
        seed: 5,
        ..Default::default()
    };
    let (images, result) = recon_ssdu_per_echo(&y_full, &sens, &cfg).unwrap();
    let err = nmse(&images, &truth).unwrap();
    assert!(err < 0.5, "full-mask per-echo NMSE {err}%");
    assert_eq!(result.loss_trace.len(), 2);
}

#[test]
fn ssdu_per_echo_loss_decreases_when_undersampled() {
    let scene = small_scene(50);
    let cfg = quick_cfg(6);
    let (_, result) = recon_ssdu_per_echo(&scene.y, &scene.sens, &cfg).unwrap();
    let n = result.loss_trace.len();
    let head: f64 = result.loss_trace[..4].iter().sum::<f64>() / 4.0;
    let tail: f64 = result.loss_trace[n - 4..].iter().sum::<f64>() / 4.0;
    assert!(tail < head, "ssdu loss went {head:.4} -> {tail:.4}");
}

#[test]
fn calibration_maps_approach_truth_with_wide_acs() {
    let (w, h, t, c) = (64, 64, 8, 4);
    let phantom = make_phantom(w, h, 51).unwrap();
    let seq = SequenceParams::new(t, 8.0, 160.0);
    let sens = make_sens_maps(c, w, h, 52).unwrap();
    let (y_full, _) = simulate_kspace(&phantom, &seq, 1000.0, &sens, 0.0, 53).unwrap();
    let acq = AcqSpec {
        echo_count: t,
        height: h,
        lines_per_echo: 28,
        center_lines: 24,
        seed: 54,
    };
    let mask = gen_shuffling_mask(&acq).unwrap();
    let y = y_full.with_mask(mask).unwrap();
    let maps = calib_lowres_maps(&y, 24).unwrap();
    // Score inside the solid object interior.
    let mut interior = Array2::from_elem((w, h), false);
    for ww in 0..w {
        for hh in 0..h {
            interior[(ww, hh)] = phantom.support[(ww, hh)] && phantom.pd_map[(ww, hh)] > 0.5;
        }
    }
    let err = sens_map_error(&maps, &sens, &interior).unwrap();
    assert!(err < 0.10, "24-line calibration map error {err}");
}

#[test]
fn sens_stage_beats_two_line_calibration_given_truth_images() {
    let scene = small_scene(55);
    let cfg = UnrollConfig {
        n_blocks: 3,
        steps_per_stage: 12,
        hidden_channels: 8,
        residual_blocks: 2,
        seed: 7,
        ..Default::default()
    };
    let calib = calib_lowres_maps(&scene.y, 2).unwrap();
    let est = train_sens_stage(&scene.y, &scene.truth, &calib, &cfg).unwrap();
    let maps = est.sens.as_ref().unwrap();

    let mut interior = Array2::from_elem(scene.phantom.support.dim(), false);
    for ((ww, hh), &sup) in scene.phantom.support.indexed_iter() {
        interior[(ww, hh)] = sup && scene.phantom.pd_map[(ww, hh)] > 0.4;
    }
    let err_est = sens_map_error(maps, &scene.sens, &interior).unwrap();
    let err_calib = sens_map_error(&calib, &scene.sens, &interior).unwrap();
    assert!(
        err_est < err_calib,
        "estimated maps {err_est:.4} vs calibration {err_calib:.4}"
    );
}

#[test]
fn smoothness_penalty_reduces_map_roughness() {
    let scene = small_scene(56);
    let cfg_smooth = UnrollConfig {
        n_blocks: 2,
        steps_per_stage: 8,
        hidden_channels: 8,
        residual_blocks: 1,
        lambda_c: 2.0,
        seed: 8,
        ..Default::default()
    };
    let cfg_rough = UnrollConfig {
        lambda_c: 0.0,
        ..cfg_smooth.clone()
    };
    let calib = calib_lowres_maps(&scene.y, 2).unwrap();
    let smooth = train_sens_stage(&scene.y, &scene.truth, &calib, &cfg_smooth).unwrap();
    let rough = train_sens_stage(&scene.y, &scene.truth, &calib, &cfg_rough).unwrap();
    let tv = |maps: &SensMaps| -> f64 {
        fse_recon_core::linops::spatial_gradient(maps)
            .iter()
            .map(|v| v.norm())
            .sum()
    };
    let tv_smooth = tv(smooth.sens.as_ref().unwrap());
    let tv_rough = tv(rough.sens.as_ref().unwrap());
    assert!(
        tv_smooth < tv_rough,
        "total variation {tv_smooth:.3} !< {tv_rough:.3}"
    );
}

#[test]
fn zero_filled_is_worse_than_trained_subspace() {
    let scene = small_scene(57);
    let cfg = quick_cfg(9);
    let zf = fse_recon_core::recon::recon_zero_filled(&scene.y, &scene.phi, &scene.sens).unwrap();
    let zf_images = expand_coeffs(&zf, &scene.phi);
    let trained = recon_zs_subspace(&scene.y, &scene.phi, &scene.sens, &cfg).unwrap();
    let err_zf = nmse(&zf_images, &scene.truth).unwrap();
    let err_trained = nmse(trained.images.as_ref().unwrap(), &scene.truth).unwrap();
    assert!(
        err_trained < err_zf,
        "trained {err_trained:.2}% !< zero-filled {err_zf:.2}%"
    );
}
