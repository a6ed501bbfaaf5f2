use fse_recon_core::linops::expand_coeffs;
use fse_recon_core::masking::{gen_shuffling_mask, AcqSpec};
use fse_recon_core::metrics::{nmse, ssim_per_echo};
use fse_recon_core::phantom::{desk_sequence, make_phantom, make_sens_maps, simulate_kspace};
use fse_recon_core::recon::*;
use fse_recon_core::signal_model::{build_dictionary, build_subspace, default_t2_grid};
use fse_recon_core::solvers::FistaConfig;
use ndarray::Array2;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let (w, h, c, k) = (64usize, 64usize, 4usize, 3usize);
    let seq = desk_sequence();
    let phantom = make_phantom(w, h, 11).unwrap();
    let sens = make_sens_maps(c, w, h, 12).unwrap();
    let (clean, truth) = simulate_kspace(&phantom, &seq, 1000.0, &sens, 0.0, 0).unwrap();
    let peak = clean.data.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let (y_full, _) = simulate_kspace(&phantom, &seq, 1000.0, &sens, 0.01 * peak, 13).unwrap();
    let dict = build_dictionary(&seq, &default_t2_grid(), 1000.0).unwrap();
    let basis = build_subspace(&dict, k).unwrap();
    let acq = AcqSpec { echo_count: seq.echo_count, height: h, lines_per_echo: 4, center_lines: 2, seed: 14 };
    let mask = gen_shuffling_mask(&acq).unwrap();
    let y = y_full.with_mask(mask).unwrap();
    let cfg = UnrollConfig { seed: 100, val_interval: 0, ..Default::default() };

    let score = |label: &str, images: &fse_recon_core::linops::EchoImages, t: &Instant| {
        let n = nmse(images, &truth).unwrap();
        let s_vec = ssim_per_echo(images, &truth).unwrap();
        let s = s_vec.iter().sum::<f64>() / s_vec.len() as f64;
        println!("{label}: NMSE-I {n:.2}%  SSIM {s:.4}   [elapsed {:?}]", t.elapsed());
    };

    // zero-filled floor
    let zf = recon_zero_filled(&y, &basis.phi, &sens).unwrap();
    score("zero-filled(gt)", &expand_coeffs(&zf, &basis.phi), &t0);

    // shuffling
    let t = Instant::now();
    let (_, imgs, obj) = recon_shuffling(&y, &basis.phi, &sens, &FistaConfig::default()).unwrap();
    println!("  fista objective {:.3e} -> {:.3e}", obj[0], obj.last().unwrap());
    score("shuffling(gt)", &imgs, &t);

    // zs-sub with gt maps
    let t = Instant::now();
    let sub = recon_zs_subspace(&y, &basis.phi, &sens, &cfg).unwrap();
    println!("  loss {:.4} -> {:.4}", sub.loss_trace[0], sub.loss_trace.last().unwrap());
    score("zs-sub(gt)", sub.images.as_ref().unwrap(), &t);

    // ssdu per echo
    let t = Instant::now();
    let (ssdu_imgs, st) = recon_ssdu_per_echo(&y, &sens, &cfg).unwrap();
    println!("  loss {:.4} -> {:.4}", st.loss_trace[0], st.loss_trace.last().unwrap());
    score("ssdu(gt)", &ssdu_imgs, &t);

    // crude maps + zs-sub
    let t = Instant::now();
    let calib = calib_lowres_maps(&y, 2).unwrap();
    let sub_crude = recon_zs_subspace(&y, &basis.phi, &calib, &cfg).unwrap();
    score("zs-sub(crude)", sub_crude.images.as_ref().unwrap(), &t);

    // joint
    let t = Instant::now();
    let joint = run_joint_pipeline(&y, &basis.phi, &cfg, &JointOptions::with_center_lines(2)).unwrap();
    score("zs-joint", &joint.images, &t);

    let mut interior = Array2::from_elem((w, h), false);
    for ((a, b), &s) in phantom.support.indexed_iter() {
        interior[(a, b)] = s && phantom.pd_map[(a, b)] > 0.4;
    }
    let e_est = sens_map_error(&joint.sens, &sens, &interior).unwrap();
    let e_cal = sens_map_error(&joint.calib_maps, &sens, &interior).unwrap();
    println!("map error: estimated {e_est:.4} vs calib {e_cal:.4}");
    println!("total {:?}", t0.elapsed());
}
