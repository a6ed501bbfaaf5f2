use fse_recon_core::masking::{gen_shuffling_mask, partition_theta_lambda, AcqSpec, PartitionSpec};
use fse_recon_core::net::{init_params, NetArch};
use fse_recon_core::phantom::{desk_sequence, make_phantom, make_sens_maps, simulate_kspace};
use fse_recon_core::recon::{image_step_gradient, UnrollConfig};
use fse_recon_core::signal_model::{build_dictionary, build_subspace, default_t2_grid};
use std::time::Instant;

fn main() {
    let (w, h, c, k) = (64usize, 64usize, 4usize, 3usize);
    let seq = desk_sequence();
    let phantom = make_phantom(w, h, 1).unwrap();
    let sens = make_sens_maps(c, w, h, 2).unwrap();
    let (y_full, _) = simulate_kspace(&phantom, &seq, 1000.0, &sens, 0.0, 3).unwrap();
    let dict = build_dictionary(&seq, &default_t2_grid(), 1000.0).unwrap();
    let basis = build_subspace(&dict, k).unwrap();
    let acq = AcqSpec { echo_count: seq.echo_count, height: h, lines_per_echo: 4, center_lines: 2, seed: 4 };
    let mask = gen_shuffling_mask(&acq).unwrap();
    let y = y_full.with_mask(mask).unwrap();
    let cfg = UnrollConfig { seed: 5, ..Default::default() };
    let arch = NetArch::new(2 * k, cfg.hidden_channels, cfg.residual_blocks);
    let params = init_params(&arch, 6).unwrap();
    let pspec = PartitionSpec { lambda_fraction: 0.4, sigma: None, seed: 11 };
    let (theta, lambda) = partition_theta_lambda(&y.mask, &pspec, 0).unwrap();
    for i in 0..3 {
        let t = Instant::now();
        let (loss, _, _) = image_step_gradient(&y, &basis.phi, &sens, &theta, &lambda, &params, &cfg).unwrap();
        println!("full step {i}: {:?} loss={loss:.4}", t.elapsed());
    }
}
