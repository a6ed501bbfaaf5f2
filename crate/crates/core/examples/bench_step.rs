use fse_recon_core::linops::{CoeffMaps, SubspaceSystem};
use fse_recon_core::masking::{gen_shuffling_mask, partition_theta_lambda, AcqSpec, PartitionSpec};
use fse_recon_core::net::{init_params, net_backward, net_forward, net_forward_cached, NetArch};
use fse_recon_core::phantom::{desk_sequence, make_phantom, make_sens_maps, simulate_kspace};
use fse_recon_core::recon::{implicit_dc_gradient, UnrollConfig};
use fse_recon_core::signal_model::{build_dictionary, build_subspace, default_t2_grid};
use fse_recon_core::solvers::dc_solve_image;
use ndarray::Array3;
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
    let (theta, _lambda) = partition_theta_lambda(&y.mask, &pspec, 0).unwrap();
    let y_theta = y.with_mask(theta).unwrap();
    let sys = SubspaceSystem::new(&basis.phi, &sens, &y_theta.mask).unwrap();
    let alpha0 = sys.adjoint(&y_theta).unwrap();

    let reps = 5;
    let t = Instant::now();
    for _ in 0..reps { let _ = net_forward(&params, &alpha0.data).unwrap(); }
    println!("net_forward:        {:?}", t.elapsed() / reps);

    let t = Instant::now();
    for _ in 0..reps { let _ = net_forward_cached(&params, &alpha0.data).unwrap(); }
    println!("net_forward_cached: {:?}", t.elapsed() / reps);

    let (_, cache) = net_forward_cached(&params, &alpha0.data).unwrap();
    let g = Array3::from_elem(alpha0.data.dim(), fse_recon_core::Cplx::new(0.1, -0.05));
    let t = Instant::now();
    for _ in 0..reps { let _ = net_backward(&params, &cache, &g).unwrap(); }
    println!("net_backward:       {:?}", t.elapsed() / reps);

    let t = Instant::now();
    for _ in 0..reps { let _ = sys.normal(&alpha0).unwrap(); }
    println!("normal op:          {:?}", t.elapsed() / reps);

    let t = Instant::now();
    for _ in 0..reps { let _ = dc_solve_image(&y_theta, &alpha0, 0.05, &sys, &cfg.cg).unwrap(); }
    println!("dc_solve_image:     {:?}", t.elapsed() / reps);

    let t = Instant::now();
    for _ in 0..reps { let _ = implicit_dc_gradient(&CoeffMaps{data: g.clone()}, &sys, 0.05, &cfg.cg).unwrap(); }
    println!("implicit_grad:      {:?}", t.elapsed() / reps);

    let t = Instant::now();
    for _ in 0..reps { let _ = sys.adjoint(&y_theta).unwrap(); }
    println!("adjoint (full):     {:?}", t.elapsed() / reps);

    let t = Instant::now();
    for _ in 0..reps { let _ = sys.forward(&alpha0).unwrap(); }
    println!("forward (full):     {:?}", t.elapsed() / reps);
}
