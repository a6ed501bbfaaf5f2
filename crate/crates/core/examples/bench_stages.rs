use fse_recon_core::masking::{gen_shuffling_mask, AcqSpec};
use fse_recon_core::phantom::{desk_sequence, make_phantom, make_sens_maps, simulate_kspace};
use fse_recon_core::recon::{recon_ssdu_per_echo, train_sens_stage, UnrollConfig};
use std::time::Instant;

fn main() {
    let (w, h, c) = (64usize, 64usize, 4usize);
    let seq = desk_sequence();
    let phantom = make_phantom(w, h, 1).unwrap();
    let sens = make_sens_maps(c, w, h, 2).unwrap();
    let (y_full, truth) = simulate_kspace(&phantom, &seq, 1000.0, &sens, 0.0, 3).unwrap();
    let acq = AcqSpec { echo_count: seq.echo_count, height: h, lines_per_echo: 4, center_lines: 2, seed: 4 };
    let mask = gen_shuffling_mask(&acq).unwrap();
    let y = y_full.with_mask(mask).unwrap();

    // 3-step stages to measure per-step cost
    let cfg = UnrollConfig { steps_per_stage: 3, val_interval: 0, seed: 5, ..Default::default() };
    let t = Instant::now();
    let _ = train_sens_stage(&y, &truth, &sens, &cfg).unwrap();
    println!("sens stage 3 steps + inference: {:?}", t.elapsed());

    let t = Instant::now();
    let _ = recon_ssdu_per_echo(&y, &sens, &cfg).unwrap();
    println!("ssdu stage 3 steps + inference: {:?}", t.elapsed());
}
