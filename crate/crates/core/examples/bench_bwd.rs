use fse_recon_core::net::{init_params, net_backward, net_forward_cached, NetArch};
use ndarray::Array3;
use std::time::Instant;

fn bench(arch: NetArch, label: &str) {
    let params = init_params(&arch, 1).unwrap();
    let ch = arch.in_channels / 2;
    let x = Array3::from_shape_fn((ch, 64, 64), |(c, w, h)| {
        fse_recon_core::Cplx::new((c + w) as f64 * 0.01, h as f64 * 0.01)
    });
    let (_, cache) = net_forward_cached(&params, &x).unwrap();
    let g = Array3::from_elem((ch, 64, 64), fse_recon_core::Cplx::new(0.1, -0.2));
    let reps = 10;
    let t = Instant::now();
    for _ in 0..reps {
        let _ = net_backward(&params, &cache, &g).unwrap();
    }
    println!("{label}: {:?}", t.elapsed() / reps);
}

fn main() {
    bench(NetArch::new(6, 48, 4), "bwd h48 b4");
    bench(NetArch::new(6, 48, 2), "bwd h48 b2");
    bench(NetArch::new(6, 24, 4), "bwd h24 b4");
    bench(NetArch::new(6, 48, 1), "bwd h48 b1");
}
