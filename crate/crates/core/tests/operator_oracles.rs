//! Forward-model operators against dense-matrix oracles built independently
//! from the definition of the centered unitary DFT.

mod common;

use fse_recon_core::linops::{
    adjoint_subspace, fft2_unitary, forward_subspace, CoeffMaps, SamplingMask, SensMaps,
};
use fse_recon_core::Cplx;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};

/// Centered unitary 1D DFT matrix (even length):
/// `F[k, j] = exp(-2 pi i (k - n/2)(j - n/2) / n) / sqrt(n)`.
fn centered_dft(n: usize) -> Array2<Cplx> {
    assert_eq!(n % 2, 0, "oracle is derived for even sizes");
    let half = (n / 2) as f64;
    Array2::from_shape_fn((n, n), |(k, j)| {
        let phase = -2.0 * std::f64::consts::PI * (k as f64 - half) * (j as f64 - half) / n as f64;
        Cplx::from_polar(1.0 / (n as f64).sqrt(), phase)
    })
}

#[test]
fn fft2_matches_closed_form_dft_matrix() {
    let (w, h) = (8usize, 6usize);
    let fw = centered_dft(w);
    let fh = centered_dft(h);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let img = ArrayD::from_shape_fn(IxDyn(&[w, h]), |_| {
        Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let fast = fft2_unitary(&img, false).unwrap();
    for kw in 0..w {
        for kh in 0..h {
            let mut acc = Cplx::new(0.0, 0.0);
            for jw in 0..w {
                for jh in 0..h {
                    acc += fw[(kw, jw)] * fh[(kh, jh)] * img[[jw, jh]];
                }
            }
            assert!(
                (acc - fast[[kw, kh]]).norm() < 1e-12,
                "({kw},{kh}): {acc} vs {}",
                fast[[kw, kh]]
            );
        }
    }
}

struct DenseModel {
    a: Array2<Cplx>,
    t: usize,
    k: usize,
    w: usize,
    h: usize,
    c: usize,
}

/// Explicit matrix of `M F S Phi` acting on vectorized coefficients.
fn dense_forward_model(
    phi: &Array2<Cplx>,
    sens: &SensMaps,
    mask: &SamplingMask,
) -> DenseModel {
    let (t, k) = phi.dim();
    let (c, w, h) = sens.data.dim();
    let fw = centered_dft(w);
    let fh = centered_dft(h);
    let rows = t * w * h * c;
    let cols = k * w * h;
    let mut a = Array2::zeros((rows, cols));
    for tt in 0..t {
        for kw in 0..w {
            for kh in 0..h {
                if !mask.is_sampled(tt, kh) {
                    continue;
                }
                for cc in 0..c {
                    let row = ((tt * w + kw) * h + kh) * c + cc;
                    for kk in 0..k {
                        for jw in 0..w {
                            for jh in 0..h {
                                let col = (kk * w + jw) * h + jh;
                                a[(row, col)] += phi[(tt, kk)]
                                    * sens.data[(cc, jw, jh)]
                                    * fw[(kw, jw)]
                                    * fh[(kh, jh)];
                            }
                        }
                    }
                }
            }
        }
    }
    DenseModel { a, t, k, w, h, c }
}

fn vec_coeffs(alpha: &CoeffMaps) -> Vec<Cplx> {
    alpha.data.iter().cloned().collect()
}

#[test]
fn forward_subspace_matches_dense_matrix() {
    let (t, k, w, h, c) = (8usize, 2usize, 16usize, 16usize, 2usize);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let phi = Array2::from_shape_fn((t, k), |_| {
        Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let sens = SensMaps {
        data: Array3::from_shape_fn((c, w, h), |_| {
            Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        }),
    };
    let mut lines = Array2::from_elem((t, h), false);
    for tt in 0..t {
        for ky in 0..h {
            lines[(tt, ky)] = rng.gen_bool(0.35) || ky == h / 2;
        }
    }
    let mask = SamplingMask::new(lines, vec![]).unwrap();
    let dense = dense_forward_model(&phi, &sens, &mask);

    let alpha = CoeffMaps {
        data: Array3::from_shape_fn((k, w, h), |_| {
            Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        }),
    };
    let fast = forward_subspace(&alpha, &phi, &sens, &mask).unwrap();
    let av = vec_coeffs(&alpha);

    let mut max_err = 0.0f64;
    let mut scale = 0.0f64;
    for tt in 0..dense.t {
        for kw in 0..dense.w {
            for kh in 0..dense.h {
                for cc in 0..dense.c {
                    let row = ((tt * dense.w + kw) * dense.h + kh) * dense.c + cc;
                    let mut acc = Cplx::new(0.0, 0.0);
                    for (col, v) in av.iter().enumerate() {
                        acc += dense.a[(row, col)] * v;
                    }
                    let got = fast.data[(tt, kw, kh, cc)];
                    max_err = max_err.max((acc - got).norm());
                    scale = scale.max(acc.norm());
                }
            }
        }
    }
    assert!(max_err / scale < 1e-10, "max dev {max_err} at scale {scale}");
    let _ = dense.k;
}

#[test]
fn adjoint_matches_dense_conjugate_transpose() {
    let (t, k, w, h, c) = (4usize, 2usize, 6usize, 6usize, 2usize);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let phi = Array2::from_shape_fn((t, k), |_| {
        Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let sens = SensMaps {
        data: Array3::from_shape_fn((c, w, h), |_| {
            Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        }),
    };
    let mut lines = Array2::from_elem((t, h), false);
    for tt in 0..t {
        for ky in 0..h {
            lines[(tt, ky)] = rng.gen_bool(0.5) || ky == h / 2;
        }
    }
    let mask = SamplingMask::new(lines, vec![]).unwrap();
    let dense = dense_forward_model(&phi, &sens, &mask);

    let ydata = ndarray::Array4::from_shape_fn((t, w, h, c), |_| {
        Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let y = fse_recon_core::linops::EchoSeriesKSpace::new(ydata, mask.clone()).unwrap();
    let fast = adjoint_subspace(&y, &phi, &sens, &mask).unwrap();

    // Dense A^H y.
    let yv: Vec<Cplx> = y.data.iter().cloned().collect();
    let cols = k * w * h;
    let mut expect = vec![Cplx::new(0.0, 0.0); cols];
    for (row, yr) in yv.iter().enumerate() {
        for col in 0..cols {
            expect[col] += dense.a[(row, col)].conj() * yr;
        }
    }
    let fastv = vec_coeffs(&fast);
    let scale = expect.iter().map(|v| v.norm()).fold(1e-30, f64::max);
    for (a, b) in fastv.iter().zip(&expect) {
        assert!((a - b).norm() / scale < 1e-10, "{a} vs {b}");
    }
}
