//! Shared independent oracles for integration tests. Everything here is
//! deliberately brute-force and kept independent of the library's
//! implementation paths.

#![allow(dead_code)]

use fse_recon_core::signal_model::{SequenceParams, TissueParams};
use fse_recon_core::Cplx;

/// Brute-force isochromat (Bloch) simulation of a CPMG train.
///
/// Simulates `n_spins` magnetization vectors whose per-half-echo-spacing
/// dephasing angles uniformly tile [0, 2pi), applies hard-pulse rotations and
/// relaxation, and averages transverse magnetization at each echo center. With
/// evenly spaced dephasing angles the average equals the zeroth-order EPG
/// configuration exactly (up to floating point) as long as the populated
/// dephasing orders stay below `n_spins`.
pub fn isochromat_simulate(seq: &SequenceParams, tissue: &TissueParams, n_spins: usize) -> Vec<Cplx> {
    // 3D rotation about an axis in the transverse plane with azimuth `phase`,
    // active rotation by `angle`, same handedness as the EPG operator.
    fn rot(angle: f64, phase: f64) -> [[f64; 3]; 3] {
        let (sa, ca) = angle.sin_cos();
        let (sp, cp) = phase.sin_cos();
        // R = Rz(phase) * Rx(angle) * Rz(-phase), with Rx rotating y toward z.
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let rz = [[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]];
        let rzratio = [[cp, sp, 0.0], [-sp, cp, 0.0], [0.0, 0.0, 1.0]];
        mat3mul(&mat3mul(&rz, &rx), &rzratio)
    }

    fn mat3mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    }

    fn apply(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    let exc = rot(
        seq.excitation_angle_deg.to_radians(),
        std::f64::consts::FRAC_PI_2,
    );
    let refocus = rot(seq.refocus_angle_deg.to_radians(), 0.0);

    let half = 0.5 * seq.echo_spacing_ms;
    let e1 = (-half / tissue.t1_ms).exp();
    let e2 = (-half / tissue.t2_ms).exp();

    let mut spins: Vec<[f64; 3]> = vec![[0.0, 0.0, 1.0]; n_spins];
    let dephase: Vec<f64> = (0..n_spins)
        .map(|j| 2.0 * std::f64::consts::PI * j as f64 / n_spins as f64)
        .collect();

    for s in spins.iter_mut() {
        *s = apply(&exc, *s);
    }

    let relax_and_dephase = |spins: &mut Vec<[f64; 3]>| {
        for (s, &phi) in spins.iter_mut().zip(&dephase) {
            let mx = s[0] * e2;
            let my = s[1] * e2;
            let mz = s[2] * e1 + (1.0 - e1);
            let (sp, cp) = phi.sin_cos();
            s[0] = mx * cp - my * sp;
            s[1] = mx * sp + my * cp;
            s[2] = mz;
        }
    };

    let mut echoes = Vec::with_capacity(seq.echo_count);
    for _ in 0..seq.echo_count {
        relax_and_dephase(&mut spins);
        for s in spins.iter_mut() {
            *s = apply(&refocus, *s);
        }
        relax_and_dephase(&mut spins);
        let mut acc = Cplx::new(0.0, 0.0);
        for s in &spins {
            acc += Cplx::new(s[0], s[1]);
        }
        echoes.push(acc * tissue.proton_density / n_spins as f64);
    }
    echoes
}

/// Dense complex linear solve by LU with partial pivoting. Test oracle only.
pub fn dense_solve(a: &ndarray::Array2<Cplx>, b: &[Cplx]) -> Vec<Cplx> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, b.len());
    let mut m = a.clone();
    let mut x: Vec<Cplx> = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        let (pivot, _) = (col..n)
            .map(|r| (r, m[(r, col)].norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if m[(pivot, col)].norm() == 0.0 {
            panic!("singular matrix in dense_solve");
        }
        if pivot != col {
            for j in 0..n {
                let tmp = m[(col, j)];
                m[(col, j)] = m[(pivot, j)];
                m[(pivot, j)] = tmp;
            }
            x.swap(col, pivot);
            perm.swap(col, pivot);
        }
        for r in (col + 1)..n {
            let f = m[(r, col)] / m[(col, col)];
            m[(r, col)] = f;
            for j in (col + 1)..n {
                let tmp = m[(col, j)];
                m[(r, j)] = m[(r, j)] - f * tmp;
            }
            x[r] = x[r] - f * x[col];
        }
    }
    for col in (0..n).rev() {
        x[col] /= m[(col, col)];
        for r in 0..col {
            let f = m[(r, col)];
            x[r] = x[r] - f * x[col];
        }
    }
    x
}

/// Materialize the dense matrix of a linear map on C^n from its action on the
/// canonical basis.
pub fn materialize(n_in: usize, n_out: usize, op: impl Fn(&[Cplx]) -> Vec<Cplx>) -> ndarray::Array2<Cplx> {
    let mut m = ndarray::Array2::zeros((n_out, n_in));
    for j in 0..n_in {
        let mut e = vec![Cplx::new(0.0, 0.0); n_in];
        e[j] = Cplx::new(1.0, 0.0);
        let col = op(&e);
        assert_eq!(col.len(), n_out);
        for i in 0..n_out {
            m[(i, j)] = col[i];
        }
    }
    m
}

/// Simple deterministic complex test vectors.
pub fn rand_cplx_vec(rng: &mut impl rand::Rng, n: usize) -> Vec<Cplx> {
    (0..n)
        .map(|_| Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}
