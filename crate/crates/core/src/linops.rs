//! Linear operators of the acquisition model.
//!
//! The forward model maps latent coefficient maps to undersampled multi-coil,
//! multi-echo k-space: expand coefficients through the temporal basis, weight by
//! coil sensitivities, Fourier transform, and mask. All operators come with exact
//! adjoints under the standard complex inner product.
//!
//! Conventions: image arrays are `[.., W, H]` with W the fully sampled readout
//! (kx) direction and H the phase-encode (ky) direction; undersampling only ever
//! removes whole ky lines. The Fourier transform is the centered, unitary 2D DFT,
//! so the adjoint equals the inverse. Masks and k-space are indexed in centered
//! coordinates (DC at `H / 2`).

use crate::error::{Error, Result};
use crate::signal_model::SubspaceBasis;
use crate::Cplx;
use ndarray::{Array2, Array3, Array4, ArrayD, ArrayViewMut2, Axis, IxDyn};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::Arc;

/// Time series of echo images, `[T, W, H]`.
#[derive(Debug, Clone)]
pub struct EchoImages {
    pub data: Array3<Cplx>,
}

/// Latent coefficient maps, `[K, W, H]`.
#[derive(Debug, Clone)]
pub struct CoeffMaps {
    pub data: Array3<Cplx>,
}

/// Coil sensitivity maps, `[C, W, H]`.
#[derive(Debug, Clone)]
pub struct SensMaps {
    pub data: Array3<Cplx>,
}

impl EchoImages {
    pub fn zeros(t: usize, w: usize, h: usize) -> Self {
        Self {
            data: Array3::zeros((t, w, h)),
        }
    }
}

impl CoeffMaps {
    pub fn zeros(k: usize, w: usize, h: usize) -> Self {
        Self {
            data: Array3::zeros((k, w, h)),
        }
    }
}

impl SensMaps {
    pub fn zeros(c: usize, w: usize, h: usize) -> Self {
        Self {
            data: Array3::zeros((c, w, h)),
        }
    }

    /// Single coil of ones; the trivial fully sensitive receiver.
    pub fn uniform_single(w: usize, h: usize) -> Self {
        Self {
            data: Array3::from_elem((1, w, h), Cplx::new(1.0, 0.0)),
        }
    }
}

/// Acquired phase-encode lines per echo. A marked `(t, ky)` acquires the full
/// kx readout of that echo.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    lines: Array2<bool>,
    acs: Vec<usize>,
}

impl SamplingMask {
    pub fn new(lines: Array2<bool>, acs: Vec<usize>) -> Result<Self> {
        let (t, h) = lines.dim();
        if t == 0 || h == 0 {
            return Err(Error::shape("mask must have at least one echo and line"));
        }
        for &ky in &acs {
            if ky >= h {
                return Err(Error::shape(format!("ACS line {ky} out of range (H={h})")));
            }
            if (0..t).any(|tt| !lines[(tt, ky)]) {
                return Err(Error::invalid(format!(
                    "ACS line {ky} must be acquired in every echo"
                )));
            }
        }
        Ok(Self { lines, acs })
    }

    /// Fully sampled mask.
    pub fn full(t: usize, h: usize) -> Self {
        Self {
            lines: Array2::from_elem((t, h), true),
            acs: Vec::new(),
        }
    }

    pub fn echo_count(&self) -> usize {
        self.lines.nrows()
    }

    pub fn ky_count(&self) -> usize {
        self.lines.ncols()
    }

    pub fn is_sampled(&self, t: usize, ky: usize) -> bool {
        self.lines[(t, ky)]
    }

    pub fn lines(&self) -> &Array2<bool> {
        &self.lines
    }

    pub fn acs_lines(&self) -> &[usize] {
        &self.acs
    }

    /// Acquired ky indices of one echo, ascending.
    pub fn echo_lines(&self, t: usize) -> Vec<usize> {
        (0..self.ky_count())
            .filter(|&ky| self.lines[(t, ky)])
            .collect()
    }

    pub fn total_line_slots(&self) -> usize {
        self.lines.iter().filter(|&&b| b).count()
    }

    /// Zero every unsampled ky column of `data` (`[T, W, H, C]`), in place.
    pub fn apply(&self, data: &mut Array4<Cplx>) {
        let (t, w, h, c) = data.dim();
        assert_eq!(t, self.echo_count());
        assert_eq!(h, self.ky_count());
        for tt in 0..t {
            for ww in 0..w {
                for ky in 0..h {
                    if !self.lines[(tt, ky)] {
                        for cc in 0..c {
                            data[(tt, ww, ky, cc)] = Cplx::new(0.0, 0.0);
                        }
                    }
                }
            }
        }
    }
}

/// Acquired multi-coil, multi-echo k-space with its sampling mask,
/// `[T, W, H, C]`, zero at unsampled positions.
#[derive(Debug, Clone)]
pub struct EchoSeriesKSpace {
    pub data: Array4<Cplx>,
    pub mask: SamplingMask,
}

impl EchoSeriesKSpace {
    /// Bind data to a mask, zeroing unsampled positions.
    pub fn new(mut data: Array4<Cplx>, mask: SamplingMask) -> Result<Self> {
        let (t, _, h, _) = data.dim();
        if t != mask.echo_count() || h != mask.ky_count() {
            return Err(Error::shape(format!(
                "k-space [{t}, .., {h}, ..] does not match mask [{}, {}]",
                mask.echo_count(),
                mask.ky_count()
            )));
        }
        mask.apply(&mut data);
        Ok(Self { data, mask })
    }

    pub fn zeros(t: usize, w: usize, h: usize, c: usize, mask: SamplingMask) -> Self {
        Self {
            data: Array4::zeros((t, w, h, c)),
            mask,
        }
    }

    pub fn coil_count(&self) -> usize {
        self.data.dim().3
    }

    /// Same data re-masked to a different (sub)mask.
    pub fn with_mask(&self, mask: SamplingMask) -> Result<Self> {
        Self::new(self.data.clone(), mask)
    }
}

// ---------------------------------------------------------------------------
// FFT plumbing
// ---------------------------------------------------------------------------

thread_local! {
    static PLANS: std::cell::RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        std::cell::RefCell::new(HashMap::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((n, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

fn rotate_row(row: &mut [Cplx], shift: usize) {
    let n = row.len();
    if shift % n != 0 {
        row.rotate_left(shift % n);
    }
}

/// Centered unitary 1D FFT along the last (ky) axis of a `[W, H]` plane,
/// in place. The adjoint of the forward transform is the inverse transform.
pub fn fft1_ky(plane: &mut ArrayViewMut2<Cplx>, inverse: bool) {
    let h = plane.ncols();
    let fft = plan(h, inverse);
    let scale = 1.0 / (h as f64).sqrt();
    let pre = h / 2; // ifftshift
    let post = h - h / 2; // fftshift
    let mut scratch = vec![Cplx::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for mut row in plane.rows_mut() {
        let slice = row.as_slice_mut().expect("ky rows must be contiguous");
        rotate_row(slice, pre);
        fft.process_with_scratch(slice, &mut scratch);
        rotate_row(slice, post);
        for v in slice.iter_mut() {
            *v *= scale;
        }
    }
}

/// Centered unitary 2D FFT of one `[W, H]` plane, in place.
pub fn fft2_plane(plane: &mut Array2<Cplx>, inverse: bool) {
    fft1_ky(&mut plane.view_mut(), inverse);
    let mut tr = plane.t().as_standard_layout().into_owned();
    fft1_ky(&mut tr.view_mut(), inverse);
    plane.assign(&tr.t());
}

/// Centered, unitary 2D discrete Fourier transform over the last two axes.
/// The inverse transform is the exact adjoint.
pub fn fft2_unitary(img: &ArrayD<Cplx>, inverse: bool) -> Result<ArrayD<Cplx>> {
    let ndim = img.ndim();
    if ndim < 2 {
        return Err(Error::shape("fft2 input needs at least two axes"));
    }
    let w = img.shape()[ndim - 2];
    let h = img.shape()[ndim - 1];
    if w == 0 || h == 0 {
        return Err(Error::shape("fft2 axes must be non-empty"));
    }
    let batch: usize = img.shape()[..ndim - 2].iter().product();
    let mut flat = img
        .to_owned()
        .into_shape_with_order(IxDyn(&[batch, w, h]))
        .expect("reshape to batch");
    for b in 0..batch {
        let mut plane = flat
            .index_axis(Axis(0), b)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("plane view")
            .to_owned();
        fft2_plane(&mut plane, inverse);
        flat.index_axis_mut(Axis(0), b).assign(&plane);
    }
    Ok(flat
        .into_shape_with_order(img.raw_dim())
        .expect("reshape back"))
}

// ---------------------------------------------------------------------------
// Forward model A = M F S Phi and friends
// ---------------------------------------------------------------------------

fn check_dims(
    phi: &Array2<Cplx>,
    sens: &SensMaps,
    mask: &SamplingMask,
    k: usize,
    w: usize,
    h: usize,
) -> Result<(usize, usize)> {
    let (t, kb) = phi.dim();
    let (c, ws, hs) = sens.data.dim();
    if kb != k {
        return Err(Error::shape(format!("basis rank {kb} vs coefficients {k}")));
    }
    if (ws, hs) != (w, h) {
        return Err(Error::shape(format!(
            "sens maps [{ws}, {hs}] vs image [{w}, {h}]"
        )));
    }
    if mask.echo_count() != t {
        return Err(Error::shape(format!(
            "mask echoes {} vs basis echoes {t}",
            mask.echo_count()
        )));
    }
    if mask.ky_count() != h {
        return Err(Error::shape(format!(
            "mask lines {} vs image height {h}",
            mask.ky_count()
        )));
    }
    Ok((t, c))
}

/// Expand coefficients through the basis: `X_T[t] = sum_k phi[t, k] alpha_k`.
pub fn expand_coeffs(alpha: &CoeffMaps, phi: &Array2<Cplx>) -> EchoImages {
    let (k, w, h) = alpha.data.dim();
    let t = phi.nrows();
    assert_eq!(phi.ncols(), k);
    let mut out = Array3::zeros((t, w, h));
    let planes: Vec<Array2<Cplx>> = (0..t)
        .into_par_iter()
        .map(|tt| {
            let mut plane = Array2::zeros((w, h));
            for kk in 0..k {
                let coef = phi[(tt, kk)];
                let src = alpha.data.index_axis(Axis(0), kk);
                plane.zip_mut_with(&src, |p, &a| *p += coef * a);
            }
            plane
        })
        .collect();
    for (tt, plane) in planes.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), tt).assign(&plane);
    }
    EchoImages { data: out }
}

/// Project echo images onto the basis: `alpha_k = sum_t conj(phi[t, k]) x_t`.
pub fn project_coeffs(x: &EchoImages, phi: &Array2<Cplx>) -> CoeffMaps {
    let (t, w, h) = x.data.dim();
    let k = phi.ncols();
    assert_eq!(phi.nrows(), t);
    let mut out = Array3::zeros((k, w, h));
    for kk in 0..k {
        let mut plane = out.index_axis_mut(Axis(0), kk);
        for tt in 0..t {
            let coef = phi[(tt, kk)].conj();
            let src = x.data.index_axis(Axis(0), tt);
            plane.zip_mut_with(&src, |p, &v| *p += coef * v);
        }
    }
    CoeffMaps { data: out }
}

/// The subspace forward model and its adjoint/normal operators, bound to one
/// basis, one set of sensitivities, and one sampling mask.
///
/// The normal operator is applied without leaving the hybrid `(x, ky)` space:
/// because masking only removes whole ky lines, the kx transform cancels in
/// `A^H A`, and the echo dimension collapses into a `K x K` temporal kernel per
/// ky line. The result equals `adjoint(forward(.))` up to rounding at a
/// fraction of the cost.
pub struct SubspaceSystem {
    pub phi: Array2<Cplx>,
    pub sens: SensMaps,
    pub mask: SamplingMask,
    /// `[K, K, H]`: `g[k, k', ky] = sum_t conj(phi[t,k]) m[t,ky] phi[t,k']`.
    kernel: Array3<Cplx>,
}

impl SubspaceSystem {
    pub fn new(phi: &Array2<Cplx>, sens: &SensMaps, mask: &SamplingMask) -> Result<Self> {
        let (t, k) = phi.dim();
        if mask.echo_count() != t {
            return Err(Error::shape("mask echo count does not match basis"));
        }
        let h = mask.ky_count();
        let mut kernel = Array3::zeros((k, k, h));
        for ka in 0..k {
            for kb in 0..k {
                for ky in 0..h {
                    let mut acc = Cplx::new(0.0, 0.0);
                    for tt in 0..t {
                        if mask.is_sampled(tt, ky) {
                            acc += phi[(tt, ka)].conj() * phi[(tt, kb)];
                        }
                    }
                    kernel[(ka, kb, ky)] = acc;
                }
            }
        }
        Ok(Self {
            phi: phi.clone(),
            sens: sens.clone(),
            mask: mask.clone(),
            kernel,
        })
    }

    pub fn from_basis(basis: &SubspaceBasis, sens: &SensMaps, mask: &SamplingMask) -> Result<Self> {
        Self::new(&basis.phi, sens, mask)
    }

    pub fn coeff_shape(&self) -> (usize, usize, usize) {
        let (_, k) = self.phi.dim();
        let (_, w, h) = self.sens.data.dim();
        (k, w, h)
    }

    /// `Y[t, :, :, c] = M_t . F(S_c . sum_k phi[t,k] alpha_k)`.
    pub fn forward(&self, alpha: &CoeffMaps) -> Result<EchoSeriesKSpace> {
        let (k, w, h) = alpha.data.dim();
        let (t, c) = check_dims(&self.phi, &self.sens, &self.mask, k, w, h)?;
        let planes: Vec<Array3<Cplx>> = (0..t)
            .into_par_iter()
            .map(|tt| {
                let mut xt = Array2::<Cplx>::zeros((w, h));
                for kk in 0..k {
                    let coef = self.phi[(tt, kk)];
                    xt.zip_mut_with(&alpha.data.index_axis(Axis(0), kk), |p, &a| *p += coef * a);
                }
                let mut out_t = Array3::zeros((w, h, c));
                for cc in 0..c {
                    let mut plane = &xt * &self.sens.data.index_axis(Axis(0), cc);
                    fft2_plane(&mut plane, false);
                    for ky in 0..h {
                        if !self.mask.is_sampled(tt, ky) {
                            for ww in 0..w {
                                plane[(ww, ky)] = Cplx::new(0.0, 0.0);
                            }
                        }
                    }
                    out_t.slice_mut(ndarray::s![.., .., cc]).assign(&plane);
                }
                out_t
            })
            .collect();
        let mut data = Array4::zeros((t, w, h, c));
        for (tt, p) in planes.into_iter().enumerate() {
            data.index_axis_mut(Axis(0), tt).assign(&p);
        }
        Ok(EchoSeriesKSpace {
            data,
            mask: self.mask.clone(),
        })
    }

    /// Exact adjoint of [`Self::forward`].
    pub fn adjoint(&self, y: &EchoSeriesKSpace) -> Result<CoeffMaps> {
        let (t, w, h, c) = y.data.dim();
        let (kt, k) = self.phi.dim();
        if t != kt {
            return Err(Error::shape("k-space echo count does not match basis"));
        }
        let acc: Vec<Array2<Cplx>> = (0..t)
            .into_par_iter()
            .map(|tt| {
                let mut acc_t = Array2::<Cplx>::zeros((w, h));
                for cc in 0..c {
                    let mut plane = Array2::zeros((w, h));
                    for ww in 0..w {
                        for ky in 0..h {
                            if self.mask.is_sampled(tt, ky) {
                                plane[(ww, ky)] = y.data[(tt, ww, ky, cc)];
                            }
                        }
                    }
                    fft2_plane(&mut plane, true);
                    let s = self.sens.data.index_axis(Axis(0), cc);
                    ndarray::Zip::from(&mut acc_t)
                        .and(&plane)
                        .and(&s)
                        .for_each(|a, &p, &sc| *a += p * sc.conj());
                }
                acc_t
            })
            .collect();
        let mut out = Array3::zeros((k, w, h));
        for kk in 0..k {
            let mut plane = out.index_axis_mut(Axis(0), kk);
            for (tt, acc_t) in acc.iter().enumerate() {
                let coef = self.phi[(tt, kk)].conj();
                plane.zip_mut_with(acc_t, |p, &v| *p += coef * v);
            }
        }
        Ok(CoeffMaps { data: out })
    }

    /// `A^H A` via the hybrid-space temporal kernel.
    pub fn normal(&self, alpha: &CoeffMaps) -> Result<CoeffMaps> {
        let (k, w, h) = alpha.data.dim();
        let (_t, c) = check_dims(&self.phi, &self.sens, &self.mask, k, w, h)?;
        let per_coil: Vec<Array3<Cplx>> = (0..c)
            .into_par_iter()
            .map(|cc| {
                let s = self.sens.data.index_axis(Axis(0), cc);
                let mut u = Array3::<Cplx>::zeros((k, w, h));
                for kk in 0..k {
                    let mut plane = &alpha.data.index_axis(Axis(0), kk) * &s;
                    fft1_ky(&mut plane.view_mut(), false);
                    u.index_axis_mut(Axis(0), kk).assign(&plane);
                }
                let mut out_c = Array3::<Cplx>::zeros((k, w, h));
                for ka in 0..k {
                    let mut v = Array2::<Cplx>::zeros((w, h));
                    for kb in 0..k {
                        let ub = u.index_axis(Axis(0), kb);
                        for ww in 0..w {
                            for ky in 0..h {
                                v[(ww, ky)] += self.kernel[(ka, kb, ky)] * ub[(ww, ky)];
                            }
                        }
                    }
                    fft1_ky(&mut v.view_mut(), true);
                    let mut plane = out_c.index_axis_mut(Axis(0), ka);
                    ndarray::Zip::from(&mut plane)
                        .and(&v)
                        .and(&s)
                        .for_each(|o, &vv, &sc| *o += vv * sc.conj());
                }
                out_c
            })
            .collect();
        let mut out = Array3::zeros((k, w, h));
        for out_c in per_coil {
            out += &out_c;
        }
        Ok(CoeffMaps { data: out })
    }
}

/// `Y[t, :, :, c] = M_t . F(X_T[t] . S_c)` — forward model for fixed images,
/// linear in the sensitivities. Used by the sensitivity estimation stage.
pub struct SensSystem {
    pub images: EchoImages,
    pub mask: SamplingMask,
}

impl SensSystem {
    pub fn new(images: &EchoImages, mask: &SamplingMask) -> Result<Self> {
        if images.data.dim().0 != mask.echo_count() {
            return Err(Error::shape("image echo count does not match mask"));
        }
        if images.data.dim().2 != mask.ky_count() {
            return Err(Error::shape("image height does not match mask"));
        }
        Ok(Self {
            images: images.clone(),
            mask: mask.clone(),
        })
    }

    pub fn forward(&self, sens: &SensMaps) -> Result<EchoSeriesKSpace> {
        let (c, w, h) = sens.data.dim();
        let (t, wi, hi) = self.images.data.dim();
        if (wi, hi) != (w, h) {
            return Err(Error::shape("sens maps do not match image grid"));
        }
        let planes: Vec<Array3<Cplx>> = (0..t)
            .into_par_iter()
            .map(|tt| {
                let xt = self.images.data.index_axis(Axis(0), tt);
                let mut out_t = Array3::zeros((w, h, c));
                for cc in 0..c {
                    let mut plane = &xt * &sens.data.index_axis(Axis(0), cc);
                    fft2_plane(&mut plane, false);
                    for ky in 0..h {
                        if !self.mask.is_sampled(tt, ky) {
                            for ww in 0..w {
                                plane[(ww, ky)] = Cplx::new(0.0, 0.0);
                            }
                        }
                    }
                    out_t.slice_mut(ndarray::s![.., .., cc]).assign(&plane);
                }
                out_t
            })
            .collect();
        let mut data = Array4::zeros((t, w, h, c));
        for (tt, p) in planes.into_iter().enumerate() {
            data.index_axis_mut(Axis(0), tt).assign(&p);
        }
        Ok(EchoSeriesKSpace {
            data,
            mask: self.mask.clone(),
        })
    }

    /// Exact adjoint of [`Self::forward`]: `S_c = sum_t conj(X_t) . F^H(M_t y[t,..,c])`.
    pub fn adjoint(&self, y: &EchoSeriesKSpace) -> Result<SensMaps> {
        let (t, w, h, c) = y.data.dim();
        if self.images.data.dim() != (t, w, h) {
            return Err(Error::shape("k-space does not match image grid"));
        }
        let coils: Vec<Array2<Cplx>> = (0..c)
            .into_par_iter()
            .map(|cc| {
                let mut acc = Array2::<Cplx>::zeros((w, h));
                for tt in 0..t {
                    let mut plane = Array2::zeros((w, h));
                    for ww in 0..w {
                        for ky in 0..h {
                            if self.mask.is_sampled(tt, ky) {
                                plane[(ww, ky)] = y.data[(tt, ww, ky, cc)];
                            }
                        }
                    }
                    fft2_plane(&mut plane, true);
                    let xt = self.images.data.index_axis(Axis(0), tt);
                    ndarray::Zip::from(&mut acc)
                        .and(&plane)
                        .and(&xt)
                        .for_each(|a, &p, &x| *a += p * x.conj());
                }
                acc
            })
            .collect();
        let mut out = Array3::zeros((c, w, h));
        for (cc, acc) in coils.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), cc).assign(&acc);
        }
        Ok(SensMaps { data: out })
    }

    /// `B^H B` via ky-only transforms (the kx transform cancels against the
    /// ky-line mask).
    pub fn normal(&self, sens: &SensMaps) -> Result<SensMaps> {
        let (c, w, h) = sens.data.dim();
        let (t, wi, hi) = self.images.data.dim();
        if (wi, hi) != (w, h) {
            return Err(Error::shape("sens maps do not match image grid"));
        }
        let coils: Vec<Array2<Cplx>> = (0..c)
            .into_par_iter()
            .map(|cc| {
                let s = sens.data.index_axis(Axis(0), cc);
                let mut acc = Array2::<Cplx>::zeros((w, h));
                for tt in 0..t {
                    let xt = self.images.data.index_axis(Axis(0), tt);
                    let mut plane = &xt * &s;
                    fft1_ky(&mut plane.view_mut(), false);
                    for ky in 0..h {
                        if !self.mask.is_sampled(tt, ky) {
                            for ww in 0..w {
                                plane[(ww, ky)] = Cplx::new(0.0, 0.0);
                            }
                        }
                    }
                    fft1_ky(&mut plane.view_mut(), true);
                    ndarray::Zip::from(&mut acc)
                        .and(&plane)
                        .and(&xt)
                        .for_each(|a, &p, &x| *a += p * x.conj());
                }
                acc
            })
            .collect();
        let mut out = Array3::zeros((c, w, h));
        for (cc, acc) in coils.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), cc).assign(&acc);
        }
        Ok(SensMaps { data: out })
    }
}

/// Per-echo forward model `A_t = M_t F S` treating every echo as an
/// independent image. Used by the per-echo self-supervised baseline.
pub struct PerEchoSystem {
    pub sens: SensMaps,
    pub mask: SamplingMask,
}

impl PerEchoSystem {
    pub fn new(sens: &SensMaps, mask: &SamplingMask) -> Self {
        Self {
            sens: sens.clone(),
            mask: mask.clone(),
        }
    }

    pub fn forward(&self, x: &EchoImages) -> Result<EchoSeriesKSpace> {
        // Same arithmetic: M F (X . S) = M F (S . X).
        SensSystem::new(x, &self.mask)?.forward(&self.sens)
    }

    /// Adjoint per echo: `x_t = sum_c conj(S_c) . F^H(M_t y[t,..,c])`.
    pub fn adjoint(&self, y: &EchoSeriesKSpace) -> Result<EchoImages> {
        let (t, w, h, c) = y.data.dim();
        let planes: Vec<Array2<Cplx>> = (0..t)
            .into_par_iter()
            .map(|tt| {
                let mut acc = Array2::<Cplx>::zeros((w, h));
                for cc in 0..c {
                    let mut plane = Array2::zeros((w, h));
                    for ww in 0..w {
                        for ky in 0..h {
                            if self.mask.is_sampled(tt, ky) {
                                plane[(ww, ky)] = y.data[(tt, ww, ky, cc)];
                            }
                        }
                    }
                    fft2_plane(&mut plane, true);
                    let s = self.sens.data.index_axis(Axis(0), cc);
                    ndarray::Zip::from(&mut acc)
                        .and(&plane)
                        .and(&s)
                        .for_each(|a, &p, &sc| *a += p * sc.conj());
                }
                acc
            })
            .collect();
        let mut out = Array3::zeros((t, w, h));
        for (tt, p) in planes.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), tt).assign(&p);
        }
        Ok(EchoImages { data: out })
    }

    /// `A^H A` per echo via ky-only transforms.
    pub fn normal(&self, x: &EchoImages) -> Result<EchoImages> {
        let (t, w, h) = x.data.dim();
        let c = self.sens.data.dim().0;
        let planes: Vec<Array2<Cplx>> = (0..t)
            .into_par_iter()
            .map(|tt| {
                let xt = x.data.index_axis(Axis(0), tt);
                let mut acc = Array2::<Cplx>::zeros((w, h));
                for cc in 0..c {
                    let s = self.sens.data.index_axis(Axis(0), cc);
                    let mut plane = &xt * &s;
                    fft1_ky(&mut plane.view_mut(), false);
                    for ky in 0..h {
                        if !self.mask.is_sampled(tt, ky) {
                            for ww in 0..w {
                                plane[(ww, ky)] = Cplx::new(0.0, 0.0);
                            }
                        }
                    }
                    fft1_ky(&mut plane.view_mut(), true);
                    ndarray::Zip::from(&mut acc)
                        .and(&plane)
                        .and(&s)
                        .for_each(|a, &p, &sc| *a += p * sc.conj());
                }
                acc
            })
            .collect();
        let mut out = Array3::zeros((t, w, h));
        for (tt, p) in planes.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), tt).assign(&p);
        }
        Ok(EchoImages { data: out })
    }
}

/// Free-function spelling of the subspace forward model.
pub fn forward_subspace(
    alpha: &CoeffMaps,
    phi: &Array2<Cplx>,
    sens: &SensMaps,
    mask: &SamplingMask,
) -> Result<EchoSeriesKSpace> {
    SubspaceSystem::new(phi, sens, mask)?.forward(alpha)
}

/// Free-function spelling of the subspace adjoint.
pub fn adjoint_subspace(
    y: &EchoSeriesKSpace,
    phi: &Array2<Cplx>,
    sens: &SensMaps,
    mask: &SamplingMask,
) -> Result<CoeffMaps> {
    SubspaceSystem::new(phi, sens, mask)?.adjoint(y)
}

/// `Y[t, :, :, c] = M_t . F(X_T[t] . S_c)`.
pub fn forward_sens(
    sens: &SensMaps,
    x: &EchoImages,
    mask: &SamplingMask,
) -> Result<EchoSeriesKSpace> {
    SensSystem::new(x, mask)?.forward(sens)
}

/// Exact adjoint of [`forward_sens`] in the sensitivities.
pub fn adjoint_sens(y: &EchoSeriesKSpace, x: &EchoImages, mask: &SamplingMask) -> Result<SensMaps> {
    SensSystem::new(x, mask)?.adjoint(y)
}

/// Forward finite differences along width and height with Neumann (zero at the
/// far edge) boundary, `[2, C, W, H]`.
pub fn spatial_gradient(sens: &SensMaps) -> Array4<Cplx> {
    let (c, w, h) = sens.data.dim();
    let mut out = Array4::zeros((2, c, w, h));
    for cc in 0..c {
        for ww in 0..w {
            for hh in 0..h {
                let v = sens.data[(cc, ww, hh)];
                if ww + 1 < w {
                    out[(0, cc, ww, hh)] = sens.data[(cc, ww + 1, hh)] - v;
                }
                if hh + 1 < h {
                    out[(1, cc, ww, hh)] = sens.data[(cc, ww, hh + 1)] - v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`spatial_gradient`] (negative divergence with matching boundary).
pub fn spatial_gradient_adjoint(grad: &Array4<Cplx>) -> SensMaps {
    let (two, c, w, h) = grad.dim();
    assert_eq!(two, 2);
    let mut out = Array3::zeros((c, w, h));
    for cc in 0..c {
        for ww in 0..w {
            for hh in 0..h {
                let mut acc = Cplx::new(0.0, 0.0);
                if ww > 0 {
                    acc += grad[(0, cc, ww - 1, hh)];
                }
                if ww + 1 < w {
                    acc -= grad[(0, cc, ww, hh)];
                }
                if hh > 0 {
                    acc += grad[(1, cc, ww, hh - 1)];
                }
                if hh + 1 < h {
                    acc -= grad[(1, cc, ww, hh)];
                }
                out[(cc, ww, hh)] = acc;
            }
        }
    }
    SensMaps { data: out }
}

/// `D^H D`, the Neumann graph Laplacian used by the smoothness penalty.
/// Direct stencil form of `spatial_gradient_adjoint(spatial_gradient(.))`.
pub fn laplacian(sens: &SensMaps) -> SensMaps {
    let (c, w, h) = sens.data.dim();
    let mut out = Array3::zeros((c, w, h));
    for cc in 0..c {
        for ww in 0..w {
            for hh in 0..h {
                let v = sens.data[(cc, ww, hh)];
                let mut acc = Cplx::new(0.0, 0.0);
                if ww + 1 < w {
                    acc += v - sens.data[(cc, ww + 1, hh)];
                }
                if ww > 0 {
                    acc += v - sens.data[(cc, ww - 1, hh)];
                }
                if hh + 1 < h {
                    acc += v - sens.data[(cc, ww, hh + 1)];
                }
                if hh > 0 {
                    acc += v - sens.data[(cc, ww, hh - 1)];
                }
                out[(cc, ww, hh)] = acc;
            }
        }
    }
    SensMaps { data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_array3(rng: &mut impl Rng, d: (usize, usize, usize)) -> Array3<Cplx> {
        Array3::from_shape_fn(d, |_| {
            Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn rand_array4(rng: &mut impl Rng, d: (usize, usize, usize, usize)) -> Array4<Cplx> {
        Array4::from_shape_fn(d, |_| {
            Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn dot4(a: &Array4<Cplx>, b: &Array4<Cplx>) -> Cplx {
        a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
    }

    fn dot3(a: &Array3<Cplx>, b: &Array3<Cplx>) -> Cplx {
        a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
    }

    fn rand_phi(rng: &mut impl Rng, t: usize, k: usize) -> Array2<Cplx> {
        Array2::from_shape_fn((t, k), |_| {
            Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn rand_mask(rng: &mut impl Rng, t: usize, h: usize) -> SamplingMask {
        let mut lines = Array2::from_elem((t, h), false);
        for tt in 0..t {
            let mut any = false;
            for ky in 0..h {
                if rng.gen_bool(0.4) {
                    lines[(tt, ky)] = true;
                    any = true;
                }
            }
            if !any {
                lines[(tt, rng.gen_range(0..h))] = true;
            }
        }
        SamplingMask::new(lines, vec![]).unwrap()
    }

    #[test]
    fn delta_image_transforms_to_constant() {
        let (w, h) = (8, 8);
        let mut img = ArrayD::<Cplx>::zeros(IxDyn(&[w, h]));
        img[[w / 2, h / 2]] = Cplx::new(1.0, 0.0);
        let k = fft2_unitary(&img, false).unwrap();
        let expect = 1.0 / ((w * h) as f64).sqrt();
        for v in k.iter() {
            assert!((v - Cplx::new(expect, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn fft2_roundtrip_and_unitarity() {
        let mut r = rng(1);
        for &(w, h) in &[(8usize, 8usize), (7, 9), (16, 4)] {
            let img = ArrayD::from_shape_fn(IxDyn(&[3, w, h]), |_| {
                Cplx::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))
            });
            let k = fft2_unitary(&img, false).unwrap();
            let back = fft2_unitary(&k, true).unwrap();
            let err: f64 = img
                .iter()
                .zip(back.iter())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-12, "roundtrip error {err} at ({w}, {h})");
            let n_img: f64 = img.iter().map(|v| v.norm_sqr()).sum();
            let n_k: f64 = k.iter().map(|v| v.norm_sqr()).sum();
            assert!((n_img - n_k).abs() < 1e-12 * n_img.max(1.0));
        }
    }

    #[test]
    fn forward_zero_coeffs_gives_zero() {
        let mut r = rng(2);
        let (t, k, w, h, c) = (4, 2, 8, 8, 2);
        let phi = rand_phi(&mut r, t, k);
        let sens = SensMaps {
            data: rand_array3(&mut r, (c, w, h)),
        };
        let mask = rand_mask(&mut r, t, h);
        let y = forward_subspace(&CoeffMaps::zeros(k, w, h), &phi, &sens, &mask).unwrap();
        assert!(y.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn single_coil_flat_basis_forward() {
        // K=1, phi = ones/sqrt(T), unit coil, full mask: Y[t] = F(alpha)/sqrt(T).
        let (t, w, h) = (4, 8, 8);
        let mut r = rng(3);
        let alpha = CoeffMaps {
            data: rand_array3(&mut r, (1, w, h)),
        };
        let phi = Array2::from_elem((t, 1), Cplx::new(1.0 / (t as f64).sqrt(), 0.0));
        let sens = SensMaps::uniform_single(w, h);
        let mask = SamplingMask::full(t, h);
        let y = forward_subspace(&alpha, &phi, &sens, &mask).unwrap();
        let mut expect = alpha.data.index_axis(Axis(0), 0).to_owned();
        fft2_plane(&mut expect, false);
        expect.mapv_inplace(|v| v / (t as f64).sqrt());
        for tt in 0..t {
            for ww in 0..w {
                for ky in 0..h {
                    assert!((y.data[(tt, ww, ky, 0)] - expect[(ww, ky)]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn subspace_adjoint_dot_product() {
        let mut r = rng(4);
        for _ in 0..20 {
            let (t, k, w, h, c) = (5, 2, 6, 7, 2);
            let phi = rand_phi(&mut r, t, k);
            let sens = SensMaps {
                data: rand_array3(&mut r, (c, w, h)),
            };
            let mask = rand_mask(&mut r, t, h);
            let sys = SubspaceSystem::new(&phi, &sens, &mask).unwrap();
            let alpha = CoeffMaps {
                data: rand_array3(&mut r, (k, w, h)),
            };
            let y = EchoSeriesKSpace::new(rand_array4(&mut r, (t, w, h, c)), mask.clone()).unwrap();
            let ax = sys.forward(&alpha).unwrap();
            let aty = sys.adjoint(&y).unwrap();
            let lhs = dot4(&ax.data, &y.data);
            let rhs = dot3(&alpha.data, &aty.data);
            let scale = lhs.norm().max(rhs.norm()).max(1e-12);
            assert!((lhs - rhs).norm() / scale < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn normal_matches_adjoint_of_forward() {
        let mut r = rng(5);
        for _ in 0..5 {
            let (t, k, w, h, c) = (6, 3, 8, 10, 2);
            let phi = rand_phi(&mut r, t, k);
            let sens = SensMaps {
                data: rand_array3(&mut r, (c, w, h)),
            };
            let mask = rand_mask(&mut r, t, h);
            let sys = SubspaceSystem::new(&phi, &sens, &mask).unwrap();
            let alpha = CoeffMaps {
                data: rand_array3(&mut r, (k, w, h)),
            };
            let via_full = sys.adjoint(&sys.forward(&alpha).unwrap()).unwrap();
            let via_kernel = sys.normal(&alpha).unwrap();
            let num: f64 = (&via_full.data - &via_kernel.data)
                .iter()
                .map(|v| v.norm_sqr())
                .sum::<f64>()
                .sqrt();
            let den: f64 = via_full
                .data
                .iter()
                .map(|v| v.norm_sqr())
                .sum::<f64>()
                .sqrt();
            assert!(num / den.max(1e-12) < 1e-12, "kernel path deviates: {num}");
        }
    }

    #[test]
    fn unitary_composition_is_identity() {
        // Single coil of ones, full mask, K=T, phi=I: A^H A = I.
        let (t, w, h) = (3, 6, 6);
        let mut r = rng(6);
        let phi = SubspaceBasis::identity(t).phi;
        let sens = SensMaps::uniform_single(w, h);
        let mask = SamplingMask::full(t, h);
        let sys = SubspaceSystem::new(&phi, &sens, &mask).unwrap();
        let alpha = CoeffMaps {
            data: rand_array3(&mut r, (t, w, h)),
        };
        let back = sys.adjoint(&sys.forward(&alpha).unwrap()).unwrap();
        let err: f64 = (&back.data - &alpha.data)
            .iter()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-10);
    }

    #[test]
    fn sens_forward_matches_subspace_on_identity_basis() {
        let mut r = rng(7);
        let (t, w, h, c) = (4, 6, 6, 3);
        let x = EchoImages {
            data: rand_array3(&mut r, (t, w, h)),
        };
        let sens = SensMaps {
            data: rand_array3(&mut r, (c, w, h)),
        };
        let mask = rand_mask(&mut r, t, h);
        let ya = forward_sens(&sens, &x, &mask).unwrap();
        let phi = SubspaceBasis::identity(t).phi;
        let alpha = CoeffMaps {
            data: x.data.clone(),
        };
        let yb = forward_subspace(&alpha, &phi, &sens, &mask).unwrap();
        let err: f64 = (&ya.data - &yb.data)
            .iter()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-12);
    }

    #[test]
    fn sens_zero_maps_give_zero() {
        let mut r = rng(19);
        let (t, w, h, c) = (3, 4, 6, 2);
        let x = EchoImages {
            data: rand_array3(&mut r, (t, w, h)),
        };
        let mask = rand_mask(&mut r, t, h);
        let y = forward_sens(&SensMaps::zeros(c, w, h), &x, &mask).unwrap();
        assert!(y.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn sens_adjoint_dot_product() {
        let mut r = rng(8);
        for _ in 0..20 {
            let (t, w, h, c) = (4, 6, 7, 3);
            let x = EchoImages {
                data: rand_array3(&mut r, (t, w, h)),
            };
            let mask = rand_mask(&mut r, t, h);
            let sys = SensSystem::new(&x, &mask).unwrap();
            let s = SensMaps {
                data: rand_array3(&mut r, (c, w, h)),
            };
            let y = EchoSeriesKSpace::new(rand_array4(&mut r, (t, w, h, c)), mask.clone()).unwrap();
            let bs = sys.forward(&s).unwrap();
            let bty = sys.adjoint(&y).unwrap();
            let lhs = dot4(&bs.data, &y.data);
            let rhs = dot3(&s.data, &bty.data);
            let scale = lhs.norm().max(rhs.norm()).max(1e-12);
            assert!((lhs - rhs).norm() / scale < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn sens_normal_matches_adjoint_of_forward() {
        let mut r = rng(9);
        let (t, w, h, c) = (5, 8, 9, 2);
        let x = EchoImages {
            data: rand_array3(&mut r, (t, w, h)),
        };
        let mask = rand_mask(&mut r, t, h);
        let sys = SensSystem::new(&x, &mask).unwrap();
        let s = SensMaps {
            data: rand_array3(&mut r, (c, w, h)),
        };
        let full = sys.adjoint(&sys.forward(&s).unwrap()).unwrap();
        let fast = sys.normal(&s).unwrap();
        let num: f64 = (&full.data - &fast.data)
            .iter()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den: f64 = full.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(num / den.max(1e-12) < 1e-12);
    }

    #[test]
    fn per_echo_normal_matches_adjoint_of_forward() {
        let mut r = rng(10);
        let (t, w, h, c) = (3, 8, 8, 2);
        let sens = SensMaps {
            data: rand_array3(&mut r, (c, w, h)),
        };
        let mask = rand_mask(&mut r, t, h);
        let sys = PerEchoSystem::new(&sens, &mask);
        let x = EchoImages {
            data: rand_array3(&mut r, (t, w, h)),
        };
        let full = sys.adjoint(&sys.forward(&x).unwrap()).unwrap();
        let fast = sys.normal(&x).unwrap();
        let num: f64 = (&full.data - &fast.data)
            .iter()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den: f64 = full.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(num / den.max(1e-12) < 1e-12);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let sens = SensMaps {
            data: Array3::from_elem((2, 5, 5), Cplx::new(3.0, -1.0)),
        };
        let g = spatial_gradient(&sens);
        assert!(g.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn gradient_of_ramp_is_constant_interior() {
        let (w, h) = (6, 5);
        let data = Array3::from_shape_fn((1, w, h), |(_, ww, _)| Cplx::new(ww as f64, 0.0));
        let g = spatial_gradient(&SensMaps { data });
        for ww in 0..w - 1 {
            for hh in 0..h {
                assert!((g[(0, 0, ww, hh)] - Cplx::new(1.0, 0.0)).norm() < 1e-14);
                assert!(g[(1, 0, ww, hh)].norm() < 1e-14);
            }
        }
    }

    #[test]
    fn laplacian_stencil_matches_composition() {
        let mut r = rng(18);
        let s = SensMaps {
            data: rand_array3(&mut r, (2, 7, 6)),
        };
        let direct = laplacian(&s);
        let composed = spatial_gradient_adjoint(&spatial_gradient(&s));
        let err: f64 = (&direct.data - &composed.data)
            .iter()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-13);
    }

    #[test]
    fn gradient_adjoint_dot_product() {
        let mut r = rng(11);
        for _ in 0..20 {
            let (c, w, h) = (2, 6, 7);
            let s = SensMaps {
                data: rand_array3(&mut r, (c, w, h)),
            };
            let g = rand_array4(&mut r, (2, c, w, h));
            let ds = spatial_gradient(&s);
            let dtg = spatial_gradient_adjoint(&g);
            let lhs = dot4(&ds, &g);
            let rhs = dot3(&s.data, &dtg.data);
            let scale = lhs.norm().max(rhs.norm()).max(1e-12);
            assert!((lhs - rhs).norm() / scale < 1e-10);
        }
    }

    #[test]
    fn masking_is_idempotent() {
        let mut r = rng(12);
        let (t, w, h, c) = (3, 4, 6, 2);
        let mask = rand_mask(&mut r, t, h);
        let mut a = rand_array4(&mut r, (t, w, h, c));
        mask.apply(&mut a);
        let mut b = a.clone();
        mask.apply(&mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn normal_operator_is_psd() {
        let mut r = rng(13);
        for _ in 0..10 {
            let (t, k, w, h, c) = (4, 2, 6, 6, 2);
            let phi = rand_phi(&mut r, t, k);
            let sens = SensMaps {
                data: rand_array3(&mut r, (c, w, h)),
            };
            let mask = rand_mask(&mut r, t, h);
            let sys = SubspaceSystem::new(&phi, &sens, &mask).unwrap();
            let alpha = CoeffMaps {
                data: rand_array3(&mut r, (k, w, h)),
            };
            let nx = sys.normal(&alpha).unwrap();
            let quad = dot3(&alpha.data, &nx.data);
            let norm: f64 = alpha.data.iter().map(|v| v.norm_sqr()).sum();
            assert!(quad.im.abs() < 1e-10 * norm.max(1.0));
            assert!(quad.re >= -1e-12 * norm);
        }
    }

    #[test]
    fn forward_is_linear() {
        let mut r = rng(14);
        let (t, k, w, h, c) = (4, 2, 6, 6, 2);
        let phi = rand_phi(&mut r, t, k);
        let sens = SensMaps {
            data: rand_array3(&mut r, (c, w, h)),
        };
        let mask = rand_mask(&mut r, t, h);
        let sys = SubspaceSystem::new(&phi, &sens, &mask).unwrap();
        let a1 = CoeffMaps {
            data: rand_array3(&mut r, (k, w, h)),
        };
        let a2 = CoeffMaps {
            data: rand_array3(&mut r, (k, w, h)),
        };
        let (ca, cb) = (Cplx::new(0.7, -0.3), Cplx::new(-1.2, 0.4));
        let mixed = CoeffMaps {
            data: a1.data.mapv(|v| v * ca) + a2.data.mapv(|v| v * cb),
        };
        let y_mixed = sys.forward(&mixed).unwrap();
        let y1 = sys.forward(&a1).unwrap();
        let y2 = sys.forward(&a2).unwrap();
        let recon = y1.data.mapv(|v| v * ca) + y2.data.mapv(|v| v * cb);
        let err: f64 = (&y_mixed.data - &recon)
            .iter()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den: f64 = recon.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(err / den.max(1e-12) < 1e-12);
    }

    #[test]
    fn expand_project_adjoint_pair() {
        let mut r = rng(15);
        let (t, k, w, h) = (5, 3, 4, 4);
        let phi = rand_phi(&mut r, t, k);
        let alpha = CoeffMaps {
            data: rand_array3(&mut r, (k, w, h)),
        };
        let x = EchoImages {
            data: rand_array3(&mut r, (t, w, h)),
        };
        let ea = expand_coeffs(&alpha, &phi);
        let px = project_coeffs(&x, &phi);
        let lhs = dot3(&ea.data, &x.data);
        let rhs = dot3(&alpha.data, &px.data);
        assert!((lhs - rhs).norm() / lhs.norm().max(1e-12) < 1e-12);
    }

    #[test]
    fn fft1_ky_unitary_roundtrip() {
        let mut r = rng(16);
        let mut plane = Array2::from_shape_fn((5, 9), |_| {
            Cplx::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))
        });
        let orig = plane.clone();
        fft1_ky(&mut plane.view_mut(), false);
        let n0: f64 = orig.iter().map(|v| v.norm_sqr()).sum();
        let n1: f64 = plane.iter().map(|v| v.norm_sqr()).sum();
        assert!((n0 - n1).abs() < 1e-12 * n0);
        fft1_ky(&mut plane.view_mut(), true);
        let err: f64 = (&plane - &orig)
            .iter()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-12);
    }

    #[test]
    fn kspace_constructor_zeroes_unsampled() {
        let mut r = rng(17);
        let (t, w, h, c) = (2, 3, 5, 1);
        let mask = rand_mask(&mut r, t, h);
        let y = EchoSeriesKSpace::new(rand_array4(&mut r, (t, w, h, c)), mask.clone()).unwrap();
        for tt in 0..t {
            for ky in 0..h {
                if !mask.is_sampled(tt, ky) {
                    for ww in 0..w {
                        assert_eq!(y.data[(tt, ww, ky, 0)], Cplx::new(0.0, 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn acs_lines_must_be_sampled_everywhere() {
        let mut lines = Array2::from_elem((2, 6), false);
        lines[(0, 3)] = true;
        lines[(1, 2)] = true;
        assert!(SamplingMask::new(lines.clone(), vec![3]).is_err());
        lines[(1, 3)] = true;
        assert!(SamplingMask::new(lines, vec![3]).is_ok());
    }
}
