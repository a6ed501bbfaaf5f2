//! Iterative solvers: conjugate gradients for the regularized normal equations,
//! the orthogonal wavelet transform, and the FISTA l1-wavelet baseline solver.

use crate::error::{Error, Result};
use crate::linops::{laplacian, CoeffMaps, EchoSeriesKSpace, SensMaps, SubspaceSystem, SensSystem};
use crate::Cplx;
use ndarray::{Array2, Axis, Dimension};

/// Conjugate-gradient settings.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Relative residual stopping tolerance.
    pub tolerance: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iters: 15,
            tolerance: 1e-6,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::invalid("cg max_iters must be >= 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("cg tolerance must be > 0"));
        }
        Ok(())
    }
}

/// FISTA settings for the l1-wavelet baseline.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FistaConfig {
    pub max_iters: usize,
    /// l1 weight; `None` selects 1e-3 of the largest wavelet-coefficient
    /// magnitude of the adjoint reconstruction.
    pub l1_weight: Option<f64>,
    /// Gradient step size; `None` selects 1/(2 lambda_max) by power iteration.
    pub step_size: Option<f64>,
    /// Wavelet decomposition levels.
    pub levels: usize,
}

impl Default for FistaConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            l1_weight: None,
            step_size: None,
            levels: 3,
        }
    }
}

/// Vector-space interface needed by the Krylov iterations.
pub trait CgVector: Clone {
    fn dot_real(&self, other: &Self) -> f64;
    fn norm_sq(&self) -> f64;
    /// `self += a * x`.
    fn axpy(&mut self, a: f64, x: &Self);
    fn scale(&mut self, a: f64);
    fn all_finite(&self) -> bool;
}

impl<D: Dimension> CgVector for ndarray::Array<Cplx, D> {
    fn dot_real(&self, other: &Self) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    fn norm_sq(&self) -> f64 {
        self.iter().map(|v| v.norm_sqr()).sum()
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        self.zip_mut_with(x, |s, &v| *s += v * a);
    }

    fn scale(&mut self, a: f64) {
        self.mapv_inplace(|v| v * a);
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Result of a conjugate-gradient solve.
pub struct CgOutput<V> {
    pub x: V,
    /// Relative residual norm per iteration, starting at iteration 0.
    pub residual_norms: Vec<f64>,
}

/// Conjugate gradients for a Hermitian positive-semidefinite map.
///
/// Solves `op(x) = rhs` starting from `x0` (or zero). Returns the final
/// iterate and the relative residual history.
pub fn cg_solve<V, F>(op: F, rhs: &V, cfg: &CgConfig, x0: Option<&V>) -> Result<CgOutput<V>>
where
    V: CgVector,
    F: Fn(&V) -> Result<V>,
{
    cfg.validate()?;
    let rhs_norm = rhs.norm_sq().sqrt();
    if !rhs_norm.is_finite() {
        return Err(Error::numerical("cg rhs is not finite"));
    }

    let mut x = match x0 {
        Some(v) => v.clone(),
        None => {
            let mut z = rhs.clone();
            z.scale(0.0);
            z
        }
    };
    if rhs_norm == 0.0 {
        x.scale(0.0);
        return Ok(CgOutput {
            x,
            residual_norms: vec![0.0],
        });
    }

    let mut r = rhs.clone();
    let ax = op(&x)?;
    r.axpy(-1.0, &ax);
    let mut p = r.clone();
    let mut rr = r.norm_sq();
    let mut history = vec![rr.sqrt() / rhs_norm];

    for _ in 0..cfg.max_iters {
        if rr.sqrt() <= cfg.tolerance * rhs_norm {
            break;
        }
        let ap = op(&p)?;
        let pap = p.dot_real(&ap);
        if !pap.is_finite() {
            return Err(Error::numerical("cg curvature is not finite"));
        }
        if pap <= 0.0 {
            // Exactly-singular direction of a PSD operator; nothing to gain.
            break;
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rr_new = r.norm_sq();
        if !rr_new.is_finite() {
            return Err(Error::numerical("cg residual is not finite"));
        }
        let beta = rr_new / rr;
        p.scale(beta);
        p.axpy(1.0, &r);
        rr = rr_new;
        history.push(rr.sqrt() / rhs_norm);
    }

    if !x.all_finite() {
        return Err(Error::numerical("cg iterate is not finite"));
    }
    Ok(CgOutput {
        x,
        residual_norms: history,
    })
}

/// Regularized data-consistency solve for coefficient maps:
/// `(A^H A + mu I) alpha = A^H y + mu z`, warm-started at `z`.
pub fn dc_solve_image(
    y_theta: &EchoSeriesKSpace,
    z: &CoeffMaps,
    mu: f64,
    sys: &SubspaceSystem,
    cfg: &CgConfig,
) -> Result<CoeffMaps> {
    let aty = sys.adjoint(y_theta)?;
    dc_solve_image_precomp(&aty, z, mu, sys, cfg)
}

/// [`dc_solve_image`] with `A^H y` already computed; the unrolled blocks of
/// one step share it.
pub fn dc_solve_image_precomp(
    aty: &CoeffMaps,
    z: &CoeffMaps,
    mu: f64,
    sys: &SubspaceSystem,
    cfg: &CgConfig,
) -> Result<CoeffMaps> {
    if !(mu >= 0.0) {
        return Err(Error::invalid("mu must be >= 0"));
    }
    let mut rhs = aty.data.clone();
    rhs.axpy(mu, &z.data);
    let out = cg_solve(
        |a: &ndarray::Array3<Cplx>| {
            let mut na = sys.normal(&CoeffMaps { data: a.clone() })?.data;
            na.axpy(mu, a);
            Ok(na)
        },
        &rhs,
        cfg,
        Some(&z.data),
    )?;
    Ok(CoeffMaps { data: out.x })
}

/// Regularized data-consistency solve for sensitivity maps:
/// `(B^H B + mu_c I + lambda_c D^H D) S = B^H y + mu_c z`, warm-started at `z`.
pub fn dc_solve_sens(
    y_theta: &EchoSeriesKSpace,
    z: &SensMaps,
    x_t: &crate::linops::EchoImages,
    mu_c: f64,
    lambda_c: f64,
    cfg: &CgConfig,
) -> Result<SensMaps> {
    let sys = SensSystem::new(x_t, &y_theta.mask)?;
    let bty = sys.adjoint(y_theta)?;
    dc_solve_sens_precomp(&bty, z, &sys, mu_c, lambda_c, cfg)
}

/// [`dc_solve_sens`] with the system and `B^H y` already computed.
pub fn dc_solve_sens_precomp(
    bty: &SensMaps,
    z: &SensMaps,
    sys: &SensSystem,
    mu_c: f64,
    lambda_c: f64,
    cfg: &CgConfig,
) -> Result<SensMaps> {
    if !(mu_c >= 0.0) {
        return Err(Error::invalid("mu_c must be >= 0"));
    }
    if !(lambda_c >= 0.0) {
        return Err(Error::invalid("lambda_c must be >= 0"));
    }
    let mut rhs = bty.data.clone();
    rhs.axpy(mu_c, &z.data);
    let out = cg_solve(
        |s: &ndarray::Array3<Cplx>| {
            let maps = SensMaps { data: s.clone() };
            let mut ns = sys.normal(&maps)?.data;
            ns.axpy(mu_c, s);
            if lambda_c > 0.0 {
                let lap = laplacian(&maps);
                ns.axpy(lambda_c, &lap.data);
            }
            Ok(ns)
        },
        &rhs,
        cfg,
        Some(&z.data),
    )?;
    Ok(SensMaps { data: out.x })
}

// ---------------------------------------------------------------------------
// Orthogonal Daubechies-4 wavelets (periodic)
// ---------------------------------------------------------------------------

const DB4_H: [f64; 4] = [
    0.482962913144690,  // (1 + sqrt3) / (4 sqrt2)
    0.836516303737469,  // (3 + sqrt3) / (4 sqrt2)
    0.224143868041857,  // (3 - sqrt3) / (4 sqrt2)
    -0.129409522550921, // (1 - sqrt3) / (4 sqrt2)
];

fn db4_g() -> [f64; 4] {
    [DB4_H[3], -DB4_H[2], DB4_H[1], -DB4_H[0]]
}

fn dwt1(x: &[Cplx], out: &mut [Cplx]) {
    let n = x.len();
    let half = n / 2;
    let g = db4_g();
    for i in 0..half {
        let mut a = Cplx::new(0.0, 0.0);
        let mut d = Cplx::new(0.0, 0.0);
        for m in 0..4 {
            let v = x[(2 * i + m) % n];
            a += v * DB4_H[m];
            d += v * g[m];
        }
        out[i] = a;
        out[half + i] = d;
    }
}

fn idwt1(x: &[Cplx], out: &mut [Cplx]) {
    let n = x.len();
    let half = n / 2;
    let g = db4_g();
    for v in out.iter_mut() {
        *v = Cplx::new(0.0, 0.0);
    }
    for i in 0..half {
        let a = x[i];
        let d = x[half + i];
        for m in 0..4 {
            out[(2 * i + m) % n] += a * DB4_H[m] + d * g[m];
        }
    }
}

fn check_levels(w: usize, h: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::invalid("levels must be >= 1"));
    }
    let div = 1usize << levels;
    if w % div != 0 || h % div != 0 || w / div == 0 || h / div == 0 {
        return Err(Error::shape(format!(
            "image [{w}, {h}] not divisible into {levels} dyadic levels"
        )));
    }
    Ok(())
}

/// Orthogonal 2D Daubechies-4 wavelet analysis with periodic boundary, into a
/// same-size coefficient array (`[LL | LH; HL | HH]` recursively).
pub fn dwt2(img: &Array2<Cplx>, levels: usize) -> Result<Array2<Cplx>> {
    let (w, h) = img.dim();
    check_levels(w, h, levels)?;
    let mut out = img.clone();
    let mut cw = w;
    let mut ch = h;
    let mut row_buf = vec![Cplx::new(0.0, 0.0); h.max(w)];
    for _ in 0..levels {
        // Rows (along h).
        for ww in 0..cw {
            let row: Vec<Cplx> = (0..ch).map(|hh| out[(ww, hh)]).collect();
            dwt1(&row, &mut row_buf[..ch]);
            for hh in 0..ch {
                out[(ww, hh)] = row_buf[hh];
            }
        }
        // Columns (along w).
        for hh in 0..ch {
            let col: Vec<Cplx> = (0..cw).map(|ww| out[(ww, hh)]).collect();
            dwt1(&col, &mut row_buf[..cw]);
            for ww in 0..cw {
                out[(ww, hh)] = row_buf[ww];
            }
        }
        cw /= 2;
        ch /= 2;
    }
    Ok(out)
}

/// Inverse of [`dwt2`].
pub fn idwt2(coeffs: &Array2<Cplx>, levels: usize) -> Result<Array2<Cplx>> {
    let (w, h) = coeffs.dim();
    check_levels(w, h, levels)?;
    let mut out = coeffs.clone();
    let mut buf = vec![Cplx::new(0.0, 0.0); h.max(w)];
    for level in (0..levels).rev() {
        let cw = w >> level;
        let ch = h >> level;
        for hh in 0..ch {
            let col: Vec<Cplx> = (0..cw).map(|ww| out[(ww, hh)]).collect();
            idwt1(&col, &mut buf[..cw]);
            for ww in 0..cw {
                out[(ww, hh)] = buf[ww];
            }
        }
        for ww in 0..cw {
            let row: Vec<Cplx> = (0..ch).map(|hh| out[(ww, hh)]).collect();
            idwt1(&row, &mut buf[..ch]);
            for hh in 0..ch {
                out[(ww, hh)] = buf[hh];
            }
        }
    }
    Ok(out)
}

/// Complex soft-thresholding: shrink the magnitude by `lambda`, keep the phase.
pub fn soft_threshold(v: Cplx, lambda: f64) -> Cplx {
    let m = v.norm();
    if m <= lambda {
        Cplx::new(0.0, 0.0)
    } else {
        v * ((m - lambda) / m)
    }
}

/// Objective trace of a FISTA run.
pub struct FistaOutput {
    pub alpha: CoeffMaps,
    pub objective: Vec<f64>,
    pub l1_weight: f64,
    pub step_size: f64,
}

/// FISTA for `min ||A alpha - y||^2 + mu sum_k ||W alpha_k||_1` with the
/// orthogonal wavelet transform applied per coefficient map.
pub fn fista_l1wavelet(
    y: &EchoSeriesKSpace,
    sys: &SubspaceSystem,
    cfg: &FistaConfig,
) -> Result<FistaOutput> {
    if cfg.max_iters == 0 {
        return Err(Error::invalid("fista max_iters must be >= 1"));
    }
    let aty = sys.adjoint(y)?;
    let (k, w, h) = aty.data.dim();
    check_levels(w, h, cfg.levels)?;

    // l1 weight: fixed fraction of the strongest wavelet coefficient of the
    // adjoint reconstruction.
    let mu = match cfg.l1_weight {
        Some(v) => {
            if !(v >= 0.0) {
                return Err(Error::invalid("l1 weight must be >= 0"));
            }
            v
        }
        None => {
            let mut peak = 0.0f64;
            for kk in 0..k {
                let coeffs = dwt2(&aty.data.index_axis(Axis(0), kk).to_owned(), cfg.levels)?;
                peak = peak.max(coeffs.iter().map(|v| v.norm()).fold(0.0, f64::max));
            }
            1e-3 * peak
        }
    };

    // Step size: 1 / (2 lambda_max(A^H A)) by power iteration on the normal map.
    let step = match cfg.step_size {
        Some(v) => {
            if !(v > 0.0) {
                return Err(Error::invalid("step size must be > 0"));
            }
            v
        }
        None => {
            let mut v = CoeffMaps {
                data: ndarray::Array3::from_shape_fn((k, w, h), |(kk, ww, hh)| {
                    // Deterministic pseudo-random direction.
                    let t = (kk * 31 + ww * 7 + hh * 13) as f64;
                    Cplx::new((t * 0.7391).sin(), (t * 1.177).cos())
                }),
            };
            let mut lam = 1.0f64;
            for _ in 0..30 {
                let nv = sys.normal(&v)?;
                let norm = nv.data.norm_sq().sqrt();
                if norm == 0.0 {
                    break;
                }
                lam = v.data.dot_real(&nv.data) / v.data.norm_sq();
                let mut next = nv.data;
                next.scale(1.0 / norm);
                v = CoeffMaps { data: next };
            }
            1.0 / (2.0 * lam).max(1e-12)
        }
    };

    let objective = |alpha: &CoeffMaps| -> Result<f64> {
        let residual = {
            let mut ax = sys.forward(alpha)?.data;
            ax.axpy(-1.0, &y.data);
            ax.norm_sq()
        };
        let mut l1 = 0.0;
        for kk in 0..k {
            let coeffs = dwt2(&alpha.data.index_axis(Axis(0), kk).to_owned(), cfg.levels)?;
            l1 += coeffs.iter().map(|v| v.norm()).sum::<f64>();
        }
        Ok(residual + mu * l1)
    };

    let prox = |v: &CoeffMaps, thresh: f64| -> Result<CoeffMaps> {
        let mut out = v.data.clone();
        for kk in 0..k {
            let plane = out.index_axis(Axis(0), kk).to_owned();
            let mut coeffs = dwt2(&plane, cfg.levels)?;
            coeffs.mapv_inplace(|c| soft_threshold(c, thresh));
            let rec = idwt2(&coeffs, cfg.levels)?;
            out.index_axis_mut(Axis(0), kk).assign(&rec);
        }
        Ok(CoeffMaps { data: out })
    };

    let mut alpha = aty.clone();
    let mut momentum = alpha.clone();
    let mut t_par = 1.0f64;
    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    let obj0 = objective(&alpha)?;
    trace.push(obj0);

    for _ in 0..cfg.max_iters {
        // Gradient of the data term at the momentum point: 2 (A^H A z - A^H y).
        let mut grad = sys.normal(&momentum)?.data;
        grad.axpy(-1.0, &aty.data);
        grad.scale(2.0);

        let mut v = momentum.data.clone();
        v.axpy(-step, &grad);
        let alpha_new = prox(&CoeffMaps { data: v }, step * mu)?;

        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t_par * t_par).sqrt());
        let beta = (t_par - 1.0) / t_new;
        let mut z = alpha_new.data.clone();
        let mut diff = alpha_new.data.clone();
        diff.axpy(-1.0, &alpha.data);
        z.axpy(beta, &diff);

        alpha = alpha_new;
        momentum = CoeffMaps { data: z };
        t_par = t_new;

        let obj = objective(&alpha)?;
        if !obj.is_finite() || obj > 10.0 * obj0.max(1e-300) {
            return Err(Error::numerical(format!(
                "fista diverged: objective {obj:.3e} from {obj0:.3e}; reduce the step size"
            )));
        }
        trace.push(obj);
    }

    Ok(FistaOutput {
        alpha,
        objective: trace,
        l1_weight: mu,
        step_size: step,
    })
}
