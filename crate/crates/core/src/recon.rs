//! Reconstruction pipelines: zero-filled adjoint, the l1-wavelet baseline, the
//! per-echo self-supervised baseline, the zero-shot subspace stages, the
//! sensitivity estimation stage, and the staged joint driver.
//!
//! Training never sees ground truth: each step draws a fresh disjoint
//! consistency/loss split of the acquired lines, runs the unrolled
//! network/data-consistency alternation on the consistency set, and scores the
//! predicted k-space on the held-out loss set. Gradients flow through the
//! data-consistency solves implicitly: the solve's Jacobian with respect to its
//! regularization target is `mu (A^H A + mu I)^{-1}`, applied by conjugate
//! gradients.

use crate::error::{Error, Result};
use crate::linops::{
    expand_coeffs, fft2_plane, laplacian, CoeffMaps, EchoImages, EchoSeriesKSpace, PerEchoSystem,
    SamplingMask, SensMaps, SensSystem, SubspaceSystem,
};
use crate::masking::{partition_theta_lambda, ssdu_loss_grad, PartitionSpec};
use crate::net::{
    adam_step, init_params, net_backward, net_forward, net_forward_cached, AdamState, NetArch,
    NetCache, NetParams,
};
use crate::solvers::{
    cg_solve, dc_solve_image_precomp, dc_solve_sens, dc_solve_sens_precomp, CgConfig, CgVector,
    FistaConfig,
};
use crate::Cplx;
use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

const VALIDATION_EPOCH: u64 = u64::MAX - 1;

/// Hyperparameters of the unrolled zero-shot stages.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnrollConfig {
    pub n_blocks: usize,
    pub mu_i: f64,
    pub mu_c: f64,
    pub lambda_c: f64,
    pub steps_per_stage: usize,
    /// First-image-stage learning rate, decaying to `lr_late` after
    /// `lr_decay_step` steps.
    pub lr_i1: f64,
    pub lr_late: f64,
    pub lr_decay_step: usize,
    pub lr_i2: f64,
    pub lr_c1: f64,
    pub cg: CgConfig,
    /// Backbone width/depth of the coefficient and sensitivity regularizers.
    pub hidden_channels: usize,
    pub residual_blocks: usize,
    /// Smaller backbone for the per-echo baseline, which applies the network
    /// once per echo.
    pub ssdu_hidden_channels: usize,
    pub ssdu_residual_blocks: usize,
    /// Restart the second image stage from a fresh identity network rather
    /// than continuing the first stage's weights.
    pub fresh_i2_weights: bool,
    /// Fraction of acquired non-ACS lines held out for the loss.
    pub lambda_fraction: f64,
    pub seed: u64,
    /// Record a held-out validation loss every this many steps.
    pub val_interval: usize,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self {
            n_blocks: 10,
            mu_i: 0.05,
            mu_c: 0.02,
            lambda_c: 2.0,
            steps_per_stage: 100,
            lr_i1: 5e-4,
            lr_late: 5e-5,
            lr_decay_step: 40,
            lr_i2: 5e-5,
            lr_c1: 5e-5,
            cg: CgConfig::default(),
            hidden_channels: 48,
            residual_blocks: 4,
            ssdu_hidden_channels: 8,
            ssdu_residual_blocks: 2,
            fresh_i2_weights: true,
            lambda_fraction: 0.4,
            seed: 0,
            val_interval: 10,
        }
    }
}

impl UnrollConfig {
    fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            lambda_fraction: self.lambda_fraction,
            sigma: None,
            seed: self.seed ^ 0x7A57_1710,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_i <= 0.0 || self.mu_c <= 0.0 || self.lambda_c < 0.0 {
            return Err(Error::invalid("penalty weights must be positive"));
        }
        if self.steps_per_stage == 0 {
            return Err(Error::invalid("steps_per_stage must be >= 1"));
        }
        Ok(())
    }
}

/// Image stage identifier (first stage before map estimation, second after).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageStage {
    I1,
    I2,
}

/// Output of one trained stage.
pub struct StageResult {
    pub coeffs: Option<CoeffMaps>,
    pub sens: Option<SensMaps>,
    pub images: Option<EchoImages>,
    pub params: NetParams,
    pub loss_trace: Vec<f64>,
    /// (step, held-out validation loss) pairs on a fixed validation split.
    pub val_trace: Vec<(usize, f64)>,
}

/// `alpha0 = A^H Y` over the full acquired mask; the unroll input and the
/// worst-case baseline.
pub fn recon_zero_filled(
    y: &EchoSeriesKSpace,
    phi: &Array2<Cplx>,
    sens: &SensMaps,
) -> Result<CoeffMaps> {
    SubspaceSystem::new(phi, sens, &y.mask)?.adjoint(y)
}

/// The l1-wavelet subspace baseline.
pub fn recon_shuffling(
    y: &EchoSeriesKSpace,
    phi: &Array2<Cplx>,
    sens: &SensMaps,
    cfg: &FistaConfig,
) -> Result<(CoeffMaps, EchoImages, Vec<f64>)> {
    let sys = SubspaceSystem::new(phi, sens, &y.mask)?;
    let out = crate::solvers::fista_l1wavelet(y, &sys, cfg)?;
    let images = expand_coeffs(&out.alpha, phi);
    Ok((out.alpha, images, out.objective))
}

/// Unrolled forward pass: `n_blocks` alternations of the regularizer network
/// and the data-consistency solve, sharing one set of weights. Returns the
/// final coefficients and the per-block activation caches for the backward
/// pass.
pub fn zs_unrolled_forward(
    alpha0: &CoeffMaps,
    y_theta: &EchoSeriesKSpace,
    sys: &SubspaceSystem,
    params: &NetParams,
    cfg: &UnrollConfig,
) -> Result<(CoeffMaps, Vec<NetCache>)> {
    let mut alpha = alpha0.clone();
    let mut caches = Vec::with_capacity(cfg.n_blocks);
    let aty = sys.adjoint(y_theta)?;
    for _ in 0..cfg.n_blocks {
        let (z, cache) = net_forward_cached(params, &alpha.data)?;
        caches.push(cache);
        alpha = dc_solve_image_precomp(&aty, &CoeffMaps { data: z }, cfg.mu_i, sys, &cfg.cg)?;
    }
    Ok((alpha, caches))
}

/// Gradient of the data-consistency solve with respect to its regularization
/// target: `mu (A^H A + mu I)^{-1}` applied to the incoming gradient, by CG.
pub fn implicit_dc_gradient(
    grad_alpha: &CoeffMaps,
    sys: &SubspaceSystem,
    mu: f64,
    cg: &CgConfig,
) -> Result<CoeffMaps> {
    let out = cg_solve(
        |a: &Array3<Cplx>| {
            let mut na = sys.normal(&CoeffMaps { data: a.clone() })?.data;
            na.axpy(mu, a);
            Ok(na)
        },
        &grad_alpha.data,
        cg,
        None,
    )?;
    let mut data = out.x;
    data.scale(mu);
    Ok(CoeffMaps { data })
}

/// Backpropagate through the unrolled blocks, alternating the implicit
/// data-consistency gradient and the network's exact backward pass. Returns
/// the accumulated parameter gradient.
pub fn unrolled_backward(
    grad_alpha_hat: &CoeffMaps,
    caches: &[NetCache],
    sys: &SubspaceSystem,
    params: &NetParams,
    cfg: &UnrollConfig,
) -> Result<Vec<f64>> {
    let mut grad_params = vec![0.0f64; params.data.len()];
    let mut g = grad_alpha_hat.clone();
    for cache in caches.iter().rev() {
        let gz = implicit_dc_gradient(&g, sys, cfg.mu_i, &cfg.cg)?;
        let (gp, gx) = net_backward(params, cache, &gz.data)?;
        for (acc, v) in grad_params.iter_mut().zip(&gp) {
            *acc += v;
        }
        g = CoeffMaps { data: gx };
    }
    Ok(grad_params)
}

fn selfsup_image_loss(
    y: &EchoSeriesKSpace,
    alpha_hat: &CoeffMaps,
    phi: &Array2<Cplx>,
    sens: &SensMaps,
    lambda: &SamplingMask,
) -> Result<(f64, CoeffMaps)> {
    let sys_lambda = SubspaceSystem::new(phi, sens, lambda)?;
    let pred = sys_lambda.forward(alpha_hat)?;
    let (loss, gksp) = ssdu_loss_grad(y, &pred, lambda)?;
    let grad = sys_lambda.adjoint(&EchoSeriesKSpace {
        data: gksp,
        mask: lambda.clone(),
    })?;
    Ok((loss, grad))
}

/// One self-supervised training step evaluation: unrolled forward on the
/// consistency mask, loss on the held-out mask, and the full parameter
/// gradient through all blocks.
pub fn image_step_gradient(
    y: &EchoSeriesKSpace,
    phi: &Array2<Cplx>,
    sens: &SensMaps,
    theta: &SamplingMask,
    lambda: &SamplingMask,
    params: &NetParams,
    cfg: &UnrollConfig,
) -> Result<(f64, Vec<f64>, CoeffMaps)> {
    let y_theta = y.with_mask(theta.clone())?;
    let sys = SubspaceSystem::new(phi, sens, &y_theta.mask)?;
    let alpha0 = sys.adjoint(&y_theta)?;
    let (alpha_hat, caches) = zs_unrolled_forward(&alpha0, &y_theta, &sys, params, cfg)?;
    let (loss, grad_alpha) = selfsup_image_loss(y, &alpha_hat, phi, sens, lambda)?;
    let grads = unrolled_backward(&grad_alpha, &caches, &sys, params, cfg)?;
    Ok((loss, grads, alpha_hat))
}

/// Evaluate the self-supervised loss of the current parameters on a fixed
/// validation split without touching them.
pub fn eval_validation_loss(
    y: &EchoSeriesKSpace,
    phi: &Array2<Cplx>,
    sens: &SensMaps,
    params: &NetParams,
    cfg: &UnrollConfig,
) -> Result<f64> {
    let (theta, lambda) = partition_theta_lambda(&y.mask, &cfg.partition_spec(), VALIDATION_EPOCH)?;
    let y_theta = y.with_mask(theta)?;
    let sys = SubspaceSystem::new(phi, sens, &y_theta.mask)?;
    let alpha0 = sys.adjoint(&y_theta)?;
    let (alpha_hat, _) = zs_unrolled_forward(&alpha0, &y_theta, &sys, params, cfg)?;
    let sys_lambda = SubspaceSystem::new(phi, sens, &lambda)?;
    let pred = sys_lambda.forward(&alpha_hat)?;
    let (loss, _) = ssdu_loss_grad(y, &pred, &lambda)?;
    Ok(loss)
}

/// Train one zero-shot image stage and run the final inference pass on the
/// full acquired mask.
pub fn train_image_stage(
    y: &EchoSeriesKSpace,
    phi: &Array2<Cplx>,
    sens: &SensMaps,
    cfg: &UnrollConfig,
    stage: ImageStage,
    initial_params: Option<NetParams>,
) -> Result<StageResult> {
    cfg.validate()?;
    let k = phi.ncols();
    let arch = NetArch::new(2 * k, cfg.hidden_channels, cfg.residual_blocks);
    let seed_tag = match stage {
        ImageStage::I1 => 0x101,
        ImageStage::I2 => 0x102,
    };
    let mut params = match initial_params {
        Some(p) => {
            if p.arch != arch {
                return Err(Error::shape("initial parameters do not match architecture"));
            }
            p
        }
        None => init_params(&arch, cfg.seed.wrapping_add(seed_tag))?,
    };
    let lr0 = match stage {
        ImageStage::I1 => cfg.lr_i1,
        ImageStage::I2 => cfg.lr_i2,
    };
    let mut adam = AdamState::new(params.data.len(), lr0);
    let pspec = cfg.partition_spec();

    let mut loss_trace = Vec::with_capacity(cfg.steps_per_stage);
    let mut val_trace = Vec::new();

    for step in 0..cfg.steps_per_stage {
        if stage == ImageStage::I1 && step == cfg.lr_decay_step {
            adam.learning_rate = cfg.lr_late;
        }
        let (theta, lambda) = partition_theta_lambda(&y.mask, &pspec, step as u64)?;
        let (loss, grads, _) = image_step_gradient(y, phi, sens, &theta, &lambda, &params, cfg)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite training loss at step {step}"
            )));
        }
        adam_step(&mut params, &grads, &mut adam)?;
        loss_trace.push(loss);
        if cfg.val_interval > 0 && (step % cfg.val_interval == 0 || step + 1 == cfg.steps_per_stage)
        {
            val_trace.push((step, eval_validation_loss(y, phi, sens, &params, cfg)?));
        }
    }

    // Inference with the full acquired mask.
    let sys_full = SubspaceSystem::new(phi, sens, &y.mask)?;
    let alpha0 = sys_full.adjoint(y)?;
    let (alpha_hat, _) = zs_unrolled_forward(&alpha0, y, &sys_full, &params, cfg)?;
    let images = expand_coeffs(&alpha_hat, phi);

    Ok(StageResult {
        coeffs: Some(alpha_hat),
        sens: None,
        images: Some(images),
        params,
        loss_trace,
        val_trace,
    })
}

/// Zero-shot subspace reconstruction (the proposed method with known maps).
pub fn recon_zs_subspace(
    y: &EchoSeriesKSpace,
    phi: &Array2<Cplx>,
    sens: &SensMaps,
    cfg: &UnrollConfig,
) -> Result<StageResult> {
    train_image_stage(y, phi, sens, cfg, ImageStage::I1, None)
}

// ---------------------------------------------------------------------------
// Per-echo baseline
// ---------------------------------------------------------------------------

fn single_echo_mask(mask: &SamplingMask, t: usize) -> SamplingMask {
    let h = mask.ky_count();
    let mut lines = Array2::from_elem((1, h), false);
    for ky in 0..h {
        lines[(0, ky)] = mask.is_sampled(t, ky);
    }
    SamplingMask::new(lines, mask.acs_lines().to_vec()).expect("single echo mask")
}

/// Per-echo data-consistency solves `(A_t^H A_t + mu I) x_t = A_t^H y_t + mu z_t`,
/// each echo independently.
fn dc_solve_per_echo(
    y_theta: &EchoSeriesKSpace,
    z: &EchoImages,
    mu: f64,
    sens: &SensMaps,
    cg: &CgConfig,
) -> Result<EchoImages> {
    let (t, w, h, _c) = y_theta.data.dim();
    let planes: Result<Vec<Array2<Cplx>>> = (0..t)
        .into_par_iter()
        .map(|tt| {
            let mask_t = single_echo_mask(&y_theta.mask, tt);
            let sys = PerEchoSystem::new(sens, &mask_t);
            let y_t = EchoSeriesKSpace {
                data: y_theta
                    .data
                    .index_axis(Axis(0), tt)
                    .to_owned()
                    .insert_axis(Axis(0)),
                mask: mask_t.clone(),
            };
            let mut rhs = sys.adjoint(&y_t)?.data;
            let z_t = z.data.index_axis(Axis(0), tt).to_owned().insert_axis(Axis(0));
            rhs.axpy(mu, &z_t);
            let out = cg_solve(
                |x: &Array3<Cplx>| {
                    let mut nx = sys.normal(&EchoImages { data: x.clone() })?.data;
                    nx.axpy(mu, x);
                    Ok(nx)
                },
                &rhs,
                cg,
                Some(&z_t),
            )?;
            Ok(out.x.index_axis(Axis(0), 0).to_owned())
        })
        .collect();
    let planes = planes?;
    let mut out = Array3::zeros((t, w, h));
    for (tt, p) in planes.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), tt).assign(&p);
    }
    Ok(EchoImages { data: out })
}

fn per_echo_implicit_gradient(
    grad: &EchoImages,
    sens: &SensMaps,
    mask: &SamplingMask,
    mu: f64,
    cg: &CgConfig,
) -> Result<EchoImages> {
    let (t, w, h) = grad.data.dim();
    let planes: Result<Vec<Array2<Cplx>>> = (0..t)
        .into_par_iter()
        .map(|tt| {
            let mask_t = single_echo_mask(mask, tt);
            let sys = PerEchoSystem::new(sens, &mask_t);
            let g_t = grad.data.index_axis(Axis(0), tt).to_owned().insert_axis(Axis(0));
            let out = cg_solve(
                |x: &Array3<Cplx>| {
                    let mut nx = sys.normal(&EchoImages { data: x.clone() })?.data;
                    nx.axpy(mu, x);
                    Ok(nx)
                },
                &g_t,
                cg,
                None,
            )?;
            let mut x = out.x.index_axis(Axis(0), 0).to_owned();
            x.scale(mu);
            Ok(x)
        })
        .collect();
    let planes = planes?;
    let mut out = Array3::zeros((t, w, h));
    for (tt, p) in planes.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), tt).assign(&p);
    }
    Ok(EchoImages { data: out })
}

fn per_echo_net_forward(params: &NetParams, x: &EchoImages) -> Result<EchoImages> {
    let (t, w, h) = x.data.dim();
    let planes: Result<Vec<_>> = (0..t)
        .into_par_iter()
        .map(|tt| {
            let xin = x.data.index_axis(Axis(0), tt).to_owned().insert_axis(Axis(0));
            Ok(net_forward(params, &xin)?.index_axis(Axis(0), 0).to_owned())
        })
        .collect();
    let planes = planes?;
    let mut out = Array3::zeros((t, w, h));
    for (tt, p) in planes.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), tt).assign(&p);
    }
    Ok(EchoImages { data: out })
}

/// Per-echo backward through the shared network; returns parameter gradients
/// and the gradient with respect to the input series.
fn per_echo_net_backward(
    params: &NetParams,
    x: &EchoImages,
    grad_out: &EchoImages,
) -> Result<(Vec<f64>, EchoImages)> {
    let (t, w, h) = x.data.dim();
    let per_echo: Result<Vec<_>> = (0..t)
        .into_par_iter()
        .map(|tt| {
            let xin = x.data.index_axis(Axis(0), tt).to_owned().insert_axis(Axis(0));
            let gout = grad_out
                .data
                .index_axis(Axis(0), tt)
                .to_owned()
                .insert_axis(Axis(0));
            let (_, cache) = net_forward_cached(params, &xin)?;
            let (gp, gx) = net_backward(params, &cache, &gout)?;
            Ok((gp, gx.index_axis(Axis(0), 0).to_owned()))
        })
        .collect();
    let mut grad_params = vec![0.0f64; params.data.len()];
    let mut grad_in = Array3::zeros((t, w, h));
    for (tt, (gp, gx)) in per_echo?.into_iter().enumerate() {
        for (acc, v) in grad_params.iter_mut().zip(&gp) {
            *acc += v;
        }
        grad_in.index_axis_mut(Axis(0), tt).assign(&gx);
    }
    Ok((grad_params, EchoImages { data: grad_in }))
}

/// Per-echo self-supervised baseline: the zero-shot unrolled reconstruction
/// without the temporal subspace, every echo an independent image with one
/// shared regularizer network.
pub fn recon_ssdu_per_echo(
    y: &EchoSeriesKSpace,
    sens: &SensMaps,
    cfg: &UnrollConfig,
) -> Result<(EchoImages, StageResult)> {
    cfg.validate()?;
    let arch = NetArch::new(2, cfg.ssdu_hidden_channels, cfg.ssdu_residual_blocks);
    let mut params = init_params(&arch, cfg.seed.wrapping_add(0x55D))?;
    let mut adam = AdamState::new(params.data.len(), cfg.lr_i1);
    let pspec = cfg.partition_spec();
    let mut loss_trace = Vec::with_capacity(cfg.steps_per_stage);

    for step in 0..cfg.steps_per_stage {
        if step == cfg.lr_decay_step {
            adam.learning_rate = cfg.lr_late;
        }
        let (theta, lambda) = partition_theta_lambda(&y.mask, &pspec, step as u64)?;
        let y_theta = y.with_mask(theta)?;
        let x0 = PerEchoSystem::new(sens, &y_theta.mask).adjoint(&y_theta)?;

        let mut x = x0;
        let mut block_inputs = Vec::with_capacity(cfg.n_blocks);
        for _ in 0..cfg.n_blocks {
            block_inputs.push(x.clone());
            let z = per_echo_net_forward(&params, &x)?;
            x = dc_solve_per_echo(&y_theta, &z, cfg.mu_i, sens, &cfg.cg)?;
        }

        let sys_lambda = PerEchoSystem::new(sens, &lambda);
        let pred = sys_lambda.forward(&x)?;
        let (loss, gksp) = ssdu_loss_grad(y, &pred, &lambda)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite ssdu loss at step {step}"
            )));
        }
        let mut g = sys_lambda.adjoint(&EchoSeriesKSpace {
            data: gksp,
            mask: lambda.clone(),
        })?;
        let mut grads = vec![0.0f64; params.data.len()];
        for input in block_inputs.iter().rev() {
            let gz = per_echo_implicit_gradient(&g, sens, &y_theta.mask, cfg.mu_i, &cfg.cg)?;
            let (gp, gx) = per_echo_net_backward(&params, input, &gz)?;
            for (acc, v) in grads.iter_mut().zip(&gp) {
                *acc += v;
            }
            g = gx;
        }
        adam_step(&mut params, &grads, &mut adam)?;
        loss_trace.push(loss);
    }

    // Inference on the full acquired mask.
    let mut x = PerEchoSystem::new(sens, &y.mask).adjoint(y)?;
    for _ in 0..cfg.n_blocks {
        let z = per_echo_net_forward(&params, &x)?;
        x = dc_solve_per_echo(y, &z, cfg.mu_i, sens, &cfg.cg)?;
    }

    let result = StageResult {
        coeffs: None,
        sens: None,
        images: Some(x.clone()),
        params,
        loss_trace,
        val_trace: Vec::new(),
    };
    Ok((x, result))
}

// ---------------------------------------------------------------------------
// Calibration surrogate and the sensitivity stage
// ---------------------------------------------------------------------------

/// Low-resolution sensitivity calibration from the central ACS lines:
/// echo-averaged ACS data, Hann apodization over the band, zero-padded inverse
/// transform, per-pixel root-sum-of-squares normalization. Pixels below 5% of
/// the peak RSS are zeroed.
pub fn calib_lowres_maps(y: &EchoSeriesKSpace, n_center: usize) -> Result<SensMaps> {
    if n_center < 1 {
        return Err(Error::invalid("n_center must be >= 1"));
    }
    let acs = y.mask.acs_lines();
    if acs.len() < n_center {
        return Err(Error::invalid(format!(
            "mask has {} ACS lines, requested {n_center}",
            acs.len()
        )));
    }
    // Central n_center lines of the ACS block.
    let skip = (acs.len() - n_center) / 2;
    let band: Vec<usize> = acs[skip..skip + n_center].to_vec();

    let (t, w, h, c) = y.data.dim();
    let mut maps = Array3::zeros((c, w, h));
    for cc in 0..c {
        let mut plane = Array2::<Cplx>::zeros((w, h));
        for (bi, &ky) in band.iter().enumerate() {
            // Hann taper over the band (flat for very small bands).
            let taper = if n_center == 1 {
                1.0
            } else {
                let u = (bi + 1) as f64 / (n_center + 1) as f64;
                (std::f64::consts::PI * u).sin().powi(2)
            };
            for ww in 0..w {
                let mut acc = Cplx::new(0.0, 0.0);
                for tt in 0..t {
                    acc += y.data[(tt, ww, ky, cc)];
                }
                plane[(ww, ky)] = acc * (taper / t as f64);
            }
        }
        fft2_plane(&mut plane, true);
        maps.index_axis_mut(Axis(0), cc).assign(&plane);
    }

    // RSS normalization with support thresholding.
    let mut rss = Array2::<f64>::zeros((w, h));
    for ww in 0..w {
        for hh in 0..h {
            rss[(ww, hh)] = (0..c)
                .map(|cc| maps[(cc, ww, hh)].norm_sqr())
                .sum::<f64>()
                .sqrt();
        }
    }
    let peak = rss.iter().cloned().fold(0.0f64, f64::max);
    if peak == 0.0 {
        return Err(Error::numerical("ACS region is identically zero"));
    }
    for ww in 0..w {
        for hh in 0..h {
            let r = rss[(ww, hh)];
            for cc in 0..c {
                maps[(cc, ww, hh)] = if r < 0.05 * peak {
                    Cplx::new(0.0, 0.0)
                } else {
                    maps[(cc, ww, hh)] / r
                };
            }
        }
    }
    Ok(SensMaps { data: maps })
}

fn sens_implicit_gradient(
    grad: &SensMaps,
    sys: &SensSystem,
    mu_c: f64,
    lambda_c: f64,
    cg: &CgConfig,
) -> Result<SensMaps> {
    let out = cg_solve(
        |s: &Array3<Cplx>| {
            let maps = SensMaps { data: s.clone() };
            let mut ns = sys.normal(&maps)?.data;
            ns.axpy(mu_c, s);
            if lambda_c > 0.0 {
                ns.axpy(lambda_c, &laplacian(&maps).data);
            }
            Ok(ns)
        },
        &grad.data,
        cg,
        None,
    )?;
    let mut data = out.x;
    data.scale(mu_c);
    Ok(SensMaps { data })
}

/// Train the self-supervised sensitivity stage with frozen echo images.
pub fn train_sens_stage(
    y: &EchoSeriesKSpace,
    x_t: &EchoImages,
    s_init: &SensMaps,
    cfg: &UnrollConfig,
) -> Result<StageResult> {
    cfg.validate()?;
    let c = s_init.data.dim().0;
    let arch = NetArch::new(2 * c, cfg.hidden_channels, cfg.residual_blocks);
    let mut params = init_params(&arch, cfg.seed.wrapping_add(0x103))?;
    let mut adam = AdamState::new(params.data.len(), cfg.lr_c1);
    let pspec = cfg.partition_spec();
    let mut loss_trace = Vec::with_capacity(cfg.steps_per_stage);

    for step in 0..cfg.steps_per_stage {
        let (theta, lambda) = partition_theta_lambda(&y.mask, &pspec, step as u64)?;
        let y_theta = y.with_mask(theta)?;
        let sys = SensSystem::new(x_t, &y_theta.mask)?;
        let bty = sys.adjoint(&y_theta)?;

        let mut s = s_init.clone();
        let mut caches = Vec::with_capacity(cfg.n_blocks);
        for _ in 0..cfg.n_blocks {
            let (z, cache) = net_forward_cached(&params, &s.data)?;
            caches.push(cache);
            s = dc_solve_sens_precomp(
                &bty,
                &SensMaps { data: z },
                &sys,
                cfg.mu_c,
                cfg.lambda_c,
                &cfg.cg,
            )?;
        }

        let sys_lambda = SensSystem::new(x_t, &lambda)?;
        let pred = sys_lambda.forward(&s)?;
        let (loss, gksp) = ssdu_loss_grad(y, &pred, &lambda)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite sensitivity loss at step {step}"
            )));
        }
        let mut g = sys_lambda.adjoint(&EchoSeriesKSpace {
            data: gksp,
            mask: lambda.clone(),
        })?;

        let mut grads = vec![0.0f64; params.data.len()];
        for cache in caches.iter().rev() {
            let gz = sens_implicit_gradient(&g, &sys, cfg.mu_c, cfg.lambda_c, &cfg.cg)?;
            let (gp, gx) = net_backward(&params, cache, &gz.data)?;
            for (acc, v) in grads.iter_mut().zip(&gp) {
                *acc += v;
            }
            g = SensMaps { data: gx };
        }
        adam_step(&mut params, &grads, &mut adam)?;
        loss_trace.push(loss);
    }

    // Inference with the full acquired mask.
    let mut s = s_init.clone();
    for _ in 0..cfg.n_blocks {
        let z = SensMaps {
            data: net_forward(&params, &s.data)?,
        };
        s = dc_solve_sens(y, &z, x_t, cfg.mu_c, cfg.lambda_c, &cfg.cg)?;
    }

    Ok(StageResult {
        coeffs: None,
        sens: Some(s),
        images: None,
        params,
        loss_trace,
        val_trace: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Staged joint driver
// ---------------------------------------------------------------------------

/// Options of the staged joint reconstruction.
#[derive(Debug, Clone)]
pub struct JointOptions {
    /// Central ACS lines used by the calibration surrogate.
    pub n_center: usize,
    /// Override the calibration surrogate (e.g., ground-truth maps).
    pub initial_maps: Option<SensMaps>,
    pub run_sens_stage: bool,
    pub run_second_image_stage: bool,
}

impl JointOptions {
    pub fn with_center_lines(n_center: usize) -> Self {
        Self {
            n_center,
            initial_maps: None,
            run_sens_stage: true,
            run_second_image_stage: true,
        }
    }
}

/// Output of the staged joint pipeline.
pub struct JointResult {
    pub coeffs: CoeffMaps,
    pub images: EchoImages,
    pub sens: SensMaps,
    pub stage_i1: StageResult,
    pub stage_c1: Option<StageResult>,
    pub stage_i2: Option<StageResult>,
    /// Calibration maps the first stage started from.
    pub calib_maps: SensMaps,
}

/// Stage-by-stage joint reconstruction: image stage on calibration maps,
/// frozen-image sensitivity estimation, then a second image stage on the
/// estimated maps. Networks never share gradients across stages; each stage
/// sees the previous stage's output as a constant.
pub fn run_joint_pipeline(
    y: &EchoSeriesKSpace,
    phi: &Array2<Cplx>,
    cfg: &UnrollConfig,
    opts: &JointOptions,
) -> Result<JointResult> {
    let calib = match &opts.initial_maps {
        Some(m) => m.clone(),
        None => calib_lowres_maps(y, opts.n_center)?,
    };

    let stage_i1 = train_image_stage(y, phi, &calib, cfg, ImageStage::I1, None)?;
    let i1_params_snapshot = stage_i1.params.data.clone();
    let mut coeffs = stage_i1.coeffs.clone().expect("image stage yields coefficients");
    let mut images = stage_i1.images.clone().expect("image stage yields images");
    let mut sens = calib.clone();

    let mut stage_c1 = None;
    if opts.run_sens_stage {
        let c1 = train_sens_stage(y, &images, &calib, cfg)?;
        sens = c1.sens.clone().expect("sens stage yields maps");
        stage_c1 = Some(c1);
    }
    debug_assert_eq!(i1_params_snapshot, stage_i1.params.data);

    let mut stage_i2 = None;
    if opts.run_second_image_stage {
        let init = if cfg.fresh_i2_weights {
            None
        } else {
            Some(stage_i1.params.clone())
        };
        let i2 = train_image_stage(y, phi, &sens, cfg, ImageStage::I2, init)?;
        coeffs = i2.coeffs.clone().expect("image stage yields coefficients");
        images = i2.images.clone().expect("image stage yields images");
        stage_i2 = Some(i2);
    }

    Ok(JointResult {
        coeffs,
        images,
        sens,
        stage_i1,
        stage_c1,
        stage_i2,
        calib_maps: calib,
    })
}

/// Normalized sensitivity-map error with the per-pixel receive phase aligned
/// (the coil product is invariant to a shared per-pixel phase).
pub fn sens_map_error(est: &SensMaps, truth: &SensMaps, support: &Array2<bool>) -> Result<f64> {
    if est.data.dim() != truth.data.dim() {
        return Err(Error::shape("sensitivity maps differ in shape"));
    }
    let (c, w, h) = est.data.dim();
    if support.dim() != (w, h) {
        return Err(Error::shape("support mask does not match maps"));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ww in 0..w {
        for hh in 0..h {
            if !support[(ww, hh)] {
                continue;
            }
            let mut inner = Cplx::new(0.0, 0.0);
            for cc in 0..c {
                inner += est.data[(cc, ww, hh)] * truth.data[(cc, ww, hh)].conj();
            }
            let phase = if inner.norm() > 0.0 {
                inner / inner.norm()
            } else {
                Cplx::new(1.0, 0.0)
            };
            for cc in 0..c {
                let aligned = est.data[(cc, ww, hh)] * phase.conj();
                num += (aligned - truth.data[(cc, ww, hh)]).norm_sqr();
                den += truth.data[(cc, ww, hh)].norm_sqr();
            }
        }
    }
    if den == 0.0 {
        return Err(Error::invalid("truth maps are zero on the support"));
    }
    Ok((num / den).sqrt())
}
