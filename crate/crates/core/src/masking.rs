//! Shuffling acquisition masks, per-epoch self-supervision partitions, and the
//! normalized k-space loss.

use crate::error::{Error, Result};
use crate::linops::{EchoSeriesKSpace, SamplingMask};
use crate::Cplx;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};

/// Acquisition layout of a shuffled echo train.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AcqSpec {
    pub echo_count: usize,
    pub height: usize,
    pub lines_per_echo: usize,
    /// Fully sampled center (ACS) ky lines, present in every echo.
    pub center_lines: usize,
    pub seed: u64,
}

impl AcqSpec {
    pub fn validate(&self) -> Result<()> {
        if self.echo_count == 0 || self.height == 0 {
            return Err(Error::invalid("echo count and height must be non-zero"));
        }
        if self.center_lines > self.lines_per_echo {
            return Err(Error::invalid("center_lines must not exceed lines_per_echo"));
        }
        if self.lines_per_echo > self.height {
            return Err(Error::invalid("lines_per_echo must not exceed height"));
        }
        if self.lines_per_echo == 0 {
            return Err(Error::invalid("lines_per_echo must be >= 1"));
        }
        Ok(())
    }

    /// Per-echo acceleration `R = H / lines_per_echo`.
    pub fn acceleration(&self) -> f64 {
        self.height as f64 / self.lines_per_echo as f64
    }

    /// ky indices of the ACS block, centered on DC.
    pub fn acs_indices(&self) -> Vec<usize> {
        let start = self.height / 2 - self.center_lines / 2;
        (start..start + self.center_lines).collect()
    }
}

/// Partition law for the self-supervision split.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PartitionSpec {
    /// Fraction of acquired non-ACS lines assigned to the loss set; 0.4 makes
    /// the loss/consistency cardinality ratio 2/3.
    pub lambda_fraction: f64,
    /// Gaussian selection width in ky lines; `None` selects H/6.
    pub sigma: Option<f64>,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            lambda_fraction: 0.4,
            sigma: None,
            seed: 0,
        }
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> rand_chacha::ChaCha8Rng {
    // splitmix-style mixing so (seed, epoch) pairs decorrelate.
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    rand_chacha::ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// T2-shuffling mask: every echo acquires the ACS block plus uniformly drawn
/// non-ACS ky lines, independently per echo, without duplicates.
pub fn gen_shuffling_mask(spec: &AcqSpec) -> Result<SamplingMask> {
    spec.validate()?;
    let acs = spec.acs_indices();
    let n_random = spec.lines_per_echo - spec.center_lines;
    let candidates: Vec<usize> = (0..spec.height).filter(|ky| !acs.contains(ky)).collect();
    if n_random > candidates.len() {
        return Err(Error::invalid("not enough non-ACS lines to sample"));
    }

    let mut rng = epoch_rng(spec.seed, 0);
    let mut lines = Array2::from_elem((spec.echo_count, spec.height), false);
    for t in 0..spec.echo_count {
        for &ky in &acs {
            lines[(t, ky)] = true;
        }
        let mut pool = candidates.clone();
        for i in 0..n_random {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            lines[(t, pool[i])] = true;
        }
    }
    SamplingMask::new(lines, acs)
}

/// Split the acquired lines of every echo into disjoint consistency (theta)
/// and loss (lambda) sets.
///
/// ACS lines always stay in theta. Per echo, `floor(lambda_fraction * n)` of
/// the `n` acquired non-ACS lines (at least one, so the loss set is never
/// empty) go to lambda, drawn without replacement with weights Gaussian in the
/// ky distance from DC. A fresh `(seed, epoch)` pair yields a fresh partition.
pub fn partition_theta_lambda(
    mask: &SamplingMask,
    spec: &PartitionSpec,
    epoch: u64,
) -> Result<(SamplingMask, SamplingMask)> {
    if !(spec.lambda_fraction > 0.0 && spec.lambda_fraction < 1.0) {
        return Err(Error::invalid("lambda_fraction must be in (0, 1)"));
    }
    let t = mask.echo_count();
    let h = mask.ky_count();
    let sigma = spec.sigma.unwrap_or(h as f64 / 6.0);
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be > 0"));
    }
    let dc = h as f64 / 2.0;
    let acs = mask.acs_lines().to_vec();

    let mut rng = epoch_rng(spec.seed, epoch.wrapping_add(1));
    let mut theta = Array2::from_elem((t, h), false);
    let mut lambda = Array2::from_elem((t, h), false);

    for tt in 0..t {
        let lines = mask.echo_lines(tt);
        let non_acs: Vec<usize> = lines.iter().copied().filter(|ky| !acs.contains(ky)).collect();
        if non_acs.len() < 2 {
            return Err(Error::DegeneratePartition(format!(
                "echo {tt} has {} non-ACS lines; need at least 2",
                non_acs.len()
            )));
        }
        let n = non_acs.len();
        let n_lambda = ((spec.lambda_fraction * n as f64).floor() as usize).max(1);

        let mut weights: Vec<f64> = non_acs
            .iter()
            .map(|&ky| {
                let d = ky as f64 - dc;
                (-d * d / (2.0 * sigma * sigma)).exp().max(1e-300)
            })
            .collect();
        let mut pool = non_acs.clone();
        for _ in 0..n_lambda {
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen_range(0.0..total);
            let mut pick = pool.len() - 1;
            for (i, &w) in weights.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            lambda[(tt, pool[pick])] = true;
            pool.remove(pick);
            weights.remove(pick);
        }
        for &ky in &pool {
            theta[(tt, ky)] = true;
        }
        for &ky in &acs {
            theta[(tt, ky)] = true;
        }
    }

    Ok((
        SamplingMask::new(theta, acs)?,
        SamplingMask::new(lambda, vec![])?,
    ))
}

/// Normalized k-space loss `||u - v||_2 / ||u||_2 + ||u - v||_1 / ||u||_1`
/// over the entries selected by `lambda`, with a single global normalization.
pub fn ssdu_loss(
    measured: &EchoSeriesKSpace,
    predicted: &EchoSeriesKSpace,
    lambda: &SamplingMask,
) -> Result<f64> {
    Ok(ssdu_loss_grad(measured, predicted, lambda)?.0)
}

/// Loss together with its gradient with respect to the prediction. Gradient
/// entries hold the partial derivatives with respect to the real and imaginary
/// parts; positions outside lambda are zero.
pub fn ssdu_loss_grad(
    measured: &EchoSeriesKSpace,
    predicted: &EchoSeriesKSpace,
    lambda: &SamplingMask,
) -> Result<(f64, Array4<Cplx>)> {
    let dims = measured.data.dim();
    if predicted.data.dim() != dims {
        return Err(Error::shape("measured and predicted k-space differ in shape"));
    }
    let (t, w, h, c) = dims;
    if lambda.echo_count() != t || lambda.ky_count() != h {
        return Err(Error::shape("lambda mask does not match k-space"));
    }

    let mut l2_num = 0.0f64;
    let mut l2_den = 0.0f64;
    let mut l1_num = 0.0f64;
    let mut l1_den = 0.0f64;
    for tt in 0..t {
        for ky in 0..h {
            if !lambda.is_sampled(tt, ky) {
                continue;
            }
            for ww in 0..w {
                for cc in 0..c {
                    let u = measured.data[(tt, ww, ky, cc)];
                    let v = predicted.data[(tt, ww, ky, cc)];
                    let d = u - v;
                    l2_num += d.norm_sqr();
                    l2_den += u.norm_sqr();
                    l1_num += d.norm();
                    l1_den += u.norm();
                }
            }
        }
    }
    if l2_den == 0.0 || l1_den == 0.0 {
        return Err(Error::UndefinedLoss(
            "measured data on lambda is identically zero".into(),
        ));
    }
    let l2_num = l2_num.sqrt();
    let l2_den = l2_den.sqrt();
    let loss = l2_num / l2_den + l1_num / l1_den;

    let mut grad = Array4::zeros(dims);
    for tt in 0..t {
        for ky in 0..h {
            if !lambda.is_sampled(tt, ky) {
                continue;
            }
            for ww in 0..w {
                for cc in 0..c {
                    let u = measured.data[(tt, ww, ky, cc)];
                    let v = predicted.data[(tt, ww, ky, cc)];
                    let d = v - u;
                    let mut g = Cplx::new(0.0, 0.0);
                    if l2_num > 0.0 {
                        g += d / (l2_num * l2_den);
                    }
                    let m = d.norm();
                    if m > 0.0 {
                        g += d / (m * l1_den);
                    }
                    grad[(tt, ww, ky, cc)] = g;
                }
            }
        }
    }
    Ok((loss, grad))
}
