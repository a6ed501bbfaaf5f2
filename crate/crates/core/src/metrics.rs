//! Image-quality metrics over echo-image magnitudes and dictionary-matching T2
//! estimation.

use crate::error::{Error, Result};
use crate::linops::EchoImages;
use crate::signal_model::Dictionary;
use ndarray::{Array2, Axis};
use rayon::prelude::*;

/// Quality summary of one reconstruction against ground truth.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub nmse_i_percent: f64,
    pub ssim_i: f64,
    pub nmse_t2_percent: Option<f64>,
    pub per_echo_nmse_percent: Vec<f64>,
    pub per_echo_ssim: Vec<f64>,
    pub config_digest: Option<String>,
}

/// `100 * || |est| - |ref| ||_F^2 / || |ref| ||_F^2` over all echoes jointly.
pub fn nmse(est: &EchoImages, reference: &EchoImages) -> Result<f64> {
    if est.data.dim() != reference.data.dim() {
        return Err(Error::shape("echo series differ in shape"));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (e, r) in est.data.iter().zip(reference.data.iter()) {
        let d = e.norm() - r.norm();
        num += d * d;
        den += r.norm_sqr();
    }
    if den == 0.0 {
        return Err(Error::invalid("reference is identically zero"));
    }
    Ok(100.0 * num / den)
}

/// Per-echo NMSE percentages (each echo normalized by its own reference).
pub fn nmse_per_echo(est: &EchoImages, reference: &EchoImages) -> Result<Vec<f64>> {
    if est.data.dim() != reference.data.dim() {
        return Err(Error::shape("echo series differ in shape"));
    }
    let t = est.data.dim().0;
    (0..t)
        .map(|tt| {
            let e = est.data.index_axis(Axis(0), tt);
            let r = reference.data.index_axis(Axis(0), tt);
            let mut num = 0.0;
            let mut den = 0.0;
            for (a, b) in e.iter().zip(r.iter()) {
                let d = a.norm() - b.norm();
                num += d * d;
                den += b.norm_sqr();
            }
            if den == 0.0 {
                return Err(Error::invalid(format!("echo {tt} reference is zero")));
            }
            Ok(100.0 * num / den)
        })
        .collect()
}

/// `100 * ||est - ref||^2 / ||ref||^2` over masked pixels of real maps.
pub fn nmse_map(est: &Array2<f64>, reference: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    if est.dim() != reference.dim() || est.dim() != mask.dim() {
        return Err(Error::shape("map shapes differ"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((e, r), &m) in est.iter().zip(reference.iter()).zip(mask.iter()) {
        if m {
            num += (e - r) * (e - r);
            den += r * r;
        }
    }
    if den == 0.0 {
        return Err(Error::invalid("reference map is zero on the mask"));
    }
    Ok(100.0 * num / den)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Structural similarity between two magnitude images.
///
/// Gaussian window (sigma 1.5) of size 11, shrunk to the image when the image
/// is smaller; K1 = 0.01, K2 = 0.03; dynamic range is the reference maximum;
/// mean over pixels where the window fits entirely.
pub fn ssim(est_mag: &Array2<f64>, ref_mag: &Array2<f64>) -> Result<f64> {
    if est_mag.dim() != ref_mag.dim() {
        return Err(Error::shape("images differ in shape"));
    }
    let (w, h) = ref_mag.dim();
    let dynamic_range = ref_mag.iter().cloned().fold(0.0f64, f64::max);
    if dynamic_range == 0.0 {
        return Err(Error::invalid("reference image is identically zero"));
    }
    let mut win = 11usize.min(w).min(h);
    if win % 2 == 0 {
        win -= 1;
    }
    if win < 3 {
        return Err(Error::shape("image too small for ssim"));
    }
    let g = gaussian_window(win, 1.5);
    let half = win / 2;
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);

    let mut acc = 0.0f64;
    let mut count = 0usize;
    for cx in half..w - half {
        for cy in half..h - half {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for i in 0..win {
                for j in 0..win {
                    let wgt = g[i] * g[j];
                    let a = est_mag[(cx + i - half, cy + j - half)];
                    let b = ref_mag[(cx + i - half, cy + j - half)];
                    mu_x += wgt * a;
                    mu_y += wgt * b;
                    xx += wgt * a * a;
                    yy += wgt * b * b;
                    xy += wgt * a * b;
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            let s = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Mean SSIM over the echo series (per-echo magnitudes).
pub fn ssim_series(est: &EchoImages, reference: &EchoImages) -> Result<f64> {
    let per = ssim_per_echo(est, reference)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// SSIM per echo.
pub fn ssim_per_echo(est: &EchoImages, reference: &EchoImages) -> Result<Vec<f64>> {
    if est.data.dim() != reference.data.dim() {
        return Err(Error::shape("echo series differ in shape"));
    }
    let t = est.data.dim().0;
    (0..t)
        .map(|tt| {
            let e = est.data.index_axis(Axis(0), tt).mapv(|v| v.norm());
            let r = reference.data.index_axis(Axis(0), tt).mapv(|v| v.norm());
            ssim(&e, &r)
        })
        .collect()
}

/// Dictionary-matching T2 estimation: per support pixel, the T2 of the atom
/// maximizing the normalized real inner product between the magnitude echo
/// series and the atom magnitudes. Off-support pixels are 0.
pub fn fit_t2_map(
    x: &EchoImages,
    dict: &Dictionary,
    support: &Array2<bool>,
) -> Result<Array2<f64>> {
    let (t, w, h) = x.data.dim();
    if dict.atom_count() == 0 {
        return Err(Error::invalid("empty dictionary"));
    }
    if dict.echo_count() != t {
        return Err(Error::shape("dictionary echo count does not match images"));
    }
    if support.dim() != (w, h) {
        return Err(Error::shape("support mask does not match images"));
    }

    // Precompute normalized atom magnitudes.
    let n = dict.atom_count();
    let mut atoms = Array2::<f64>::zeros((n, t));
    for j in 0..n {
        let mut norm = 0.0;
        for tt in 0..t {
            let m = dict.atoms[(tt, j)].norm();
            atoms[(j, tt)] = m;
            norm += m * m;
        }
        let norm = norm.sqrt().max(1e-300);
        for tt in 0..t {
            atoms[(j, tt)] /= norm;
        }
    }

    let rows: Vec<Vec<f64>> = (0..w)
        .into_par_iter()
        .map(|ww| {
            let mut row = vec![0.0f64; h];
            let mut mags = vec![0.0f64; t];
            for hh in 0..h {
                if !support[(ww, hh)] {
                    continue;
                }
                let mut norm = 0.0;
                for tt in 0..t {
                    let m = x.data[(tt, ww, hh)].norm();
                    mags[tt] = m;
                    norm += m * m;
                }
                if norm == 0.0 {
                    continue;
                }
                let norm = norm.sqrt();
                let mut best = (0usize, f64::NEG_INFINITY);
                for j in 0..n {
                    let mut corr = 0.0;
                    for tt in 0..t {
                        corr += mags[tt] * atoms[(j, tt)];
                    }
                    corr /= norm;
                    if corr > best.1 {
                        best = (j, corr);
                    }
                }
                row[hh] = dict.t2_grid_ms[best.0];
            }
            row
        })
        .collect();

    let mut out = Array2::zeros((w, h));
    for (ww, row) in rows.into_iter().enumerate() {
        for (hh, v) in row.into_iter().enumerate() {
            out[(ww, hh)] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_model::{build_dictionary, SequenceParams};
    use crate::Cplx;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn series(data: Array3<Cplx>) -> EchoImages {
        EchoImages { data }
    }

    #[test]
    fn nmse_trivial_values() {
        let reference = series(Array3::from_shape_fn((2, 4, 4), |(t, w, h)| {
            Cplx::new(1.0 + (t + w + h) as f64, 0.0)
        }));
        assert_eq!(nmse(&reference, &reference).unwrap(), 0.0);
        let zero = series(Array3::zeros((2, 4, 4)));
        assert!((nmse(&zero, &reference).unwrap() - 100.0).abs() < 1e-12);
        let double = series(reference.data.mapv(|v| v * 2.0));
        assert!((nmse(&double, &reference).unwrap() - 100.0).abs() < 1e-12);
        assert!(nmse(&reference, &zero).is_err());
    }

    #[test]
    fn nmse_scale_law() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let reference = series(Array3::from_shape_fn((3, 6, 6), |_| {
            Cplx::new(r.gen_range(0.1..2.0), r.gen_range(-1.0..1.0))
        }));
        for c in [0.0f64, 0.5, 1.0, 1.7, 3.0] {
            let scaled = series(reference.data.mapv(|v| v * c));
            let expect = 100.0 * (c - 1.0) * (c - 1.0);
            let got = nmse(&scaled, &reference).unwrap();
            assert!((got - expect).abs() < 1e-9, "c={c}: {got} vs {expect}");
        }
    }

    #[test]
    fn ssim_self_is_one() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let img = Array2::from_shape_fn((16, 16), |_| r.gen_range(0.0..2.0));
        let s = ssim(&img, &img).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_degrades_with_noise() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let img = Array2::from_shape_fn((24, 24), |(w, h)| {
            1.0 + ((w as f64) / 5.0).sin() * ((h as f64) / 4.0).cos()
        });
        let small = img.mapv(|v| v + 0.01 * r.gen_range(-1.0..1.0));
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let large = img.mapv(|v| v + 0.3 * r2.gen_range(-1.0..1.0));
        let s_small = ssim(&small, &img).unwrap();
        let s_large = ssim(&large, &img).unwrap();
        assert!(s_large < s_small, "{s_large} !< {s_small}");
    }

    #[test]
    fn ssim_matches_direct_scalar_formula_on_toy_images() {
        // Independent direct evaluation of the windowed scalar formula on an
        // 8x8 pair (effective window 7).
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a = Array2::from_shape_fn((8, 8), |_| r.gen_range(0.0..1.0));
        let b = Array2::from_shape_fn((8, 8), |_| r.gen_range(0.0..1.0));
        let got = ssim(&a, &b).unwrap();

        // Oracle: nested loops, textbook formula.
        let win = 7usize;
        let half = 3usize;
        let sigma = 1.5f64;
        let mut g = vec![0.0f64; win];
        let mut sum = 0.0;
        for (i, v) in g.iter_mut().enumerate() {
            *v = (-((i as f64 - 3.0).powi(2)) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
        for v in g.iter_mut() {
            *v /= sum;
        }
        let l = b.iter().cloned().fold(0.0f64, f64::max);
        let c1 = (0.01 * l).powi(2);
        let c2 = (0.03 * l).powi(2);
        let mut acc = 0.0;
        let mut cnt = 0;
        for cx in half..8 - half {
            for cy in half..8 - half {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                let mut sxy = 0.0;
                for i in 0..win {
                    for j in 0..win {
                        let wgt = g[i] * g[j];
                        let x = a[(cx + i - half, cy + j - half)];
                        let y = b[(cx + i - half, cy + j - half)];
                        mx += wgt * x;
                        my += wgt * y;
                        sxx += wgt * x * x;
                        syy += wgt * y * y;
                        sxy += wgt * x * y;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                cnt += 1;
            }
        }
        let expect = acc / cnt as f64;
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn ssim_rejects_zero_reference() {
        let img = Array2::from_elem((8, 8), 0.5);
        let zero = Array2::zeros((8, 8));
        assert!(ssim(&img, &zero).is_err());
    }

    #[test]
    fn t2_fit_exact_atom_recovery() {
        let seq = SequenceParams::new(16, 8.0, 160.0);
        let grid: Vec<f64> = vec![40.0, 70.0, 110.0, 200.0, 320.0];
        let dict = build_dictionary(&seq, &grid, 1000.0).unwrap();
        let (w, h) = (6, 6);
        let mut data = Array3::zeros((16, w, h));
        let truth = 110.0;
        let atom_idx = 2;
        for ww in 0..w {
            for hh in 0..h {
                let pd = 0.5 + 0.1 * ww as f64;
                for tt in 0..16 {
                    data[(tt, ww, hh)] = dict.atoms[(tt, atom_idx)] * pd;
                }
            }
        }
        let support = Array2::from_elem((w, h), true);
        let fit = fit_t2_map(&series(data), &dict, &support).unwrap();
        for v in fit.iter() {
            assert_eq!(*v, truth);
        }
    }

    #[test]
    fn t2_fit_excludes_off_support_and_zero_pixels() {
        let seq = SequenceParams::new(8, 8.0, 160.0);
        let dict = build_dictionary(&seq, &[50.0, 100.0], 1000.0).unwrap();
        let mut support = Array2::from_elem((4, 4), true);
        support[(0, 0)] = false;
        let mut data = Array3::zeros((8, 4, 4));
        for tt in 0..8 {
            data[(tt, 1, 1)] = dict.atoms[(tt, 1)];
        }
        let fit = fit_t2_map(&series(data), &dict, &support).unwrap();
        assert_eq!(fit[(0, 0)], 0.0);
        assert_eq!(fit[(2, 2)], 0.0); // zero signal pixel stays 0
        assert_eq!(fit[(1, 1)], 100.0);
    }

    #[test]
    fn t2_fit_invariant_to_pixel_scaling() {
        let seq = SequenceParams::new(12, 8.0, 160.0);
        let dict = build_dictionary(&seq, &[40.0, 80.0, 160.0, 320.0], 1000.0).unwrap();
        let (w, h) = (4, 4);
        let mut data = Array3::zeros((12, w, h));
        for ww in 0..w {
            for hh in 0..h {
                let idx = (ww + hh) % 4;
                for tt in 0..12 {
                    data[(tt, ww, hh)] = dict.atoms[(tt, idx)];
                }
            }
        }
        let support = Array2::from_elem((w, h), true);
        let base = fit_t2_map(&series(data.clone()), &dict, &support).unwrap();
        let scaled_data = Array3::from_shape_fn((12, w, h), |(t, ww, hh)| {
            data[(t, ww, hh)] * (1.0 + 3.0 * (ww as f64 + 0.5))
        });
        let scaled = fit_t2_map(&series(scaled_data), &dict, &support).unwrap();
        assert_eq!(base, scaled);
    }

    #[test]
    fn nmse_map_over_support() {
        let est = Array2::from_elem((4, 4), 110.0);
        let mut reference = Array2::from_elem((4, 4), 100.0);
        reference[(0, 0)] = 0.0;
        let mut mask = Array2::from_elem((4, 4), true);
        mask[(0, 0)] = false;
        let v = nmse_map(&est, &reference, &mask).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }
}
