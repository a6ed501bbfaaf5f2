//! Synthetic brain-like phantoms, smooth coil maps, and multi-echo k-space
//! simulation, so every reconstruction stage is testable without scanner data.

use crate::error::{Error, Result};
use crate::linops::{fft2_plane, EchoImages, EchoSeriesKSpace, SamplingMask, SensMaps};
use crate::signal_model::{epg_simulate, SequenceParams, TissueParams};
use crate::Cplx;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_distr::Distribution;

/// Piecewise-smooth tissue maps on a rectangular grid.
#[derive(Debug, Clone)]
pub struct Phantom {
    /// T2 in milliseconds; 0 outside the support.
    pub t2_map: Array2<f64>,
    /// Proton density; 0 outside the support.
    pub pd_map: Array2<f64>,
    pub support: Array2<bool>,
}

/// Desk-scale simulated protocol: 32 echoes, 8 ms spacing, 160 degree train.
pub fn desk_sequence() -> SequenceParams {
    SequenceParams::new(32, 8.0, 160.0)
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Ellipse-based phantom with at least four tissue T2 classes plus a
/// fluid-like region, and smooth proton-density variation; deterministic per
/// seed.
pub fn make_phantom(w: usize, h: usize, seed: u64) -> Result<Phantom> {
    if w < 16 || h < 16 {
        return Err(Error::invalid("phantom grid must be at least 16x16"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| rng.gen_range(-scale..scale);

    let outer = Ellipse {
        cx: 0.5 + jitter(&mut rng, 0.02),
        cy: 0.5 + jitter(&mut rng, 0.02),
        rx: 0.42 + jitter(&mut rng, 0.02),
        ry: 0.46 + jitter(&mut rng, 0.02),
        angle: jitter(&mut rng, 0.1),
    };
    // White-matter-like interior.
    let wm = Ellipse {
        cx: outer.cx + jitter(&mut rng, 0.02),
        cy: outer.cy + jitter(&mut rng, 0.02),
        rx: outer.rx * 0.72,
        ry: outer.ry * 0.72,
        angle: outer.angle + jitter(&mut rng, 0.1),
    };
    // Fluid-filled ventricle pair.
    let vent_dx = 0.09 + jitter(&mut rng, 0.015);
    let vents = [
        Ellipse {
            cx: outer.cx - vent_dx,
            cy: outer.cy + jitter(&mut rng, 0.01),
            rx: 0.055 + jitter(&mut rng, 0.01),
            ry: 0.14 + jitter(&mut rng, 0.02),
            angle: 0.25 + jitter(&mut rng, 0.1),
        },
        Ellipse {
            cx: outer.cx + vent_dx,
            cy: outer.cy + jitter(&mut rng, 0.01),
            rx: 0.055 + jitter(&mut rng, 0.01),
            ry: 0.14 + jitter(&mut rng, 0.02),
            angle: -0.25 + jitter(&mut rng, 0.1),
        },
    ];
    // Focal lesions with long T2.
    let mut lesions = Vec::new();
    for _ in 0..3 {
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let rad = rng.gen_range(0.12..0.26);
        lesions.push(Ellipse {
            cx: outer.cx + rad * ang.cos(),
            cy: outer.cy + rad * ang.sin() * 1.1,
            rx: rng.gen_range(0.03..0.07),
            ry: rng.gen_range(0.03..0.07),
            angle: rng.gen_range(0.0..1.5),
        });
    }
    let lesion_t2 = [110.0, 250.0, 110.0];

    // Smooth proton-density modulation.
    let (ax, ay) = (jitter(&mut rng, 3.0), jitter(&mut rng, 3.0));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut t2_map = Array2::zeros((w, h));
    let mut pd_map = Array2::zeros((w, h));
    let mut support = Array2::from_elem((w, h), false);
    for ww in 0..w {
        for hh in 0..h {
            let x = (ww as f64 + 0.5) / w as f64;
            let y = (hh as f64 + 0.5) / h as f64;
            if !outer.contains(x, y) {
                continue;
            }
            support[(ww, hh)] = true;
            // Cortical gray-matter rim by default.
            let mut t2: f64 = 85.0;
            if wm.contains(x, y) {
                t2 = 60.0;
            }
            for (les, &lt2) in lesions.iter().zip(&lesion_t2) {
                if les.contains(x, y) {
                    t2 = lt2;
                }
            }
            if vents.iter().any(|v| v.contains(x, y)) {
                t2 = 300.0;
            }
            t2_map[(ww, hh)] = t2.clamp(5.0, 400.0);
            let ripple = 0.075 * ((ax * x + ay * y) * std::f64::consts::TAU + phase).sin();
            pd_map[(ww, hh)] = (0.925 + ripple).clamp(0.0, 1.0);
        }
    }
    Ok(Phantom {
        t2_map,
        pd_map,
        support,
    })
}

/// Smooth complex coil maps: circular-coil magnitude falloff times a low-order
/// polynomial phase, normalized to unit root-sum-of-squares.
pub fn make_sens_maps(c: usize, w: usize, h: usize, seed: u64) -> Result<SensMaps> {
    if c == 0 {
        return Err(Error::invalid("coil count must be >= 1"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xC011_5EED);
    let mut data = Array3::zeros((c, w, h));
    let phase_scale = if c == 1 { 0.0 } else { 1.0 };
    for cc in 0..c {
        let ring = 2.0 * std::f64::consts::PI * cc as f64 / c as f64
            + rng.gen_range(-0.2..0.2) * phase_scale;
        let coil_x = 0.5 + 0.75 * ring.cos();
        let coil_y = 0.5 + 0.75 * ring.sin();
        let falloff = rng.gen_range(0.55..0.75);
        let (p1, p2, p3) = (
            rng.gen_range(-1.2..1.2) * phase_scale,
            rng.gen_range(-1.2..1.2) * phase_scale,
            rng.gen_range(-0.8..0.8) * phase_scale,
        );
        for ww in 0..w {
            for hh in 0..h {
                let x = (ww as f64 + 0.5) / w as f64;
                let y = (hh as f64 + 0.5) / h as f64;
                let d2 = (x - coil_x).powi(2) + (y - coil_y).powi(2);
                let mag = 1.0 / (1.0 + d2 / (falloff * falloff));
                let phi = phase_scale * (p1 * x + p2 * y + p3 * x * y);
                data[(cc, ww, hh)] = Cplx::from_polar(mag, phi);
            }
        }
    }
    // Unit RSS at every pixel.
    for ww in 0..w {
        for hh in 0..h {
            let rss: f64 = (0..c).map(|cc| data[(cc, ww, hh)].norm_sqr()).sum::<f64>().sqrt();
            for cc in 0..c {
                data[(cc, ww, hh)] /= rss;
            }
        }
    }
    Ok(SensMaps { data })
}

/// Simulate fully sampled multi-echo k-space from a phantom.
///
/// Per pixel the echo train is the EPG signal of its (T2, T1) pair scaled by
/// proton density; k-space adds complex white Gaussian noise of standard
/// deviation `noise_sigma` per complex sample.
pub fn simulate_kspace(
    phantom: &Phantom,
    seq: &SequenceParams,
    t1_ms: f64,
    sens: &SensMaps,
    noise_sigma: f64,
    seed: u64,
) -> Result<(EchoSeriesKSpace, EchoImages)> {
    let (w, h) = phantom.t2_map.dim();
    let (c, ws, hs) = sens.data.dim();
    if (ws, hs) != (w, h) {
        return Err(Error::shape("sens maps do not match phantom grid"));
    }
    let t = seq.echo_count;

    // Unique T2 values share one EPG evaluation.
    let mut signals: std::collections::HashMap<u64, Vec<Cplx>> = std::collections::HashMap::new();
    for &t2 in phantom.t2_map.iter() {
        if t2 > 0.0 {
            signals
                .entry(t2.to_bits())
                .or_insert(epg_simulate(seq, &TissueParams::new(t2, t1_ms, 1.0))?);
        }
    }

    let mut images = Array3::zeros((t, w, h));
    for ww in 0..w {
        for hh in 0..h {
            if !phantom.support[(ww, hh)] {
                continue;
            }
            let pd = phantom.pd_map[(ww, hh)];
            let s = &signals[&phantom.t2_map[(ww, hh)].to_bits()];
            for tt in 0..t {
                images[(tt, ww, hh)] = s[tt] * pd;
            }
        }
    }
    let truth = EchoImages { data: images };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x0_5EED);
    let normal = rand_distr::Normal::new(0.0f64, noise_sigma / 2.0f64.sqrt()).map_err(|e| {
        Error::invalid(format!("bad noise sigma: {e}"))
    })?;
    let mut data = Array4::zeros((t, w, h, c));
    for tt in 0..t {
        let xt = truth.data.index_axis(Axis(0), tt);
        for cc in 0..c {
            let mut plane = &xt * &sens.data.index_axis(Axis(0), cc);
            fft2_plane(&mut plane, false);
            for ww in 0..w {
                for ky in 0..h {
                    let noise = if noise_sigma > 0.0 {
                        Cplx::new(normal.sample(&mut rng), normal.sample(&mut rng))
                    } else {
                        Cplx::new(0.0, 0.0)
                    };
                    data[(tt, ww, ky, cc)] = plane[(ww, ky)] + noise;
                }
            }
        }
    }
    Ok((
        EchoSeriesKSpace {
            data,
            mask: SamplingMask::full(t, h),
        },
        truth,
    ))
}
