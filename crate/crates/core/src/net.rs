//! Small convolutional residual network with from-scratch forward, exact
//! manual backpropagation, and Adam. Used as the learned regularizer over
//! coefficient maps and over sensitivity maps.
//!
//! Complex inputs are mapped to interleaved real/imaginary channel pairs at the
//! boundary. The network is `y = x + conv1x1(blocks(conv3x3(x_real)))` where
//! each residual block is `f + conv3x3(relu(conv3x3(f)))`; the final 1x1
//! convolution is zero-initialized so a freshly initialized network is exactly
//! the identity map. Convolutions are evaluated as im2col + GEMM.

use crate::error::{Error, Result};
use crate::Cplx;
use ndarray::{Array2, Array3};
use std::collections::HashMap;
use rand::SeedableRng;
use rand_distr::Distribution;
use rayon::prelude::*;

/// Architecture of the regularizer network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetArch {
    /// Real input channels (twice the complex channel count).
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub residual_blocks: usize,
}

impl NetArch {
    pub fn new(in_channels: usize, hidden_channels: usize, residual_blocks: usize) -> Self {
        Self {
            in_channels,
            hidden_channels,
            residual_blocks,
        }
    }

    /// Default regularizer backbone for `ch` complex channels.
    pub fn for_complex_channels(ch: usize) -> Self {
        Self::new(2 * ch, 48, 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_channels % 2 != 0 {
            return Err(Error::invalid("in_channels must be even and non-zero"));
        }
        if self.hidden_channels == 0 {
            return Err(Error::invalid("hidden_channels must be non-zero"));
        }
        if self.residual_blocks == 0 {
            return Err(Error::invalid("residual_blocks must be >= 1"));
        }
        Ok(())
    }

    /// Convolution layers in order: 3x3 in->hidden, per block two 3x3
    /// hidden->hidden, then 1x1 hidden->in.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut offset = 0usize;
        let push = |cout: usize, cin: usize, k: usize, offset: &mut usize| {
            let w_len = cout * cin * k * k;
            let spec = LayerSpec {
                cout,
                cin,
                ksize: k,
                w_offset: *offset,
                b_offset: *offset + w_len,
            };
            *offset += w_len + cout;
            spec
        };
        specs.push(push(self.hidden_channels, self.in_channels, 3, &mut offset));
        for _ in 0..self.residual_blocks {
            specs.push(push(self.hidden_channels, self.hidden_channels, 3, &mut offset));
            specs.push(push(self.hidden_channels, self.hidden_channels, 3, &mut offset));
        }
        specs.push(push(self.in_channels, self.hidden_channels, 1, &mut offset));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.cout * l.cin * l.ksize * l.ksize + l.cout)
            .sum()
    }
}

/// Shape-table entry for one convolution.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub cout: usize,
    pub cin: usize,
    pub ksize: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

/// Flat parameter vector plus its architecture and init seed.
#[derive(Debug, Clone)]
pub struct NetParams {
    pub data: Vec<f64>,
    pub arch: NetArch,
    pub seed: u64,
}

impl NetParams {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Kaiming fan-in initialization with zero biases; the final 1x1 convolution
/// is zeroed so the initial network is the identity map.
pub fn init_params(arch: &NetArch, seed: u64) -> Result<NetParams> {
    arch.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let layers = arch.layers();
    let mut data = vec![0.0f64; arch.param_count()];
    let normal = rand_distr::StandardNormal;
    for (idx, layer) in layers.iter().enumerate() {
        let is_last = idx == layers.len() - 1;
        let fan_in = (layer.cin * layer.ksize * layer.ksize) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w_len = layer.cout * layer.cin * layer.ksize * layer.ksize;
        for i in 0..w_len {
            let g: f64 = normal.sample(&mut rng);
            data[layer.w_offset + i] = if is_last { 0.0 } else { g * std };
        }
        // Biases stay zero.
    }
    Ok(NetParams {
        data,
        arch: *arch,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Convolution kernels (im2col + GEMM)
// ---------------------------------------------------------------------------

const GEMM_COL_CHUNK: usize = 1024;

// Large im2col scratch buffers are recycled per thread; fresh multi-megabyte
// allocations would otherwise dominate the convolution cost.
thread_local! {
    static SCRATCH: std::cell::RefCell<HashMap<(u8, usize, usize), Array2<f64>>> =
        std::cell::RefCell::new(HashMap::new());
}

fn take_scratch(id: u8, rows: usize, cols: usize) -> Array2<f64> {
    SCRATCH.with(|pool| {
        pool.borrow_mut()
            .remove(&(id, rows, cols))
            .unwrap_or_else(|| Array2::zeros((rows, cols)))
    })
}

fn put_scratch(id: u8, buf: Array2<f64>) {
    let key = (id, buf.nrows(), buf.ncols());
    SCRATCH.with(|pool| {
        pool.borrow_mut().insert(key, buf);
    });
}

fn gemm_into(a: &ndarray::ArrayView2<f64>, b: &ndarray::ArrayView2<f64>, c: &mut Array2<f64>) {
    let n = b.ncols();
    if n <= GEMM_COL_CHUNK {
        ndarray::linalg::general_mat_mul(1.0, a, b, 0.0, c);
        return;
    }
    let b_chunks: Vec<_> = b.axis_chunks_iter(ndarray::Axis(1), GEMM_COL_CHUNK).collect();
    let c_chunks: Vec<_> = c
        .axis_chunks_iter_mut(ndarray::Axis(1), GEMM_COL_CHUNK)
        .collect();
    b_chunks
        .into_par_iter()
        .zip(c_chunks)
        .for_each(|(bc, mut cc)| {
            ndarray::linalg::general_mat_mul(1.0, a, &bc, 0.0, &mut cc);
        });
}

fn im2col_3x3(x: &Array3<f64>, cols: &mut Array2<f64>) {
    let (cin, w, h) = x.dim();
    debug_assert_eq!(cols.dim(), (cin * 9, w * h));
    let xs = x.as_slice().expect("contiguous activations");
    let col_rows: Vec<_> = cols.axis_chunks_iter_mut(ndarray::Axis(0), 9).collect();
    (0..cin)
        .into_par_iter()
        .zip(col_rows)
        .for_each(|(ci, mut rows)| {
            let plane = &xs[ci * w * h..(ci + 1) * w * h];
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let mut row = rows.row_mut(dy * 3 + dx);
                    let row = row.as_slice_mut().expect("contiguous col row");
                    for ww in 0..w {
                        let dst = &mut row[ww * h..(ww + 1) * h];
                        let sw = ww as isize + dy as isize - 1;
                        if sw < 0 || sw >= w as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[sw as usize * h..(sw as usize + 1) * h];
                        // Shift along h by dx - 1 with zero edges.
                        match dx {
                            0 => {
                                dst[0] = 0.0;
                                dst[1..].copy_from_slice(&src[..h - 1]);
                            }
                            1 => dst.copy_from_slice(src),
                            _ => {
                                dst[..h - 1].copy_from_slice(&src[1..]);
                                dst[h - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        });
}

fn col2im_3x3(cols: &Array2<f64>, out: &mut Array3<f64>) {
    let (cin, w, h) = out.dim();
    debug_assert_eq!(cols.dim(), (cin * 9, w * h));
    let cs = cols.as_slice().expect("contiguous cols");
    let out_planes: Vec<_> = out.axis_iter_mut(ndarray::Axis(0)).collect();
    (0..cin)
        .into_par_iter()
        .zip(out_planes)
        .for_each(|(ci, mut plane)| {
            plane.fill(0.0);
            let plane = plane.as_slice_mut().expect("contiguous plane");
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let row = &cs[(ci * 9 + dy * 3 + dx) * w * h..(ci * 9 + dy * 3 + dx + 1) * w * h];
                    for ww in 0..w {
                        let sw = ww as isize + dy as isize - 1;
                        if sw < 0 || sw >= w as isize {
                            continue;
                        }
                        let dst = &mut plane[sw as usize * h..(sw as usize + 1) * h];
                        let src = &row[ww * h..(ww + 1) * h];
                        match dx {
                            0 => {
                                for i in 0..h - 1 {
                                    dst[i] += src[i + 1];
                                }
                            }
                            1 => {
                                for i in 0..h {
                                    dst[i] += src[i];
                                }
                            }
                            _ => {
                                for i in 0..h - 1 {
                                    dst[i + 1] += src[i];
                                }
                            }
                        }
                    }
                }
            }
        });
}

struct ConvLayer<'a> {
    spec: LayerSpec,
    weights: Array2<f64>,
    bias: &'a [f64],
}

impl<'a> ConvLayer<'a> {
    fn from_params(params: &'a NetParams, spec: LayerSpec) -> Self {
        let w_len = spec.cout * spec.cin * spec.ksize * spec.ksize;
        let weights = Array2::from_shape_vec(
            (spec.cout, spec.cin * spec.ksize * spec.ksize),
            params.data[spec.w_offset..spec.w_offset + w_len].to_vec(),
        )
        .expect("weight reshape");
        let bias = &params.data[spec.b_offset..spec.b_offset + spec.cout];
        Self {
            spec,
            weights,
            bias,
        }
    }

    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (cin, w, h) = x.dim();
        debug_assert_eq!(cin, self.spec.cin);
        let mut out_mat = Array2::<f64>::zeros((self.spec.cout, w * h));
        if self.spec.ksize == 1 {
            let x_mat = x
                .view()
                .into_shape_with_order((cin, w * h))
                .expect("flatten input");
            gemm_into(&self.weights.view(), &x_mat, &mut out_mat);
        } else {
            let mut cols = take_scratch(0, cin * 9, w * h);
            im2col_3x3(x, &mut cols);
            gemm_into(&self.weights.view(), &cols.view(), &mut out_mat);
            put_scratch(0, cols);
        }
        for (o, &b) in self.bias.iter().enumerate() {
            if b != 0.0 {
                out_mat.row_mut(o).mapv_inplace(|v| v + b);
            }
        }
        out_mat
            .into_shape_with_order((self.spec.cout, w, h))
            .expect("reshape output")
    }

    /// Returns `grad_input`; accumulates weight/bias gradients into `grad_params`.
    fn backward(&self, x: &Array3<f64>, grad_out: &Array3<f64>, grad_params: &mut [f64]) -> Array3<f64> {
        let (cin, w, h) = x.dim();
        let go_mat = grad_out
            .view()
            .into_shape_with_order((self.spec.cout, w * h))
            .expect("flatten grad");

        // Bias gradient.
        for o in 0..self.spec.cout {
            grad_params[self.spec.b_offset + o] += go_mat.row(o).sum();
        }

        // The transposed gradient factor stays a strided view; the GEMM packs
        // it tile-wise, which beats materializing the transpose.
        let go_t = go_mat.t();
        let w_t = self.weights.t().as_standard_layout().into_owned();

        if self.spec.ksize == 1 {
            let x_mat = x
                .view()
                .into_shape_with_order((cin, w * h))
                .expect("flatten input");
            // grad_w^T = x . grad_out^T
            let mut gw_t = Array2::<f64>::zeros((cin, self.spec.cout));
            ndarray::linalg::general_mat_mul(1.0, &x_mat, &go_t, 0.0, &mut gw_t);
            for o in 0..self.spec.cout {
                for i in 0..cin {
                    grad_params[self.spec.w_offset + o * cin + i] += gw_t[(i, o)];
                }
            }
            // grad_in = W^T . grad_out
            let mut gi = Array2::<f64>::zeros((cin, w * h));
            gemm_into(&w_t.view(), &go_mat, &mut gi);
            gi.into_shape_with_order((cin, w, h)).expect("reshape")
        } else {
            let mut cols = take_scratch(0, cin * 9, w * h);
            im2col_3x3(x, &mut cols);
            // grad_w^T = cols . grad_out^T, split once over col rows.
            let mut gw_t = Array2::<f64>::zeros((cin * 9, self.spec.cout));
            {
                let rows = cin * 9;
                let chunk = rows.div_ceil(2).max(9);
                let a_chunks: Vec<_> = cols.axis_chunks_iter(ndarray::Axis(0), chunk).collect();
                let c_chunks: Vec<_> = gw_t.axis_chunks_iter_mut(ndarray::Axis(0), chunk).collect();
                a_chunks
                    .into_par_iter()
                    .zip(c_chunks)
                    .for_each(|(ac, mut cc)| {
                        ndarray::linalg::general_mat_mul(1.0, &ac, &go_t, 0.0, &mut cc);
                    });
            }
            put_scratch(0, cols);
            let k2 = cin * 9;
            for o in 0..self.spec.cout {
                for i in 0..k2 {
                    grad_params[self.spec.w_offset + o * k2 + i] += gw_t[(i, o)];
                }
            }
            let mut gcols = take_scratch(1, cin * 9, w * h);
            gemm_into(&w_t.view(), &go_mat, &mut gcols);
            let mut gi = Array3::<f64>::zeros((cin, w, h));
            col2im_3x3(&gcols, &mut gi);
            put_scratch(1, gcols);
            gi
        }
    }
}

/// Saved activations of one forward pass, needed for the exact backward pass.
pub struct NetCache {
    /// Real-channel input.
    input: Array3<f64>,
    /// Input to each 3x3/1x1 convolution, in layer order.
    conv_inputs: Vec<Array3<f64>>,
    /// Output of each ReLU (doubles as its gradient mask).
    relu_outputs: Vec<Array3<f64>>,
    shape: (usize, usize, usize),
}

fn complex_to_real(x: &Array3<Cplx>) -> Array3<f64> {
    let (ch, w, h) = x.dim();
    let mut out = Array3::zeros((2 * ch, w, h));
    for c in 0..ch {
        for ww in 0..w {
            for hh in 0..h {
                let v = x[(c, ww, hh)];
                out[(2 * c, ww, hh)] = v.re;
                out[(2 * c + 1, ww, hh)] = v.im;
            }
        }
    }
    out
}

fn real_to_complex(x: &Array3<f64>) -> Array3<Cplx> {
    let (ch2, w, h) = x.dim();
    let ch = ch2 / 2;
    let mut out = Array3::zeros((ch, w, h));
    for c in 0..ch {
        for ww in 0..w {
            for hh in 0..h {
                out[(c, ww, hh)] = Cplx::new(x[(2 * c, ww, hh)], x[(2 * c + 1, ww, hh)]);
            }
        }
    }
    out
}

fn forward_real(params: &NetParams, x: &Array3<f64>, want_cache: bool) -> (Array3<f64>, Option<NetCache>) {
    let arch = &params.arch;
    let layers = arch.layers();
    let mut conv_inputs = Vec::new();
    let mut relu_outputs = Vec::new();

    let mut li = 0;
    let conv_in = ConvLayer::from_params(params, layers[li]);
    li += 1;
    if want_cache {
        conv_inputs.push(x.clone());
    }
    let mut f = conv_in.forward(x);

    for _ in 0..arch.residual_blocks {
        let conv_a = ConvLayer::from_params(params, layers[li]);
        let conv_b = ConvLayer::from_params(params, layers[li + 1]);
        li += 2;
        if want_cache {
            conv_inputs.push(f.clone());
        }
        let mut u = conv_a.forward(&f);
        u.mapv_inplace(|v| v.max(0.0));
        let v = conv_b.forward(&u);
        if want_cache {
            // Doubles as conv_b's input and the ReLU gradient mask.
            relu_outputs.push(u);
        }
        f += &v;
    }

    let conv_out = ConvLayer::from_params(params, layers[li]);
    if want_cache {
        conv_inputs.push(f.clone());
    }
    let delta = conv_out.forward(&f);
    let mut y = x.clone();
    y += &delta;

    let cache = if want_cache {
        Some(NetCache {
            input: x.clone(),
            conv_inputs,
            relu_outputs,
            shape: x.dim(),
        })
    } else {
        None
    };
    (y, cache)
}

/// Apply the network to complex channel maps.
pub fn net_forward(params: &NetParams, x: &Array3<Cplx>) -> Result<Array3<Cplx>> {
    let (ch, _, _) = x.dim();
    if 2 * ch != params.arch.in_channels {
        return Err(Error::shape(format!(
            "network expects {} complex channels, got {ch}",
            params.arch.in_channels / 2
        )));
    }
    let (y, _) = forward_real(params, &complex_to_real(x), false);
    Ok(real_to_complex(&y))
}

/// Apply the network and keep the activations needed for [`net_backward`].
pub fn net_forward_cached(params: &NetParams, x: &Array3<Cplx>) -> Result<(Array3<Cplx>, NetCache)> {
    let (ch, _, _) = x.dim();
    if 2 * ch != params.arch.in_channels {
        return Err(Error::shape(format!(
            "network expects {} complex channels, got {ch}",
            params.arch.in_channels / 2
        )));
    }
    let (y, cache) = forward_real(params, &complex_to_real(x), true);
    Ok((real_to_complex(&y), cache.expect("cache requested")))
}

/// Exact gradients of the forward map. `grad_out` carries the partial
/// derivatives of the training loss with respect to the real and imaginary
/// parts of the output; gradients with respect to the input arrive in the same
/// convention.
pub fn net_backward(
    params: &NetParams,
    cache: &NetCache,
    grad_out: &Array3<Cplx>,
) -> Result<(Vec<f64>, Array3<Cplx>)> {
    let arch = &params.arch;
    let layers = arch.layers();
    let g = complex_to_real(grad_out);
    if g.dim() != cache.shape {
        return Err(Error::shape("grad_out does not match cached forward shape"));
    }

    let mut grad_params = vec![0.0f64; params.data.len()];

    // Global residual: y = x + conv_out(f_n).
    let conv_out = ConvLayer::from_params(params, layers[layers.len() - 1]);
    let f_last = cache
        .conv_inputs
        .last()
        .ok_or_else(|| Error::invalid("stale cache"))?;
    let mut grad_f = conv_out.backward(f_last, &g, &mut grad_params);

    for b in (0..arch.residual_blocks).rev() {
        let conv_a = ConvLayer::from_params(params, layers[1 + 2 * b]);
        let conv_b = ConvLayer::from_params(params, layers[2 + 2 * b]);
        let block_in = &cache.conv_inputs[1 + b];
        let relu_out = &cache.relu_outputs[b];
        // f_out = f_in + conv_b(relu(conv_a(f_in)))
        let grad_v = &grad_f;
        let mut grad_u = conv_b.backward(relu_out, grad_v, &mut grad_params);
        // ReLU mask from its output.
        ndarray::Zip::from(&mut grad_u)
            .and(relu_out)
            .for_each(|gv, &u| {
                if u <= 0.0 {
                    *gv = 0.0;
                }
            });
        let grad_path = conv_a.backward(block_in, &grad_u, &mut grad_params);
        grad_f += &grad_path;
    }

    let conv_in = ConvLayer::from_params(params, layers[0]);
    let grad_x_path = conv_in.backward(&cache.input, &grad_f, &mut grad_params);
    let mut grad_x = g;
    grad_x += &grad_x_path;

    Ok((grad_params, real_to_complex(&grad_x)))
}

/// Adam optimizer state paired with one parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_len: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Fails on non-finite gradients.
pub fn adam_step(params: &mut NetParams, grads: &[f64], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.data.len() || grads.len() != state.m.len() {
        return Err(Error::shape("gradient length does not match parameters"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("non-finite gradient in adam_step"));
    }
    state.step += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..grads.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.data[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
