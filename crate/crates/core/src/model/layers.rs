//! Channel-last tensor layers with explicit forward caches and backward passes.
//!
//! Parameters live in one flat `f64` buffer owned by the backbone; each layer
//! stores offsets into it. Gradients are accumulated into a buffer of the same
//! layout.

use matrixmultiply::dgemm;

const GROUP_NORM_EPS: f64 = 1e-5;

/// Dense `(h, w, c)` activation, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), h * w * c);
        Self { h, w, c, data }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::new(h, w, c, vec![0.0; h * w * c])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        /// Weight matrix `(kernel·kernel·cin) × cout`, row-major.
        offset: usize,
    },
    GroupNorm {
        channels: usize,
        groups: usize,
        gamma: usize,
        beta: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

#[derive(Debug)]
pub enum Cache {
    Conv {
        cols: Vec<f64>,
        input_shape: (usize, usize, usize),
        out_hw: (usize, usize),
    },
    GroupNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        active: Vec<bool>,
        margin: f64,
    },
    MaxPool {
        argmax: Vec<usize>,
        input_shape: (usize, usize, usize),
        /// Smallest gap between the largest and second-largest window entry.
        margin: f64,
    },
    Residual {
        body: Vec<Cache>,
        shortcut: Vec<Cache>,
    },
}

fn out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Output shape of `layers` for an input of shape `input`.
pub fn trace_shape(layers: &[Layer], input: (usize, usize, usize)) -> (usize, usize, usize) {
    layers.iter().fold(input, |(h, w, c), layer| match layer {
        Layer::Conv {
            cout,
            kernel,
            stride,
            pad,
            ..
        } => (
            out_dim(h, *kernel, *stride, *pad),
            out_dim(w, *kernel, *stride, *pad),
            *cout,
        ),
        Layer::GroupNorm { .. } | Layer::Relu => (h, w, c),
        Layer::MaxPool { kernel, stride, pad } => (
            out_dim(h, *kernel, *stride, *pad),
            out_dim(w, *kernel, *stride, *pad),
            c,
        ),
        Layer::Residual { body, .. } => trace_shape(body, (h, w, c)),
    })
}

/// Distance of a cached forward pass from the nearest non-differentiable
/// point: the smallest ReLU input magnitude or max-pool top-two gap.
/// Finite-difference checks use it to stay away from kinks.
pub fn min_kink_margin(caches: &[Cache]) -> f64 {
    caches.iter().fold(f64::INFINITY, |m, c| match c {
        Cache::Relu { margin, .. } | Cache::MaxPool { margin, .. } => m.min(*margin),
        Cache::Residual { body, shortcut } => m.min(min_kink_margin(body)).min(min_kink_margin(shortcut)),
        _ => m,
    })
}

fn im2col(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let oh = out_dim(x.h, kernel, stride, pad);
    let ow = out_dim(x.w, kernel, stride, pad);
    let row = kernel * kernel * x.c;
    let mut cols = vec![0.0; oh * ow * row];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * row;
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= x.h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= x.w as isize {
                        continue;
                    }
                    let src = (iy as usize * x.w + ix as usize) * x.c;
                    let dst = base + (ky * kernel + kx) * x.c;
                    cols[dst..dst + x.c].copy_from_slice(&x.data[src..src + x.c]);
                }
            }
        }
    }
    (cols, oh, ow)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    shape: (usize, usize, usize),
    oh: usize,
    ow: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (h, w, c) = shape;
    let mut dx = Tensor::zeros(h, w, c);
    let row = kernel * kernel * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * row;
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = base + (ky * kernel + kx) * c;
                    for (d, s) in dx.data[dst..dst + c].iter_mut().zip(&dcols[src..src + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    dx
}

/// `c (m×n) = a (m×k) · b (k×n)`, all row-major.
fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (k×n) += aᵀ · b` where `a` is `m×k` and `b` is `m×n`, row-major.
fn matmul_at_b_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m×k) = a · bᵀ` where `a` is `m×n` and `b` is `k×n`, row-major.
fn matmul_a_bt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// Runs `layers` on `x`. When `caches` is given, one cache per layer is pushed.
pub fn forward(layers: &[Layer], mut x: Tensor, params: &[f64], mut caches: Option<&mut Vec<Cache>>) -> Tensor {
    for layer in layers {
        let (y, cache) = forward_layer(layer, x, params, caches.is_some());
        if let (Some(cs), Some(c)) = (caches.as_deref_mut(), cache) {
            cs.push(c);
        }
        x = y;
    }
    x
}

fn forward_layer(layer: &Layer, x: Tensor, params: &[f64], keep: bool) -> (Tensor, Option<Cache>) {
    match *layer {
        Layer::Conv {
            cin,
            cout,
            kernel,
            stride,
            pad,
            offset,
        } => {
            debug_assert_eq!(x.c, cin);
            let input_shape = x.shape();
            let (cols, oh, ow) = im2col(&x, kernel, stride, pad);
            let rows = kernel * kernel * cin;
            let weights = &params[offset..offset + rows * cout];
            let mut out = vec![0.0; oh * ow * cout];
            matmul(oh * ow, rows, cout, &cols, weights, &mut out);
            let cache = keep.then_some(Cache::Conv {
                cols,
                input_shape,
                out_hw: (oh, ow),
            });
            (Tensor::new(oh, ow, cout, out), cache)
        }
        Layer::GroupNorm {
            channels,
            groups,
            gamma,
            beta,
        } => {
            debug_assert_eq!(x.c, channels);
            let per = channels / groups;
            let pixels = x.h * x.w;
            let count = (pixels * per) as f64;
            let mut xhat = vec![0.0; x.data.len()];
            let mut inv_std = vec![0.0; groups];
            for g in 0..groups {
                let (mut sum, mut sq) = (0.0, 0.0);
                for p in 0..pixels {
                    for v in &x.data[p * channels + g * per..p * channels + (g + 1) * per] {
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / count;
                let var = (sq / count - mean * mean).max(0.0);
                let istd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                inv_std[g] = istd;
                for p in 0..pixels {
                    for ch in g * per..(g + 1) * per {
                        let i = p * channels + ch;
                        xhat[i] = (x.data[i] - mean) * istd;
                    }
                }
            }
            let g_w = &params[gamma..gamma + channels];
            let b_w = &params[beta..beta + channels];
            let out: Vec<f64> = xhat
                .iter()
                .enumerate()
                .map(|(i, v)| v * g_w[i % channels] + b_w[i % channels])
                .collect();
            let cache = keep.then_some(Cache::GroupNorm { xhat, inv_std });
            (Tensor::new(x.h, x.w, x.c, out), cache)
        }
        Layer::Relu => {
            let active: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
            let margin = x.data.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            let mut y = x;
            for (v, &a) in y.data.iter_mut().zip(&active) {
                if !a {
                    *v = 0.0;
                }
            }
            (y, keep.then_some(Cache::Relu { active, margin }))
        }
        Layer::MaxPool { kernel, stride, pad } => {
            let oh = out_dim(x.h, kernel, stride, pad);
            let ow = out_dim(x.w, kernel, stride, pad);
            let mut out = vec![f64::NEG_INFINITY; oh * ow * x.c];
            let mut argmax = vec![usize::MAX; oh * ow * x.c];
            let mut second = vec![f64::NEG_INFINITY; oh * ow * x.c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (oy * ow + ox) * x.c;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let src = (iy as usize * x.w + ix as usize) * x.c;
                            for ch in 0..x.c {
                                let v = x.data[src + ch];
                                if v > out[o + ch] {
                                    second[o + ch] = out[o + ch];
                                    out[o + ch] = v;
                                    argmax[o + ch] = src + ch;
                                } else if v > second[o + ch] {
                                    second[o + ch] = v;
                                }
                            }
                        }
                    }
                }
            }
            let input_shape = x.shape();
            let margin = out
                .iter()
                .zip(&second)
                // Ties between zeroed ReLU outputs are not kinks.
                .filter(|(a, s)| s.is_finite() && **a != 0.0)
                .fold(f64::INFINITY, |m, (a, b)| m.min(a - b));
            let cache = keep.then_some(Cache::MaxPool {
                argmax,
                input_shape,
                margin,
            });
            (Tensor::new(oh, ow, x.c, out), cache)
        }
        Layer::Residual {
            ref body,
            ref shortcut,
        } => {
            let (mut body_c, mut short_c) = (Vec::new(), Vec::new());
            let skip = forward(shortcut, x.clone(), params, keep.then_some(&mut short_c));
            let mut y = forward(body, x, params, keep.then_some(&mut body_c));
            for (a, b) in y.data.iter_mut().zip(&skip.data) {
                *a += b;
            }
            let cache = keep.then_some(Cache::Residual {
                body: body_c,
                shortcut: short_c,
            });
            (y, cache)
        }
    }
}

/// Backpropagates `grad` through `layers`, accumulating parameter gradients
/// into `grads`. Returns the gradient w.r.t. the input.
pub fn backward(layers: &[Layer], caches: &[Cache], mut grad: Tensor, params: &[f64], grads: &mut [f64]) -> Tensor {
    for (layer, cache) in layers.iter().zip(caches).rev() {
        grad = backward_layer(layer, cache, grad, params, grads);
    }
    grad
}

fn backward_layer(layer: &Layer, cache: &Cache, grad: Tensor, params: &[f64], grads: &mut [f64]) -> Tensor {
    match (layer, cache) {
        (
            &Layer::Conv {
                cin,
                cout,
                kernel,
                stride,
                pad,
                offset,
            },
            Cache::Conv {
                cols,
                input_shape,
                out_hw,
            },
        ) => {
            let rows = kernel * kernel * cin;
            let positions = out_hw.0 * out_hw.1;
            matmul_at_b_acc(
                positions,
                rows,
                cout,
                cols,
                &grad.data,
                &mut grads[offset..offset + rows * cout],
            );
            let weights = &params[offset..offset + rows * cout];
            let mut dcols = vec![0.0; positions * rows];
            matmul_a_bt(positions, cout, rows, &grad.data, weights, &mut dcols);
            col2im(&dcols, *input_shape, out_hw.0, out_hw.1, kernel, stride, pad)
        }
        (
            &Layer::GroupNorm {
                channels,
                groups,
                gamma,
                beta,
            },
            Cache::GroupNorm { xhat, inv_std },
        ) => {
            let per = channels / groups;
            let pixels = grad.h * grad.w;
            let count = (pixels * per) as f64;
            for (i, (dy, xh)) in grad.data.iter().zip(xhat).enumerate() {
                let ch = i % channels;
                grads[gamma + ch] += dy * xh;
                grads[beta + ch] += dy;
            }
            let g_w = &params[gamma..gamma + channels];
            let mut dx = vec![0.0; grad.data.len()];
            for g in 0..groups {
                let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                for p in 0..pixels {
                    for ch in g * per..(g + 1) * per {
                        let i = p * channels + ch;
                        let dxh = grad.data[i] * g_w[ch];
                        sum_d += dxh;
                        sum_dx += dxh * xhat[i];
                    }
                }
                let istd = inv_std[g];
                for p in 0..pixels {
                    for ch in g * per..(g + 1) * per {
                        let i = p * channels + ch;
                        let dxh = grad.data[i] * g_w[ch];
                        dx[i] = istd / count * (count * dxh - sum_d - xhat[i] * sum_dx);
                    }
                }
            }
            Tensor::new(grad.h, grad.w, grad.c, dx)
        }
        (Layer::Relu, Cache::Relu { active, .. }) => {
            let mut g = grad;
            for (v, &a) in g.data.iter_mut().zip(active) {
                if !a {
                    *v = 0.0;
                }
            }
            g
        }
        (Layer::MaxPool { .. }, Cache::MaxPool { argmax, input_shape, .. }) => {
            let (h, w, c) = *input_shape;
            let mut dx = Tensor::zeros(h, w, c);
            for (g, &src) in grad.data.iter().zip(argmax) {
                if src != usize::MAX {
                    dx.data[src] += g;
                }
            }
            dx
        }
        (
            Layer::Residual { body, shortcut },
            Cache::Residual {
                body: body_c,
                shortcut: short_c,
            },
        ) => {
            let d_short = backward(shortcut, short_c, grad.clone(), params, grads);
            let mut d_body = backward(body, body_c, grad, params, grads);
            for (a, b) in d_body.data.iter_mut().zip(&d_short.data) {
                *a += b;
            }
            d_body
        }
        _ => unreachable!("cache does not match layer"),
    }
}
