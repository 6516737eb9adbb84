//! Forward operations and their vector-Jacobian backwards.
//!
//! Summation order in conv and dense is fixed (innermost kernel column j,
//! then row i, then input channel c) so tests can demand bit-exact equality
//! across runs. Parallelism only ever splits over independent output
//! elements, which keeps results identical for any worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Convolution parameters. No bias term anywhere; BN provides affine freedom.
#[derive(Debug, Clone)]
pub struct ConvParams {
    /// [C_out, C_in, k_h, k_w]
    pub kernel: Tensor,
    /// (vertical, horizontal)
    pub stride: (usize, usize),
    /// (top, bottom, left, right), zero padding
    pub padding: (usize, usize, usize, usize),
}

impl ConvParams {
    pub fn new(kernel: Tensor, stride: (usize, usize), padding: (usize, usize, usize, usize)) -> Result<Self> {
        if kernel.ndim() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be 4-D, got {:?}", kernel.shape())));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        Ok(ConvParams { kernel, stride, padding })
    }

    /// "Same" padding that preserves H x W at stride 1, asymmetric for even
    /// kernels: left/top = floor((k-1)/2), right/bottom = ceil((k-1)/2).
    pub fn same_padding(k_h: usize, k_w: usize) -> (usize, usize, usize, usize) {
        ((k_h - 1) / 2, k_h / 2, (k_w - 1) / 2, k_w / 2)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    /// Output spatial dims for an input of the given spatial dims.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_hw();
        let (pt, pb, pl, pr) = self.padding;
        let hp = h + pt + pb;
        let wp = w + pl + pr;
        if hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {hp}x{wp} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(((hp - kh) / self.stride.0 + 1, (wp - kw) / self.stride.1 + 1))
    }
}

/// out[b,o,y,x] = sum_{c,i,j} kernel[o,c,i,j] * padded_input[b,c,y*sv+i,x*sh+j]
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let &[bsz, cin, h, w] = input.shape() else {
        return Err(Error::shape("conv2d", format!("input must be 4-D, got {:?}", input.shape())));
    };
    if cin != params.in_channels() {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {}", params.in_channels()),
        ));
    }
    let cout = params.out_channels();
    let (kh, kw) = params.kernel_hw();
    let (sv, sh) = params.stride;
    let (pt, _, pl, _) = params.padding;
    let (oh, ow) = params.out_hw(h, w)?;

    let kdata = params.kernel.data();
    let idata = input.data();
    let mut out = vec![0.0; bsz * cout * oh * ow];
    out.par_chunks_mut(cout * oh * ow)
        .enumerate()
        .for_each(|(b, chunk)| {
            for o in 0..cout {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for i in 0..kh {
                                let iy = y * sv + i;
                                if iy < pt || iy >= pt + h {
                                    continue;
                                }
                                for j in 0..kw {
                                    let ix = x * sh + j;
                                    if ix < pl || ix >= pl + w {
                                        continue;
                                    }
                                    let iv = idata[((b * cin + c) * h + (iy - pt)) * w + (ix - pl)];
                                    let kv = kdata[((o * cin + c) * kh + i) * kw + j];
                                    acc += kv * iv;
                                }
                            }
                        }
                        chunk[(o * oh + y) * ow + x] = acc;
                    }
                }
            }
        });
    Tensor::new(vec![bsz, cout, oh, ow], out)
}

/// Gradients of conv2d w.r.t. input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let &[bsz, cin, h, w] = input.shape() else {
        return Err(Error::shape("conv2d_backward", format!("input must be 4-D, got {:?}", input.shape())));
    };
    let cout = params.out_channels();
    let (kh, kw) = params.kernel_hw();
    let (sv, sh) = params.stride;
    let (pt, _, pl, _) = params.padding;
    let (oh, ow) = params.out_hw(h, w)?;
    if upstream.shape() != [bsz, cout, oh, ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream {:?}, expected {:?}", upstream.shape(), [bsz, cout, oh, ow]),
        ));
    }
    let kdata = params.kernel.data();
    let idata = input.data();
    let udata = upstream.data();

    let mut gin = vec![0.0; input.len()];
    gin.par_chunks_mut(cin * h * w).enumerate().for_each(|(b, chunk)| {
        for o in 0..cout {
            for y in 0..oh {
                for x in 0..ow {
                    let up = udata[((b * cout + o) * oh + y) * ow + x];
                    if up == 0.0 {
                        continue;
                    }
                    for c in 0..cin {
                        for i in 0..kh {
                            let iy = y * sv + i;
                            if iy < pt || iy >= pt + h {
                                continue;
                            }
                            for j in 0..kw {
                                let ix = x * sh + j;
                                if ix < pl || ix >= pl + w {
                                    continue;
                                }
                                let kv = kdata[((o * cin + c) * kh + i) * kw + j];
                                chunk[(c * h + (iy - pt)) * w + (ix - pl)] += up * kv;
                            }
                        }
                    }
                }
            }
        }
    });

    let mut gker = vec![0.0; params.kernel.len()];
    gker.par_iter_mut().enumerate().for_each(|(kidx, gk)| {
        let o = kidx / (cin * kh * kw);
        let rem = kidx % (cin * kh * kw);
        let c = rem / (kh * kw);
        let i = (rem / kw) % kh;
        let j = rem % kw;
        let mut acc = 0.0;
        for b in 0..bsz {
            for y in 0..oh {
                let iy = y * sv + i;
                if iy < pt || iy >= pt + h {
                    continue;
                }
                for x in 0..ow {
                    let ix = x * sh + j;
                    if ix < pl || ix >= pl + w {
                        continue;
                    }
                    acc += udata[((b * cout + o) * oh + y) * ow + x]
                        * idata[((b * cin + c) * h + (iy - pt)) * w + (ix - pl)];
                }
            }
        }
        *gk = acc;
    });

    Ok((
        Tensor::new(input.shape().to_vec(), gin)?,
        Tensor::new(params.kernel.shape().to_vec(), gker)?,
    ))
}

/// Matrix product out[b,o] = sum_d weight[o,d] * input[b,d]. No bias.
pub fn dense(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let &[bsz, din] = input.shape() else {
        return Err(Error::shape("dense", format!("input must be 2-D, got {:?}", input.shape())));
    };
    let &[dout, dw] = weight.shape() else {
        return Err(Error::shape("dense", format!("weight must be 2-D, got {:?}", weight.shape())));
    };
    if din != dw {
        return Err(Error::shape("dense", format!("inner dims {din} vs {dw}")));
    }
    let mut out = vec![0.0; bsz * dout];
    for b in 0..bsz {
        for o in 0..dout {
            let mut acc = 0.0;
            for d in 0..din {
                acc += weight.data()[o * din + d] * input.data()[b * din + d];
            }
            out[b * dout + o] = acc;
        }
    }
    Tensor::new(vec![bsz, dout], out)
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let &[bsz, din] = input.shape() else {
        return Err(Error::shape("dense_backward", format!("input {:?}", input.shape())));
    };
    let &[dout, _] = weight.shape() else {
        return Err(Error::shape("dense_backward", format!("weight {:?}", weight.shape())));
    };
    if upstream.shape() != [bsz, dout] {
        return Err(Error::shape(
            "dense_backward",
            format!("upstream {:?}, expected {:?}", upstream.shape(), [bsz, dout]),
        ));
    }
    let mut gin = vec![0.0; bsz * din];
    let mut gw = vec![0.0; dout * din];
    for b in 0..bsz {
        for o in 0..dout {
            let up = upstream.data()[b * dout + o];
            for d in 0..din {
                gin[b * din + d] += up * weight.data()[o * din + d];
                gw[o * din + d] += up * input.data()[b * din + d];
            }
        }
    }
    Ok((
        Tensor::new(vec![bsz, din], gin)?,
        Tensor::new(vec![dout, din], gw)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

impl BatchNormParams {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps,
            momentum,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }
}

/// Saved forward state for the backward pass.
#[derive(Debug, Clone)]
pub struct BnTape {
    pub input: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    pub mode: BnMode,
}

/// Train mode normalizes with batch statistics over (B,H,W) per channel
/// (biased variance) and updates running stats as
/// running <- (1-momentum)*running + momentum*batch. Eval mode uses the
/// running statistics.
pub fn batchnorm(input: &Tensor, params: &mut BatchNormParams) -> Result<(Tensor, BnTape)> {
    let &[bsz, c, h, w] = input.shape() else {
        return Err(Error::shape("batchnorm", format!("input must be 4-D, got {:?}", input.shape())));
    };
    if c != params.channels() {
        return Err(Error::shape(
            "batchnorm",
            format!("input has {c} channels, params expect {}", params.channels()),
        ));
    }
    let n = (bsz * h * w) as f64;
    let (mean, var) = match params.mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for b in 0..bsz {
                    for y in 0..h {
                        for x in 0..w {
                            acc += input.data()[((b * c + ch) * h + y) * w + x];
                        }
                    }
                }
                mean[ch] = acc / n;
                let mut vacc = 0.0;
                for b in 0..bsz {
                    for y in 0..h {
                        for x in 0..w {
                            let d = input.data()[((b * c + ch) * h + y) * w + x] - mean[ch];
                            vacc += d * d;
                        }
                    }
                }
                var[ch] = vacc / n;
            }
            let m = params.momentum;
            for ch in 0..c {
                params.running_mean.data_mut()[ch] =
                    (1.0 - m) * params.running_mean.data()[ch] + m * mean[ch];
                params.running_var.data_mut()[ch] =
                    (1.0 - m) * params.running_var.data()[ch] + m * var[ch];
            }
            (mean, var)
        }
        BnMode::Eval => (
            params.running_mean.data().to_vec(),
            params.running_var.data().to_vec(),
        ),
    };

    let mut out = vec![0.0; input.len()];
    for b in 0..bsz {
        for ch in 0..c {
            let inv_std = 1.0 / (var[ch] + params.eps).sqrt();
            let g = params.gamma.data()[ch];
            let bt = params.beta.data()[ch];
            for y in 0..h {
                for x in 0..w {
                    let idx = ((b * c + ch) * h + y) * w + x;
                    out[idx] = g * (input.data()[idx] - mean[ch]) * inv_std + bt;
                }
            }
        }
    }
    let tape = BnTape {
        input: input.clone(),
        mean: Tensor::new(vec![c], mean)?,
        var: Tensor::new(vec![c], var)?,
        mode: params.mode,
    };
    Ok((Tensor::new(input.shape().to_vec(), out)?, tape))
}

/// Gradients through batchnorm: (grad_input, grad_gamma, grad_beta).
/// Train mode accounts for the dependence of batch statistics on the input.
pub fn batchnorm_backward(
    params: &BatchNormParams,
    tape: &BnTape,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let input = &tape.input;
    if upstream.shape() != input.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("upstream {:?} vs input {:?}", upstream.shape(), input.shape()),
        ));
    }
    let &[bsz, c, h, w] = input.shape() else {
        return Err(Error::shape("batchnorm_backward", "input must be 4-D".to_string()));
    };
    let n = (bsz * h * w) as f64;
    let mut gin = vec![0.0; input.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];

    for ch in 0..c {
        let mean = tape.mean.data()[ch];
        let var = tape.var.data()[ch];
        let inv_std = 1.0 / (var + params.eps).sqrt();
        let g = params.gamma.data()[ch];

        // channel reductions in fixed (b,y,x) order
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..bsz {
            for y in 0..h {
                for x in 0..w {
                    let idx = ((b * c + ch) * h + y) * w + x;
                    let dy = upstream.data()[idx];
                    let xhat = (input.data()[idx] - mean) * inv_std;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
            }
        }
        ggamma[ch] = sum_dy_xhat;
        gbeta[ch] = sum_dy;

        match tape.mode {
            BnMode::Train => {
                for b in 0..bsz {
                    for y in 0..h {
                        for x in 0..w {
                            let idx = ((b * c + ch) * h + y) * w + x;
                            let dy = upstream.data()[idx];
                            let xhat = (input.data()[idx] - mean) * inv_std;
                            gin[idx] = g * inv_std * (dy - sum_dy / n - xhat * sum_dy_xhat / n);
                        }
                    }
                }
            }
            BnMode::Eval => {
                for b in 0..bsz {
                    for y in 0..h {
                        for x in 0..w {
                            let idx = ((b * c + ch) * h + y) * w + x;
                            gin[idx] = g * inv_std * upstream.data()[idx];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gin)?,
        Tensor::new(vec![c], ggamma)?,
        Tensor::new(vec![c], gbeta)?,
    ))
}

/// Fan-in-scaled zero-mean normal init (std = sqrt(2/fan_in)), sampled with
/// Box-Muller so the only entropy source is the caller's seeded stream.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(std * r * theta.cos());
        if data.len() < n {
            data.push(std * r * theta.sin());
        }
    }
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Reduces (C,H,W) of a [T,B,C,H,W] tensor per (t,b) by mean or max.
pub fn global_pool(input: &Tensor, kind: PoolKind) -> Result<Tensor> {
    let &[t, b, c, h, w] = input.shape() else {
        return Err(Error::shape("global_pool", format!("input must be 5-D, got {:?}", input.shape())));
    };
    let chw = c * h * w;
    let mut out = vec![0.0; t * b];
    for tb in 0..t * b {
        let slice = &input.data()[tb * chw..(tb + 1) * chw];
        out[tb] = match kind {
            PoolKind::Avg => slice.iter().sum::<f64>() / chw as f64,
            PoolKind::Max => slice.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
    }
    Tensor::new(vec![t, b], out)
}

/// Backward of `global_pool`. Max routes to the first maximum in row-major
/// order; avg spreads uniformly.
pub fn global_pool_backward(saved_input: &Tensor, kind: PoolKind, upstream: &Tensor) -> Result<Tensor> {
    let &[t, b, c, h, w] = saved_input.shape() else {
        return Err(Error::shape("global_pool_backward", format!("input {:?}", saved_input.shape())));
    };
    if upstream.shape() != [t, b] {
        return Err(Error::shape(
            "global_pool_backward",
            format!("upstream {:?}, expected {:?}", upstream.shape(), [t, b]),
        ));
    }
    let chw = c * h * w;
    let mut gin = vec![0.0; saved_input.len()];
    for tb in 0..t * b {
        let up = upstream.data()[tb];
        match kind {
            PoolKind::Avg => {
                let share = up / chw as f64;
                for k in 0..chw {
                    gin[tb * chw + k] = share;
                }
            }
            PoolKind::Max => {
                let slice = &saved_input.data()[tb * chw..(tb + 1) * chw];
                let mut best = 0;
                for k in 1..chw {
                    if slice[k] > slice[best] {
                        best = k;
                    }
                }
                gin[tb * chw + best] = up;
            }
        }
    }
    Tensor::new(saved_input.shape().to_vec(), gin)
}

/// Mean over (H,W) of a [B,C,H,W] tensor, yielding [B,C] (classifier head).
pub fn avg_pool_spatial(input: &Tensor) -> Result<Tensor> {
    let &[b, c, h, w] = input.shape() else {
        return Err(Error::shape("avg_pool_spatial", format!("input {:?}", input.shape())));
    };
    let hw = h * w;
    let mut out = vec![0.0; b * c];
    for bc in 0..b * c {
        out[bc] = input.data()[bc * hw..(bc + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    Tensor::new(vec![b, c], out)
}

pub fn avg_pool_spatial_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let &[b, c, h, w] = input_shape else {
        return Err(Error::shape("avg_pool_spatial_backward", format!("{input_shape:?}")));
    };
    if upstream.shape() != [b, c] {
        return Err(Error::shape(
            "avg_pool_spatial_backward",
            format!("upstream {:?}, expected {:?}", upstream.shape(), [b, c]),
        ));
    }
    let hw = h * w;
    let mut gin = vec![0.0; b * c * hw];
    for bc in 0..b * c {
        let share = upstream.data()[bc] / hw as f64;
        for k in 0..hw {
            gin[bc * hw + k] = share;
        }
    }
    Tensor::new(input_shape.to_vec(), gin)
}
