//! Input encoders: direct coding, gated attention coding (temporal
//! attention + spatial-channel attention + gating), rate, phase, and
//! time-to-first-spike coding. Each maps a static image batch [B,C,H,W]
//! to a [T,B,C,H,W] sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{lif_backward, lif_sequence, LifConfig, LifTape};
use crate::ops::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, dense, dense_backward, global_pool,
    global_pool_backward, he_normal, BatchNormParams, BnMode, BnTape, ConvParams, PoolKind,
};
use crate::tensor::{hadamard, hadamard_backward, relu, relu_backward, sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Direct,
    Gac,
    Rate,
    Phase,
    Ttfs,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Scheme> {
        match s {
            "direct" => Ok(Scheme::Direct),
            "gac" => Ok(Scheme::Gac),
            "rate" => Ok(Scheme::Rate),
            "phase" => Ok(Scheme::Phase),
            "ttfs" => Ok(Scheme::Ttfs),
            other => Err(Error::Usage(format!("unknown scheme '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Direct => "direct",
            Scheme::Gac => "gac",
            Scheme::Rate => "rate",
            Scheme::Phase => "phase",
            Scheme::Ttfs => "ttfs",
        }
    }
}

/// {Conv-BN} stem shared by direct and GAC coding. The BN is optional so an
/// exact identity stem (unit 1x1 conv, no normalization) can be configured
/// for tests and fixtures.
#[derive(Debug, Clone)]
pub struct StemParams {
    pub conv: ConvParams,
    pub bn: Option<BatchNormParams>,
}

impl StemParams {
    pub fn random(c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let kernel = he_normal(&[c_out, c_in, k, k], c_in * k * k, rng);
        Ok(StemParams {
            conv: ConvParams::new(kernel, (1, 1), ConvParams::same_padding(k, k))?,
            bn: Some(BatchNormParams::new(c_out, 1e-5, 0.1)),
        })
    }

    /// Unit 1x1 conv, no BN: stem(x) == x exactly.
    pub fn identity(channels: usize) -> Result<Self> {
        let mut kernel = Tensor::zeros(&[channels, channels, 1, 1]);
        for c in 0..channels {
            kernel.set(&[c, c, 0, 0], 1.0);
        }
        Ok(StemParams {
            conv: ConvParams::new(kernel, (1, 1), (0, 0, 0, 0))?,
            bn: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }
}

/// Gated attention unit parameters: the shared temporal-attention MLP
/// (w_n reduces T -> T/r, w_m expands back) and the shared spatial-channel
/// conv applied identically at every time step.
#[derive(Debug, Clone)]
pub struct GauParams {
    /// [T, T/r]
    pub w_m: Tensor,
    /// [T/r, T]
    pub w_n: Tensor,
    pub r: usize,
    /// C -> C conv, K x K, stride 1, same padding.
    pub sca: ConvParams,
}

/// Default temporal reduction: r = 1 below T = 4, else r = 2.
pub fn default_reduction(t: usize) -> usize {
    if t < 4 {
        1
    } else {
        2
    }
}

pub const DEFAULT_SCA_KERNEL_SIZE: usize = 4;

impl GauParams {
    pub fn random(t: usize, r: usize, channels: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        if r == 0 || t % r != 0 {
            return Err(Error::Config(format!("reduction factor {r} must divide T = {t}")));
        }
        let hidden = t / r;
        let w_n = he_normal(&[hidden, t], t, rng);
        let w_m = he_normal(&[t, hidden], hidden, rng);
        let sca_kernel = he_normal(&[channels, channels, k, k], channels * k * k, rng);
        Ok(GauParams {
            w_m,
            w_n,
            r,
            sca: ConvParams::new(sca_kernel, (1, 1), ConvParams::same_padding(k, k))?,
        })
    }

    pub fn t_steps(&self) -> usize {
        self.w_m.shape()[0]
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        let hidden = self.w_n.shape()[0];
        if self.r == 0 || t % self.r != 0 || hidden != t / self.r {
            return Err(Error::Config(format!(
                "GAU shapes inconsistent: T={t}, r={}, hidden={hidden}",
                self.r
            )));
        }
        if self.w_m.shape() != [t, hidden] || self.w_n.shape() != [hidden, t] {
            return Err(Error::Config(format!(
                "GAU weight shapes {:?}/{:?} do not match T={t}, r={}",
                self.w_m.shape(),
                self.w_n.shape(),
                self.r
            )));
        }
        Ok(())
    }
}

/// Coding-scheme selection plus every parameter the scheme needs.
#[derive(Debug, Clone)]
pub struct EncoderSpec {
    pub scheme: Scheme,
    pub t: usize,
    pub stem: Option<StemParams>,
    pub gau: Option<GauParams>,
    pub lif: LifConfig,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("T must be positive".into()));
        }
        match self.scheme {
            Scheme::Direct => {
                if self.stem.is_none() {
                    return Err(Error::Config("direct coding needs a {Conv-BN} stem".into()));
                }
            }
            Scheme::Gac => {
                if self.stem.is_none() {
                    return Err(Error::Config("GAC needs a {Conv-BN} stem".into()));
                }
                let Some(gau) = &self.gau else {
                    return Err(Error::Config("GAC needs GAU parameters".into()));
                };
                gau.validate(self.t)?;
            }
            _ => {
                if self.stem.is_some() || self.gau.is_some() {
                    return Err(Error::Config(format!(
                        "{} coding takes no stem/GAU parameters",
                        self.scheme.name()
                    )));
                }
            }
        }
        self.lif.validate()
    }

    pub fn out_channels(&self, c_in: usize) -> usize {
        match &self.stem {
            Some(s) => s.out_channels(),
            None => c_in,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.scheme, Scheme::Direct | Scheme::Gac)
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        if let Some(stem) = &mut self.stem {
            if let Some(bn) = &mut stem.bn {
                bn.mode = mode;
            }
        }
    }
}

/// The [T,B,C,H,W] output of any encoder.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub data: Tensor,
    pub binary: bool,
    /// Phase coding's per-step spike weights.
    pub weights_per_step: Option<Tensor>,
}

/// Forward records for the trainable encoders.
#[derive(Debug, Clone)]
pub struct StemTape {
    pub images: Tensor,
    pub conv_out: Tensor,
    pub bn: Option<BnTape>,
    /// Post-stem value z, shape [B,C,H,W]; repeated over T downstream.
    pub stem_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct GauTape {
    /// Repeated stem output [T,B,C,H,W] (pool/conv input).
    pub x_rep: Tensor,
    pub avg_bt: Tensor,
    pub max_bt: Tensor,
    pub hid_avg_pre: Tensor,
    pub hid_max_pre: Tensor,
    /// Temporal weights [T,B].
    pub m: Tensor,
    /// Spatial-channel matrix [T,B,C,H,W].
    pub n: Tensor,
    /// m (broadcast shape) for the gate product.
    pub m_bcast: Tensor,
    /// Gate values sigma(m*n).
    pub gate: Tensor,
}

#[derive(Debug, Clone)]
pub enum EncoderTape {
    Direct {
        stem: StemTape,
        lif: LifTape,
    },
    Gac {
        stem: StemTape,
        lif: LifTape,
        gau: GauTape,
        spikes: Tensor,
    },
}

/// Gradients w.r.t. the trainable encoder parameters.
#[derive(Debug, Clone, Default)]
pub struct EncoderGrads {
    pub stem_kernel: Option<Tensor>,
    pub bn_gamma: Option<Tensor>,
    pub bn_beta: Option<Tensor>,
    pub w_m: Option<Tensor>,
    pub w_n: Option<Tensor>,
    pub sca_kernel: Option<Tensor>,
}

fn check_images(images: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::shape(
            "encode",
            format!("images must be [B,C,H,W], got {:?}", images.shape()),
        ));
    };
    Ok((b, c, h, w))
}

fn repeat_t(z: &Tensor, t: usize) -> Result<Tensor> {
    let mut shape = vec![t];
    shape.extend_from_slice(z.shape());
    let mut data = Vec::with_capacity(t * z.len());
    for _ in 0..t {
        data.extend_from_slice(z.data());
    }
    Tensor::new(shape, data)
}

/// Extracts step t of a [T,...] tensor as a [...]-shaped tensor.
pub fn step_slice(x: &Tensor, t: usize) -> Result<Tensor> {
    let elems = x.len() / x.shape()[0];
    Tensor::new(
        x.shape()[1..].to_vec(),
        x.data()[t * elems..(t + 1) * elems].to_vec(),
    )
}

fn stack_steps(steps: &[Tensor]) -> Result<Tensor> {
    let mut shape = vec![steps.len()];
    shape.extend_from_slice(steps[0].shape());
    let mut data = Vec::with_capacity(steps.len() * steps[0].len());
    for s in steps {
        data.extend_from_slice(s.data());
    }
    Tensor::new(shape, data)
}

fn transpose_2d(x: &Tensor) -> Result<Tensor> {
    let &[r, c] = x.shape() else {
        return Err(Error::shape("transpose", format!("{:?}", x.shape())));
    };
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

fn stem_forward(stem: &mut StemParams, images: &Tensor) -> Result<StemTape> {
    let conv_out = conv2d(images, &stem.conv)?;
    let (stem_out, bn_tape) = match &mut stem.bn {
        Some(bn) => {
            let (out, tape) = batchnorm(&conv_out, bn)?;
            (out, Some(tape))
        }
        None => (conv_out.clone(), None),
    };
    Ok(StemTape {
        images: images.clone(),
        conv_out,
        bn: bn_tape,
        stem_out,
    })
}

fn stem_backward(stem: &StemParams, tape: &StemTape, upstream: &Tensor) -> Result<EncoderGrads> {
    let mut grads = EncoderGrads::default();
    let d_conv_out = match (&stem.bn, &tape.bn) {
        (Some(bn), Some(bn_tape)) => {
            let (dx, dg, db) = batchnorm_backward(bn, bn_tape, upstream)?;
            grads.bn_gamma = Some(dg);
            grads.bn_beta = Some(db);
            dx
        }
        _ => upstream.clone(),
    };
    let (_, d_kernel) = conv2d_backward(&tape.images, &stem.conv, &d_conv_out)?;
    grads.stem_kernel = Some(d_kernel);
    Ok(grads)
}

/// {Conv-BN}(image) repeated T times, spiked through LIF. Output is binary
/// and per-pixel periodic with the closed-form period of the post-stem value.
pub fn encode_direct(images: &Tensor, spec: &mut EncoderSpec) -> Result<(EncodedSequence, EncoderTape)> {
    spec.validate()?;
    if spec.scheme != Scheme::Direct {
        return Err(Error::Config(format!("encode_direct called with scheme {}", spec.scheme.name())));
    }
    check_images(images)?;
    let t = spec.t;
    let stem = spec.stem.as_mut().expect("validated");
    let stem_tape = stem_forward(stem, images)?;
    let x_rep = repeat_t(&stem_tape.stem_out, t)?;
    let (spikes, lif_tape) = lif_sequence(&x_rep, &spec.lif, None)?;
    Ok((
        EncodedSequence {
            data: spikes,
            binary: true,
            weights_per_step: None,
        },
        EncoderTape::Direct {
            stem: stem_tape,
            lif: lif_tape,
        },
    ))
}

/// Temporal attention: m = W_m(ReLU(W_n(AvgPool(x)))) + W_m(ReLU(W_n(MaxPool(x)))),
/// pooling over (C,H,W), the MLP acting on the T axis per batch element.
/// Returns m as [T,B] with the intermediate tape.
pub fn temporal_attention(x: &Tensor, p: &GauParams) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let t = x.shape()[0];
    p.validate(t)?;
    let avg = global_pool(x, PoolKind::Avg)?; // [T,B]
    let max = global_pool(x, PoolKind::Max)?;
    let avg_bt = transpose_2d(&avg)?; // [B,T]
    let max_bt = transpose_2d(&max)?;
    let hid_avg_pre = dense(&avg_bt, &p.w_n)?;
    let hid_max_pre = dense(&max_bt, &p.w_n)?;
    let out_avg = dense(&relu(&hid_avg_pre), &p.w_m)?;
    let out_max = dense(&relu(&hid_max_pre), &p.w_m)?;
    let m_bt = out_avg.add(&out_max)?;
    let m = transpose_2d(&m_bt)?; // [T,B]
    Ok((m, avg_bt, max_bt, hid_avg_pre, hid_max_pre))
}

/// Spatial-channel attention: one shared K x K conv applied independently at
/// each time step.
pub fn spatial_channel_attention(x: &Tensor, p: &GauParams) -> Result<Tensor> {
    let t = x.shape()[0];
    let mut steps = Vec::with_capacity(t);
    for ti in 0..t {
        steps.push(conv2d(&step_slice(x, ti)?, &p.sca)?);
    }
    stack_steps(&steps)
}

/// Gating: sigma(M broadcast to [T,B,1,1,1], Hadamard with N).
pub fn gau_gate(m: &Tensor, n: &Tensor) -> Result<(Tensor, Tensor)> {
    let &[t, b] = m.shape() else {
        return Err(Error::shape("gau_gate", format!("m must be [T,B], got {:?}", m.shape())));
    };
    let m_bcast = m.reshape(&[t, b, 1, 1, 1])?;
    let pre = hadamard(&m_bcast, n)?;
    Ok((sigmoid(&pre), m_bcast))
}

/// Whole GAC process: O = gate(TA, SCA) Hadamard SN(stem), where the stem
/// output is repeated over T. Output is real-valued and exactly zero wherever
/// the underlying spike is zero.
pub fn encode_gac(images: &Tensor, spec: &mut EncoderSpec) -> Result<(EncodedSequence, EncoderTape)> {
    spec.validate()?;
    if spec.scheme != Scheme::Gac {
        return Err(Error::Config(format!("encode_gac called with scheme {}", spec.scheme.name())));
    }
    check_images(images)?;
    let t = spec.t;
    let stem = spec.stem.as_mut().expect("validated");
    let stem_tape = stem_forward(stem, images)?;
    let x_rep = repeat_t(&stem_tape.stem_out, t)?;
    let (spikes, lif_tape) = lif_sequence(&x_rep, &spec.lif, None)?;

    let gau = spec.gau.as_ref().expect("validated");
    let (m, avg_bt, max_bt, hid_avg_pre, hid_max_pre) = temporal_attention(&x_rep, gau)?;
    let n = spatial_channel_attention(&x_rep, gau)?;
    let (gate, m_bcast) = gau_gate(&m, &n)?;
    let out = hadamard(&gate, &spikes)?;

    let gau_tape = GauTape {
        x_rep,
        avg_bt,
        max_bt,
        hid_avg_pre,
        hid_max_pre,
        m,
        n,
        m_bcast,
        gate: gate.clone(),
    };
    Ok((
        EncodedSequence {
            data: out,
            binary: false,
            weights_per_step: None,
        },
        EncoderTape::Gac {
            stem: stem_tape,
            lif: lif_tape,
            gau: gau_tape,
            spikes,
        },
    ))
}

/// Independent Bernoulli(pixel) draws per step. Each batch element uses its
/// own counter-derived stream so encoding order or parallel fan-out can
/// never change results.
pub fn encode_rate(images: &Tensor, t: usize, seed: u64) -> Result<EncodedSequence> {
    let (bsz, c, h, w) = check_images(images)?;
    if t == 0 {
        return Err(Error::Config("T must be positive".into()));
    }
    for &v in images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("rate coding needs pixels in [0,1], got {v}")));
        }
    }
    let chw = c * h * w;
    let mut data = vec![0.0; t * bsz * chw];
    for b in 0..bsz {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(b as u64 + 1)));
        for ti in 0..t {
            for k in 0..chw {
                let p = images.data()[b * chw + k];
                let draw: f64 = rng.gen();
                data[(ti * bsz + b) * chw + k] = if draw < p { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(EncodedSequence {
        data: Tensor::new(vec![t, bsz, c, h, w], data)?,
        binary: true,
        weights_per_step: None,
    })
}

/// MSB-first 8-bit weighted-spike phase coding: spike at step t iff bit
/// (t mod 8) of the pixel is set, with weight 2^-(1 + t mod 8).
pub fn encode_phase(images: &Tensor, t: usize) -> Result<EncodedSequence> {
    let (bsz, c, h, w) = check_images(images)?;
    if t == 0 {
        return Err(Error::Config("T must be positive".into()));
    }
    let chw = c * h * w;
    let mut pixels = Vec::with_capacity(images.len());
    for &v in images.data() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Input(format!(
                "phase coding needs integer pixels in [0,255], got {v}"
            )));
        }
        pixels.push(v as u8);
    }
    let mut data = vec![0.0; t * bsz * chw];
    let mut weights = Vec::with_capacity(t);
    for ti in 0..t {
        let bit = ti % 8;
        weights.push(2f64.powi(-(1 + bit as i32)));
        for b in 0..bsz {
            for k in 0..chw {
                let px = pixels[b * chw + k];
                if (px >> (7 - bit)) & 1 == 1 {
                    data[(ti * bsz + b) * chw + k] = 1.0;
                }
            }
        }
    }
    Ok(EncodedSequence {
        data: Tensor::new(vec![t, bsz, c, h, w], data)?,
        binary: true,
        weights_per_step: Some(Tensor::new(vec![t], weights)?),
    })
}

/// Linear latency coding: exactly one spike for x > 0 at step
/// 1 + round((1-x)*(T-1)) (1-based); brighter pixels fire earlier; x = 0
/// never fires.
pub fn encode_ttfs(images: &Tensor, t: usize) -> Result<EncodedSequence> {
    let (bsz, c, h, w) = check_images(images)?;
    if t == 0 {
        return Err(Error::Config("T must be positive".into()));
    }
    for &v in images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("ttfs coding needs pixels in [0,1], got {v}")));
        }
    }
    let chw = c * h * w;
    let mut data = vec![0.0; t * bsz * chw];
    for b in 0..bsz {
        for k in 0..chw {
            let x = images.data()[b * chw + k];
            if x > 0.0 {
                let step = ((1.0 - x) * (t - 1) as f64).round() as usize;
                data[(step * bsz + b) * chw + k] = 1.0;
            }
        }
    }
    Ok(EncodedSequence {
        data: Tensor::new(vec![t, bsz, c, h, w], data)?,
        binary: true,
        weights_per_step: None,
    })
}

/// Dispatch over every scheme. The tape is present for the trainable ones.
pub fn encode(
    images: &Tensor,
    spec: &mut EncoderSpec,
    seed: u64,
) -> Result<(EncodedSequence, Option<EncoderTape>)> {
    match spec.scheme {
        Scheme::Direct => {
            let (seq, tape) = encode_direct(images, spec)?;
            Ok((seq, Some(tape)))
        }
        Scheme::Gac => {
            let (seq, tape) = encode_gac(images, spec)?;
            Ok((seq, Some(tape)))
        }
        Scheme::Rate => Ok((encode_rate(images, spec.t, seed)?, None)),
        Scheme::Phase => Ok((encode_phase(images, spec.t)?, None)),
        Scheme::Ttfs => Ok((encode_ttfs(images, spec.t)?, None)),
    }
}

/// Exact gradients through the differentiable encoder path, surrogate-chained
/// through the LIF factor. Only direct and GAC are trainable.
pub fn encoder_backward(
    spec: &EncoderSpec,
    tape: &EncoderTape,
    upstream: &Tensor,
) -> Result<EncoderGrads> {
    match (spec.scheme, tape) {
        (Scheme::Direct, EncoderTape::Direct { stem, lif }) => {
            let stem_params = spec.stem.as_ref().expect("validated");
            let d_inputs = lif_backward(lif, &spec.lif, upstream, None)?;
            let d_stem_out = sum_over_time(&d_inputs)?;
            stem_backward(stem_params, stem, &d_stem_out)
        }
        (Scheme::Gac, EncoderTape::Gac { stem, lif, gau, spikes }) => {
            let stem_params = spec.stem.as_ref().expect("validated");
            let gau_params = spec.gau.as_ref().expect("validated");

            // O = gate . spikes
            let (d_gate, d_spikes) = hadamard_backward(&gau.gate, spikes, upstream)?;
            // gate = sigmoid(pre); d_pre = d_gate * g * (1 - g)
            let d_pre = gau
                .gate
                .zip(&d_gate, "gate_backward", |g, dg| dg * g * (1.0 - g))?;
            // pre = m_bcast . n
            let (d_m_bcast, d_n) = hadamard_backward(&gau.m_bcast, &gau.n, &d_pre)?;
            let t = spec.t;
            let b = gau.m.shape()[1];
            let d_m = d_m_bcast.reshape(&[t, b])?;

            // SCA: n[t] = conv(x_rep[t]); accumulate over steps
            let mut d_x_sca = Tensor::zeros(gau.x_rep.shape());
            let mut d_sca_kernel = Tensor::zeros(gau_params.sca.kernel.shape());
            for ti in 0..t {
                let x_t = step_slice(&gau.x_rep, ti)?;
                let up_t = step_slice(&d_n, ti)?;
                let (dx_t, dk_t) = conv2d_backward(&x_t, &gau_params.sca, &up_t)?;
                scatter_step(&mut d_x_sca, ti, &dx_t)?;
                d_sca_kernel.add_assign(&dk_t)?;
            }

            // TA backward through the shared MLP and both pools
            let d_m_bt = transpose_2d(&d_m)?; // [B,T]
            let hid_avg = relu(&gau.hid_avg_pre);
            let hid_max = relu(&gau.hid_max_pre);
            let (d_hid_avg, d_wm_a) = dense_backward(&hid_avg, &gau_params.w_m, &d_m_bt)?;
            let (d_hid_max, d_wm_b) = dense_backward(&hid_max, &gau_params.w_m, &d_m_bt)?;
            let d_hid_avg_pre = relu_backward(&gau.hid_avg_pre, &d_hid_avg)?;
            let d_hid_max_pre = relu_backward(&gau.hid_max_pre, &d_hid_max)?;
            let (d_avg_bt, d_wn_a) = dense_backward(&gau.avg_bt, &gau_params.w_n, &d_hid_avg_pre)?;
            let (d_max_bt, d_wn_b) = dense_backward(&gau.max_bt, &gau_params.w_n, &d_hid_max_pre)?;
            let d_avg = transpose_2d(&d_avg_bt)?; // [T,B]
            let d_max = transpose_2d(&d_max_bt)?;
            let d_x_avg = global_pool_backward(&gau.x_rep, PoolKind::Avg, &d_avg)?;
            let d_x_max = global_pool_backward(&gau.x_rep, PoolKind::Max, &d_max)?;

            // LIF path
            let d_x_lif = lif_backward(lif, &spec.lif, &d_spikes, None)?;

            let mut d_x_rep = d_x_sca;
            d_x_rep.add_assign(&d_x_avg)?;
            d_x_rep.add_assign(&d_x_max)?;
            d_x_rep.add_assign(&d_x_lif)?;
            let d_stem_out = sum_over_time(&d_x_rep)?;

            let mut grads = stem_backward(stem_params, stem, &d_stem_out)?;
            grads.w_m = Some(d_wm_a.add(&d_wm_b)?);
            grads.w_n = Some(d_wn_a.add(&d_wn_b)?);
            grads.sca_kernel = Some(d_sca_kernel);
            Ok(grads)
        }
        (scheme, _) if !matches!(scheme, Scheme::Direct | Scheme::Gac) => Err(Error::Unsupported(
            format!("{} coding is not trainable", scheme.name()),
        )),
        _ => Err(Error::Tape("tape does not match encoder scheme".into())),
    }
}

/// Sums a [T,...] tensor over its leading axis.
fn sum_over_time(x: &Tensor) -> Result<Tensor> {
    let t = x.shape()[0];
    let elems = x.len() / t;
    let mut out = vec![0.0; elems];
    for ti in 0..t {
        for k in 0..elems {
            out[k] += x.data()[ti * elems + k];
        }
    }
    Tensor::new(x.shape()[1..].to_vec(), out)
}

fn scatter_step(dst: &mut Tensor, t: usize, step: &Tensor) -> Result<()> {
    let elems = dst.len() / dst.shape()[0];
    if step.len() != elems {
        return Err(Error::shape("scatter_step", "step size mismatch".to_string()));
    }
    dst.data_mut()[t * elems..(t + 1) * elems].copy_from_slice(step.data());
    Ok(())
}
