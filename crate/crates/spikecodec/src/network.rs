//! Desk-scale spike-driven architectures: membrane-shortcut residual blocks
//! whose convolutions only ever consume binary spikes, a spiking classifier
//! head, and the mean-over-time decoder. Forward passes record the tapes the
//! STBP backward needs; checkpoints serialize every parameter plus BN
//! running statistics.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coding::{
    encode, encoder_backward, step_slice, EncoderSpec, EncoderTape, GauParams, Scheme, StemParams,
    DEFAULT_SCA_KERNEL_SIZE,
};
use crate::error::{Error, Result};
use crate::neuron::{LifConfig, LifLayer};
use crate::ops::{
    avg_pool_spatial, avg_pool_spatial_backward, batchnorm, batchnorm_backward, conv2d,
    conv2d_backward, dense, dense_backward, he_normal, BatchNormParams, BnMode, BnTape, ConvParams,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct MsBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Buildable architecture description (serializable; the built `Network`
/// holds the actual tensors).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub scheme: Scheme,
    pub t: usize,
    pub input_channels: usize,
    /// Channels produced by the encoder {Conv-BN} stem (trainable schemes).
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub sca_kernel: usize,
    pub blocks: Vec<MsBlockSpec>,
    pub n_classes: usize,
    pub lif: LifConfig,
}

impl NetworkSpec {
    /// Tiny MS-ResNet default: stem 16 channels, stages [16, 32] with one
    /// block each and stride 2 between stages.
    pub fn tiny(scheme: Scheme, t: usize, input_channels: usize, n_classes: usize) -> Self {
        NetworkSpec {
            scheme,
            t,
            input_channels,
            stem_channels: 16,
            stem_kernel: 3,
            sca_kernel: DEFAULT_SCA_KERNEL_SIZE,
            blocks: vec![
                MsBlockSpec { in_channels: 16, out_channels: 16, stride: 1 },
                MsBlockSpec { in_channels: 16, out_channels: 32, stride: 2 },
            ],
            n_classes,
            lif: LifConfig::default(),
        }
    }

    /// Channels entering the first block / the head when there are no blocks.
    pub fn encoder_out_channels(&self) -> usize {
        match self.scheme {
            Scheme::Direct | Scheme::Gac => self.stem_channels,
            _ => self.input_channels,
        }
    }

    pub fn head_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.out_channels)
            .unwrap_or_else(|| self.encoder_out_channels())
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("T must be positive".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        let mut c = self.encoder_out_channels();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != c {
                return Err(Error::Config(format!(
                    "block {i} expects {} input channels but receives {c}",
                    b.in_channels
                )));
            }
            if b.stride == 0 {
                return Err(Error::Config(format!("block {i} has zero stride")));
            }
            c = b.out_channels;
        }
        self.lif.validate()
    }
}

#[derive(Debug, Clone)]
struct BlockStepTape {
    s1: Tensor,
    s2: Tensor,
    bn1: BnTape,
    bn2: BnTape,
    bn_down: Option<BnTape>,
    input_shape: Vec<usize>,
}

/// Membrane-shortcut residual block:
/// out = shortcut(x) + BN(Conv(SN(BN(Conv(SN(x)))))), additions in the real
/// membrane domain. Both convolutions (and the downsample conv) consume
/// binary spikes, so the block stays spike-driven.
#[derive(Debug, Clone)]
pub struct MsBlock {
    pub conv1: ConvParams,
    pub bn1: BatchNormParams,
    pub conv2: ConvParams,
    pub bn2: BatchNormParams,
    /// Projection shortcut (1x1 conv, block stride, BN) fed by the first
    /// SN's spikes; present when geometry changes.
    pub down: Option<(ConvParams, BatchNormParams)>,
    sn1: LifLayer,
    sn2: LifLayer,
    tape: Vec<BlockStepTape>,
}

impl MsBlock {
    pub fn init(spec: &MsBlockSpec, lif: LifConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let cin = spec.in_channels;
        let cout = spec.out_channels;
        let k1 = he_normal(&[cout, cin, 3, 3], cin * 9, rng);
        let k2 = he_normal(&[cout, cout, 3, 3], cout * 9, rng);
        let down = if spec.stride != 1 || cin != cout {
            let kd = he_normal(&[cout, cin, 1, 1], cin, rng);
            Some((
                ConvParams::new(kd, (spec.stride, spec.stride), (0, 0, 0, 0))?,
                BatchNormParams::new(cout, 1e-5, 0.1),
            ))
        } else {
            None
        };
        Ok(MsBlock {
            conv1: ConvParams::new(k1, (spec.stride, spec.stride), ConvParams::same_padding(3, 3))?,
            bn1: BatchNormParams::new(cout, 1e-5, 0.1),
            conv2: ConvParams::new(k2, (1, 1), ConvParams::same_padding(3, 3))?,
            bn2: BatchNormParams::new(cout, 1e-5, 0.1),
            down,
            sn1: LifLayer::new(lif),
            sn2: LifLayer::new(lif),
            tape: Vec::new(),
        })
    }

    fn reset(&mut self) {
        self.sn1.reset();
        self.sn2.reset();
        self.tape.clear();
    }

    fn set_mode(&mut self, mode: BnMode) {
        self.bn1.mode = mode;
        self.bn2.mode = mode;
        if let Some((_, bn)) = &mut self.down {
            bn.mode = mode;
        }
    }

    /// One time step. `check_spikes` enforces the spike-driven invariant on
    /// every conv input.
    pub fn forward_step(&mut self, x: &Tensor, check_spikes: bool) -> Result<Tensor> {
        let s1 = self.sn1.step(x)?;
        if check_spikes && !s1.is_binary() {
            return Err(Error::Numeric("spike-driven invariant violated: conv1 input not binary".into()));
        }
        let c1 = conv2d(&s1, &self.conv1)?;
        let (b1, bn1_tape) = batchnorm(&c1, &mut self.bn1)?;
        let s2 = self.sn2.step(&b1)?;
        if check_spikes && !s2.is_binary() {
            return Err(Error::Numeric("spike-driven invariant violated: conv2 input not binary".into()));
        }
        let c2 = conv2d(&s2, &self.conv2)?;
        let (b2, bn2_tape) = batchnorm(&c2, &mut self.bn2)?;

        let (shortcut, bn_down_tape) = match &mut self.down {
            Some((conv_d, bn_d)) => {
                let cd = conv2d(&s1, conv_d)?;
                let (bd, tape) = batchnorm(&cd, bn_d)?;
                (bd, Some(tape))
            }
            None => (x.clone(), None),
        };
        let out = shortcut.add(&b2)?;
        self.tape.push(BlockStepTape {
            s1,
            s2,
            bn1: bn1_tape,
            bn2: bn2_tape,
            bn_down: bn_down_tape,
            input_shape: x.shape().to_vec(),
        });
        Ok(out)
    }

    /// Reverse-order step: consumes the latest un-consumed forward step.
    /// Accumulates parameter gradients into `grads` under `prefix`.
    pub fn backward_step(
        &mut self,
        d_out: &Tensor,
        prefix: &str,
        grads: &mut Gradients,
    ) -> Result<Tensor> {
        let step = self
            .tape
            .pop()
            .ok_or_else(|| Error::Tape(format!("{prefix}: no forward step recorded")))?;

        let (d_c2, dg2, db2) = batchnorm_backward(&self.bn2, &step.bn2, d_out)?;
        let (d_s2, d_w2) = conv2d_backward(&step.s2, &self.conv2, &d_c2)?;
        let d_b1 = self.sn2.backward_step(&d_s2)?;
        let (d_c1, dg1, db1) = batchnorm_backward(&self.bn1, &step.bn1, &d_b1)?;
        let (d_s1, d_w1) = conv2d_backward(&step.s1, &self.conv1, &d_c1)?;

        grads.accumulate(format!("{prefix}.conv2.kernel"), d_w2)?;
        grads.accumulate(format!("{prefix}.bn2.gamma"), dg2)?;
        grads.accumulate(format!("{prefix}.bn2.beta"), db2)?;
        grads.accumulate(format!("{prefix}.conv1.kernel"), d_w1)?;
        grads.accumulate(format!("{prefix}.bn1.gamma"), dg1)?;
        grads.accumulate(format!("{prefix}.bn1.beta"), db1)?;

        match (&self.down, &step.bn_down) {
            (Some((conv_d, bn_d)), Some(bn_tape)) => {
                let (d_cd, dgd, dbd) = batchnorm_backward(bn_d, bn_tape, d_out)?;
                let (d_s1b, d_wd) = conv2d_backward(&step.s1, conv_d, &d_cd)?;
                grads.accumulate(format!("{prefix}.down.conv.kernel"), d_wd)?;
                grads.accumulate(format!("{prefix}.down.bn.gamma"), dgd)?;
                grads.accumulate(format!("{prefix}.down.bn.beta"), dbd)?;
                let d_s1_total = d_s1.add(&d_s1b)?;
                self.sn1.backward_step(&d_s1_total)
            }
            _ => {
                debug_assert_eq!(step.input_shape, d_out.shape());
                let d_x = self.sn1.backward_step(&d_s1)?;
                d_x.add(d_out)
            }
        }
    }
}

/// Named parameter gradients, accumulated in deterministic (BTreeMap) order.
#[derive(Debug, Clone, Default)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    pub fn accumulate(&mut self, name: String, grad: Tensor) -> Result<()> {
        match self.0.get_mut(&name) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.0.insert(name, grad);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

#[derive(Debug, Clone)]
struct HeadStepTape {
    spikes: Tensor,
    pooled: Tensor,
}

#[derive(Debug, Clone)]
struct ForwardTape {
    encoder: Option<EncoderTape>,
    head: Vec<HeadStepTape>,
}

/// A built network: encoder parameters, MS blocks, spiking classifier head.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub encoder: EncoderSpec,
    pub blocks: Vec<MsBlock>,
    /// [n_classes, C_head]
    pub head_weight: Tensor,
    sn_head: LifLayer,
    tape: Option<ForwardTape>,
    /// Enforce the spike-driven invariant on every conv/head input.
    pub check_spike_driven: bool,
}

/// Deterministic parameter init from a seed.
pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = match spec.scheme {
        Scheme::Direct | Scheme::Gac => {
            let stem = StemParams::random(
                spec.input_channels,
                spec.stem_channels,
                spec.stem_kernel,
                &mut rng,
            )?;
            let gau = if spec.scheme == Scheme::Gac {
                let r = crate::coding::default_reduction(spec.t);
                Some(GauParams::random(spec.t, r, spec.stem_channels, spec.sca_kernel, &mut rng)?)
            } else {
                None
            };
            EncoderSpec {
                scheme: spec.scheme,
                t: spec.t,
                stem: Some(stem),
                gau,
                lif: spec.lif,
            }
        }
        _ => EncoderSpec {
            scheme: spec.scheme,
            t: spec.t,
            stem: None,
            gau: None,
            lif: spec.lif,
        },
    };
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for b in &spec.blocks {
        blocks.push(MsBlock::init(b, spec.lif, &mut rng)?);
    }
    let c_head = spec.head_channels();
    let head_weight = he_normal(&[spec.n_classes, c_head], c_head, &mut rng);
    Ok(Network {
        spec: spec.clone(),
        encoder,
        blocks,
        head_weight,
        sn_head: LifLayer::new(spec.lif),
        tape: None,
        check_spike_driven: false,
    })
}

impl Network {
    pub fn set_mode(&mut self, mode: BnMode) {
        self.encoder.set_bn_mode(mode);
        for b in &mut self.blocks {
            b.set_mode(mode);
        }
    }

    fn reset_states(&mut self) {
        for b in &mut self.blocks {
            b.reset();
        }
        self.sn_head.reset();
        self.tape = None;
    }

    /// Runs the encoder once, then unrolls the blocks over t with persistent
    /// LIF states; head = dense(avg_pool_spatial(SN(features_t))).
    /// Returns per-step logits [T,B,n_classes].
    pub fn forward(&mut self, images: &Tensor, seed: u64) -> Result<Tensor> {
        self.reset_states();
        let (encoded, enc_tape) = encode(images, &mut self.encoder, seed)?;
        let t_steps = self.spec.t;
        let check = self.check_spike_driven;
        let mut head_tapes = Vec::with_capacity(t_steps);
        let mut logits_data = Vec::new();
        let bsz = images.shape()[0];
        for t in 0..t_steps {
            let mut x = step_slice(&encoded.data, t)?;
            for block in &mut self.blocks {
                x = block.forward_step(&x, check)?;
            }
            let spikes = self.sn_head.step(&x)?;
            if check && !spikes.is_binary() {
                return Err(Error::Numeric("spike-driven invariant violated: head spikes not binary".into()));
            }
            let pooled = avg_pool_spatial(&spikes)?;
            let logits_t = dense(&pooled, &self.head_weight)?;
            logits_data.extend_from_slice(logits_t.data());
            head_tapes.push(HeadStepTape { spikes, pooled });
        }
        self.tape = Some(ForwardTape {
            encoder: enc_tape,
            head: head_tapes,
        });
        Tensor::new(vec![t_steps, bsz, self.spec.n_classes], logits_data)
    }

    /// Full STBP backward from per-step logit gradients [T,B,n_classes].
    /// Traverses time in reverse, accumulating spatial and temporal credit.
    pub fn backward(&mut self, d_logits: &Tensor) -> Result<Gradients> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::Tape("backward without a recorded forward".into()))?;
        let t_steps = self.spec.t;
        if d_logits.shape().first() != Some(&t_steps) {
            return Err(Error::Tape(format!(
                "logit grads {:?} do not match T = {t_steps}",
                d_logits.shape()
            )));
        }
        let mut grads = Gradients::default();
        let mut d_encoded_steps: Vec<Option<Tensor>> = vec![None; t_steps];
        for t in (0..t_steps).rev() {
            let head = &tape.head[t];
            let d_logits_t = step_slice(d_logits, t)?;
            let (d_pooled, d_w_head) = dense_backward(&head.pooled, &self.head_weight, &d_logits_t)?;
            grads.accumulate("head.weight".into(), d_w_head)?;
            let d_spikes = avg_pool_spatial_backward(head.spikes.shape(), &d_pooled)?;
            let mut d_x = self.sn_head.backward_step(&d_spikes)?;
            for (bi, block) in self.blocks.iter_mut().enumerate().rev() {
                d_x = block.backward_step(&d_x, &format!("block{bi}"), &mut grads)?;
            }
            d_encoded_steps[t] = Some(d_x);
        }
        if self.encoder.is_trainable() {
            let enc_tape = tape
                .encoder
                .as_ref()
                .ok_or_else(|| Error::Tape("missing encoder tape".into()))?;
            let mut data = Vec::new();
            let mut shape = vec![t_steps];
            for (t, step) in d_encoded_steps.iter().enumerate() {
                let step = step.as_ref().expect("filled above");
                if t == 0 {
                    shape.extend_from_slice(step.shape());
                }
                data.extend_from_slice(step.data());
            }
            let d_encoded = Tensor::new(shape, data)?;
            let enc_grads = encoder_backward(&self.encoder, enc_tape, &d_encoded)?;
            if let Some(g) = enc_grads.stem_kernel {
                grads.accumulate("encoder.stem.kernel".into(), g)?;
            }
            if let Some(g) = enc_grads.bn_gamma {
                grads.accumulate("encoder.bn.gamma".into(), g)?;
            }
            if let Some(g) = enc_grads.bn_beta {
                grads.accumulate("encoder.bn.beta".into(), g)?;
            }
            if let Some(g) = enc_grads.w_m {
                grads.accumulate("encoder.gau.w_m".into(), g)?;
            }
            if let Some(g) = enc_grads.w_n {
                grads.accumulate("encoder.gau.w_n".into(), g)?;
            }
            if let Some(g) = enc_grads.sca_kernel {
                grads.accumulate("encoder.gau.sca.kernel".into(), g)?;
            }
        }
        Ok(grads)
    }

    /// Trainable parameter names in deterministic order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(stem) = &self.encoder.stem {
            names.push("encoder.stem.kernel".to_string());
            if stem.bn.is_some() {
                names.push("encoder.bn.gamma".to_string());
                names.push("encoder.bn.beta".to_string());
            }
        }
        if self.encoder.gau.is_some() {
            names.push("encoder.gau.w_m".to_string());
            names.push("encoder.gau.w_n".to_string());
            names.push("encoder.gau.sca.kernel".to_string());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            names.push(format!("block{i}.conv1.kernel"));
            names.push(format!("block{i}.bn1.gamma"));
            names.push(format!("block{i}.bn1.beta"));
            names.push(format!("block{i}.conv2.kernel"));
            names.push(format!("block{i}.bn2.gamma"));
            names.push(format!("block{i}.bn2.beta"));
            if b.down.is_some() {
                names.push(format!("block{i}.down.conv.kernel"));
                names.push(format!("block{i}.down.bn.gamma"));
                names.push(format!("block{i}.down.bn.beta"));
            }
        }
        names.push("head.weight".to_string());
        names.sort();
        names
    }

    /// Non-trainable persistent state (BN running statistics).
    pub fn state_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(stem) = &self.encoder.stem {
            if stem.bn.is_some() {
                names.push("encoder.bn.running_mean".to_string());
                names.push("encoder.bn.running_var".to_string());
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            names.push(format!("block{i}.bn1.running_mean"));
            names.push(format!("block{i}.bn1.running_var"));
            names.push(format!("block{i}.bn2.running_mean"));
            names.push(format!("block{i}.bn2.running_var"));
            if b.down.is_some() {
                names.push(format!("block{i}.down.bn.running_mean"));
                names.push(format!("block{i}.down.bn.running_var"));
            }
        }
        names.sort();
        names
    }

    fn tensor_ref(&self, name: &str) -> Option<&Tensor> {
        let block_at = |i: usize| self.blocks.get(i);
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["encoder", "stem", "kernel"] => self.encoder.stem.as_ref().map(|s| &s.conv.kernel),
            ["encoder", "bn", field] => {
                let bn = self.encoder.stem.as_ref()?.bn.as_ref()?;
                bn_field(bn, field)
            }
            ["encoder", "gau", "w_m"] => self.encoder.gau.as_ref().map(|g| &g.w_m),
            ["encoder", "gau", "w_n"] => self.encoder.gau.as_ref().map(|g| &g.w_n),
            ["encoder", "gau", "sca", "kernel"] => self.encoder.gau.as_ref().map(|g| &g.sca.kernel),
            ["head", "weight"] => Some(&self.head_weight),
            [block, rest @ ..] if block.starts_with("block") => {
                let i: usize = block[5..].parse().ok()?;
                let b = block_at(i)?;
                match rest {
                    ["conv1", "kernel"] => Some(&b.conv1.kernel),
                    ["conv2", "kernel"] => Some(&b.conv2.kernel),
                    ["bn1", field] => bn_field(&b.bn1, field),
                    ["bn2", field] => bn_field(&b.bn2, field),
                    ["down", "conv", "kernel"] => b.down.as_ref().map(|(c, _)| &c.kernel),
                    ["down", "bn", field] => b.down.as_ref().and_then(|(_, bn)| bn_field(bn, field)),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.tensor_ref(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let parts: Vec<String> = name.split('.').map(str::to_string).collect();
        let parts: Vec<&str> = parts.iter().map(String::as_str).collect();
        match parts.as_slice() {
            ["encoder", "stem", "kernel"] => self.encoder.stem.as_mut().map(|s| &mut s.conv.kernel),
            ["encoder", "bn", field] => {
                let bn = self.encoder.stem.as_mut()?.bn.as_mut()?;
                bn_field_mut(bn, field)
            }
            ["encoder", "gau", "w_m"] => self.encoder.gau.as_mut().map(|g| &mut g.w_m),
            ["encoder", "gau", "w_n"] => self.encoder.gau.as_mut().map(|g| &mut g.w_n),
            ["encoder", "gau", "sca", "kernel"] => self.encoder.gau.as_mut().map(|g| &mut g.sca.kernel),
            ["head", "weight"] => Some(&mut self.head_weight),
            [block, rest @ ..] if block.starts_with("block") => {
                let i: usize = block[5..].parse().ok()?;
                let b = self.blocks.get_mut(i)?;
                match rest {
                    ["conv1", "kernel"] => Some(&mut b.conv1.kernel),
                    ["conv2", "kernel"] => Some(&mut b.conv2.kernel),
                    ["bn1", field] => bn_field_mut(&mut b.bn1, field),
                    ["bn2", field] => bn_field_mut(&mut b.bn2, field),
                    ["down", "conv", "kernel"] => b.down.as_mut().map(|(c, _)| &mut c.kernel),
                    ["down", "bn", field] => b.down.as_mut().and_then(|(_, bn)| bn_field_mut(bn, field)),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// Firing rate of the binary input feeding each conv/fc layer, read from
    /// the tapes of the most recent `forward` (before any `backward`, which
    /// consumes them). Keys: `blockN.conv1`, `blockN.conv2`, `blockN.down.conv`,
    /// `head.fc`; rates average over all steps, batch, and positions.
    pub fn recorded_spike_rates(&self) -> Result<Vec<(String, f64)>> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::Tape("no forward recorded for firing-rate measurement".into()))?;
        let mut rates = Vec::new();
        let rate_of = |tensors: Vec<&Tensor>| -> Result<f64> {
            let mut ones = 0.0;
            let mut total = 0usize;
            for t in tensors {
                if !t.is_binary() {
                    return Err(Error::Input("recorded spikes not binary".into()));
                }
                ones += t.data().iter().sum::<f64>();
                total += t.len();
            }
            Ok(ones / total.max(1) as f64)
        };
        for (i, block) in self.blocks.iter().enumerate() {
            if block.tape.len() != self.spec.t {
                return Err(Error::Tape(format!(
                    "block{i} tape holds {} steps, expected {}",
                    block.tape.len(),
                    self.spec.t
                )));
            }
            let s1: Vec<&Tensor> = block.tape.iter().map(|s| &s.s1).collect();
            let s2: Vec<&Tensor> = block.tape.iter().map(|s| &s.s2).collect();
            rates.push((format!("block{i}.conv1"), rate_of(s1.clone())?));
            rates.push((format!("block{i}.conv2"), rate_of(s2)?));
            if block.down.is_some() {
                rates.push((format!("block{i}.down.conv"), rate_of(s1)?));
            }
        }
        let head: Vec<&Tensor> = tape.head.iter().map(|h| &h.spikes).collect();
        rates.push(("head.fc".to_string(), rate_of(head)?));
        Ok(rates)
    }

    /// Aggregate spikes-per-position rate over every recorded tap (all conv
    /// and head inputs, all steps), from the most recent `forward`.
    pub fn overall_firing_rate(&self) -> Result<f64> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::Tape("no forward recorded for firing-rate measurement".into()))?;
        let mut ones = 0.0;
        let mut total = 0usize;
        for block in &self.blocks {
            for step in &block.tape {
                ones += step.s1.data().iter().sum::<f64>();
                total += step.s1.len();
                ones += step.s2.data().iter().sum::<f64>();
                total += step.s2.len();
            }
        }
        for h in &tape.head {
            ones += h.spikes.data().iter().sum::<f64>();
            total += h.spikes.len();
        }
        Ok(ones / total.max(1) as f64)
    }

    pub fn param_count(&self) -> usize {
        self.param_names()
            .iter()
            .map(|n| self.param(n).map(Tensor::len).unwrap_or(0))
            .sum()
    }
}

fn bn_field<'a>(bn: &'a BatchNormParams, field: &str) -> Option<&'a Tensor> {
    match field {
        "gamma" => Some(&bn.gamma),
        "beta" => Some(&bn.beta),
        "running_mean" => Some(&bn.running_mean),
        "running_var" => Some(&bn.running_var),
        _ => None,
    }
}

fn bn_field_mut<'a>(bn: &'a mut BatchNormParams, field: &str) -> Option<&'a mut Tensor> {
    match field {
        "gamma" => Some(&mut bn.gamma),
        "beta" => Some(&mut bn.beta),
        "running_mean" => Some(&mut bn.running_mean),
        "running_var" => Some(&mut bn.running_var),
        _ => None,
    }
}

/// K = (1/T) * sum_t O^t, the mean-over-time decoder.
pub fn decode_mean(per_step_logits: &Tensor) -> Result<Tensor> {
    let shape = per_step_logits.shape();
    if shape.len() < 2 {
        return Err(Error::shape("decode_mean", format!("{shape:?}")));
    }
    let t = shape[0];
    let elems = per_step_logits.len() / t;
    let mut out = vec![0.0; elems];
    for ti in 0..t {
        for k in 0..elems {
            out[k] += per_step_logits.data()[ti * elems + k];
        }
    }
    for v in &mut out {
        *v /= t as f64;
    }
    Tensor::new(shape[1..].to_vec(), out)
}

// ---------------------------------------------------------------------------
// Checkpoint format: text header then raw little-endian f64 payload.
//   spikecodec-checkpoint v1
//   spec <one-line JSON NetworkSpec>
//   tensor <name> <ndim> <dims..> <offset-elements>
//   ...
//   end
// ---------------------------------------------------------------------------

pub fn save_checkpoint(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    let p = path.as_ref();
    let file = std::fs::File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let spec_json = serde_json::to_string(&net.spec)
        .map_err(|e| Error::Config(format!("spec serialization: {e}")))?;
    let mut names = net.param_names();
    names.extend(net.state_names());
    let mut header = format!("spikecodec-checkpoint v1\nspec {spec_json}\n");
    let mut offset = 0usize;
    for name in &names {
        let t = net
            .param(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor {name}")))?;
        header.push_str(&format!("tensor {name} {}", t.ndim()));
        for d in t.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push_str(&format!(" {offset}\n"));
        offset += t.len();
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())
        .map_err(|e| Error::io(p.display().to_string(), e))?;
    for name in &names {
        for &v in net.param(name).unwrap().data() {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(p.display().to_string(), e))?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let p = path.as_ref();
    let pathstr = p.display().to_string();
    let file = std::fs::File::open(p).map_err(|e| Error::io(pathstr.clone(), e))?;
    let mut r = std::io::BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(pathstr.clone(), e))?;
    if line.trim_end() != "spikecodec-checkpoint v1" {
        return Err(Error::format(&pathstr, 0, format!("bad checkpoint header '{}'", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| Error::io(pathstr.clone(), e))?;
    let spec_json = line
        .strip_prefix("spec ")
        .ok_or_else(|| Error::format(&pathstr, 0, "missing spec line"))?;
    let spec: NetworkSpec = serde_json::from_str(spec_json.trim_end())
        .map_err(|e| Error::format(&pathstr, 0, format!("bad spec JSON: {e}")))?;
    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
    loop {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::io(pathstr.clone(), e))?;
        if n == 0 {
            return Err(Error::format(&pathstr, 0, "truncated header"));
        }
        let trimmed = line.trim_end();
        if trimmed == "end" {
            break;
        }
        let mut parts = trimmed.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::format(&pathstr, 0, format!("bad header line '{trimmed}'")));
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::format(&pathstr, 0, "missing tensor name"))?
            .to_string();
        let ndim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(&pathstr, 0, "bad ndim"))?;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(
                parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(&pathstr, 0, "bad dim"))?,
            );
        }
        let offset: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(&pathstr, 0, "bad offset"))?;
        entries.push((name, dims, offset));
    }
    // seed is irrelevant; every tensor is overwritten below
    let mut net = build(&spec, 0)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(pathstr.clone(), e))?;
    for (name, dims, offset) in entries {
        let len: usize = dims.iter().product();
        let start = offset * 8;
        let end = start + len * 8;
        if end > payload.len() {
            return Err(Error::format(&pathstr, start as u64, format!("payload too short for {name}")));
        }
        let mut data = Vec::with_capacity(len);
        for k in 0..len {
            let mut b = [0u8; 8];
            b.copy_from_slice(&payload[start + k * 8..start + (k + 1) * 8]);
            data.push(f64::from_le_bytes(b));
        }
        let tensor = Tensor::new(dims, data)?;
        let slot = net
            .param_mut(&name)
            .ok_or_else(|| Error::format(&pathstr, 0, format!("checkpoint tensor {name} has no slot")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::format(
                &pathstr,
                0,
                format!("tensor {name}: shape {:?} vs expected {:?}", tensor.shape(), slot.shape()),
            ));
        }
        *slot = tensor;
    }
    Ok(net)
}
