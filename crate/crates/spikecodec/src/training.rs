//! Surrogate-gradient training: cross-entropy on the mean-over-time decoded
//! output, full backpropagation through time (spatial and temporal credit),
//! SGD with momentum and weight decay, and a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentFlags, Dataset};
use crate::error::{Error, Result};
use crate::network::{decode_mean, save_checkpoint, Gradients, Network};
use crate::ops::BnMode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Skip encoder parameter updates (their gradients are reported as zero).
    pub freeze_encoder: bool,
    pub augment_flip: bool,
    pub augment_crop_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            freeze_encoder: false,
            augment_flip: false,
            augment_crop_pad: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,loss,acc,lr";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.step, self.loss, self.accuracy, self.lr)
    }
}

/// Batch-mean cross-entropy over logits K [B,n] with a numerically
/// stabilized softmax. Returns (loss, dL/dK) where L is the mean loss.
pub fn cross_entropy(k: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let shape = k.shape();
    if shape.len() != 2 {
        return Err(Error::shape("cross_entropy", format!("expected [B,n], got {shape:?}")));
    }
    let (b, n) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::Input(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Input(format!("label {bad} out of range 0..{n}")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * n];
    for i in 0..b {
        let row = &k.data()[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let y = labels[i];
        loss += z.ln() - (row[y] - max);
        for j in 0..n {
            let q = exps[j] / z;
            grad[i * n + j] = (q - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, n], grad)?))
}

/// lr(e) = 0.5 * lr0 * (1 + cos(pi * e / total)), decaying to 0.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// Backpropagates dL/dK through the mean-over-time decode and then through
/// the whole unrolled network and (unless frozen) the encoder. Requires the
/// tape from the immediately preceding `Network::forward`.
pub fn stbp_backward(net: &mut Network, d_k: &Tensor, freeze_encoder: bool) -> Result<Gradients> {
    let t = net.spec.t;
    let elems = d_k.len();
    // K = (1/T) sum_t O_t, so each per-step logit grad is dK / T
    let mut data = Vec::with_capacity(t * elems);
    for _ in 0..t {
        data.extend(d_k.data().iter().map(|&v| v / t as f64));
    }
    let mut shape = vec![t];
    shape.extend_from_slice(d_k.shape());
    let d_logits = Tensor::new(shape, data)?;
    let mut grads = net.backward(&d_logits)?;
    if freeze_encoder {
        let encoder_keys: Vec<String> = grads
            .0
            .keys()
            .filter(|k| k.starts_with("encoder."))
            .cloned()
            .collect();
        for key in encoder_keys {
            let zero = Tensor::zeros(grads.0[&key].shape());
            grads.0.insert(key, zero);
        }
    }
    Ok(grads)
}

/// Momentum buffers keyed by parameter name.
pub type Velocity = BTreeMap<String, Tensor>;

/// v <- momentum*v + grad + wd*param; param <- param - lr*v.
/// Weight decay is not applied to BN affine parameters (gamma/beta).
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    velocity: &mut Velocity,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for name in net.param_names() {
        let param = net
            .param(&name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?
            .clone();
        let wd = if name.ends_with(".gamma") || name.ends_with(".beta") {
            0.0
        } else {
            cfg.weight_decay
        };
        let v = velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if v.shape() != param.shape() {
            return Err(Error::shape("sgd_step", format!("velocity/param mismatch for {name}")));
        }
        let vd = v.data_mut();
        match grads.get(&name) {
            Some(g) => {
                if g.shape() != param.shape() {
                    return Err(Error::shape("sgd_step", format!("grad/param mismatch for {name}")));
                }
                for ((vi, &gi), &pi) in vd.iter_mut().zip(g.data()).zip(param.data()) {
                    *vi = cfg.momentum * *vi + gi + wd * pi;
                }
            }
            None => {
                for (vi, &pi) in vd.iter_mut().zip(param.data()) {
                    *vi = cfg.momentum * *vi + wd * pi;
                }
            }
        }
        let v = velocity[&name].clone();
        let p = net.param_mut(&name).expect("validated above");
        for (pi, &vi) in p.data_mut().iter_mut().zip(v.data()) {
            *pi -= lr * vi;
        }
    }
    Ok(())
}

fn fisher_yates(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batch_accuracy(k: &Tensor, labels: &[usize]) -> f64 {
    let n = k.shape()[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&k.data()[i * n..(i + 1) * n]) == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Top-1 accuracy with BN in eval mode; restores train mode afterwards only
/// if the caller asks for it (mode is left in Eval).
pub fn evaluate(net: &mut Network, dataset: &Dataset, batch_size: usize, seed: u64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    net.set_mode(BnMode::Eval);
    let n = dataset.len();
    let mut correct = 0usize;
    let mut start = 0usize;
    let mut step = 0u64;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (images, labels) = dataset.batch(&indices)?;
        let logits = net.forward(&images, seed.wrapping_add(step))?;
        let k = decode_mean(&logits)?;
        let nc = k.shape()[1];
        for (i, &y) in labels.iter().enumerate() {
            if argmax(&k.data()[i * nc..(i + 1) * nc]) == y {
                correct += 1;
            }
        }
        start = end;
        step += 1;
    }
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
    pub best_eval_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Full training loop. Shuffles with a seeded permutation each epoch, aborts
/// on non-finite loss, evaluates after every epoch when an eval split is
/// given, and checkpoints the best eval accuracy to `best_path`.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
    best_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    let n = train_set.len();
    let mut velocity = Velocity::new();
    let mut records = Vec::new();
    let mut best_eval: Option<f64> = None;
    let mut best_epoch = None;
    let aug = AugmentFlags { flip: cfg.augment_flip, crop_pad: cfg.augment_crop_pad };
    let augment_on = aug.flip || aug.crop_pad > 0;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
        net.set_mode(BnMode::Train);
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let order = fisher_yates(n, &mut shuffle_rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut images, labels) = train_set.batch(chunk)?;
            if augment_on {
                images = augment_batch(&images, aug, cfg.seed, epoch, step)?;
            }
            let forward_seed = cfg
                .seed
                .wrapping_add((epoch as u64) << 32)
                .wrapping_add(step as u64);
            let logits = net.forward(&images, forward_seed)?;
            let k = decode_mean(&logits)?;
            let (loss, d_k) = cross_entropy(&k, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch} step {step}; aborting"
                )));
            }
            let acc = batch_accuracy(&k, &labels);
            let grads = stbp_backward(net, &d_k, cfg.freeze_encoder)?;
            sgd_step(net, &grads, &mut velocity, cfg, lr)?;
            records.push(LossRecord { epoch, step, loss, accuracy: acc, lr });
        }
        if let Some(eval) = eval_set {
            let acc = evaluate(net, eval, cfg.batch_size, cfg.seed)?;
            if best_eval.map(|b| acc > b).unwrap_or(true) {
                best_eval = Some(acc);
                best_epoch = Some(epoch);
                if let Some(path) = best_path {
                    save_checkpoint(path, net)?;
                }
            }
        }
    }
    if cfg.epochs == 0 {
        if let Some(path) = best_path {
            save_checkpoint(path, net)?;
        }
    }
    Ok(TrainOutcome { records, best_eval_accuracy: best_eval, best_epoch })
}

fn augment_batch(images: &Tensor, flags: AugmentFlags, seed: u64, epoch: usize, step: usize) -> Result<Tensor> {
    let shape = images.shape();
    let b = shape[0];
    let per = shape[1..].iter().product::<usize>();
    let mut out = Vec::with_capacity(images.len());
    for i in 0..b {
        let img = Tensor::new(shape[1..].to_vec(), images.data()[i * per..(i + 1) * per].to_vec())?;
        // per-sample counter-derived stream: independent of batch layout
        let sample_seed = seed
            .wrapping_add(0x5851_f42d_4c95_7f2d)
            .wrapping_mul(((epoch as u64) << 40) | ((step as u64) << 20) | i as u64 | 1);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let aug = augment(&img, &mut rng, flags)?;
        out.extend_from_slice(aug.data());
    }
    Tensor::new(shape.to_vec(), out)
}
