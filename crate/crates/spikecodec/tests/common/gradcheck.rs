//! Reusable gradient-check routines shared by the gradient and acceptance
//! suites. Each returns the worst error observed over the requested number of
//! seeds; callers assert against their own tolerance.

use super::{max_rel_error, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikecodec::coding::{
    encode_direct, encode_gac, encoder_backward, EncoderSpec, GauParams, Scheme, StemParams,
};
use spikecodec::network::{build, decode_mean, MsBlockSpec, NetworkSpec};
use spikecodec::neuron::{lif_backward, lif_sequence, LifConfig};
use spikecodec::ops::{
    avg_pool_spatial, avg_pool_spatial_backward, batchnorm, batchnorm_backward, conv2d,
    conv2d_backward, dense, dense_backward, global_pool, global_pool_backward, BatchNormParams,
    ConvParams, PoolKind,
};
use spikecodec::tensor::{
    hadamard, hadamard_backward, relu, relu_backward, sigmoid, sigmoid_backward,
};
use spikecodec::training::{cross_entropy, stbp_backward};
use spikecodec::Tensor;

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-12;

fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

// ---------------------------------------------------------------------------
// Finite differences over the smooth ops
// ---------------------------------------------------------------------------

pub fn fd_conv2d(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input0 = rand_vec(&mut rng, 2 * 16, -1.0, 1.0);
        let kernel0 = rand_vec(&mut rng, 2 * 2 * 9, -0.6, 0.6);
        let weights = rand_vec(&mut rng, 2 * 16, -1.0, 1.0);
        let stride = if seed % 2 == 0 { 1 } else { 2 };
        let run = |input: &[f64], kernel: &[f64]| -> (f64, Tensor, Tensor) {
            let x = Tensor::new(vec![1, 2, 4, 4], input.to_vec()).unwrap();
            let k = Tensor::new(vec![2, 2, 3, 3], kernel.to_vec()).unwrap();
            let params =
                ConvParams::new(k, (stride, stride), ConvParams::same_padding(3, 3)).unwrap();
            let out = conv2d(&x, &params).unwrap();
            let w = &weights[..out.len()];
            let loss: f64 = out.data().iter().zip(w).map(|(o, wi)| o * wi).sum();
            let upstream = Tensor::new(out.shape().to_vec(), w.to_vec()).unwrap();
            let (gx, gk) = conv2d_backward(&x, &params, &upstream).unwrap();
            (loss, gx, gk)
        };
        let (_, gx, gk) = run(&input0, &kernel0);
        let mut f_input = |v: &[f64]| run(v, &kernel0).0;
        worst = worst.max(max_rel_error(&mut f_input, &input0, gx.data(), FD_H));
        let mut f_kernel = |v: &[f64]| run(&input0, v).0;
        worst = worst.max(max_rel_error(&mut f_kernel, &kernel0, gk.data(), FD_H));
    }
    worst
}

pub fn fd_dense(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x0 = rand_vec(&mut rng, 2 * 3, -1.0, 1.0);
        let w0 = rand_vec(&mut rng, 4 * 3, -1.0, 1.0);
        let up = rand_vec(&mut rng, 2 * 4, -1.0, 1.0);
        let run = |xv: &[f64], wv: &[f64]| -> (f64, Tensor, Tensor) {
            let x = Tensor::new(vec![2, 3], xv.to_vec()).unwrap();
            let w = Tensor::new(vec![4, 3], wv.to_vec()).unwrap();
            let out = dense(&x, &w).unwrap();
            let loss: f64 = out.data().iter().zip(&up).map(|(o, u)| o * u).sum();
            let upstream = Tensor::new(vec![2, 4], up.clone()).unwrap();
            let (gx, gw) = dense_backward(&x, &w, &upstream).unwrap();
            (loss, gx, gw)
        };
        let (_, gx, gw) = run(&x0, &w0);
        let mut fx = |v: &[f64]| run(v, &w0).0;
        worst = worst.max(max_rel_error(&mut fx, &x0, gx.data(), FD_H));
        let mut fw = |v: &[f64]| run(&x0, v).0;
        worst = worst.max(max_rel_error(&mut fw, &w0, gw.data(), FD_H));
    }
    worst
}

pub fn fd_batchnorm(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let x0 = rand_vec(&mut rng, 2 * 2 * 9, -1.5, 1.5);
        let gamma0 = rand_vec(&mut rng, 2, 0.5, 1.5);
        let beta0 = rand_vec(&mut rng, 2, -0.3, 0.3);
        let up = rand_vec(&mut rng, 2 * 2 * 9, -1.0, 1.0);
        let run = |xv: &[f64], gv: &[f64], bv: &[f64]| -> (f64, Tensor, Tensor, Tensor) {
            let x = Tensor::new(vec![2, 2, 3, 3], xv.to_vec()).unwrap();
            let mut bn = BatchNormParams::new(2, 1e-5, 0.1);
            bn.gamma = Tensor::new(vec![2], gv.to_vec()).unwrap();
            bn.beta = Tensor::new(vec![2], bv.to_vec()).unwrap();
            let (out, tape) = batchnorm(&x, &mut bn).unwrap();
            let loss: f64 = out.data().iter().zip(&up).map(|(o, u)| o * u).sum();
            let upstream = Tensor::new(out.shape().to_vec(), up.clone()).unwrap();
            let (gx, gg, gb) = batchnorm_backward(&bn, &tape, &upstream).unwrap();
            (loss, gx, gg, gb)
        };
        let (_, gx, gg, gb) = run(&x0, &gamma0, &beta0);
        let mut fx = |v: &[f64]| run(v, &gamma0, &beta0).0;
        worst = worst.max(max_rel_error(&mut fx, &x0, gx.data(), FD_H));
        let mut fg = |v: &[f64]| run(&x0, v, &beta0).0;
        worst = worst.max(max_rel_error(&mut fg, &gamma0, gg.data(), FD_H));
        let mut fb = |v: &[f64]| run(&x0, &gamma0, v).0;
        worst = worst.max(max_rel_error(&mut fb, &beta0, gb.data(), FD_H));
    }
    worst
}

pub fn fd_pointwise(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        // keep relu inputs away from the kink at 0
        let x0: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let up = rand_vec(&mut rng, 12, -1.0, 1.0);
        let upstream = Tensor::new(vec![12], up.clone()).unwrap();

        let sig_run = |xv: &[f64]| {
            let x = Tensor::new(vec![12], xv.to_vec()).unwrap();
            let y = sigmoid(&x);
            let loss: f64 = y.data().iter().zip(&up).map(|(o, u)| o * u).sum();
            (loss, sigmoid_backward(&y, &upstream).unwrap())
        };
        let (_, gs) = sig_run(&x0);
        let mut fs = |v: &[f64]| sig_run(v).0;
        worst = worst.max(max_rel_error(&mut fs, &x0, gs.data(), FD_H));

        let relu_run = |xv: &[f64]| {
            let x = Tensor::new(vec![12], xv.to_vec()).unwrap();
            let y = relu(&x);
            let loss: f64 = y.data().iter().zip(&up).map(|(o, u)| o * u).sum();
            (loss, relu_backward(&x, &upstream).unwrap())
        };
        let (_, gr) = relu_run(&x0);
        let mut fr = |v: &[f64]| relu_run(v).0;
        worst = worst.max(max_rel_error(&mut fr, &x0, gr.data(), FD_H));

        // broadcast hadamard: [T] gate against [T,2,2]
        let gate0 = rand_vec(&mut rng, 3, -1.0, 1.0);
        let feat0 = rand_vec(&mut rng, 12, -1.0, 1.0);
        let had_run = |gv: &[f64], fv: &[f64]| {
            let gte = Tensor::new(vec![3], gv.to_vec()).unwrap();
            let feat = Tensor::new(vec![3, 2, 2], fv.to_vec()).unwrap();
            let out = hadamard(&gte, &feat).unwrap();
            let loss: f64 = out.data().iter().zip(&up).map(|(o, u)| o * u).sum();
            let upstream3 = Tensor::new(vec![3, 2, 2], up.clone()).unwrap();
            let (ga, gb) = hadamard_backward(&gte, &feat, &upstream3).unwrap();
            (loss, ga, gb)
        };
        let (_, ga, gb) = had_run(&gate0, &feat0);
        let mut fg = |v: &[f64]| had_run(v, &feat0).0;
        worst = worst.max(max_rel_error(&mut fg, &gate0, ga.data(), FD_H));
        let mut ff = |v: &[f64]| had_run(&gate0, v).0;
        worst = worst.max(max_rel_error(&mut ff, &feat0, gb.data(), FD_H));
    }
    worst
}

pub fn fd_pooling(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        // unique values keep the max selection stable under the FD step
        let mut x0 = rand_vec(&mut rng, 2 * 2 * 2 * 2, -1.0, 1.0);
        for (i, v) in x0.iter_mut().enumerate() {
            *v += i as f64 * 1e-3;
        }
        let up = rand_vec(&mut rng, 4, -1.0, 1.0);
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let run = |xv: &[f64]| {
                let x = Tensor::new(vec![2, 1, 2, 2, 2], xv.to_vec()).unwrap();
                let out = global_pool(&x, kind).unwrap(); // [T,B] = [2,1]
                let loss: f64 = out.data().iter().zip(&up).map(|(o, u)| o * u).sum();
                let upstream = Tensor::new(vec![2, 1], up[..2].to_vec()).unwrap();
                let g = global_pool_backward(&x, kind, &upstream).unwrap();
                (loss, g)
            };
            let (_, g) = run(&x0);
            let mut f = |v: &[f64]| run(v).0;
            worst = worst.max(max_rel_error(&mut f, &x0, g.data(), FD_H));
        }

        let sp0 = rand_vec(&mut rng, 2 * 2 * 2, -1.0, 1.0);
        let run_sp = |xv: &[f64]| {
            let x = Tensor::new(vec![1, 2, 2, 2], xv.to_vec()).unwrap();
            let out = avg_pool_spatial(&x).unwrap(); // [1,2]
            let loss: f64 = out.data().iter().zip(&up).map(|(o, u)| o * u).sum();
            let upstream = Tensor::new(vec![1, 2], up[..2].to_vec()).unwrap();
            let g = avg_pool_spatial_backward(x.shape(), &upstream).unwrap();
            (loss, g)
        };
        let (_, gsp) = run_sp(&sp0);
        let mut fsp = |v: &[f64]| run_sp(v).0;
        worst = worst.max(max_rel_error(&mut fsp, &sp0, gsp.data(), FD_H));
    }
    worst
}

/// Worst relative error over all finite-difference checks.
pub fn fd_all_ops(seeds: u64) -> f64 {
    fd_conv2d(seeds)
        .max(fd_dense(seeds))
        .max(fd_batchnorm(seeds))
        .max(fd_pointwise(seeds))
        .max(fd_pooling(seeds))
}

// ---------------------------------------------------------------------------
// Exact unrolled-graph oracles across the spiking nonlinearity
// ---------------------------------------------------------------------------

/// Unrolls the LIF recurrence for one neuron: returns (spike ids, final h id).
pub fn graph_lif(g: &mut Graph, inputs: &[usize], cfg: &LifConfig) -> (Vec<usize>, usize) {
    let one = g.leaf(1.0);
    let mut h = g.leaf(0.0);
    let mut spikes = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let u = g.add(h, x);
        let s = g.spike(u, cfg.v_th, cfg.a);
        let one_minus_s = g.sub(one, s);
        let decay = g.mul(u, one_minus_s);
        let decay = g.scale(decay, cfg.tau);
        let reset = g.scale(s, cfg.v_reset);
        h = g.add(decay, reset);
        spikes.push(s);
    }
    (spikes, h)
}

pub fn oracle_lif(seeds: u64) -> f64 {
    let cfg = LifConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let t = 3;
        let n = 2;
        let inputs = rand_vec(&mut rng, t * n, -0.2, 1.2);
        let weights = rand_vec(&mut rng, t * n, -1.0, 1.0);
        let x = Tensor::new(vec![t, n], inputs.clone()).unwrap();
        let (spikes, tape) = lif_sequence(&x, &cfg, None).unwrap();
        let upstream = Tensor::new(vec![t, n], weights.clone()).unwrap();
        let grads = lif_backward(&tape, &cfg, &upstream, None).unwrap();

        for ni in 0..n {
            let mut g = Graph::new();
            let ids: Vec<usize> = (0..t).map(|ti| g.leaf(inputs[ti * n + ni])).collect();
            let (s_ids, _) = graph_lif(&mut g, &ids, &cfg);
            let w: Vec<f64> = (0..t).map(|ti| weights[ti * n + ni]).collect();
            let loss = g.weighted_sum(&s_ids, &w);
            g.backward(loss);
            for ti in 0..t {
                assert_eq!(g.val(s_ids[ti]), spikes.data()[ti * n + ni], "spike {ti},{ni}");
                worst = worst.max((g.grad(ids[ti]) - grads.data()[ti * n + ni]).abs());
            }
        }
    }
    worst
}

pub fn oracle_direct_encoder(seeds: u64) -> f64 {
    let cfg = LifConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let t = 3;
        let pixels = rand_vec(&mut rng, 4, 0.0, 1.0);
        let w0: f64 = rng.gen_range(0.4..1.4);
        let weights = rand_vec(&mut rng, t * 4, -1.0, 1.0);

        let images = Tensor::new(vec![1, 1, 2, 2], pixels.clone()).unwrap();
        let mut stem = StemParams::identity(1).unwrap();
        stem.conv.kernel = Tensor::new(vec![1, 1, 1, 1], vec![w0]).unwrap();
        let mut spec =
            EncoderSpec { scheme: Scheme::Direct, t, stem: Some(stem), gau: None, lif: cfg };
        let (seq, tape) = encode_direct(&images, &mut spec).unwrap();
        let upstream = Tensor::new(seq.data.shape().to_vec(), weights.clone()).unwrap();
        let grads = encoder_backward(&spec, &tape, &upstream).unwrap();

        let mut g = Graph::new();
        let w_id = g.leaf(w0);
        let mut spike_ids = vec![Vec::new(); t];
        for (pi, &p) in pixels.iter().enumerate() {
            let x = g.leaf(p);
            let y = g.mul(w_id, x);
            let reps = vec![y; t];
            let (s_ids, _) = graph_lif(&mut g, &reps, &cfg);
            for ti in 0..t {
                spike_ids[ti].push((pi, s_ids[ti]));
            }
        }
        let mut terms = Vec::new();
        for ti in 0..t {
            for &(pi, sid) in &spike_ids[ti] {
                terms.push(g.scale(sid, weights[ti * 4 + pi]));
            }
        }
        let loss = g.sum(&terms);
        g.backward(loss);
        let dw = grads.stem_kernel.unwrap();
        worst = worst.max((g.grad(w_id) - dw.data()[0]).abs());
    }
    worst
}

pub fn oracle_gac_encoder(seeds: u64) -> f64 {
    let cfg = LifConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let t = 2;
        let pixels = rand_vec(&mut rng, 4, 0.1, 1.0);
        let w0: f64 = rng.gen_range(0.4..1.4);
        let wn0 = rand_vec(&mut rng, 2, -0.8, 0.8); // [1,2]
        let wm0 = rand_vec(&mut rng, 2, -0.8, 0.8); // [2,1]
        let v0: f64 = rng.gen_range(-1.0..1.0); // 1x1 spatial-attention kernel
        let weights = rand_vec(&mut rng, t * 4, -1.0, 1.0);

        let images = Tensor::new(vec![1, 1, 2, 2], pixels.clone()).unwrap();
        let mut stem = StemParams::identity(1).unwrap();
        stem.conv.kernel = Tensor::new(vec![1, 1, 1, 1], vec![w0]).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let mut gau = GauParams::random(t, 2, 1, 1, &mut rng2).unwrap();
        gau.w_n = Tensor::new(vec![1, 2], wn0.clone()).unwrap();
        gau.w_m = Tensor::new(vec![2, 1], wm0.clone()).unwrap();
        gau.sca.kernel = Tensor::new(vec![1, 1, 1, 1], vec![v0]).unwrap();
        let mut spec =
            EncoderSpec { scheme: Scheme::Gac, t, stem: Some(stem), gau: Some(gau), lif: cfg };
        let (seq, tape) = encode_gac(&images, &mut spec).unwrap();
        let upstream = Tensor::new(seq.data.shape().to_vec(), weights.clone()).unwrap();
        let grads = encoder_backward(&spec, &tape, &upstream).unwrap();

        // oracle graph
        let mut g = Graph::new();
        let w_id = g.leaf(w0);
        let wn_ids: Vec<usize> = wn0.iter().map(|&v| g.leaf(v)).collect();
        let wm_ids: Vec<usize> = wm0.iter().map(|&v| g.leaf(v)).collect();
        let v_id = g.leaf(v0);
        // stem and spikes per pixel
        let mut y_ids = Vec::new();
        let mut s_ids_by_t = vec![Vec::new(); t];
        for &p in &pixels {
            let x = g.leaf(p);
            let y = g.mul(w_id, x);
            y_ids.push(y);
            let reps = vec![y; t];
            let (s_ids, _) = graph_lif(&mut g, &reps, &cfg);
            for ti in 0..t {
                s_ids_by_t[ti].push(s_ids[ti]);
            }
        }
        // temporal attention: pooled over (C,H,W) -> same y set each step
        let avg_t = g.mean(&y_ids);
        let max_t = g.max_of(&y_ids);
        // per-branch MLP on the T-vector (identical entries here)
        let mut m_ids = Vec::with_capacity(t);
        {
            let branch = |pool: usize, g: &mut Graph| -> Vec<usize> {
                let terms: Vec<usize> = (0..t).map(|ti| g.mul(pool, wn_ids[ti])).collect();
                let pre = g.sum(&terms);
                let hid = g.relu(pre);
                (0..t).map(|ti| g.mul(hid, wm_ids[ti])).collect()
            };
            let out_avg = branch(avg_t, &mut g);
            let out_max = branch(max_t, &mut g);
            for ti in 0..t {
                m_ids.push(g.add(out_avg[ti], out_max[ti]));
            }
        }
        // spatial attention (1x1 conv), gate, output, loss
        let mut terms = Vec::new();
        for ti in 0..t {
            for (pi, &y) in y_ids.iter().enumerate() {
                let n_id = g.mul(v_id, y);
                let pre = g.mul(m_ids[ti], n_id);
                let gate = g.sigmoid(pre);
                let out = g.mul(gate, s_ids_by_t[ti][pi]);
                terms.push(g.scale(out, weights[ti * 4 + pi]));
            }
        }
        let loss = g.sum(&terms);
        g.backward(loss);

        let mut track = |got: &Tensor, want: &[f64]| {
            for (a, b) in got.data().iter().zip(want) {
                worst = worst.max((a - b).abs());
            }
        };
        track(grads.stem_kernel.as_ref().unwrap(), &[g.grad(w_id)]);
        track(
            grads.w_n.as_ref().unwrap(),
            &wn_ids.iter().map(|&id| g.grad(id)).collect::<Vec<_>>(),
        );
        track(
            grads.w_m.as_ref().unwrap(),
            &wm_ids.iter().map(|&id| g.grad(id)).collect::<Vec<_>>(),
        );
        track(grads.sca_kernel.as_ref().unwrap(), &[g.grad(v_id)]);
    }
    worst
}

pub fn oracle_full_network(seeds: u64) -> f64 {
    // zero-block network: stem (1x1 conv) -> LIF encoder -> head LIF ->
    // spatial mean -> dense -> mean-over-time decode -> cross-entropy
    let cfg = LifConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + seed);
        let t = 3;
        let pixels = rand_vec(&mut rng, 4, 0.1, 1.0);
        let w0: f64 = rng.gen_range(0.4..1.4);
        let head0 = rand_vec(&mut rng, 2, -1.0, 1.0); // [2 classes, 1 channel]
        let label = (seed % 2) as usize;

        let spec = NetworkSpec {
            scheme: Scheme::Direct,
            t,
            input_channels: 1,
            stem_channels: 1,
            stem_kernel: 1,
            sca_kernel: 1,
            blocks: vec![],
            n_classes: 2,
            lif: cfg,
        };
        let mut net = build(&spec, 0).unwrap();
        let mut stem = StemParams::identity(1).unwrap();
        stem.conv.kernel = Tensor::new(vec![1, 1, 1, 1], vec![w0]).unwrap();
        net.encoder.stem = Some(stem);
        net.head_weight = Tensor::new(vec![2, 1], head0.clone()).unwrap();

        let images = Tensor::new(vec![1, 1, 2, 2], pixels.clone()).unwrap();
        let logits = net.forward(&images, 0).unwrap();
        let k = decode_mean(&logits).unwrap();
        let (loss, d_k) = cross_entropy(&k, &[label]).unwrap();
        let grads = stbp_backward(&mut net, &d_k, false).unwrap();

        // oracle
        let mut g = Graph::new();
        let w_id = g.leaf(w0);
        let head_ids: Vec<usize> = head0.iter().map(|&v| g.leaf(v)).collect();
        let mut head_spikes_by_t = vec![Vec::new(); t];
        for &p in &pixels {
            let x = g.leaf(p);
            let y = g.mul(w_id, x);
            let reps = vec![y; t];
            let (enc_s, _) = graph_lif(&mut g, &reps, &cfg);
            let (head_s, _) = graph_lif(&mut g, &enc_s, &cfg);
            for ti in 0..t {
                head_spikes_by_t[ti].push(head_s[ti]);
            }
        }
        // per-step logits, mean decode
        let mut k_ids = Vec::new();
        for class in 0..2 {
            let mut per_step = Vec::new();
            for ti in 0..t {
                let pooled = g.mean(&head_spikes_by_t[ti]);
                per_step.push(g.mul(pooled, head_ids[class]));
            }
            k_ids.push(g.mean(&per_step));
        }
        // stabilized cross-entropy: ln(sum exp) - k_label
        let m = g.max2(k_ids[0], k_ids[1]);
        let e0d = g.sub(k_ids[0], m);
        let e1d = g.sub(k_ids[1], m);
        let e0 = g.exp(e0d);
        let e1 = g.exp(e1d);
        let z = g.add(e0, e1);
        let lnz = g.ln(z);
        let kl = g.sub(k_ids[label], m);
        let loss_id = g.sub(lnz, kl);
        g.backward(loss_id);

        worst = worst.max((g.val(loss_id) - loss).abs());
        let dw = grads.get("encoder.stem.kernel").unwrap();
        worst = worst.max((g.grad(w_id) - dw.data()[0]).abs());
        let dh = grads.get("head.weight").unwrap();
        for c in 0..2 {
            worst = worst.max((g.grad(head_ids[c]) - dh.data()[c]).abs());
        }
    }
    worst
}

pub fn oracle_one_block_network(seeds: u64) -> f64 {
    // stem 1x1 -> encoder LIF -> residual block (3x3 convs, BN) -> head
    let cfg = LifConfig::default();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let t = 2;
        let pixels = rand_vec(&mut rng, 4, 0.1, 1.0);
        let w0: f64 = rng.gen_range(0.4..1.4);
        let c1 = rand_vec(&mut rng, 9, -0.5, 0.5);
        let c2 = rand_vec(&mut rng, 9, -0.5, 0.5);
        let gamma1: f64 = rng.gen_range(0.6..1.4);
        let beta1: f64 = rng.gen_range(-0.3..0.3);
        let gamma2: f64 = rng.gen_range(0.6..1.4);
        let beta2: f64 = rng.gen_range(-0.3..0.3);
        let head0 = rand_vec(&mut rng, 2, -1.0, 1.0);
        let label = (seed % 2) as usize;

        let spec = NetworkSpec {
            scheme: Scheme::Direct,
            t,
            input_channels: 1,
            stem_channels: 1,
            stem_kernel: 1,
            sca_kernel: 1,
            blocks: vec![MsBlockSpec { in_channels: 1, out_channels: 1, stride: 1 }],
            n_classes: 2,
            lif: cfg,
        };
        let mut net = build(&spec, 0).unwrap();
        let mut stem = StemParams::identity(1).unwrap();
        stem.conv.kernel = Tensor::new(vec![1, 1, 1, 1], vec![w0]).unwrap();
        net.encoder.stem = Some(stem);
        net.blocks[0].conv1.kernel = Tensor::new(vec![1, 1, 3, 3], c1.clone()).unwrap();
        net.blocks[0].conv2.kernel = Tensor::new(vec![1, 1, 3, 3], c2.clone()).unwrap();
        net.blocks[0].bn1.gamma = Tensor::new(vec![1], vec![gamma1]).unwrap();
        net.blocks[0].bn1.beta = Tensor::new(vec![1], vec![beta1]).unwrap();
        net.blocks[0].bn2.gamma = Tensor::new(vec![1], vec![gamma2]).unwrap();
        net.blocks[0].bn2.beta = Tensor::new(vec![1], vec![beta2]).unwrap();
        net.head_weight = Tensor::new(vec![2, 1], head0.clone()).unwrap();

        let images = Tensor::new(vec![1, 1, 2, 2], pixels.clone()).unwrap();
        let logits = net.forward(&images, 0).unwrap();
        let k = decode_mean(&logits).unwrap();
        let (loss, d_k) = cross_entropy(&k, &[label]).unwrap();
        let grads = stbp_backward(&mut net, &d_k, false).unwrap();

        // oracle
        let mut g = Graph::new();
        let w_id = g.leaf(w0);
        let c1_ids: Vec<usize> = c1.iter().map(|&v| g.leaf(v)).collect();
        let c2_ids: Vec<usize> = c2.iter().map(|&v| g.leaf(v)).collect();
        let g1 = g.leaf(gamma1);
        let b1 = g.leaf(beta1);
        let g2 = g.leaf(gamma2);
        let b2 = g.leaf(beta2);
        let head_ids: Vec<usize> = head0.iter().map(|&v| g.leaf(v)).collect();

        // 3x3 conv with same padding on a 2x2 grid; kernel ids in row-major
        let conv3 = |g: &mut Graph, xs: &[usize; 4], k: &[usize]| -> [usize; 4] {
            let at = |y: isize, x: isize| -> Option<usize> {
                if (0..2).contains(&y) && (0..2).contains(&x) {
                    Some((y * 2 + x) as usize)
                } else {
                    None
                }
            };
            let mut out = [0usize; 4];
            for y in 0..2isize {
                for x in 0..2isize {
                    let mut terms = Vec::new();
                    for ki in 0..3isize {
                        for kj in 0..3isize {
                            if let Some(src) = at(y + ki - 1, x + kj - 1) {
                                terms.push(g.mul(xs[src], k[(ki * 3 + kj) as usize]));
                            }
                        }
                    }
                    out[(y * 2 + x) as usize] = g.sum(&terms);
                }
            }
            out
        };
        // batch norm over the 4 positions (B=1, C=1, training stats)
        let bn = |g: &mut Graph, xs: &[usize; 4], gamma: usize, beta: usize| -> [usize; 4] {
            let mean = g.mean(&xs[..]);
            let devs: Vec<usize> = xs.iter().map(|&x| g.sub(x, mean)).collect();
            let sqs: Vec<usize> = devs.iter().map(|&d| g.mul(d, d)).collect();
            let var = g.mean(&sqs);
            let var_eps = g.add_const(var, eps);
            let std = g.sqrt(var_eps);
            let mut out = [0usize; 4];
            for (i, &d) in devs.iter().enumerate() {
                let norm = g.div(d, std);
                let scaled = g.mul(norm, gamma);
                out[i] = g.add(scaled, beta);
            }
            out
        };

        // encoder: per-pixel stem + LIF over T
        let mut enc_by_t = vec![[0usize; 4]; t];
        for (pi, &p) in pixels.iter().enumerate() {
            let x = g.leaf(p);
            let y = g.mul(w_id, x);
            let reps = vec![y; t];
            let (s_ids, _) = graph_lif(&mut g, &reps, &cfg);
            for ti in 0..t {
                enc_by_t[ti][pi] = s_ids[ti];
            }
        }
        // block with persistent LIF states: unroll by hand to keep h across t
        let one = g.leaf(1.0);
        let lif_step = |g: &mut Graph, h: usize, x: usize| -> (usize, usize) {
            let u = g.add(h, x);
            let s = g.spike(u, cfg.v_th, cfg.a);
            let oms = g.sub(one, s);
            let decay = g.mul(u, oms);
            let decay = g.scale(decay, cfg.tau);
            let reset = g.scale(s, cfg.v_reset);
            (s, g.add(decay, reset))
        };
        let mut h1 = [g.leaf(0.0); 4];
        let mut h2 = [g.leaf(0.0); 4];
        let mut h_head = [g.leaf(0.0); 4];
        let mut k_terms = vec![Vec::new(); 2];
        for ti in 0..t {
            let x_in = enc_by_t[ti];
            let mut s1 = [0usize; 4];
            for i in 0..4 {
                let (s, h) = lif_step(&mut g, h1[i], x_in[i]);
                s1[i] = s;
                h1[i] = h;
            }
            let conv1_out = conv3(&mut g, &s1, &c1_ids);
            let b1_out = bn(&mut g, &conv1_out, g1, b1);
            let mut s2 = [0usize; 4];
            for i in 0..4 {
                let (s, h) = lif_step(&mut g, h2[i], b1_out[i]);
                s2[i] = s;
                h2[i] = h;
            }
            let conv2_out = conv3(&mut g, &s2, &c2_ids);
            let b2_out = bn(&mut g, &conv2_out, g2, b2);
            let mut block_out = [0usize; 4];
            for i in 0..4 {
                block_out[i] = g.add(x_in[i], b2_out[i]); // identity shortcut
            }
            let mut s_head = [0usize; 4];
            for i in 0..4 {
                let (s, h) = lif_step(&mut g, h_head[i], block_out[i]);
                s_head[i] = s;
                h_head[i] = h;
            }
            let pooled = g.mean(&s_head[..]);
            for class in 0..2 {
                k_terms[class].push(g.mul(pooled, head_ids[class]));
            }
        }
        let k0 = g.mean(&k_terms[0]);
        let k1 = g.mean(&k_terms[1]);
        let k_ids = [k0, k1];
        let m = g.max2(k0, k1);
        let d0 = g.sub(k0, m);
        let d1 = g.sub(k1, m);
        let e0 = g.exp(d0);
        let e1 = g.exp(d1);
        let z = g.add(e0, e1);
        let lnz = g.ln(z);
        let kl = g.sub(k_ids[label], m);
        let loss_id = g.sub(lnz, kl);
        g.backward(loss_id);

        worst = worst.max((g.val(loss_id) - loss).abs());
        worst = worst
            .max((g.grad(w_id) - grads.get("encoder.stem.kernel").unwrap().data()[0]).abs());
        let dc1 = grads.get("block0.conv1.kernel").unwrap();
        let dc2 = grads.get("block0.conv2.kernel").unwrap();
        for i in 0..9 {
            worst = worst.max((g.grad(c1_ids[i]) - dc1.data()[i]).abs());
            worst = worst.max((g.grad(c2_ids[i]) - dc2.data()[i]).abs());
        }
        worst = worst.max((g.grad(g1) - grads.get("block0.bn1.gamma").unwrap().data()[0]).abs());
        worst = worst.max((g.grad(b1) - grads.get("block0.bn1.beta").unwrap().data()[0]).abs());
        worst = worst.max((g.grad(g2) - grads.get("block0.bn2.gamma").unwrap().data()[0]).abs());
        worst = worst.max((g.grad(b2) - grads.get("block0.bn2.beta").unwrap().data()[0]).abs());
        let dh = grads.get("head.weight").unwrap();
        worst = worst.max((g.grad(head_ids[0]) - dh.data()[0]).abs());
        worst = worst.max((g.grad(head_ids[1]) - dh.data()[1]).abs());
    }
    worst
}

/// Worst absolute error over all unrolled-graph oracle checks.
pub fn oracle_all(seeds: u64) -> f64 {
    oracle_lif(seeds)
        .max(oracle_direct_encoder(seeds))
        .max(oracle_gac_encoder(seeds))
        .max(oracle_full_network(seeds))
        .max(oracle_one_block_network(seeds))
}
