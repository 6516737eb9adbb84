//! Iterative leaky integrate-and-fire dynamics with a rectangle surrogate
//! gradient for backpropagation through time.
//!
//! Per step: U = H_prev + input, S = heaviside(U - v_th), and the post-spike
//! membrane H' = tau*U*(1-S) + v_reset*S. The threshold itself fires
//! (heaviside(0) = 1) so simulated first-spike times agree with the
//! closed-form period's ceiling at exact crossings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    /// Multiplicative membrane decay factor in (0,1).
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    /// Rectangle surrogate window width.
    pub a: f64,
    /// When set, gradients do not flow through the reset branch.
    pub detach_reset: bool,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            tau: 0.25,
            v_th: 0.5,
            v_reset: 0.0,
            a: 1.0,
            detach_reset: false,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1), got {}", self.tau)));
        }
        if self.v_th <= self.v_reset {
            return Err(Error::Config(format!(
                "v_th ({}) must exceed v_reset ({})",
                self.v_th, self.v_reset
            )));
        }
        if self.a <= 0.0 {
            return Err(Error::Config(format!("surrogate window a must be positive, got {}", self.a)));
        }
        Ok(())
    }
}

pub fn heaviside(u: f64) -> f64 {
    if u >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Rectangle surrogate: (1/a) if |u - v_th| < a/2 (strict), else 0.
pub fn surrogate_grad(u: f64, cfg: &LifConfig) -> f64 {
    if (u - cfg.v_th).abs() < cfg.a / 2.0 {
        1.0 / cfg.a
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct LifState {
    /// Post-trigger membrane potential H, same shape as the activations.
    pub h: Tensor,
}

impl LifState {
    pub fn resting(shape: &[usize], cfg: &LifConfig) -> Self {
        LifState {
            h: Tensor::full(shape, cfg.v_reset),
        }
    }
}

/// One elementwise LIF step; returns the new state and the binary spikes.
pub fn lif_step(state: &LifState, input_current: &Tensor, cfg: &LifConfig) -> Result<(LifState, Tensor)> {
    if state.h.shape() != input_current.shape() {
        return Err(Error::shape(
            "lif_step",
            format!("state {:?} vs input {:?}", state.h.shape(), input_current.shape()),
        ));
    }
    let mut h_next = Tensor::zeros(state.h.shape());
    let mut spikes = Tensor::zeros(state.h.shape());
    for i in 0..state.h.len() {
        let u = state.h.data()[i] + input_current.data()[i];
        let s = heaviside(u - cfg.v_th);
        spikes.data_mut()[i] = s;
        h_next.data_mut()[i] = cfg.tau * u * (1.0 - s) + cfg.v_reset * s;
    }
    Ok((LifState { h: h_next }, spikes))
}

/// Forward tape recorded by `lif_sequence` (U trajectory and spikes per step).
#[derive(Debug, Clone)]
pub struct LifTape {
    pub u: Vec<Tensor>,
    pub s: Vec<Tensor>,
}

impl LifTape {
    pub fn steps(&self) -> usize {
        self.u.len()
    }
}

/// Folds `lif_step` over the leading time axis of a [T,...] input.
/// h0 defaults to all-v_reset.
pub fn lif_sequence(inputs: &Tensor, cfg: &LifConfig, h0: Option<&Tensor>) -> Result<(Tensor, LifTape)> {
    cfg.validate()?;
    let shape = inputs.shape();
    if shape.is_empty() {
        return Err(Error::Input("lif_sequence needs a [T,...] tensor".into()));
    }
    let t_steps = shape[0];
    if t_steps == 0 {
        return Err(Error::Input("empty sequence (T = 0)".into()));
    }
    let elem_shape: Vec<usize> = if shape.len() == 1 { vec![1] } else { shape[1..].to_vec() };
    let elems: usize = elem_shape.iter().product();

    let mut state = match h0 {
        Some(h) => {
            if h.len() != elems {
                return Err(Error::shape(
                    "lif_sequence",
                    format!("h0 has {} elements, expected {elems}", h.len()),
                ));
            }
            LifState { h: h.reshape(&elem_shape)? }
        }
        None => LifState::resting(&elem_shape, cfg),
    };

    let mut tape = LifTape { u: Vec::with_capacity(t_steps), s: Vec::with_capacity(t_steps) };
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..t_steps {
        let step_input = Tensor::new(
            elem_shape.clone(),
            inputs.data()[t * elems..(t + 1) * elems].to_vec(),
        )?;
        let u = state.h.add(&step_input)?;
        let (next, spikes) = lif_step(&state, &step_input, cfg)?;
        out.extend_from_slice(spikes.data());
        tape.u.push(u);
        tape.s.push(spikes);
        state = next;
    }
    Ok((Tensor::new(shape.to_vec(), out)?, tape))
}

/// d(H^t)/d(U^t): tau(1-S) plus, unless detached, the reset branch's
/// dependence on S via the surrogate: (v_reset - tau*U)*surrogate(U).
fn dh_du(u: f64, s: f64, cfg: &LifConfig) -> f64 {
    let direct = cfg.tau * (1.0 - s);
    if cfg.detach_reset {
        direct
    } else {
        direct + (cfg.v_reset - cfg.tau * u) * surrogate_grad(u, cfg)
    }
}

/// Backpropagation through time over a `lif_sequence` tape.
///
/// `upstream_spike_grads` is [T,...] (dL/dS per step); an optional gradient
/// on the final membrane state may be chained in. Returns dL/dinput per step
/// with the same [T,...] shape.
pub fn lif_backward(
    tape: &LifTape,
    cfg: &LifConfig,
    upstream_spike_grads: &Tensor,
    upstream_state_grad: Option<&Tensor>,
) -> Result<Tensor> {
    let t_steps = tape.steps();
    if t_steps == 0 {
        return Err(Error::Tape("empty tape".into()));
    }
    let elems = tape.u[0].len();
    if upstream_spike_grads.len() != t_steps * elems || upstream_spike_grads.shape()[0] != t_steps {
        return Err(Error::Tape(format!(
            "upstream grads {:?} do not match tape of {t_steps} steps x {elems} elements",
            upstream_spike_grads.shape()
        )));
    }
    let mut g_h: Vec<f64> = match upstream_state_grad {
        Some(g) => {
            if g.len() != elems {
                return Err(Error::Tape("state grad size mismatch".into()));
            }
            g.data().to_vec()
        }
        None => vec![0.0; elems],
    };
    let mut grads = vec![0.0; t_steps * elems];
    for t in (0..t_steps).rev() {
        let u = tape.u[t].data();
        let s = tape.s[t].data();
        for i in 0..elems {
            let g_s = upstream_spike_grads.data()[t * elems + i];
            let g_u = g_s * surrogate_grad(u[i], cfg) + g_h[i] * dh_du(u[i], s[i], cfg);
            grads[t * elems + i] = g_u;
            // U^t = H^{t-1} + input^t, so the carry into the previous step is g_u
            g_h[i] = g_u;
        }
    }
    Tensor::new(upstream_spike_grads.shape().to_vec(), grads)
}

/// Stateful per-layer LIF used by the network: records a tape step by step
/// during the forward pass, then replays it in reverse during backward.
#[derive(Debug, Clone)]
pub struct LifLayer {
    pub cfg: LifConfig,
    state: Option<LifState>,
    tape: LifTape,
    /// dL/dH carry maintained during the reverse sweep.
    carry: Option<Vec<f64>>,
    back_pos: usize,
}

impl LifLayer {
    pub fn new(cfg: LifConfig) -> Self {
        LifLayer {
            cfg,
            state: None,
            tape: LifTape { u: Vec::new(), s: Vec::new() },
            carry: None,
            back_pos: 0,
        }
    }

    /// Clears state and tape; call at the start of every sequence.
    pub fn reset(&mut self) {
        self.state = None;
        self.tape.u.clear();
        self.tape.s.clear();
        self.carry = None;
        self.back_pos = 0;
    }

    pub fn step(&mut self, input: &Tensor) -> Result<Tensor> {
        let state = match self.state.take() {
            Some(s) => s,
            None => LifState::resting(input.shape(), &self.cfg),
        };
        let u = state.h.add(input)?;
        let (next, spikes) = lif_step(&state, input, &self.cfg)?;
        self.tape.u.push(u);
        self.tape.s.push(spikes.clone());
        self.state = Some(next);
        Ok(spikes)
    }

    pub fn recorded_steps(&self) -> usize {
        self.tape.u.len()
    }

    pub fn spikes_at(&self, t: usize) -> &Tensor {
        &self.tape.s[t]
    }

    /// Reverse-order step: call with the upstream spike gradient for the
    /// latest un-consumed time step; returns dL/dinput for that step.
    pub fn backward_step(&mut self, upstream_spikes: &Tensor) -> Result<Tensor> {
        let remaining = self.tape.u.len().checked_sub(self.back_pos);
        let t = match remaining {
            Some(r) if r > 0 => r - 1,
            _ => return Err(Error::Tape("lif backward consumed more steps than recorded".into())),
        };
        let elems = self.tape.u[t].len();
        if upstream_spikes.len() != elems {
            return Err(Error::Tape(format!(
                "upstream has {} elements, tape step has {elems}",
                upstream_spikes.len()
            )));
        }
        let carry = self.carry.get_or_insert_with(|| vec![0.0; elems]);
        let u = self.tape.u[t].data();
        let s = self.tape.s[t].data();
        let mut grads = vec![0.0; elems];
        for i in 0..elems {
            let g_u = upstream_spikes.data()[i] * surrogate_grad(u[i], &self.cfg)
                + carry[i] * dh_du(u[i], s[i], &self.cfg);
            grads[i] = g_u;
            carry[i] = g_u;
        }
        self.back_pos += 1;
        Tensor::new(self.tape.u[t].shape().to_vec(), grads)
    }
}
