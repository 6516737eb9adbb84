//! Observer-model instrumentation: closed-form direct-coding firing period,
//! per-scheme dynamics duration, and empirical conditional-entropy curves
//! along the time axis.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::neuron::LifConfig;
use crate::tensor::Tensor;

/// Closed-form first-spike time / repeat period of a LIF neuron under
/// constant input, or `NeverFires` when the steady state stays subthreshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiringPeriod {
    NeverFires,
    Period(usize),
}

/// T_p = ceil(log_tau(1 - v_th*(1-tau)/x)), NeverFires for
/// x <= v_th*(1-tau) where the log argument is non-positive.
pub fn firing_period(x: f64, cfg: &LifConfig) -> FiringPeriod {
    if x <= 0.0 {
        return FiringPeriod::NeverFires;
    }
    let arg = 1.0 - cfg.v_th * (1.0 - cfg.tau) / x;
    if arg <= 0.0 {
        return FiringPeriod::NeverFires;
    }
    let v = arg.ln() / cfg.tau.ln();
    // Snap values that are an integer up to float noise before taking the
    // ceiling, so exact-threshold crossings keep their analytic period.
    let rounded = v.round();
    let t_p = if (v - rounded).abs() < 1e-9 { rounded } else { v.ceil() };
    FiringPeriod::Period((t_p as i64).max(1) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurationScheme {
    Direct,
    Gac,
    Rate,
    /// Repeat the same frame every step (the MS-ResNet stem's own coding).
    Repeat,
}

/// Dynamics duration per scheme: direct T_d = T_p; GAC
/// T_g = floor(T/T_d)*T_d; rate T_r = T; repeat T_m = 1. A never-firing
/// position gets duration 1 (its all-zero train is predictable after one
/// observation).
pub fn dynamics_duration(scheme: DurationScheme, period: Option<FiringPeriod>, t: usize) -> Result<usize> {
    match scheme {
        DurationScheme::Direct => match period {
            Some(FiringPeriod::Period(p)) => Ok(p),
            Some(FiringPeriod::NeverFires) => Ok(1),
            None => Err(Error::Input("direct coding duration needs a firing period".into())),
        },
        DurationScheme::Gac => match period {
            Some(FiringPeriod::Period(p)) => Ok((t / p) * p),
            Some(FiringPeriod::NeverFires) => Ok(1),
            None => Err(Error::Input("GAC duration needs a firing period".into())),
        },
        DurationScheme::Rate => Ok(t),
        DurationScheme::Repeat => Ok(1),
    }
}

/// Dynamics report for a whole tensor of post-stem pixel values: the
/// per-position period map and the maximum duration across positions.
#[derive(Debug, Clone)]
pub struct DynamicsReport {
    pub scheme: String,
    pub t: usize,
    pub periods: Vec<FiringPeriod>,
    pub dynamics_duration: usize,
    pub entropy_curve: Vec<(usize, f64)>,
    pub bins: usize,
}

/// Per-position durations for direct or GAC coding given post-stem values.
pub fn duration_map(
    scheme: DurationScheme,
    stem_values: &Tensor,
    cfg: &LifConfig,
    t: usize,
) -> Result<(Vec<FiringPeriod>, usize)> {
    let mut periods = Vec::with_capacity(stem_values.len());
    let mut max_duration = 0usize;
    for &x in stem_values.data() {
        let p = firing_period(x, cfg);
        let d = dynamics_duration(scheme, Some(p), t)?;
        max_duration = max_duration.max(d);
        periods.push(p);
    }
    Ok((periods, max_duration))
}

/// Empirical conditional entropy H_t (bits) of the observer model.
///
/// `seq` is [T, ...]; every trailing position is one realization of the
/// temporal vector. Real values are quantized into `bins` uniform bins over
/// the observed range (binary data keeps its two symbols). For each t,
/// positions are grouped by identical history prefix and the conditional
/// distribution of symbol t is estimated by frequency within each group:
/// H_t = sum_groups weight_g * (-sum p log2 p).
pub fn empirical_entropy(seq: &Tensor, binary: bool, bins: usize) -> Result<Vec<(usize, f64)>> {
    if seq.ndim() < 1 || seq.is_empty() {
        return Err(Error::Input("empty sequence".into()));
    }
    if bins == 0 {
        return Err(Error::Input("bins must be positive".into()));
    }
    let t_steps = seq.shape()[0];
    let positions = seq.len() / t_steps;

    // quantize each position's temporal vector to symbols
    let symbols: Vec<Vec<u16>> = if binary {
        (0..positions)
            .map(|p| {
                (0..t_steps)
                    .map(|t| if seq.data()[t * positions + p] != 0.0 { 1u16 } else { 0u16 })
                    .collect()
            })
            .collect()
    } else {
        let lo = seq.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = seq.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        (0..positions)
            .map(|p| {
                (0..t_steps)
                    .map(|t| {
                        let v = seq.data()[t * positions + p];
                        if range == 0.0 {
                            0u16
                        } else {
                            let b = ((v - lo) / range * bins as f64).floor() as usize;
                            b.min(bins - 1) as u16
                        }
                    })
                    .collect()
            })
            .collect()
    };

    // groups of positions sharing an identical history prefix; BTreeMap
    // iteration gives a deterministic merge order
    let mut groups: BTreeMap<Vec<u16>, Vec<usize>> = BTreeMap::new();
    groups.insert(Vec::new(), (0..positions).collect());

    let mut curve = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let mut h_t = 0.0;
        let mut next: BTreeMap<Vec<u16>, Vec<usize>> = BTreeMap::new();
        for (prefix, members) in &groups {
            let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
            for &p in members {
                *counts.entry(symbols[p][t]).or_insert(0) += 1;
            }
            let group_n = members.len() as f64;
            let mut h_g = 0.0;
            for &count in counts.values() {
                let prob = count as f64 / group_n;
                if prob > 0.0 {
                    h_g -= prob * prob.log2();
                }
            }
            h_t += (group_n / positions as f64) * h_g;
            for &p in members {
                let mut key = prefix.clone();
                key.push(symbols[p][t]);
                next.entry(key).or_default().push(p);
            }
        }
        curve.push((t + 1, h_t));
        groups = next;
    }
    Ok(curve)
}

/// r = #Spike / (#Neuron * T); input must be exactly binary.
pub fn firing_rate(spikes: &Tensor) -> Result<f64> {
    if !spikes.is_binary() {
        return Err(Error::Input("firing_rate requires a binary spike tensor".into()));
    }
    let ones: f64 = spikes.data().iter().sum();
    Ok(ones / spikes.len() as f64)
}
