//! Theoretical inference-energy estimator. The analog encoder conv is billed
//! at multiply-accumulate (MAC) cost; every spike-consuming conv/fc layer is
//! billed at accumulate (AC) cost weighted by its measured input firing rate
//! and the number of time steps. Costs use 0.1 pJ integer quanta so totals
//! stay bit-exact.

use crate::coding::Scheme;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

/// 4.6 pJ per MAC, in deci-picojoules.
pub const E_MAC_DECI_PJ: u64 = 46;
/// 0.9 pJ per AC, in deci-picojoules.
pub const E_AC_DECI_PJ: u64 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Conv { kh: usize, kw: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize },
    Fc { d_in: usize, d_out: usize },
}

impl LayerShape {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerShape::Conv { .. } => "conv",
            LayerShape::Fc { .. } => "fc",
        }
    }
}

/// conv: kh*kw*C_in*C_out*H_out*W_out; fc: D_in*D_out.
pub fn count_flops(layer: &LayerShape) -> u64 {
    match *layer {
        LayerShape::Conv { kh, kw, c_in, c_out, h_out, w_out } => {
            (kh * kw * c_in * c_out * h_out * w_out) as u64
        }
        LayerShape::Fc { d_in, d_out } => (d_in * d_out) as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Mac,
    Ac,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Mac => "MAC",
            OpKind::Ac => "AC",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCost {
    pub name: String,
    pub shape: LayerShape,
    /// Firing rate of the layer's input (1.0 for the analog MAC layer).
    pub firing_rate: f64,
    pub op: OpKind,
}

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub name: String,
    pub kind: &'static str,
    pub flops: u64,
    pub firing_rate: f64,
    pub op: OpKind,
    /// Energy in deci-pJ; integer-valued products stay exact in f64.
    pub energy_deci_pj: f64,
}

impl ReportRow {
    pub fn energy_pj(&self) -> f64 {
        self.energy_deci_pj / 10.0
    }
}

#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub rows: Vec<ReportRow>,
    /// Costs outside the accounting model (e.g. attention MACs), not summed.
    pub informational: Vec<ReportRow>,
    pub t: usize,
    pub mac_per_step: bool,
    pub mac_total_deci_pj: f64,
    pub ac_total_deci_pj: f64,
}

impl EnergyReport {
    pub fn total_deci_pj(&self) -> f64 {
        self.mac_total_deci_pj + self.ac_total_deci_pj
    }

    pub fn total_pj(&self) -> f64 {
        self.total_deci_pj() / 10.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,kind,flops,firing_rate,op,energy_pj\n");
        for row in self.rows.iter().chain(&self.informational) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.name,
                row.kind,
                row.flops,
                row.firing_rate,
                row.op.name(),
                row.energy_pj()
            ));
        }
        out.push_str(&format!("total_pj,{}\n", self.total_pj()));
        out.push_str(&format!("mac_share_pj,{}\n", self.mac_total_deci_pj / 10.0));
        out.push_str(&format!("ac_share_pj,{}\n", self.ac_total_deci_pj / 10.0));
        out.push_str(&format!("e_mac_pj,{}\n", E_MAC_DECI_PJ as f64 / 10.0));
        out.push_str(&format!("e_ac_pj,{}\n", E_AC_DECI_PJ as f64 / 10.0));
        out.push_str(&format!("t,{}\n", self.t));
        out
    }
}

/// E = E_MAC * FL_coding + E_AC * T * sum_layers FL * fr. `mac_per_step`
/// multiplies the MAC term by T (for billing the analog stem once per step).
pub fn estimate_energy(layers: &[LayerCost], t: usize, mac_per_step: bool) -> Result<EnergyReport> {
    if t == 0 {
        return Err(Error::Config("T must be positive".into()));
    }
    let mut rows = Vec::with_capacity(layers.len());
    let mut mac_total = 0.0;
    let mut ac_total = 0.0;
    for layer in layers {
        if !(0.0..=1.0).contains(&layer.firing_rate) {
            return Err(Error::Input(format!(
                "firing rate {} for {} outside [0,1]",
                layer.firing_rate, layer.name
            )));
        }
        let flops = count_flops(&layer.shape);
        let energy_deci_pj = match layer.op {
            OpKind::Mac => {
                let steps = if mac_per_step { t as f64 } else { 1.0 };
                let e = E_MAC_DECI_PJ as f64 * flops as f64 * steps;
                mac_total += e;
                e
            }
            OpKind::Ac => {
                let e = E_AC_DECI_PJ as f64 * t as f64 * flops as f64 * layer.firing_rate;
                ac_total += e;
                e
            }
        };
        rows.push(ReportRow {
            name: layer.name.clone(),
            kind: layer.shape.kind_name(),
            flops,
            firing_rate: layer.firing_rate,
            op: layer.op,
            energy_deci_pj,
        });
    }
    Ok(EnergyReport {
        rows,
        informational: Vec::new(),
        t,
        mac_per_step,
        mac_total_deci_pj: mac_total,
        ac_total_deci_pj: ac_total,
    })
}

/// Runs one batch through the network and reads the firing rate of every
/// conv/fc input from the recorded spike tapes.
pub fn measure_firing_rates(net: &mut Network, batch: &Tensor, seed: u64) -> Result<Vec<(String, f64)>> {
    net.forward(batch, seed)?;
    net.recorded_spike_rates()
}

/// Resolves every layer's geometry against an input of `input_hw` and pairs
/// it with its measured firing rate. The encoder stem (when present) is the
/// MAC layer; missing rates are an error.
pub fn network_layer_costs(
    net: &Network,
    input_hw: (usize, usize),
    rates: &[(String, f64)],
) -> Result<Vec<LayerCost>> {
    let rate = |name: &str| -> Result<f64> {
        rates
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, r)| r)
            .ok_or_else(|| Error::Input(format!("no firing rate measured for {name}")))
    };
    let (mut h, mut w) = input_hw;
    let mut costs = Vec::new();
    if let Some(stem) = &net.encoder.stem {
        let ks = stem.conv.kernel.shape();
        let (ho, wo) = stem.conv.out_hw(h, w)?;
        costs.push(LayerCost {
            name: "encoder.stem".into(),
            shape: LayerShape::Conv { kh: ks[2], kw: ks[3], c_in: ks[1], c_out: ks[0], h_out: ho, w_out: wo },
            firing_rate: 1.0,
            op: OpKind::Mac,
        });
        h = ho;
        w = wo;
    }
    for (i, block) in net.blocks.iter().enumerate() {
        let k1 = block.conv1.kernel.shape();
        let (h1, w1) = block.conv1.out_hw(h, w)?;
        costs.push(LayerCost {
            name: format!("block{i}.conv1"),
            shape: LayerShape::Conv { kh: k1[2], kw: k1[3], c_in: k1[1], c_out: k1[0], h_out: h1, w_out: w1 },
            firing_rate: rate(&format!("block{i}.conv1"))?,
            op: OpKind::Ac,
        });
        let k2 = block.conv2.kernel.shape();
        let (h2, w2) = block.conv2.out_hw(h1, w1)?;
        costs.push(LayerCost {
            name: format!("block{i}.conv2"),
            shape: LayerShape::Conv { kh: k2[2], kw: k2[3], c_in: k2[1], c_out: k2[0], h_out: h2, w_out: w2 },
            firing_rate: rate(&format!("block{i}.conv2"))?,
            op: OpKind::Ac,
        });
        if let Some((conv_d, _)) = &block.down {
            let kd = conv_d.kernel.shape();
            let (hd, wd) = conv_d.out_hw(h, w)?;
            costs.push(LayerCost {
                name: format!("block{i}.down.conv"),
                shape: LayerShape::Conv { kh: kd[2], kw: kd[3], c_in: kd[1], c_out: kd[0], h_out: hd, w_out: wd },
                firing_rate: rate(&format!("block{i}.down.conv"))?,
                op: OpKind::Ac,
            });
        }
        h = h2;
        w = w2;
    }
    costs.push(LayerCost {
        name: "head.fc".into(),
        shape: LayerShape::Fc { d_in: net.spec.head_channels(), d_out: net.spec.n_classes },
        firing_rate: rate("head.fc")?,
        op: OpKind::Ac,
    });
    Ok(costs)
}

/// Informational row estimating gating-unit MACs (temporal-attention MLP plus
/// the shared spatial-channel conv over all steps). Outside the accounting
/// model; never added to totals.
pub fn gau_overhead_row(net: &Network, input_hw: (usize, usize)) -> Result<Option<ReportRow>> {
    if net.encoder.scheme != Scheme::Gac {
        return Ok(None);
    }
    let gau = net
        .encoder
        .gau
        .as_ref()
        .ok_or_else(|| Error::Config("gated scheme without gating parameters".into()))?;
    let stem = net
        .encoder
        .stem
        .as_ref()
        .ok_or_else(|| Error::Config("gated scheme without stem".into()))?;
    let t = net.spec.t;
    let r_dim = gau.w_n.shape()[0];
    // two pooled branches, each through [T/r,T] then [T,T/r]
    let ta_macs = 2 * (t * r_dim + r_dim * t);
    let (h, w) = stem.conv.out_hw(input_hw.0, input_hw.1)?;
    let ks = gau.sca.kernel.shape();
    let (ho, wo) = gau.sca.out_hw(h, w)?;
    let sca_macs = t * ks[2] * ks[3] * ks[1] * ks[0] * ho * wo;
    let flops = (ta_macs + sca_macs) as u64;
    Ok(Some(ReportRow {
        name: "gau.overhead (informational)".into(),
        kind: "conv",
        flops,
        firing_rate: 1.0,
        op: OpKind::Mac,
        energy_deci_pj: E_MAC_DECI_PJ as f64 * flops as f64,
    }))
}
