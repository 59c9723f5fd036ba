use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First-order compute and communication model of a training step.
///
/// A branch of `L` layers on a mesh of model-parallel degree `p` costs
/// `L · (c · T · d² / (p · F) + allreduce(p))` forward, where
/// `allreduce(p) = 2(p−1)/p · T·d·b / B + 2(p−1) · α` is a ring all-reduce
/// of the layer output. A training step multiplies forward costs by
/// `backward_factor`.
///
/// At a merge each destination mesh receives the outputs of every branch
/// it does not host; the slowest destination sets the merge time
/// `max_inbound · T·d·b / B_x + hop + overhead`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Sustained FLOP/s of one device.
    pub device_flops: f64,
    /// Intra-mesh link bandwidth, bytes/s.
    pub bandwidth: f64,
    /// Per ring step latency of an all-reduce, seconds.
    pub latency: f64,
    /// Cross-mesh bandwidth used when resharding at merges, bytes/s.
    pub cross_bandwidth: f64,
    /// Fixed latency of one resharding hop, seconds.
    pub hop_latency: f64,
    /// Fixed synchronisation cost of every merge, seconds.
    pub merge_overhead: f64,
    /// FLOPs per token per `d²` per layer.
    pub flops_per_token: f64,
    pub bytes_per_element: f64,
    /// Tokens processed per step.
    pub tokens: f64,
    /// Forward plus backward relative to forward alone.
    pub backward_factor: f64,
}

impl Default for CostModel {
    /// Hand-calibrated against the qualitative findings for an 8-device
    /// cluster at `d = 2688`: see [`super::presets`].
    fn default() -> Self {
        Self {
            device_flops: 98.5e12,
            bandwidth: 45e9,
            latency: 100e-6,
            cross_bandwidth: 45e9,
            hop_latency: 50e-6,
            merge_overhead: 0.04,
            flops_per_token: 24.0,
            bytes_per_element: 2.0,
            tokens: 8192.0,
            backward_factor: 3.0,
        }
    }
}

impl CostModel {
    /// Throughputs and sizes must be positive (bandwidths may be infinite);
    /// latencies and overheads must be non-negative and finite.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("device_flops", self.device_flops),
            ("bandwidth", self.bandwidth),
            ("cross_bandwidth", self.cross_bandwidth),
            ("flops_per_token", self.flops_per_token),
            ("bytes_per_element", self.bytes_per_element),
            ("tokens", self.tokens),
            ("backward_factor", self.backward_factor),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::config(format!("cost model `{name}` must be positive, got {v}")));
            }
        }
        for (name, v) in [("device_flops", self.device_flops), ("tokens", self.tokens)] {
            if !v.is_finite() {
                return Err(Error::config(format!("cost model `{name}` must be finite")));
            }
        }
        let non_negative =
            [("latency", self.latency), ("hop_latency", self.hop_latency), ("merge_overhead", self.merge_overhead)];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("cost model `{name}` must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Bytes of one `T × d` activation.
    pub fn activation_bytes(&self, d: usize) -> f64 {
        self.tokens * d as f64 * self.bytes_per_element
    }

    /// Forward compute seconds of one layer at degree `p`.
    pub fn layer_compute(&self, d: usize, p: usize) -> f64 {
        let d = d as f64;
        self.flops_per_token * self.tokens * d * d / (p as f64 * self.device_flops)
    }

    /// Ring all-reduce seconds of one layer output at degree `p`.
    pub fn layer_allreduce(&self, d: usize, p: usize) -> f64 {
        if p <= 1 {
            return 0.0;
        }
        let steps = 2.0 * (p as f64 - 1.0);
        steps / p as f64 * self.activation_bytes(d) / self.bandwidth + steps * self.latency
    }

    /// Forward seconds of a `layers`-deep branch, split into compute and
    /// all-reduce.
    pub fn branch_forward(&self, layers: usize, d: usize, p: usize) -> (f64, f64) {
        let l = layers as f64;
        (l * self.layer_compute(d, p), l * self.layer_allreduce(d, p))
    }
}

/// Forward seconds of a branch of `layers` layers at model-parallel degree
/// `p`, which must divide `heads`.
pub fn branch_compute_cost(cost: &CostModel, layers: usize, d: usize, heads: usize, p: usize) -> Result<f64> {
    if p == 0 || !heads.is_multiple_of(p) {
        return Err(Error::config(format!("model-parallel degree {p} does not divide {heads} heads")));
    }
    let (c, a) = cost.branch_forward(layers, d, p);
    Ok(c + a)
}
