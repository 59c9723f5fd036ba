use std::ops::{Add, AddAssign, Mul};

use serde::{Deserialize, Serialize};

use super::{Branch, CostModel, PlanKind, ShardingPlan};
use crate::error::{Error, Result};
use crate::model::ModeConfig;

/// Latency as a linear function of the cost model's inverse throughputs
/// and fixed costs. Used by calibration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    /// Coefficient of `1 / device_flops`.
    pub flops: f64,
    /// Coefficient of `1 / bandwidth`.
    pub bytes: f64,
    /// Coefficient of `latency`.
    pub steps: f64,
    /// Coefficient of `1 / cross_bandwidth`.
    pub cross_bytes: f64,
    /// Coefficient of `hop_latency`.
    pub hops: f64,
    /// Coefficient of `merge_overhead`.
    pub merges: f64,
    /// Seconds that do not depend on the cost model (mesh link overrides).
    pub fixed: f64,
}

impl Terms {
    pub fn eval(&self, c: &CostModel) -> f64 {
        self.flops / c.device_flops
            + self.bytes / c.bandwidth
            + self.steps * c.latency
            + self.cross_bytes / c.cross_bandwidth
            + self.hops * c.hop_latency
            + self.merges * c.merge_overhead
            + self.fixed
    }
}

impl Add for Terms {
    type Output = Terms;
    fn add(self, o: Terms) -> Terms {
        Terms {
            flops: self.flops + o.flops,
            bytes: self.bytes + o.bytes,
            steps: self.steps + o.steps,
            cross_bytes: self.cross_bytes + o.cross_bytes,
            hops: self.hops + o.hops,
            merges: self.merges + o.merges,
            fixed: self.fixed + o.fixed,
        }
    }
}

impl AddAssign for Terms {
    fn add_assign(&mut self, o: Terms) {
        *self = *self + o;
    }
}

impl Mul<f64> for Terms {
    type Output = Terms;
    fn mul(self, k: f64) -> Terms {
        Terms {
            flops: self.flops * k,
            bytes: self.bytes * k,
            steps: self.steps * k,
            cross_bytes: self.cross_bytes * k,
            hops: self.hops * k,
            merges: self.merges * k,
            fixed: self.fixed * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshTime {
    pub name: String,
    pub devices: usize,
    pub branches: Vec<Branch>,
    /// Seconds spent on branch compute, all-reduces and merges.
    pub busy: f64,
    pub idle: f64,
    pub compute: f64,
    pub allreduce: f64,
}

/// Timing of one training step. `compute`, `allreduce`, `reshard` and
/// `merge_sync` decompose the critical path and sum to `latency`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub kind: PlanKind,
    pub latency: f64,
    pub compute: f64,
    pub allreduce: f64,
    pub reshard: f64,
    pub merge_sync: f64,
    /// Idle seconds summed over meshes.
    pub idle: f64,
    pub merges: usize,
    pub meshes: Vec<MeshTime>,
    /// Compute seconds times model-parallel degree, summed over meshes.
    pub compute_device_seconds: f64,
    pub terms: Terms,
}

impl ScheduleReport {
    pub fn max_busy(&self) -> f64 {
        self.meshes.iter().map(|m| m.busy).fold(0.0, f64::max)
    }

    /// Seconds of a single merge, zero when nothing is merged across meshes.
    pub fn merge_cost(&self) -> f64 {
        if self.merges == 0 { 0.0 } else { (self.reshard + self.merge_sync) / self.merges as f64 }
    }
}

/// Per-block cost of one mesh: (compute, all-reduce, terms), training step.
fn mesh_block(plan: &ShardingPlan, m: usize, model: &ModeConfig, cost: &CostModel) -> (f64, f64, Terms) {
    let mesh = &plan.meshes[m];
    let local = mesh.costs(cost);
    let p = mesh.degree();
    let d = model.d_model;
    let bf = cost.backward_factor;
    let (mut compute, mut allreduce, mut terms) = (0.0, 0.0, Terms::default());
    for b in plan.hosted(m) {
        let layers = match b {
            Branch::Backbone => model.layers_per_block(),
            Branch::Expert(_) => model.expert_layers_per_block,
        };
        let (c, a) = local.branch_forward(layers, d, p);
        compute += bf * c;
        allreduce += bf * a;

        let l = layers as f64;
        terms.flops += bf * l * cost.flops_per_token * cost.tokens * (d * d) as f64 / p as f64;
        if p > 1 {
            let steps = 2.0 * (p as f64 - 1.0);
            let bytes = bf * l * steps / p as f64 * local.activation_bytes(d);
            match mesh.bandwidth {
                None => terms.bytes += bytes,
                Some(bw) => terms.fixed += bytes / bw,
            }
            match mesh.latency {
                None => terms.steps += bf * l * steps,
                Some(lat) => terms.fixed += bf * l * steps * lat,
            }
        }
    }
    (compute, allreduce, terms)
}

/// Simulates one training step of `model` under `plan`. `merges` must
/// equal the number of blocks: every block ends in a merge.
///
/// SPMD executes all branches of all blocks one after another on its single
/// mesh. MPMD executes the branches of a block concurrently across meshes;
/// a block ends when its slowest mesh finishes, after which the outputs are
/// resharded to every mesh. Merges cost nothing when the plan has one mesh.
pub fn simulate_step(plan: &ShardingPlan, model: &ModeConfig, cost: &CostModel, merges: usize) -> Result<ScheduleReport> {
    model.validate()?;
    cost.validate()?;
    plan.validate(model.n_experts, model.n_heads)?;
    if merges != model.n_blocks {
        return Err(Error::Plan(format!("{merges} merges requested for {} blocks", model.n_blocks)));
    }
    let blocks: Vec<(f64, f64, Terms)> = (0..plan.meshes.len()).map(|m| mesh_block(plan, m, model, cost)).collect();
    let n_meshes = plan.meshes.len();
    let n_branches = model.n_experts + 1;

    let mut r = ScheduleReport {
        kind: plan.kind,
        latency: 0.0,
        compute: 0.0,
        allreduce: 0.0,
        reshard: 0.0,
        merge_sync: 0.0,
        idle: 0.0,
        merges: 0,
        meshes: Vec::new(),
        compute_device_seconds: 0.0,
        terms: Terms::default(),
    };
    let mut busy = vec![0.0; n_meshes];

    match plan.kind {
        PlanKind::Spmd => {
            let (c, a, t) = blocks[0];
            for _ in 0..model.n_blocks {
                r.latency += c + a;
                r.compute += c;
                r.allreduce += a;
                r.terms += t;
                busy[0] += c + a;
            }
        }
        PlanKind::Mpmd => {
            let active: Vec<usize> = (0..n_meshes).filter(|&m| !plan.hosted(m).is_empty()).collect();
            let crit = *active
                .iter()
                .reduce(|a, b| if blocks[*b].0 + blocks[*b].1 > blocks[*a].0 + blocks[*a].1 { b } else { a })
                .expect("validated plans host every branch");
            let (c, a, t) = blocks[crit];
            let merge = if active.len() > 1 {
                let inbound = active.iter().map(|&m| n_branches - plan.hosted(m).len()).max().unwrap_or(0);
                let payload = inbound as f64 * cost.activation_bytes(model.d_model);
                Some((payload, payload / cost.cross_bandwidth + cost.hop_latency, cost.merge_overhead))
            } else {
                None
            };
            for _ in 0..model.n_blocks {
                r.latency += c + a;
                r.compute += c;
                r.allreduce += a;
                r.terms += t;
                for &m in &active {
                    busy[m] += blocks[m].0 + blocks[m].1;
                }
                if let Some((payload, reshard, sync)) = merge {
                    r.latency += reshard + sync;
                    r.reshard += reshard;
                    r.merge_sync += sync;
                    r.merges += 1;
                    r.terms += Terms { cross_bytes: payload, hops: 1.0, merges: 1.0, ..Terms::default() };
                    for &m in &active {
                        busy[m] += reshard + sync;
                    }
                }
            }
        }
    }

    for (m, mesh) in plan.meshes.iter().enumerate() {
        let nb = model.n_blocks as f64;
        let (c, a, _) = blocks[m];
        let idle = (r.latency - busy[m]).max(0.0);
        r.idle += idle;
        r.compute_device_seconds += nb * c * mesh.degree() as f64;
        r.meshes.push(MeshTime {
            name: mesh.name.clone(),
            devices: mesh.devices.len(),
            branches: plan.hosted(m),
            busy: busy[m],
            idle,
            compute: nb * c,
            allreduce: nb * a,
        });
    }
    Ok(r)
}
