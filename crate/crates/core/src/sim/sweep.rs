use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{simulate_step, CostModel, ScheduleReport, ShardingPlan};
use crate::error::{Error, Result};
use crate::model::ModeConfig;

/// One CSV row of a simulation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub plan: String,
    pub meshes: usize,
    /// Layers added by all experts over all blocks.
    pub expert_layers: usize,
    pub merges: usize,
    pub latency_s: f64,
    pub compute_s: f64,
    pub allreduce_s: f64,
    pub reshard_s: f64,
    pub idle_s: f64,
}

impl SimRow {
    pub const HEADER: &'static str = "plan,meshes,expert_layers,merges,latency_s,compute_s,allreduce_s,reshard_s,idle_s";

    pub fn new(plan: impl Into<String>, model: &ModeConfig, r: &ScheduleReport) -> Self {
        Self {
            plan: plan.into(),
            meshes: r.meshes.len(),
            expert_layers: model.n_experts * model.n_blocks * model.expert_layers_per_block,
            merges: model.n_blocks,
            latency_s: r.latency,
            compute_s: r.compute,
            allreduce_s: r.allreduce,
            // Merge synchronisation travels with resharding in the CSV.
            reshard_s: r.reshard + r.merge_sync,
            idle_s: r.idle,
        }
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[SimRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub expert_layers_per_block: usize,
    pub model: ModeConfig,
    pub spmd: ScheduleReport,
    pub mpmd: ScheduleReport,
}

impl SizePoint {
    pub fn added_layers(&self) -> usize {
        self.model.n_experts * self.model.n_blocks * self.expert_layers_per_block
    }

    pub fn speedup(&self) -> f64 {
        self.spmd.latency / self.mpmd.latency
    }

    /// Idle seconds of the MPMD meshes hosting experts only.
    pub fn expert_idle(&self) -> f64 {
        self.mpmd
            .meshes
            .iter()
            .filter(|m| !m.branches.is_empty() && !m.branches.contains(&super::Branch::Backbone))
            .map(|m| m.idle)
            .sum()
    }
}

/// SPMD against MPMD for each expert depth in `sizes` (layers per block).
pub fn sweep_expert_size(
    spmd: &ShardingPlan,
    mpmd: &ShardingPlan,
    model: &ModeConfig,
    cost: &CostModel,
    sizes: &[usize],
) -> Result<Vec<SizePoint>> {
    sizes
        .iter()
        .map(|&s| {
            let m = ModeConfig { expert_layers_per_block: s, ..model.clone() };
            Ok(SizePoint {
                expert_layers_per_block: s,
                spmd: simulate_step(spmd, &m, cost, m.n_blocks)?,
                mpmd: simulate_step(mpmd, &m, cost, m.n_blocks)?,
                model: m,
            })
        })
        .collect()
}

/// Re-blocks `model` into each merge count while keeping the backbone and
/// per-expert depth fixed, and simulates `plan` at every point.
pub fn sweep_merges(
    plan: &ShardingPlan,
    model: &ModeConfig,
    cost: &CostModel,
    counts: &[usize],
) -> Result<Vec<(ModeConfig, ScheduleReport)>> {
    let expert_total = model.n_blocks * model.expert_layers_per_block;
    counts
        .iter()
        .map(|&k| {
            if k == 0 || !model.n_backbone_layers.is_multiple_of(k) || !expert_total.is_multiple_of(k) {
                return Err(Error::config(format!(
                    "{k} merges do not split {} backbone and {expert_total} expert layers evenly",
                    model.n_backbone_layers
                )));
            }
            let m = ModeConfig { n_blocks: k, expert_layers_per_block: expert_total / k, ..model.clone() };
            let r = simulate_step(plan, &m, cost, k)?;
            Ok((m, r))
        })
        .collect()
}
