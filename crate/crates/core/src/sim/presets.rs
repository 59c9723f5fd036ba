//! Reference configurations on an 8-device cluster.
//!
//! The default [`CostModel`] was tuned by hand so that these configurations
//! show the expected qualitative behaviour: MPMD beats SPMD at the
//! four-expert point, three and five meshes perform alike, the expert-size
//! sweep is U-shaped and merges cost latency. Absolute timings are not
//! meant to match any particular hardware.

use super::{Branch, ShardingPlan};
use crate::model::ModeConfig;

pub const CLUSTER_DEVICES: usize = 8;

/// 18 backbone layers in 2 blocks with 4 experts of 3 layers per block.
pub fn figure_model() -> ModeConfig {
    ModeConfig {
        vocab_size: 128,
        d_model: 2688,
        n_heads: 24,
        n_backbone_layers: 18,
        n_blocks: 2,
        expert_layers_per_block: 3,
        n_experts: 4,
        max_seq_len: 32,
        ..ModeConfig::default()
    }
}

/// Two experts for the expert-size sweep; depth is the swept variable.
pub fn size_sweep_model() -> ModeConfig {
    ModeConfig { n_experts: 2, expert_layers_per_block: 1, ..figure_model() }
}

/// The figure model as a single block with 6-layer experts, to be re-blocked
/// by the merge sweep.
pub fn merges_model() -> ModeConfig {
    ModeConfig { n_blocks: 1, expert_layers_per_block: 6, ..figure_model() }
}

pub fn spmd_plan(n_experts: usize) -> ShardingPlan {
    ShardingPlan::spmd(CLUSTER_DEVICES, n_experts)
}

/// Backbone on 4 devices, two experts on each of two 2-device meshes.
pub fn three_mesh_plan() -> ShardingPlan {
    ShardingPlan::mpmd(
        &[4, 2, 2],
        &[vec![Branch::Backbone], vec![Branch::Expert(0), Branch::Expert(1)], vec![Branch::Expert(2), Branch::Expert(3)]],
    )
}

/// Backbone on 4 devices, every expert on its own device.
pub fn five_mesh_plan() -> ShardingPlan {
    let mut hosts = vec![vec![Branch::Backbone]];
    hosts.extend((0..4).map(|j| vec![Branch::Expert(j)]));
    ShardingPlan::mpmd(&[4, 1, 1, 1, 1], &hosts)
}

/// Backbone on 6 devices, two experts on one device each.
pub fn size_sweep_plan() -> ShardingPlan {
    ShardingPlan::mpmd(&[6, 1, 1], &[vec![Branch::Backbone], vec![Branch::Expert(0)], vec![Branch::Expert(1)]])
}

pub const SIZE_SWEEP: [usize; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
pub const MERGE_SWEEP: [usize; 4] = [1, 2, 3, 6];
