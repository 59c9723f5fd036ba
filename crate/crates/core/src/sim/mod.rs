//! Analytical simulator of SPMD and MPMD sharding schedules for a MoDE
//! training step.
//!
//! A plan places every branch (the backbone and each expert stack) on a
//! device mesh. SPMD runs everything sequentially on one mesh spanning
//! the cluster. MPMD runs the branches of a block concurrently on disjoint
//! meshes and synchronises at every merge.

mod calibrate;
mod cost;
pub mod presets;
mod schedule;
mod sweep;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calibrate::{calibrate, Calibration, Observation};
pub use cost::{branch_compute_cost, CostModel};
pub use schedule::{simulate_step, MeshTime, ScheduleReport, Terms};
pub use sweep::{sweep_expert_size, sweep_merges, write_csv, SimRow, SizePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Backbone,
    Expert(usize),
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::Backbone => write!(f, "backbone"),
            Branch::Expert(j) => write!(f, "expert{j}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    Spmd,
    Mpmd,
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanKind::Spmd => "spmd",
            PlanKind::Mpmd => "mpmd",
        })
    }
}

/// A group of devices running its branches with one model-parallel degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceMesh {
    pub name: String,
    pub devices: Vec<usize>,
    /// Model-parallel degree; defaults to the number of devices.
    #[serde(default)]
    pub degree: Option<usize>,
    /// Overrides the cost model's intra-mesh bandwidth.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    /// Overrides the cost model's all-reduce latency.
    #[serde(default)]
    pub latency: Option<f64>,
}

impl DeviceMesh {
    pub fn new(name: impl Into<String>, devices: impl IntoIterator<Item = usize>) -> Self {
        Self { name: name.into(), devices: devices.into_iter().collect(), degree: None, bandwidth: None, latency: None }
    }

    pub fn degree(&self) -> usize {
        self.degree.unwrap_or(self.devices.len())
    }

    /// The cost model with this mesh's link overrides applied.
    pub fn costs(&self, cost: &CostModel) -> CostModel {
        CostModel {
            bandwidth: self.bandwidth.unwrap_or(cost.bandwidth),
            latency: self.latency.unwrap_or(cost.latency),
            ..cost.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardingPlan {
    pub kind: PlanKind,
    pub meshes: Vec<DeviceMesh>,
    /// Branch to mesh index. Every block of a branch runs on the same mesh.
    pub assignment: Vec<(Branch, usize)>,
}

impl ShardingPlan {
    /// One mesh of `devices` devices hosting the backbone and `n_experts`
    /// experts.
    pub fn spmd(devices: usize, n_experts: usize) -> Self {
        let assignment = std::iter::once(Branch::Backbone).chain((0..n_experts).map(Branch::Expert)).map(|b| (b, 0)).collect();
        Self { kind: PlanKind::Spmd, meshes: vec![DeviceMesh::new("all", 0..devices)], assignment }
    }

    /// Consecutive meshes of the given sizes; `hosts[m]` lists the branches
    /// on mesh `m`.
    pub fn mpmd(sizes: &[usize], hosts: &[Vec<Branch>]) -> Self {
        let mut next = 0;
        let meshes = sizes
            .iter()
            .enumerate()
            .map(|(m, &s)| {
                let mesh = DeviceMesh::new(format!("mesh{m}"), next..next + s);
                next += s;
                mesh
            })
            .collect();
        let assignment = hosts.iter().enumerate().flat_map(|(m, bs)| bs.iter().map(move |&b| (b, m))).collect();
        Self { kind: PlanKind::Mpmd, meshes, assignment }
    }

    pub fn device_count(&self) -> usize {
        self.meshes.iter().map(|m| m.devices.len()).sum()
    }

    pub fn mesh_of(&self, branch: Branch) -> Option<usize> {
        self.assignment.iter().find(|(b, _)| *b == branch).map(|&(_, m)| m)
    }

    /// Branches hosted on mesh `m`, in branch order.
    pub fn hosted(&self, m: usize) -> Vec<Branch> {
        let mut v: Vec<Branch> = self.assignment.iter().filter(|(_, k)| *k == m).map(|&(b, _)| b).collect();
        v.sort();
        v
    }

    /// Checks the plan against a model with `n_experts` experts and `heads`
    /// attention heads.
    pub fn validate(&self, n_experts: usize, heads: usize) -> Result<()> {
        if self.meshes.is_empty() {
            return Err(Error::Plan("plan has no meshes".into()));
        }
        let mut seen = BTreeSet::new();
        for mesh in &self.meshes {
            if mesh.devices.is_empty() {
                return Err(Error::Plan(format!("mesh `{}` is empty", mesh.name)));
            }
            for &d in &mesh.devices {
                if !seen.insert(d) {
                    return Err(Error::Plan(format!("device {d} appears in more than one mesh")));
                }
            }
            let p = mesh.degree();
            if p == 0 || p > mesh.devices.len() {
                return Err(Error::Plan(format!("mesh `{}` has degree {p} but {} devices", mesh.name, mesh.devices.len())));
            }
            if !heads.is_multiple_of(p) {
                return Err(Error::config(format!("model-parallel degree {p} of mesh `{}` does not divide {heads} heads", mesh.name)));
            }
            for (what, v) in [("bandwidth", mesh.bandwidth), ("latency", mesh.latency)] {
                if let Some(v) = v {
                    if v.is_nan() || v < 0.0 || (what == "bandwidth" && v == 0.0) {
                        return Err(Error::Plan(format!("mesh `{}` has invalid {what} {v}", mesh.name)));
                    }
                }
            }
        }
        if self.kind == PlanKind::Spmd && self.meshes.len() != 1 {
            return Err(Error::Plan(format!("SPMD plans use exactly one mesh, got {}", self.meshes.len())));
        }
        let expected: BTreeSet<Branch> = std::iter::once(Branch::Backbone).chain((0..n_experts).map(Branch::Expert)).collect();
        let mut assigned = BTreeSet::new();
        for &(b, m) in &self.assignment {
            if m >= self.meshes.len() {
                return Err(Error::Plan(format!("{b} is assigned to unknown mesh {m}")));
            }
            if !expected.contains(&b) {
                return Err(Error::Plan(format!("{b} is not a branch of a model with {n_experts} experts")));
            }
            if !assigned.insert(b) {
                return Err(Error::Plan(format!("{b} is assigned more than once")));
            }
        }
        if let Some(b) = expected.difference(&assigned).next() {
            return Err(Error::Plan(format!("{b} is not assigned to any mesh")));
        }
        Ok(())
    }
}
