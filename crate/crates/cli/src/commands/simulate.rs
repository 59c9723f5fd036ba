use std::path::Path;

use anyhow::Result;
use modelab_core::model::ModeConfig;
use modelab_core::sim::{self, presets, CostModel, Observation, ShardingPlan, SimRow};
use modelab_core::train::write_csv;
use serde::{Deserialize, Serialize};

use super::{resolve, Outcome};
use crate::run::Run;
use crate::{ConfigArgs, Failure, SimArgs, SweepArg};

const NOTES: &str = "Latencies are one training step: forward plus backward, modelled as three \
forward passes for compute and all-reduces alike. Merges reshard forward activations once per \
block; their synchronisation cost is reported with resharding.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Model simulated by `--plan`; the sweeps use their reference models.
    pub model: ModeConfig,
    pub cost: CostModel,
    pub devices: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { model: presets::figure_model(), cost: CostModel::default(), devices: presets::CLUSTER_DEVICES }
    }
}

fn plan(name: &str, cfg: &SimConfig) -> Result<(String, ShardingPlan)> {
    let p = match name {
        "spmd" => ShardingPlan::spmd(cfg.devices, cfg.model.n_experts),
        "mpmd" | "mpmd3" => presets::three_mesh_plan(),
        "mpmd5" => presets::five_mesh_plan(),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read plan {path}: {e}")))?;
            let p: ShardingPlan = toml::from_str(&text).map_err(|e| Failure::Config(format!("{path}: {e}")))?;
            let label = Path::new(path).file_stem().map_or(path.to_string(), |s| s.to_string_lossy().into_owned());
            return Ok((label, p));
        }
    };
    let label = if name == "mpmd" { "mpmd3" } else { name };
    Ok((label.to_string(), p))
}

#[derive(Serialize)]
struct Comparison {
    plan: String,
    latency_s: f64,
    spmd_latency_s: f64,
    speedup: f64,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    notes: &'a str,
    cost: &'a CostModel,
    rows: &'a [SimRow],
}

fn emit(run: &mut Run, stem: &str, cost: &CostModel, rows: &[SimRow]) -> Result<()> {
    run.write_with(&format!("{stem}.csv"), |b| sim::write_csv(b, rows))?;
    let json = serde_json::to_string_pretty(&JsonReport { notes: NOTES, cost, rows })?;
    run.write(&format!("{stem}.json"), json.as_bytes())?;
    Ok(())
}

fn plan_rows(plans: &[(String, ShardingPlan)], model: &ModeConfig, cost: &CostModel) -> Result<Vec<SimRow>> {
    plans
        .iter()
        .map(|(label, p)| Ok(SimRow::new(label.clone(), model, &sim::simulate_step(p, model, cost, model.n_blocks)?)))
        .collect()
}

fn size_rows(cost: &CostModel) -> Result<Vec<SimRow>> {
    let pts = sim::sweep_expert_size(
        &presets::spmd_plan(2),
        &presets::size_sweep_plan(),
        &presets::size_sweep_model(),
        cost,
        &presets::SIZE_SWEEP,
    )?;
    Ok(pts
        .iter()
        .flat_map(|p| [SimRow::new("spmd", &p.model, &p.spmd), SimRow::new("mpmd", &p.model, &p.mpmd)])
        .collect())
}

fn merge_rows(plans: &[(String, ShardingPlan)], cost: &CostModel) -> Result<Vec<SimRow>> {
    let mut rows = Vec::new();
    for (label, p) in plans {
        for (m, r) in sim::sweep_merges(p, &presets::merges_model(), cost, &presets::MERGE_SWEEP)? {
            rows.push(SimRow::new(label.clone(), &m, &r));
        }
    }
    Ok(rows)
}

pub fn run(work: &Path, args: &SimArgs) -> Outcome {
    let cfg: SimConfig = resolve(&args.cfg)?;
    cfg.cost.validate()?;
    let names: Vec<String> = match (&args.sweep, args.plans.is_empty()) {
        (None, true) => vec!["spmd".into(), "mpmd3".into(), "mpmd5".into()],
        (Some(SweepArg::Merges), true) => vec!["mpmd3".into()],
        _ => args.plans.clone(),
    };
    let plans = names.iter().map(|n| plan(n, &cfg)).collect::<Result<Vec<_>>>()?;
    let mut run = Run::create(work, "simulate", cfg.model.seed, &cfg)?;

    match args.sweep {
        None => {
            let rows = plan_rows(&plans, &cfg.model, &cfg.cost)?;
            emit(&mut run, "simulate", &cfg.cost, &rows)?;
            if let Some(spmd) = rows.iter().find(|r| r.plan == "spmd") {
                let cmp: Vec<Comparison> = rows
                    .iter()
                    .filter(|r| r.plan != "spmd")
                    .map(|r| Comparison {
                        plan: r.plan.clone(),
                        latency_s: r.latency_s,
                        spmd_latency_s: spmd.latency_s,
                        speedup: spmd.latency_s / r.latency_s,
                    })
                    .collect();
                if !cmp.is_empty() {
                    run.write_with("comparison.csv", |b| write_csv(b, &cmp))?;
                }
            }
        }
        Some(SweepArg::Size) => emit(&mut run, "simulate", &cfg.cost, &size_rows(&cfg.cost)?)?,
        Some(SweepArg::Merges) => emit(&mut run, "simulate", &cfg.cost, &merge_rows(&plans, &cfg.cost)?)?,
    }

    if args.figures {
        let fig_plans: Vec<_> = ["spmd", "mpmd3", "mpmd5"]
            .iter()
            .map(|n| plan(n, &SimConfig { model: presets::figure_model(), ..cfg.clone() }))
            .collect::<Result<_>>()?;
        emit(&mut run, "fig4a", &cfg.cost, &plan_rows(&fig_plans, &presets::figure_model(), &cfg.cost)?)?;
        emit(&mut run, "fig4b", &cfg.cost, &size_rows(&cfg.cost)?)?;
        emit(&mut run, "fig4c", &cfg.cost, &merge_rows(&fig_plans[..2], &cfg.cost)?)?;
    }
    Ok(Some(run.finish()?))
}

#[derive(Serialize)]
struct Residual {
    observation: usize,
    observed_s: f64,
    residual_s: f64,
}

pub fn calibrate(work: &Path, args: &ConfigArgs, observations: &Path) -> Outcome {
    let cfg: SimConfig = resolve(args)?;
    let text = std::fs::read_to_string(observations)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", observations.display())))?;
    let obs: Vec<Observation> =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", observations.display())))?;
    let fit = sim::calibrate(&cfg.cost, &obs)?;
    let mut run = Run::create(work, "calibrate", cfg.model.seed, &cfg)?;
    let table = toml::to_string(&fit.cost).map_err(|e| Failure::Config(e.to_string()))?;
    run.write("cost.toml", table.as_bytes())?;
    let rows: Vec<Residual> = obs
        .iter()
        .zip(&fit.residuals)
        .enumerate()
        .map(|(i, (o, &r))| Residual { observation: i, observed_s: o.latency, residual_s: r })
        .collect();
    run.write_with("residuals.csv", |b| write_csv(b, &rows))?;
    Ok(Some(run.finish()?))
}
