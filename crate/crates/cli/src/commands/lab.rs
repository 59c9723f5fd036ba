use std::path::Path;

use anyhow::Result;
use modelab_core::train::{Lab, LabConfig, SweepAxis, Table1, TableRow};
use modelab_core::Float;
use serde::Serialize;

use super::{dispatch, lab_config, write_rows, Outcome};
use crate::run::Run;
use crate::{AxisArg, LabCommand};

#[derive(Serialize)]
struct Resolved<'a, P: Serialize> {
    lab: &'a LabConfig,
    points: P,
}

pub fn run(work: &Path, cmd: LabCommand) -> Outcome {
    match cmd {
        LabCommand::Table1 { cfg, seeds } => {
            let c = lab_config(&cfg)?;
            dispatch!(c.model.precision, table1(work, &c, &seeds))
        }
        LabCommand::Sweep { cfg, axis, points } => {
            let c = lab_config(&cfg)?;
            let axis = match axis {
                AxisArg::Parameters => SweepAxis::Parameters,
                AxisArg::Examples => SweepAxis::Examples,
            };
            dispatch!(c.model.precision, sweep(work, &c, axis, &points))
        }
        LabCommand::Ablate { cfg, blocks, layers } => {
            let c = lab_config(&cfg)?;
            dispatch!(c.model.precision, ablate(work, &c, &blocks, &layers))
        }
        LabCommand::LoraRanks { cfg, ranks } => {
            let c = lab_config(&cfg)?;
            dispatch!(c.model.precision, lora_ranks(work, &c, &ranks))
        }
        LabCommand::Mixture { cfg, budgets } => {
            let c = lab_config(&cfg)?;
            dispatch!(c.model.precision, mixture(work, &c, &budgets))
        }
    }
}

fn table1<T: Float>(work: &Path, cfg: &LabConfig, seeds: &[u64]) -> Outcome {
    let first = *seeds.first().ok_or_else(|| crate::Failure::Config("no seeds given".into()))?;
    let mut rows: Vec<TableRow> = Vec::new();
    let mut tables = Vec::new();
    for &s in seeds {
        let lab = Lab::<T>::new(cfg.with_seed(s))?;
        let stage = lab.stage_one()?;
        let t = lab.table1(&stage)?;
        rows.extend(t.rows_for_csv().into_iter().map(|r| TableRow { setting: format!("seed={s}"), ..r }));
        tables.push(t);
    }
    let mean = Table1::mean(&tables)?;
    rows.extend(mean.rows_for_csv().into_iter().map(|r| TableRow { setting: "mean".into(), ..r }));
    let mut run = Run::create(work, "lab-table1", first, &Resolved { lab: cfg, points: seeds })?;
    write_rows(&mut run, "table1", &rows)?;
    Ok(Some(run.finish()?))
}

fn single<T: Float, R: Serialize, P: Serialize>(
    work: &Path,
    name: &str,
    cfg: &LabConfig,
    points: P,
    f: impl FnOnce(&Lab<T>) -> Result<Vec<R>>,
) -> Outcome {
    let lab = Lab::<T>::new(cfg.clone())?;
    let rows = f(&lab)?;
    let mut run = Run::create(work, &format!("lab-{name}"), cfg.model.seed, &Resolved { lab: cfg, points })?;
    write_rows(&mut run, name, &rows)?;
    Ok(Some(run.finish()?))
}

fn sweep<T: Float>(work: &Path, cfg: &LabConfig, axis: SweepAxis, points: &[usize]) -> Outcome {
    single::<T, _, _>(work, "sweep", cfg, (axis, points), |lab| Ok(lab.sweep_scaling(axis, points)?))
}

fn ablate<T: Float>(work: &Path, cfg: &LabConfig, blocks: &[usize], layers: &[usize]) -> Outcome {
    single::<T, _, _>(work, "ablate", cfg, (blocks, layers), |lab| Ok(lab.ablate_mode_configs(blocks, layers)?))
}

fn lora_ranks<T: Float>(work: &Path, cfg: &LabConfig, ranks: &[usize]) -> Outcome {
    let placements = [(false, false), (true, false)];
    single::<T, _, _>(work, "lora-ranks", cfg, ranks, |lab| Ok(lab.lora_ablation(ranks, &placements)?))
}

fn mixture<T: Float>(work: &Path, cfg: &LabConfig, budgets: &[usize]) -> Outcome {
    single::<T, _, _>(work, "mixture", cfg, budgets, |lab| {
        let stage = lab.stage_one()?;
        Ok(lab.mixture_data_efficiency(&stage, budgets)?)
    })
}
