pub mod data;
pub mod lab;
pub mod simulate;
pub mod table1;
pub mod train;

use std::path::PathBuf;

use anyhow::Result;
use modelab_core::train::{write_csv, write_json, EvalReport, LabConfig, TrainLog};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::run::Run;
use crate::ConfigArgs;

pub type Outcome = Result<Option<PathBuf>>;

pub fn resolve<C: Serialize + DeserializeOwned + Default>(args: &ConfigArgs) -> Result<C> {
    crate::config::resolve(args.config.as_deref(), std::env::vars(), &args.sets)
}

pub fn lab_config(args: &ConfigArgs) -> Result<LabConfig> {
    let mut cfg: LabConfig = resolve(args)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Calls `$f::<T>(args..)` with `T` matching the configured precision.
macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $precision {
            modelab_core::DType::F32 => $f::<f32>($($arg),*),
            modelab_core::DType::F64 => $f::<f64>($($arg),*),
        }
    };
}
pub(crate) use dispatch;

pub fn write_report(run: &mut Run, setting: &str, report: &EvalReport) -> Result<()> {
    run.write_with("report.csv", |b| write_csv(b, &[report.row(setting)]))?;
    run.write("report.json", serde_json::to_string_pretty(report)?.as_bytes())?;
    Ok(())
}

pub fn write_rows<R: Serialize>(run: &mut Run, stem: &str, rows: &[R]) -> Result<()> {
    run.write_with(&format!("{stem}.csv"), |b| write_csv(b, rows))?;
    run.write_with(&format!("{stem}.json"), |b| write_json(b, rows))?;
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn write_losses(run: &mut Run, log: &TrainLog) -> Result<()> {
    let rows: Vec<LossRow> = log.losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
    run.write_with("losses.csv", |b| write_csv(b, &rows))?;
    Ok(())
}
