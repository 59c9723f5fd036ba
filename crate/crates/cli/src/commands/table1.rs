use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use modelab_core::train::{EvalReport, Table1, TABLE1_METHODS};

use super::{write_rows, Outcome};
use crate::run::{Run, RunManifest, MANIFEST};
use crate::Failure;

const SOURCES: [&str; 3] = ["pretrain-backbone", "finetune", "lora"];

/// Latest completed report per label, searching the run commands that can
/// produce table rows.
fn latest_reports(work: &Path) -> Result<BTreeMap<String, (PathBuf, EvalReport, u64)>> {
    let mut found: BTreeMap<String, (PathBuf, EvalReport, u64)> = BTreeMap::new();
    for cmd in SOURCES.iter().chain(&["compose"]) {
        let Ok(entries) = std::fs::read_dir(work.join(cmd)) else { continue };
        for entry in entries {
            let dir = entry?.path();
            if !dir.join(MANIFEST).is_file() || !dir.join("report.json").is_file() {
                continue;
            }
            let text = std::fs::read_to_string(dir.join("report.json"))?;
            let report: EvalReport =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", dir.display()))?;
            let seed = RunManifest::read(&dir)?.seed;
            let newer = found.get(&report.label).is_none_or(|(d, _, _)| dir.file_name() > d.file_name());
            if newer {
                found.insert(report.label.clone(), (dir, report, seed));
            }
        }
    }
    Ok(found)
}

pub fn run(work: &Path) -> Outcome {
    let mut found = latest_reports(work)?;
    let missing: Vec<&str> =
        std::iter::once("Backbone").chain(TABLE1_METHODS).filter(|m| !found.contains_key(*m)).collect();
    if !missing.is_empty() {
        return Err(Failure::Artifact(format!("missing runs for: {}", missing.join(", "))).into());
    }
    let (_, backbone, seed) = found.remove("Backbone").expect("checked above");
    let rows = TABLE1_METHODS.iter().map(|m| found[*m].1.clone()).collect();
    let table = Table1 { backbone, rows };
    let sources: BTreeMap<&str, String> =
        TABLE1_METHODS.iter().map(|m| (*m, found[*m].0.display().to_string())).collect();
    let mut run = Run::create(work, "table1", seed, &sources)?;
    write_rows(&mut run, "table1", &table.rows_for_csv())?;
    Ok(Some(run.finish()?))
}
