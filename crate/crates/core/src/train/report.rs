use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};

/// Accuracy per evaluated domain and parameter counts for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub accuracies: Vec<(Domain, f64)>,
    pub average: f64,
    pub total_params: usize,
    pub trainable_params: usize,
}

impl EvalReport {
    pub fn new(label: &str, accuracies: Vec<(Domain, f64)>, total_params: usize, trainable_params: usize) -> Self {
        let average = if accuracies.is_empty() {
            0.0
        } else {
            accuracies.iter().map(|(_, a)| a).sum::<f64>() / accuracies.len() as f64
        };
        Self { label: label.to_string(), accuracies, average, total_params, trainable_params }
    }

    pub fn accuracy(&self, domain: Domain) -> Option<f64> {
        self.accuracies.iter().find(|(d, _)| *d == domain).map(|(_, a)| *a)
    }

    pub fn row(&self, setting: &str) -> TableRow {
        TableRow {
            method: self.label.clone(),
            setting: setting.to_string(),
            math: self.accuracy(Domain::Math),
            code: self.accuracy(Domain::Code),
            english: self.accuracy(Domain::English),
            average: self.average,
            total_params: self.total_params,
            trainable_params: self.trainable_params,
        }
    }
}

/// One CSV line. Header:
/// `method,setting,math,code,english,average,total_params,trainable_params`.
/// Domains that were not evaluated are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub setting: String,
    pub math: Option<f64>,
    pub code: Option<f64>,
    pub english: Option<f64>,
    pub average: f64,
    pub total_params: usize,
    pub trainable_params: usize,
}

pub fn write_csv<R: Serialize>(out: impl Write, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<R: Serialize>(out: impl Write, rows: &[R]) -> Result<()> {
    serde_json::to_writer_pretty(out, rows)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_is_arithmetic_mean() {
        let r = EvalReport::new("x", vec![(Domain::Math, 0.2), (Domain::Code, 0.4), (Domain::English, 0.9)], 10, 3);
        assert!((r.average - 0.5).abs() < 1e-15);
        assert_eq!(r.accuracy(Domain::Code), Some(0.4));
    }

    #[test]
    fn csv_has_documented_header() {
        let r = EvalReport::new("m", vec![(Domain::Code, 0.25)], 7, 2);
        let mut buf = Vec::new();
        write_csv(&mut buf, &[r.row("blocks=2")]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "method,setting,math,code,english,average,total_params,trainable_params");
        assert_eq!(lines.next().unwrap(), "m,blocks=2,,0.25,,0.25,7,2");
    }
}
