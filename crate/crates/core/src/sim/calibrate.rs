use serde::{Deserialize, Serialize};

use super::{simulate_step, CostModel, ShardingPlan, Terms};
use crate::error::{Error, Result};
use crate::model::ModeConfig;

/// A measured step latency of `model` under `plan`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub plan: ShardingPlan,
    pub model: ModeConfig,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub cost: CostModel,
    /// Predicted minus observed latency, per observation.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl Calibration {
    pub fn rms(&self) -> f64 {
        let n = self.residuals.len().max(1) as f64;
        (self.residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt()
    }
}

/// The fitted quantities: device throughput, intra- and cross-mesh
/// bandwidth and the per-merge overhead.
pub const FREE_PARAMETERS: usize = 4;

fn row(t: &Terms) -> [f64; FREE_PARAMETERS] {
    [t.flops, t.bytes, t.cross_bytes, t.merges]
}

fn fixed(t: &Terms, c: &CostModel) -> f64 {
    t.steps * c.latency + t.hops * c.hop_latency + t.fixed
}

/// Least squares `min |A x − b|` by Householder QR. Fails when `A` is
/// numerically rank-deficient.
fn least_squares(a: &[[f64; FREE_PARAMETERS]], b: &[f64]) -> Result<[f64; FREE_PARAMETERS]> {
    const N: usize = FREE_PARAMETERS;
    let m = a.len();
    // Column scaling keeps wildly different units comparable.
    let mut scale = [0.0; N];
    for j in 0..N {
        scale[j] = a.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
        if scale[j] == 0.0 {
            return Err(Error::Calibration(format!("parameter {j} is not exercised by any observation")));
        }
    }
    let mut q: Vec<Vec<f64>> = a.iter().map(|r| (0..N).map(|j| r[j] / scale[j]).collect()).collect();
    let mut rhs = b.to_vec();
    for k in 0..N {
        let norm = (k..m).map(|i| q[i][k] * q[i][k]).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Calibration("observations do not determine every parameter (rank deficient)".into()));
        }
        let alpha = if q[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| q[i][k]).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        for j in k..N {
            let dot: f64 = (k..m).map(|i| v[i - k] * q[i][j]).sum();
            for i in k..m {
                q[i][j] -= 2.0 * dot / vv * v[i - k];
            }
        }
        let dot: f64 = (k..m).map(|i| v[i - k] * rhs[i]).sum();
        for i in k..m {
            rhs[i] -= 2.0 * dot / vv * v[i - k];
        }
        if q[k][k].abs() < 1e-10 {
            return Err(Error::Calibration("observations do not determine every parameter (rank deficient)".into()));
        }
    }
    let mut x = [0.0; N];
    for k in (0..N).rev() {
        let s: f64 = (k + 1..N).map(|j| q[k][j] * x[j]).sum();
        x[k] = (rhs[k] - s) / q[k][k];
    }
    for j in 0..N {
        x[j] /= scale[j];
    }
    Ok(x)
}

/// Fits throughput, both bandwidths and the merge overhead of `start` to
/// `observations`; all-reduce and hop latencies stay fixed.
///
/// MPMD latency is piecewise linear (the slowest mesh of a block sets the
/// pace), so the fit alternates between choosing critical meshes under the
/// current estimate and solving the resulting linear problem.
pub fn calibrate(start: &CostModel, observations: &[Observation]) -> Result<Calibration> {
    start.validate()?;
    if observations.len() < FREE_PARAMETERS {
        return Err(Error::Calibration(format!(
            "{} observations cannot determine {FREE_PARAMETERS} parameters",
            observations.len()
        )));
    }
    let mut cost = start.clone();
    let mut last_rows: Option<Vec<[f64; FREE_PARAMETERS]>> = None;
    for iteration in 1..=50 {
        let reports = observations
            .iter()
            .map(|o| simulate_step(&o.plan, &o.model, &cost, o.model.n_blocks))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<_> = reports.iter().map(|r| row(&r.terms)).collect();
        if last_rows.as_ref() == Some(&rows) {
            let residuals = observations.iter().zip(&reports).map(|(o, r)| r.latency - o.latency).collect();
            return Ok(Calibration { cost, residuals, iterations: iteration - 1 });
        }
        let b: Vec<f64> =
            observations.iter().zip(&reports).map(|(o, r)| o.latency - fixed(&r.terms, &cost)).collect();
        let x = least_squares(&rows, &b)?;
        if x[..3].iter().any(|&v| v <= 0.0) || x[3] < 0.0 {
            return Err(Error::Calibration(format!("fit produced non-physical parameters {x:?}")));
        }
        cost = CostModel {
            device_flops: 1.0 / x[0],
            bandwidth: 1.0 / x[1],
            cross_bandwidth: 1.0 / x[2],
            merge_overhead: x[3],
            ..cost
        };
        last_rows = Some(rows);
    }
    Err(Error::Calibration("critical meshes did not settle within 50 iterations".into()))
}
