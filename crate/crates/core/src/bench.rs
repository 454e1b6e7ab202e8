//! Replicate variance of likelihood estimators over a parameter grid.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::keyed_stream;
use crate::smc::{bpf, csmc};
use crate::ssm::{ClusterParams, SeriesObservations};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    Bpf { particles: usize },
    Csmc { particles: usize, rounds: usize },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Bpf { .. } => "bpf",
            Method::Csmc { .. } => "csmc",
        }
    }

    pub fn particles(&self) -> usize {
        match *self {
            Method::Bpf { particles } | Method::Csmc { particles, .. } => particles,
        }
    }

    pub fn rounds(&self) -> usize {
        match *self {
            Method::Bpf { .. } => 0,
            Method::Csmc { rounds, .. } => rounds,
        }
    }
}

/// Parameter grid, replicate count and methods to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceGrid {
    pub mu: Vec<f64>,
    pub log_psi: Vec<f64>,
    pub replicates: usize,
    pub methods: Vec<Method>,
}

impl Default for VarianceGrid {
    fn default() -> Self {
        Self {
            mu: vec![-1.0, 0.0, 1.0],
            log_psi: vec![-12.0, -8.0, -4.0],
            replicates: 100,
            methods: vec![Method::Bpf { particles: 1024 }, Method::Csmc { particles: 64, rounds: 3 }],
        }
    }
}

impl VarianceGrid {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidParameter(format!("replicates must be at least 2, got {}", self.replicates)));
        }
        if self.mu.is_empty() || self.log_psi.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidParameter("grid axes and method list must be nonempty".into()));
        }
        for m in &self.methods {
            if m.particles() < 2 || matches!(m, Method::Csmc { rounds: 0, .. }) {
                return Err(Error::InvalidParameter(format!("invalid method settings {m:?}")));
            }
        }
        Ok(())
    }
}

/// Summary of the replicates at one grid point for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub mu: f64,
    pub log_psi: f64,
    pub method: String,
    pub particles: usize,
    pub rounds: usize,
    pub replicates: usize,
    /// Replicates whose filter degenerated; they are left out of the moments.
    pub degenerate: usize,
    pub mean: f64,
    pub variance: f64,
    pub ms_per_eval: f64,
}

/// Runs every method `replicates` times at every grid point. Replicate `r`
/// uses the stream keyed by `(grid point, method, r)`; with `fixed_stream`
/// all replicates share stream `r = 0`.
pub fn bench_variance(series: &SeriesObservations, grid: &VarianceGrid, seed: u64, fixed_stream: bool) -> Result<Vec<VarianceRow>> {
    grid.validate()?;
    let mut rows = Vec::new();
    for (i, &mu) in grid.mu.iter().enumerate() {
        for (j, &log_psi) in grid.log_psi.iter().enumerate() {
            let theta = ClusterParams::new(mu, log_psi)?;
            for (k, method) in grid.methods.iter().enumerate() {
                let runs: Vec<(f64, f64)> = (0..grid.replicates)
                    .into_par_iter()
                    .map(|r| {
                        let rep = if fixed_stream { 0 } else { r as u64 };
                        let mut rng = keyed_stream(seed, &[i as u64, j as u64, k as u64, rep]);
                        let start = Instant::now();
                        let est = match *method {
                            Method::Bpf { particles } => bpf(series, &theta, particles, &mut rng)?.1,
                            Method::Csmc { particles, rounds } => csmc(series, &theta, particles, rounds, &mut rng)?,
                        };
                        let ms = start.elapsed().as_secs_f64() * 1e3;
                        Ok((if est.degenerate { f64::NAN } else { est.log_likelihood }, ms))
                    })
                    .collect::<Result<_>>()?;
                let ok: Vec<f64> = runs.iter().map(|r| r.0).filter(|v| v.is_finite()).collect();
                let (mean, variance) = moments(&ok);
                rows.push(VarianceRow {
                    mu,
                    log_psi,
                    method: method.name().into(),
                    particles: method.particles(),
                    rounds: method.rounds(),
                    replicates: grid.replicates,
                    degenerate: grid.replicates - ok.len(),
                    mean,
                    variance,
                    ms_per_eval: runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64,
                });
            }
        }
    }
    Ok(rows)
}

/// Sample mean and unbiased sample variance; NaN variance below two values.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() < 2 {
        f64::NAN
    } else {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    };
    (mean, var)
}

pub fn write_variance_csv<W: Write>(out: W, rows: &[VarianceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format { line: 0, message: e.to_string() })?;
    }
    w.flush()?;
    Ok(())
}
