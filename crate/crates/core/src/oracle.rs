//! Reference marginal likelihood by dense state discretization.
//!
//! The first latent state lives on its own local grid around `x0 + mu`
//! (width set by `psi0`, which may be far below the main grid spacing); all
//! later states live on the main grid. Integrals use the trapezoid rule and
//! the forward recursion is rescaled at every step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{normal_logpdf, ClusterParams, SeriesObservations};

/// Default number of grid points.
pub const DEFAULT_POINTS: usize = 2001;
/// Default half-width of the grid in composite standard deviations.
pub const DEFAULT_SIGMAS: f64 = 8.0;
/// Largest allowed boundary density relative to the peak at any step.
pub const BOUNDARY_TOLERANCE: f64 = 1e-12;

/// Uniform grid over the latent state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!("grid bounds must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        if n_points < 101 {
            return Err(Error::InvalidParameter(format!("grid needs at least 101 points, got {n_points}")));
        }
        Ok(Self { lo, hi, n_points })
    }

    /// `x0 + mu ± 8 max(sqrt(psi0), sqrt(T psi))` with `n_points` points.
    pub fn covering(series: &SeriesObservations, theta: &ClusterParams, n_points: usize) -> Result<Self> {
        let cfg = series.config();
        let center = cfg.x0 + theta.mu;
        let spread = cfg.psi0.sqrt().max((series.len() as f64 * theta.psi()).sqrt());
        Self::new(center - DEFAULT_SIGMAS * spread, center + DEFAULT_SIGMAS * spread, n_points)
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.n_points - 1) as f64
    }

    pub fn points(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n_points).map(|i| self.lo + i as f64 * h).collect()
    }

    /// Trapezoid weights.
    pub fn weights(&self) -> Vec<f64> {
        let h = self.spacing();
        let mut w = vec![h; self.n_points];
        w[0] = 0.5 * h;
        w[self.n_points - 1] = 0.5 * h;
        w
    }
}

/// Dense nonnegative transition kernel, row-major `[from * cols + to]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    fn propagate(&self, mass: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, k) in out.iter_mut().zip(row) {
                *o += m * k;
            }
        }
    }
}

/// Forward recursion on finite state spaces:
/// `beta_1 = initial ⊙ e_1`, `beta_t = (beta_{t-1} K_t) ⊙ e_t`, result `ln Σ beta_T`.
///
/// `first` maps step 1 states to step 2 states, `rest` is used for every
/// later step. `log_emissions[t][j]` is the emission log-weight of state `j`
/// at step `t`. `inspect(t, beta_t)` sees each rescaled mass vector.
pub fn forward_loglik(
    initial: &[f64],
    first: &Kernel,
    rest: &Kernel,
    log_emissions: &[Vec<f64>],
    mut inspect: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<f64> {
    let mut log_scale = 0.0;
    let mut mass = initial.to_vec();
    let mut scratch = Vec::new();
    for (t, log_e) in log_emissions.iter().enumerate() {
        if t > 0 {
            let kernel = if t == 1 { first } else { rest };
            assert_eq!(kernel.rows, mass.len(), "kernel rows must match the previous state count");
            scratch.resize(kernel.cols, 0.0);
            kernel.propagate(&mass, &mut scratch);
            std::mem::swap(&mut mass, &mut scratch);
        }
        assert_eq!(log_e.len(), mass.len(), "emission length must match the state count");
        let e_max = log_e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !e_max.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        for (m, le) in mass.iter_mut().zip(log_e) {
            *m *= (le - e_max).exp();
        }
        let peak = mass.iter().copied().fold(0.0, f64::max);
        if !(peak > 0.0) {
            return Ok(f64::NEG_INFINITY);
        }
        mass.iter_mut().for_each(|m| *m /= peak);
        log_scale += e_max + peak.ln();
        inspect(t, &mass)?;
    }
    Ok(log_scale + mass.iter().sum::<f64>().ln())
}

/// Marginal log-likelihood `ln p(y | theta)` by trapezoid quadrature.
///
/// Fails when the density at either end of the main grid (or of the local
/// first-step grid) exceeds [`BOUNDARY_TOLERANCE`] times its peak at some
/// step, or when the grid spacing exceeds the random-walk standard deviation.
pub fn grid_loglik(series: &SeriesObservations, theta: &ClusterParams, grid: &GridSpec) -> Result<f64> {
    let cfg = series.config();
    let psi = theta.psi();
    let len = series.len();
    if len > 1 && grid.spacing() > psi.sqrt() {
        return Err(Error::GridCoverage(format!(
            "grid spacing {:.3e} exceeds the random-walk sd {:.3e}; use more points",
            grid.spacing(),
            psi.sqrt()
        )));
    }

    let m0 = cfg.x0 + theta.mu;
    let local = GridSpec::new(
        m0 - DEFAULT_SIGMAS * cfg.psi0.sqrt(),
        m0 + DEFAULT_SIGMAS * cfg.psi0.sqrt(),
        grid.n_points,
    )?;
    let local_x = local.points();
    let local_w = local.weights();
    let main_x = grid.points();
    let main_w = grid.weights();

    let initial: Vec<f64> = local_x
        .iter()
        .zip(&local_w)
        .map(|(&x, &w)| w * normal_logpdf(x, m0, cfg.psi0).exp())
        .collect();
    let first = Kernel::from_fn(local_x.len(), main_x.len(), |i, j| {
        main_w[j] * normal_logpdf(main_x[j], local_x[i], psi).exp()
    });
    let rest = Kernel::from_fn(main_x.len(), main_x.len(), |i, j| {
        main_w[j] * normal_logpdf(main_x[j], main_x[i], psi).exp()
    });
    let log_emissions: Vec<Vec<f64>> = (0..len)
        .map(|t| {
            let xs = if t == 0 { &local_x } else { &main_x };
            xs.iter().map(|&x| series.log_emission(t, x)).collect()
        })
        .collect();

    forward_loglik(&initial, &first, &rest, &log_emissions, |t, mass| {
        let w = if t == 0 { &local_w } else { &main_w };
        let density: Vec<f64> = mass.iter().zip(w).map(|(m, w)| m / w).collect();
        let peak = density.iter().copied().fold(0.0, f64::max);
        let edge = density[0].max(density[density.len() - 1]);
        if edge > BOUNDARY_TOLERANCE * peak {
            let which = if t == 0 { "first-step" } else { "main" };
            return Err(Error::GridCoverage(format!(
                "{which} grid edge density is {:.2e} of peak at step {}; widen the grid",
                edge / peak,
                t + 1
            )));
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{g_logpdf, SsmConfig};

    const GOLDEN_TOY: f64 = -40.384585290;

    fn toy() -> (SeriesObservations, ClusterParams) {
        let cfg = SsmConfig::new(-3.0, 1e-10, 225).unwrap();
        let s = SeriesObservations::new(vec![5, 9, 7, 8, 6], cfg).unwrap();
        (s, ClusterParams::new(1.0, -4.0).unwrap())
    }

    #[test]
    fn single_step_delta_prior() {
        let cfg = SsmConfig::new(-2.5, 1e-10, 225).unwrap();
        let s = SeriesObservations::new(vec![11], cfg).unwrap();
        let th = ClusterParams::new(0.3, -2.0).unwrap();
        let grid = GridSpec::covering(&s, &th, 2001).unwrap();
        let got = grid_loglik(&s, &th, &grid).unwrap();
        let want = g_logpdf(-2.2, 11, &cfg).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn refinement_converges() {
        let cfg = SsmConfig::new(-1.0, 0.5, 20).unwrap();
        let s = SeriesObservations::new(vec![4, 9], cfg).unwrap();
        let th = ClusterParams::new(0.5, 0.0).unwrap();
        let at = |n| grid_loglik(&s, &th, &GridSpec::covering(&s, &th, n).unwrap()).unwrap();
        let (l1, l2, l4) = (at(101), at(201), at(401));
        assert!((l1 - l2).abs() < 1e-6, "{l1} {l2}");
        assert!((l1 - l4).abs() <= (l1 - l2).abs() + 1e-12);
    }

    #[test]
    fn golden_toy_value_two_resolutions() {
        let (s, th) = toy();
        let a = grid_loglik(&s, &th, &GridSpec::covering(&s, &th, 2001).unwrap()).unwrap();
        let b = grid_loglik(&s, &th, &GridSpec::covering(&s, &th, 4001).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        // Independent dense-quadrature filter, 6001 nodes on [-5, 1].
        assert!((a - GOLDEN_TOY).abs() < 1e-6, "{a}");
    }

    #[test]
    fn narrow_grid_is_rejected() {
        let (s, th) = toy();
        let grid = GridSpec::new(-2.05, -1.95, 2001).unwrap();
        assert!(matches!(grid_loglik(&s, &th, &grid), Err(Error::GridCoverage(_))));
        let coarse = GridSpec::new(-40.0, 40.0, 101).unwrap();
        assert!(matches!(grid_loglik(&s, &th, &coarse), Err(Error::GridCoverage(_))));
        assert!(GridSpec::new(1.0, 0.0, 2001).is_err());
        assert!(GridSpec::new(0.0, 1.0, 100).is_err());
    }

    #[test]
    fn discrete_chain_matches_path_enumeration() {
        let prior = [0.2, 0.5, 0.3];
        let trans = [[0.7, 0.2, 0.1], [0.25, 0.5, 0.25], [0.05, 0.15, 0.8]];
        let emit = [[0.6, 0.3, 0.1], [0.2, 0.2, 0.6], [0.1, 0.7, 0.2]];
        let kernel = Kernel::from_fn(3, 3, |i, j| trans[i][j]);
        let log_e: Vec<Vec<f64>> = emit.iter().map(|r| r.iter().map(|p: &f64| p.ln()).collect()).collect();
        let got = forward_loglik(&prior, &kernel, &kernel, &log_e, |_, _| Ok(())).unwrap();

        let mut total = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    total += prior[a] * emit[0][a] * trans[a][b] * emit[1][b] * trans[b][c] * emit[2][c];
                }
            }
        }
        assert!((got - total.ln()).abs() < 1e-10, "{got} vs {}", total.ln());
    }
}
