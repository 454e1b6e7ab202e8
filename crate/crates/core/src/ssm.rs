//! Point-process binomial state-space model.
//!
//! A latent log-odds state starts at `x0 + mu` (variance `psi0`), then follows a
//! Gaussian random walk with increment variance `psi = exp(log_psi)`. Each bin
//! emits a binomial count of size `n_trials_bins` with success probability
//! `sigmoid(x_t)`:
//!
//! ```text
//! x_1       ~ N(x0 + mu, psi0)
//! x_t | x   ~ N(x, psi)                 t > 1
//! y_t | x_t ~ Bin(n_trials_bins, sigmoid(x_t))
//! ```

use serde::{Deserialize, Serialize};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Smallest success probability allowed inside [`g_logpdf`].
pub const P_FLOOR: f64 = 1e-300;
/// Smallest failure probability allowed inside [`g_logpdf`].
pub const Q_FLOOR: f64 = 1e-16;

/// Per-cluster parameters `(mu, log psi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Shift of the latent log-odds at stimulus onset.
    pub mu: f64,
    /// Natural log of the random-walk increment variance.
    pub log_psi: f64,
}

impl ClusterParams {
    pub fn new(mu: f64, log_psi: f64) -> Result<Self> {
        if !mu.is_finite() || !log_psi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "cluster parameters must be finite, got mu={mu}, log_psi={log_psi}"
            )));
        }
        Ok(Self { mu, log_psi })
    }

    /// Random-walk variance `exp(log_psi)`.
    #[inline]
    pub fn psi(&self) -> f64 {
        self.log_psi.exp()
    }
}

/// Constants shared by every bin of one series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    /// Pre-stimulus baseline log-odds.
    pub x0: f64,
    /// Variance of the first transition.
    pub psi0: f64,
    /// Binomial size per bin (trials times sub-bins).
    pub n_trials_bins: u32,
}

impl SsmConfig {
    pub fn new(x0: f64, psi0: f64, n_trials_bins: u32) -> Result<Self> {
        if !x0.is_finite() {
            return Err(Error::InvalidParameter(format!("x0 must be finite, got {x0}")));
        }
        if !(psi0 > 0.0) || !psi0.is_finite() {
            return Err(Error::InvalidParameter(format!("psi0 must be positive, got {psi0}")));
        }
        if n_trials_bins == 0 {
            return Err(Error::InvalidParameter("n_trials_bins must be at least 1".into()));
        }
        Ok(Self { x0, psi0, n_trials_bins })
    }
}

/// One observed count series together with its model constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesObservations {
    counts: Vec<u32>,
    config: SsmConfig,
    log_coef: Vec<f64>,
}

impl SeriesObservations {
    pub fn new(counts: Vec<u32>, config: SsmConfig) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidParameter("series must have at least one bin".into()));
        }
        if let Some((t, &y)) = counts
            .iter()
            .enumerate()
            .find(|(_, &y)| y > config.n_trials_bins)
        {
            return Err(Error::InvalidParameter(format!(
                "count {y} at bin {t} exceeds binomial size {}",
                config.n_trials_bins
            )));
        }
        let log_coef = counts
            .iter()
            .map(|&y| ln_choose(config.n_trials_bins, y))
            .collect();
        Ok(Self { counts, config, log_coef })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn config(&self) -> &SsmConfig {
        &self.config
    }

    /// Series length `T`.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Emission log-density at bin `t` (0-based), equal to
    /// `g_logpdf(x, counts[t], config)` but with the binomial coefficient cached.
    #[inline]
    pub fn log_emission(&self, t: usize, x: f64) -> f64 {
        let (log_p, log_q) = clamped_log_probs(x);
        let y = self.counts[t] as f64;
        let n = self.config.n_trials_bins as f64;
        self.log_coef[t] + y * log_p + (n - y) * log_q
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `(ln p, ln (1-p))` for `p = sigmoid(x)`, with `p` clamped to `[P_FLOOR, 1 - Q_FLOOR]`.
#[inline]
fn clamped_log_probs(x: f64) -> (f64, f64) {
    let sp = x.max(0.0) + (-x.abs()).exp().ln_1p();
    let log_p = (x - sp).max(P_FLOOR.ln());
    let log_q = (-sp).max(Q_FLOOR.ln());
    (log_p, log_q)
}

fn ln_choose(n: u32, k: u32) -> f64 {
    if k == 0 || k == n {
        return 0.0;
    }
    let (n, k) = (n as f64, k as f64);
    libm::lgamma(n + 1.0) - libm::lgamma(k + 1.0) - libm::lgamma(n - k + 1.0)
}

/// Binomial log-probability mass `ln P(Y = y)` for `Y ~ Bin(n, p)`.
pub fn binomial_logpmf(y: u32, n: u32, p: f64) -> Result<f64> {
    if y > n {
        return Err(Error::InvalidParameter(format!("count {y} exceeds binomial size {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(if y == 0 { 0.0 } else { f64::NEG_INFINITY });
    }
    if p == 1.0 {
        return Ok(if y == n { 0.0 } else { f64::NEG_INFINITY });
    }
    let (yf, nf) = (y as f64, n as f64);
    Ok(ln_choose(n, y) + yf * p.ln() + (nf - yf) * (-p).ln_1p())
}

/// Gaussian log-density `ln N(x; mean, var)`.
#[inline]
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln()) - 0.5 * d * d / var
}

/// Initial-state log-density `ln N(x1; x0 + mu, psi0)`.
pub fn h_logpdf(x1: f64, theta: &ClusterParams, cfg: &SsmConfig) -> f64 {
    normal_logpdf(x1, cfg.x0 + theta.mu, cfg.psi0)
}

/// Transition log-density `ln N(x; x_prev, psi)`.
pub fn f_logpdf(x_prev: f64, x: f64, theta: &ClusterParams) -> f64 {
    normal_logpdf(x, x_prev, theta.psi())
}

/// Emission log-density: binomial with size `cfg.n_trials_bins` and success
/// probability `sigmoid(x)` clamped away from 0 and 1.
pub fn g_logpdf(x: f64, y: u32, cfg: &SsmConfig) -> Result<f64> {
    let n = cfg.n_trials_bins;
    if y > n {
        return Err(Error::InvalidParameter(format!("count {y} exceeds binomial size {n}")));
    }
    let (log_p, log_q) = clamped_log_probs(x);
    Ok(ln_choose(n, y) + y as f64 * log_p + (n - y) as f64 * log_q)
}

/// Baseline log-odds from a pre-stimulus window: `logit(sum / (len * n_per_bin))`.
///
/// An all-zero or saturated window has no finite logit; callers must then
/// supply `x0` themselves or add a pseudo-count.
pub fn estimate_initial_state(pre_counts: &[u32], n_per_bin: u32) -> Result<f64> {
    if pre_counts.is_empty() || n_per_bin == 0 {
        return Err(Error::DegenerateBaseline(
            "empty pre-stimulus window; supply an explicit x0".into(),
        ));
    }
    let total: u64 = pre_counts.iter().map(|&c| c as u64).sum();
    let max = pre_counts.len() as u64 * n_per_bin as u64;
    if total == 0 || total >= max {
        return Err(Error::DegenerateBaseline(format!(
            "pre-stimulus total {total} of {max} has no finite logit; \
             supply an explicit x0 or a pseudo-count correction"
        )));
    }
    Ok(logit(total as f64 / max as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(close(sigmoid(3f64.ln()), 0.75, 1e-15));
        let s = sigmoid(-40.0);
        assert!(s > 0.0 && s < 1e-17);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn sigmoid_symmetry() {
        for i in -300..=300 {
            let x = i as f64 * 0.1;
            assert!(close(sigmoid(x) + sigmoid(-x), 1.0, 1e-12), "x={x}");
        }
    }

    #[test]
    fn binomial_examples() {
        assert!(close(binomial_logpmf(0, 1, 0.5).unwrap(), 0.5f64.ln(), 1e-12));
        assert!(close(binomial_logpmf(5, 5, 0.3).unwrap(), 5.0 * 0.3f64.ln(), 1e-12));
        let want = (10.0 * 0.09 * 0.343f64).ln();
        assert!(close(binomial_logpmf(2, 5, 0.3).unwrap(), want, 1e-12));
        assert!(close(want, -1.1754, 1e-4));
    }

    #[test]
    fn binomial_boundaries_and_errors() {
        assert_eq!(binomial_logpmf(0, 7, 0.0).unwrap(), 0.0);
        assert_eq!(binomial_logpmf(1, 7, 0.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(binomial_logpmf(7, 7, 1.0).unwrap(), 0.0);
        assert!(binomial_logpmf(8, 7, 0.5).is_err());
        assert!(binomial_logpmf(1, 7, 1.5).is_err());
        assert!(binomial_logpmf(1, 7, -0.1).is_err());
        assert!(binomial_logpmf(1, 7, f64::NAN).is_err());
    }

    #[test]
    fn binomial_sums_to_one() {
        for &n in &[1u32, 2, 17, 225, 300] {
            for &p in &[1e-3, 0.01, 0.3, 0.5, 0.97] {
                let s: f64 = (0..=n).map(|y| binomial_logpmf(y, n, p).unwrap().exp()).sum();
                assert!(close(s, 1.0, 1e-10), "n={n} p={p} sum={s}");
            }
        }
    }

    #[test]
    fn h_and_f_examples() {
        let cfg = SsmConfig::new(-2.0, 0.3, 10).unwrap();
        let th = ClusterParams::new(0.7, 0.0).unwrap();
        let mode = cfg.x0 + th.mu;
        let peak = -0.5 * (2.0 * PI * cfg.psi0).ln();
        assert!(close(h_logpdf(mode, &th, &cfg), peak, 1e-12));
        assert!(close(h_logpdf(mode + cfg.psi0.sqrt(), &th, &cfg), peak - 0.5, 1e-12));
        let cfg = SsmConfig::new(0.0, 1.0, 10).unwrap();
        let th = ClusterParams::new(1.0, 0.0).unwrap();
        assert!(close(h_logpdf(0.0, &th, &cfg), -1.4189, 1e-4));

        let unit = ClusterParams::new(0.0, 0.0).unwrap();
        assert!(close(f_logpdf(1.3, 1.3, &unit), -0.5 * (2.0 * PI).ln(), 1e-12));
        assert!(close(f_logpdf(1.3, 2.3, &unit), -0.5 * (2.0 * PI).ln() - 0.5, 1e-12));
        let quarter = ClusterParams::new(0.0, 0.25f64.ln()).unwrap();
        assert!(close(f_logpdf(2.0, 2.5, &quarter), -0.7258, 1e-4));
    }

    // Simpson's rule on exp(logpdf) over +-8 sigma.
    fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(lo + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn densities_integrate_to_one() {
        let cfg = SsmConfig::new(-3.0, 0.04, 10).unwrap();
        let th = ClusterParams::new(0.5, -2.0).unwrap();
        let m = cfg.x0 + th.mu;
        let sd = cfg.psi0.sqrt();
        let z = integrate(|x| h_logpdf(x, &th, &cfg).exp(), m - 8.0 * sd, m + 8.0 * sd, 4000);
        assert!(close(z, 1.0, 1e-8), "{z}");
        let sd = th.psi().sqrt();
        let z = integrate(|x| f_logpdf(0.4, x, &th).exp(), 0.4 - 8.0 * sd, 0.4 + 8.0 * sd, 4000);
        assert!(close(z, 1.0, 1e-8), "{z}");
    }

    #[test]
    fn g_examples() {
        let cfg = SsmConfig::new(0.0, 1.0, 2).unwrap();
        assert!(close(g_logpdf(0.0, 1, &cfg).unwrap(), 0.5f64.ln(), 1e-12));
        let cfg = SsmConfig::new(0.0, 1.0, 40).unwrap();
        assert!(close(g_logpdf(-1e6, 0, &cfg).unwrap(), 0.0, 1e-12));
        assert!(g_logpdf(-1e6, 3, &cfg).unwrap().is_finite());
        assert!(g_logpdf(1e6, 0, &cfg).unwrap().is_finite());
        assert!(g_logpdf(0.0, 41, &cfg).is_err());
    }

    #[test]
    fn g_against_cumulative_enumeration() {
        // P(Y = 2) recovered as P(Y <= 2) - P(Y <= 1), each built by summing
        // pmf terms from the multiplicative recurrence.
        let n = 225u32;
        let p = 0.01f64;
        let mut term = (1.0 - p).powi(n as i32);
        let mut cdf = vec![term];
        for k in 1..=2u32 {
            term *= (n - k + 1) as f64 / k as f64 * p / (1.0 - p);
            cdf.push(cdf[k as usize - 1] + term);
        }
        let oracle = (cdf[2] - cdf[1]).ln();
        let cfg = SsmConfig::new(0.0, 1.0, n).unwrap();
        let got = g_logpdf(logit(p), 2, &cfg).unwrap();
        assert!(close(got, oracle, 1e-9), "{got} vs {oracle}");
        assert!(close(got, -1.316966, 1e-6));
    }

    #[test]
    fn cached_emission_matches_g() {
        let cfg = SsmConfig::new(-3.0, 1e-10, 225).unwrap();
        let series = SeriesObservations::new(vec![0, 3, 225, 17], cfg).unwrap();
        for t in 0..4 {
            for &x in &[-50.0, -3.0, 0.0, 2.0, 45.0] {
                let want = g_logpdf(x, series.counts()[t], &cfg).unwrap();
                assert!(close(series.log_emission(t, x), want, 1e-12));
            }
        }
    }

    #[test]
    fn initial_state_examples() {
        assert!(close(estimate_initial_state(&[1, 1, 0, 2], 2).unwrap(), 0.0, 1e-15));
        let mut counts = vec![11u32; 100];
        counts[0] += 25;
        assert_eq!(counts.iter().sum::<u32>(), 1125);
        let x0 = estimate_initial_state(&counts, 225).unwrap();
        assert!(close(x0, -2.9444, 1e-4));
        assert!(estimate_initial_state(&[0, 0, 0], 225).is_err());
        assert!(estimate_initial_state(&[5, 5], 5).is_err());
        assert!(estimate_initial_state(&[], 5).is_err());
    }

    #[test]
    fn initial_state_inverts_proportion() {
        let cases: [(&[u32], u32); 3] = [(&[3, 0, 9, 1], 10), (&[1], 2000), (&[224, 225, 3], 225)];
        for (c, n) in cases {
            let x0 = estimate_initial_state(c, n).unwrap();
            let total: u32 = c.iter().sum();
            let back = sigmoid(x0) * c.len() as f64 * n as f64;
            assert!(close(back, total as f64, 1e-9), "{back} vs {total}");
        }
    }

    #[test]
    fn series_rejects_out_of_range_counts() {
        let cfg = SsmConfig::new(0.0, 1.0, 5).unwrap();
        assert!(SeriesObservations::new(vec![1, 6], cfg).is_err());
        assert!(SeriesObservations::new(vec![], cfg).is_err());
        assert!(SsmConfig::new(0.0, 0.0, 5).is_err());
        assert!(SsmConfig::new(0.0, 1.0, 0).is_err());
        assert!(ClusterParams::new(f64::NAN, 0.0).is_err());
    }
}
