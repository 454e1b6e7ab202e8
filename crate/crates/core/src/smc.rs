//! Particle estimates of the marginal likelihood `p(y | theta)`.
//!
//! Everything runs on one engine, the twisted particle filter: a bootstrap
//! filter on the model whose transitions are reweighted by a cumulative
//! log-quadratic policy `Gamma_t(x) = exp(-A_t x^2 - B_t x - C_t)` and whose
//! emissions are corrected so that the likelihood is unchanged. With the
//! identity policy it is exactly the bootstrap filter. Controlled SMC
//! alternates that filter with a backward least-squares fit of the policy.
//!
//! Random stream contract, per filter pass: for each `t > 1`, one uniform for
//! systematic resampling, then one standard normal per particle in particle
//! order. The first step draws one standard normal per particle.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::normalize_log_weights;
use crate::ssm::{ClusterParams, SeriesObservations};

/// Log-quadratic twisting function `x -> -(a x^2 + b x + c)` in log space.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Quadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Quadratic {
    pub const IDENTITY: Quadratic = Quadratic { a: 0.0, b: 0.0, c: 0.0 };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// `ln gamma(x) = -(a x^2 + b x + c)`.
    #[inline]
    pub fn log_value(&self, x: f64) -> f64 {
        -(self.a * x * x + self.b * x + self.c)
    }

    fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite()
    }
}

impl std::ops::Add for Quadratic {
    type Output = Quadratic;
    fn add(self, o: Quadratic) -> Quadratic {
        Quadratic { a: self.a + o.a, b: self.b + o.b, c: self.c + o.c }
    }
}

/// Per-step policy increments from the latest refinement round and the
/// cumulative policy the filter actually twists by.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub increments: Vec<Quadratic>,
    pub cumulative: Vec<Quadratic>,
}

impl Policy {
    pub fn identity(len: usize) -> Self {
        Self { increments: vec![Quadratic::IDENTITY; len], cumulative: vec![Quadratic::IDENTITY; len] }
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.cumulative.iter().all(|q| *q == Quadratic::IDENTITY)
    }

    /// Whether every twisted variance is positive:
    /// `A_1 > -1/(2 psi0)` and `A_t > -1/(2 psi)` for `t > 1`.
    pub fn is_feasible(&self, psi0: f64, psi: f64) -> bool {
        self.cumulative.iter().enumerate().all(|(t, q)| {
            let v = if t == 0 { psi0 } else { psi };
            q.a > -0.5 / v && 1.0 + 2.0 * q.a * v > 0.0
        })
    }
}

/// Mean and variance of `N(x; x_prev, var) * exp(-A x^2 - B x)` after
/// normalization.
pub fn twisted_transition(x_prev: f64, big_a: f64, big_b: f64, var: f64) -> Result<(f64, f64)> {
    let k = 1.0 + 2.0 * big_a * var;
    if !(k > 0.0) || !(var > 0.0) {
        return Err(Error::Constraint(format!(
            "twisted precision 1/var + 2A is not positive (A={big_a}, var={var})"
        )));
    }
    Ok(((x_prev - big_b * var) / k, var / k))
}

/// `ln ∫ N(x; mean, var) exp(-A x^2 - B x - C) dx`.
///
/// Closed form `-ln(1 + 2 A v)/2 + (B^2 v / 2 - B m - A m^2) / (1 + 2 A v) - C`,
/// which is exactly zero for the identity twist.
pub fn log_twisted_normalizer(mean: f64, q: &Quadratic, var: f64) -> Result<f64> {
    let k = 1.0 + 2.0 * q.a * var;
    if !(k > 0.0) || !(var > 0.0) {
        return Err(Error::Constraint(format!(
            "1 + 2 A var is not positive (A={}, var={var})",
            q.a
        )));
    }
    Ok(log_normalizer_unchecked(mean, q, var, k))
}

#[inline]
fn log_normalizer_unchecked(mean: f64, q: &Quadratic, var: f64, k: f64) -> f64 {
    -0.5 * k.ln() + (0.5 * q.b * q.b * var - q.b * mean - q.a * mean * mean) / k - q.c
}

/// Particles from one filter pass, stored time-major (`[t * S + s]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    n_particles: usize,
    len: usize,
    positions: Vec<f64>,
    log_weights: Vec<f64>,
    normalized_weights: Vec<f64>,
    ancestors: Vec<usize>,
}

impl ParticleCloud {
    fn empty() -> Self {
        Self {
            n_particles: 0,
            len: 0,
            positions: Vec::new(),
            log_weights: Vec::new(),
            normalized_weights: Vec::new(),
            ancestors: Vec::new(),
        }
    }

    fn reset(&mut self, n_particles: usize, len: usize) {
        self.n_particles = n_particles;
        self.len = len;
        let total = n_particles * len;
        self.positions.resize(total, 0.0);
        self.log_weights.resize(total, 0.0);
        self.normalized_weights.resize(total, 0.0);
        self.ancestors.resize(len.saturating_sub(1) * n_particles, 0);
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Particle positions at step `t` (0-based).
    pub fn positions(&self, t: usize) -> &[f64] {
        &self.positions[t * self.n_particles..(t + 1) * self.n_particles]
    }

    /// Unnormalized log-weights at step `t`, i.e. the (twisted) emission
    /// log-density evaluated at each particle.
    pub fn log_weights(&self, t: usize) -> &[f64] {
        &self.log_weights[t * self.n_particles..(t + 1) * self.n_particles]
    }

    /// Normalized weights at step `t`. All zero when the column was degenerate.
    pub fn normalized_weights(&self, t: usize) -> &[f64] {
        &self.normalized_weights[t * self.n_particles..(t + 1) * self.n_particles]
    }

    /// Ancestor of each particle at step `t >= 1` in the previous step.
    pub fn ancestors(&self, t: usize) -> &[usize] {
        assert!(t >= 1, "the first step has no ancestors");
        &self.ancestors[(t - 1) * self.n_particles..t * self.n_particles]
    }
}

/// Log marginal-likelihood estimate in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodEstimate {
    pub log_likelihood: f64,
    /// Set when every weight of some step underflowed; the estimate is then `-inf`.
    pub degenerate: bool,
}

impl LikelihoodEstimate {
    pub fn degenerate() -> Self {
        Self { log_likelihood: f64::NEG_INFINITY, degenerate: true }
    }
}

/// Systematic resampling: one uniform `u` places the grid `(u + s) / S` and
/// each point picks the first index whose cumulative weight exceeds it.
/// The output is sorted ascending.
pub fn systematic_resample(weights: &[f64], u: f64) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::InvalidWeights("empty weight vector".into()));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::InvalidWeights(format!("uniform {u} outside [0, 1)")));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidWeights(format!("weight {w} is negative or not finite")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights(format!("weights sum to {sum}, expected 1")));
    }
    let mut out = vec![0; weights.len()];
    systematic_into(weights, u, &mut out);
    Ok(out)
}

fn systematic_into(weights: &[f64], u: f64, out: &mut [usize]) {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let mut j = 0;
    let mut cum = weights[0];
    for (s, slot) in out.iter_mut().enumerate() {
        let point = (u + s as f64) * step;
        while cum <= point && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        *slot = j;
    }
}

/// Per-step constants of the twisted model.
struct TwistedModel {
    /// `1 / (1 + 2 A_t v_t)` for the transition mean.
    inv_k: Vec<f64>,
    /// `B_t v_t`.
    shift: Vec<f64>,
    /// Twisted transition standard deviation.
    sd: Vec<f64>,
    /// Constant part of `ln F_t(x) = konst_t - (B_t x + A_t x^2) / k_t`.
    log_f_const: Vec<f64>,
    k: Vec<f64>,
    log_h: f64,
    initial_mean: f64,
}

impl TwistedModel {
    fn new(series: &SeriesObservations, theta: &ClusterParams, policy: &Policy) -> Result<Self> {
        let cfg = series.config();
        let psi = theta.psi();
        let len = series.len();
        let mut m = TwistedModel {
            inv_k: Vec::with_capacity(len),
            shift: Vec::with_capacity(len),
            sd: Vec::with_capacity(len),
            log_f_const: Vec::with_capacity(len),
            k: Vec::with_capacity(len),
            log_h: 0.0,
            initial_mean: cfg.x0 + theta.mu,
        };
        for (t, q) in policy.cumulative.iter().enumerate() {
            let v = if t == 0 { cfg.psi0 } else { psi };
            let k = 1.0 + 2.0 * q.a * v;
            if !(k > 0.0) || !k.is_finite() {
                return Err(Error::Constraint(format!(
                    "cumulative policy at step {} gives nonpositive twisted precision (A={})",
                    t + 1,
                    q.a
                )));
            }
            m.inv_k.push(1.0 / k);
            m.shift.push(q.b * v);
            m.sd.push((v / k).sqrt());
            m.log_f_const.push(-0.5 * k.ln() + 0.5 * q.b * q.b * v / k - q.c);
            m.k.push(k);
        }
        m.log_h = log_normalizer_unchecked(m.initial_mean, &policy.cumulative[0], cfg.psi0, m.k[0]);
        Ok(m)
    }

    /// `ln F_t(x)` for 0-based `t >= 1`, given the cumulative policy at `t`.
    #[inline]
    fn log_f(&self, t: usize, q: &Quadratic, x: f64) -> f64 {
        self.log_f_const[t] - (q.b * x + q.a * x * x) / self.k[t]
    }
}

/// Bootstrap particle filter; identical to [`twisted_smc`] with the identity policy.
pub fn bpf<R: Rng + ?Sized>(
    series: &SeriesObservations,
    theta: &ClusterParams,
    n_particles: usize,
    rng: &mut R,
) -> Result<(ParticleCloud, LikelihoodEstimate)> {
    twisted_smc(series, theta, &Policy::identity(series.len()), n_particles, rng)
}

/// Particle filter on the model twisted by the cumulative `policy`.
pub fn twisted_smc<R: Rng + ?Sized>(
    series: &SeriesObservations,
    theta: &ClusterParams,
    policy: &Policy,
    n_particles: usize,
    rng: &mut R,
) -> Result<(ParticleCloud, LikelihoodEstimate)> {
    if n_particles < 2 {
        return Err(Error::InvalidParameter(format!(
            "particle count must be at least 2, got {n_particles}"
        )));
    }
    let len = series.len();
    if policy.len() != len {
        return Err(Error::InvalidParameter(format!(
            "policy length {} does not match series length {len}",
            policy.len()
        )));
    }
    let mut cloud = ParticleCloud::empty();
    let estimate = twisted_pass(series, theta, policy, n_particles, &mut cloud, rng)?;
    Ok((cloud, estimate))
}

/// One filter pass into a reusable cloud.
fn twisted_pass<R: Rng + ?Sized>(
    series: &SeriesObservations,
    theta: &ClusterParams,
    policy: &Policy,
    n_particles: usize,
    cloud: &mut ParticleCloud,
    rng: &mut R,
) -> Result<LikelihoodEstimate> {
    let len = series.len();
    let model = TwistedModel::new(series, theta, policy)?;
    let s_count = n_particles;
    cloud.reset(n_particles, len);
    let gamma = &policy.cumulative;
    let log_mean_offset = (s_count as f64).ln();
    let mut total = 0.0;
    let mut degenerate = false;

    for t in 0..len {
        let row = t * s_count..(t + 1) * s_count;
        if t == 0 {
            let mean = (model.initial_mean - model.shift[0]) * model.inv_k[0];
            let sd = model.sd[0];
            for x in &mut cloud.positions[row.clone()] {
                let z: f64 = rng.sample(StandardNormal);
                *x = mean + sd * z;
            }
        } else {
            let u: f64 = rng.random();
            let (done, rest) = cloud.positions.split_at_mut(t * s_count);
            let prev = &done[(t - 1) * s_count..];
            let weights = &cloud.normalized_weights[(t - 1) * s_count..t * s_count];
            let anc = &mut cloud.ancestors[(t - 1) * s_count..t * s_count];
            systematic_into(weights, u, anc);
            let (inv_k, shift, sd) = (model.inv_k[t], model.shift[t], model.sd[t]);
            for (x, &a) in rest[..s_count].iter_mut().zip(anc.iter()) {
                let z: f64 = rng.sample(StandardNormal);
                *x = (prev[a] - shift) * inv_k + sd * z;
            }
        }

        let q = &gamma[t];
        let next = (t + 1 < len).then(|| &gamma[t + 1]);
        let initial = if t == 0 { model.log_h } else { 0.0 };
        for (lw, &x) in cloud.log_weights[row.clone()].iter_mut().zip(&cloud.positions[row.clone()]) {
            let mut w = series.log_emission(t, x);
            if let Some(qn) = next {
                w += model.log_f(t + 1, qn, x);
            }
            w -= q.log_value(x);
            *lw = w + initial;
        }
        match normalize_log_weights(&cloud.log_weights[row.clone()], &mut cloud.normalized_weights[row]) {
            Some(lse) => total += lse - log_mean_offset,
            None => {
                degenerate = true;
                break;
            }
        }
    }

    Ok(if degenerate || !total.is_finite() {
        LikelihoodEstimate::degenerate()
    } else {
        LikelihoodEstimate { log_likelihood: total, degenerate: false }
    })
}

/// Result of a constrained least-squares policy fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticFit {
    pub coeffs: Quadratic,
    /// The unconstrained curvature violated the lower bound and was pinned.
    pub constrained: bool,
    /// The particle positions could not identify a quadratic.
    pub rank_deficient: bool,
}

/// Slack added to a binding curvature bound.
pub fn constraint_slack(a_lower: f64) -> f64 {
    1e-6 * a_lower.abs().max(1.0)
}

/// Least-squares fit of `-(a x^2 + b x + c)` to `log_gamma_star` over the
/// particle positions `xs`, subject to `a > a_lower`.
///
/// The regression runs in standardized coordinates so that tightly clustered
/// particles stay well conditioned. When the unconstrained curvature is not
/// above `a_lower`, `a` is pinned at `a_lower + slack` and `(b, c)` are refit.
/// Fewer than three distinct positions give a flat fit (`a` at zero, or just
/// above the bound when zero is infeasible) with `c = -mean(log_gamma_star)`.
pub fn fit_quadratic_policy(xs: &[f64], log_gamma_star: &[f64], a_lower: f64) -> QuadraticFit {
    assert_eq!(xs.len(), log_gamma_star.len());
    let n = xs.len() as f64;
    let eps = constraint_slack(a_lower);
    let mean_r = -log_gamma_star.iter().sum::<f64>() / n;
    let flat = |a_lower: f64| QuadraticFit {
        coeffs: Quadratic::new(if a_lower < 0.0 { 0.0 } else { a_lower + eps }, 0.0, mean_r),
        constrained: a_lower >= 0.0,
        rank_deficient: true,
    };

    let x_bar = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - x_bar) * (x - x_bar)).sum::<f64>() / n;
    let sd = var.sqrt();
    if xs.len() < 3 || !(sd > 1e-14 * x_bar.abs().max(1.0)) {
        return flat(a_lower);
    }

    // Moments of the standardized positions u and the target r = -log gamma*.
    let mut m = [0.0f64; 5];
    let mut mr = [0.0f64; 3];
    for (&x, &lg) in xs.iter().zip(log_gamma_star) {
        let u = (x - x_bar) / sd;
        let r = -lg;
        let u2 = u * u;
        m[1] += u;
        m[2] += u2;
        m[3] += u2 * u;
        m[4] += u2 * u2;
        mr[0] += r;
        mr[1] += r * u;
        mr[2] += r * u2;
    }
    m[0] = n;

    // Normal equations for r ~ alpha u^2 + beta u + kappa.
    let gram = [[m[4], m[3], m[2]], [m[3], m[2], m[1]], [m[2], m[1], m[0]]];
    let rhs = [mr[2], mr[1], mr[0]];
    let Some([alpha, beta, kappa]) = solve3(gram, rhs) else {
        return flat(a_lower);
    };

    let a = alpha / (sd * sd);
    let from_centered = |a: f64, beta: f64, kappa: f64| {
        let b = beta / sd - 2.0 * a * x_bar;
        let c = kappa - a * x_bar * x_bar - b * x_bar;
        Quadratic::new(a, b, c)
    };
    if a > a_lower {
        return QuadraticFit {
            coeffs: from_centered(a, beta, kappa),
            constrained: false,
            rank_deficient: false,
        };
    }

    // Pin the curvature and regress the remainder on u.
    let a = a_lower + eps;
    let alpha = a * sd * sd;
    let beta = (mr[1] - alpha * m[3]) / m[2];
    let kappa = (mr[0] - alpha * m[2] - beta * m[1]) / n;
    QuadraticFit { coeffs: from_centered(a, beta, kappa), constrained: true, rank_deficient: false }
}

/// Gaussian elimination with partial pivoting; `None` for a (near-)singular system.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
    if !(scale > 0.0) {
        return None;
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// How controlled SMC obtains each round's policy increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolicyMode {
    /// Constrained least squares on the backward-recursion targets.
    #[default]
    Fitted,
    /// Every increment forced to the identity; reduces to repeated bootstrap filters.
    Identity,
}

/// Full output of a controlled SMC run.
#[derive(Debug, Clone)]
pub struct CsmcRun {
    /// Estimate from the final twisted filter.
    pub estimate: LikelihoodEstimate,
    /// Cumulative policy used by the final filter.
    pub policy: Policy,
    /// Number of steps where a fit failed and the identity increment was used.
    pub fallbacks: usize,
}

/// Controlled SMC estimate of `ln p(y | theta)` with `rounds` policy refinements.
pub fn csmc<R: Rng + ?Sized>(
    series: &SeriesObservations,
    theta: &ClusterParams,
    n_particles: usize,
    rounds: usize,
    rng: &mut R,
) -> Result<LikelihoodEstimate> {
    csmc_with(series, theta, n_particles, rounds, PolicyMode::Fitted, rng).map(|r| r.estimate)
}

/// Controlled SMC with an explicit [`PolicyMode`].
///
/// Runs a bootstrap filter, then `rounds` times: fits the policy increments
/// backward from `t = T` to `t = 1` against the current particles and runs
/// the twisted filter under the accumulated policy. A degenerate pass ends
/// the run with a degenerate estimate.
pub fn csmc_with<R: Rng + ?Sized>(
    series: &SeriesObservations,
    theta: &ClusterParams,
    n_particles: usize,
    rounds: usize,
    mode: PolicyMode,
    rng: &mut R,
) -> Result<CsmcRun> {
    if rounds < 1 {
        return Err(Error::InvalidParameter("controlled SMC needs at least one round".into()));
    }
    if n_particles < 2 {
        return Err(Error::InvalidParameter(format!(
            "particle count must be at least 2, got {n_particles}"
        )));
    }
    CLOUDS.with(|cell| {
        let mut clouds = cell.borrow_mut();
        let (cloud, spare) = &mut *clouds;
        csmc_in(series, theta, n_particles, rounds, mode, cloud, spare, rng)
    })
}

thread_local! {
    static CLOUDS: RefCell<(ParticleCloud, ParticleCloud)> =
        RefCell::new((ParticleCloud::empty(), ParticleCloud::empty()));
}

#[allow(clippy::too_many_arguments)]
fn csmc_in<R: Rng + ?Sized>(
    series: &SeriesObservations,
    theta: &ClusterParams,
    n_particles: usize,
    rounds: usize,
    mode: PolicyMode,
    cloud: &mut ParticleCloud,
    spare: &mut ParticleCloud,
    rng: &mut R,
) -> Result<CsmcRun> {
    let len = series.len();
    let psi0 = series.config().psi0;
    let psi = theta.psi();
    let mut policy = Policy::identity(len);
    let mut estimate = twisted_pass(series, theta, &policy, n_particles, cloud, rng)?;
    let mut fallbacks = 0;
    let mut target = vec![0.0; n_particles];

    for _ in 0..rounds {
        if estimate.degenerate {
            break;
        }
        let prev = policy.cumulative.clone();
        let prev_model = TwistedModel::new(series, theta, &policy)?;
        let mut next = policy.clone();

        target.copy_from_slice(cloud.log_weights(len - 1));
        for t in (0..len).rev() {
            let var = if t == 0 { psi0 } else { psi };
            let a_lower = -0.5 / var - prev[t].a;
            let increment = match mode {
                PolicyMode::Identity => Quadratic::IDENTITY,
                PolicyMode::Fitted => {
                    if target.iter().all(|v| v.is_finite()) {
                        let fit = fit_quadratic_policy(cloud.positions(t), &target, a_lower);
                        let q = fit.coeffs;
                        if q.is_finite() && 1.0 + 2.0 * (prev[t].a + q.a) * var > 0.0 {
                            q
                        } else {
                            fallbacks += 1;
                            Quadratic::IDENTITY
                        }
                    } else {
                        fallbacks += 1;
                        Quadratic::IDENTITY
                    }
                }
            };
            next.increments[t] = increment;
            next.cumulative[t] = prev[t] + increment;

            if t > 0 {
                // gamma*_{t-1} = g^{Gamma'}_{t-1} * F^Gamma_t / F^{Gamma'}_t
                let k_new = 1.0 + 2.0 * next.cumulative[t].a * psi;
                let qn = next.cumulative[t];
                for ((tv, &lw), &x) in target
                    .iter_mut()
                    .zip(cloud.log_weights(t - 1))
                    .zip(cloud.positions(t - 1))
                {
                    let new_f = log_normalizer_unchecked(x, &qn, psi, k_new);
                    let old_f = prev_model.log_f(t, &prev[t], x);
                    *tv = lw + new_f - old_f;
                }
            }
        }

        policy = next;
        estimate = twisted_pass(series, theta, &policy, n_particles, spare, rng)?;
        std::mem::swap(cloud, spare);
    }

    Ok(CsmcRun { estimate, policy, fallbacks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::StreamRng;
    use crate::ssm::SsmConfig;
    use rand::SeedableRng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn resample_examples() {
        assert_eq!(systematic_resample(&[0.25; 4], 0.0).unwrap(), vec![0, 1, 2, 3]);
        for &u in &[0.0, 0.4, 0.999] {
            assert_eq!(systematic_resample(&[1.0, 0.0, 0.0, 0.0], u).unwrap(), vec![0, 0, 0, 0]);
        }
        assert_eq!(systematic_resample(&[0.5, 0.5], 0.6).unwrap(), vec![0, 1]);
    }

    #[test]
    fn resample_against_grid_enumeration() {
        // Direct definition: point p picks the smallest j with cumsum_j > p.
        let w = [0.1, 0.0, 0.35, 0.05, 0.5];
        let mut cum = Vec::new();
        let mut acc = 0.0;
        for v in w {
            acc += v;
            cum.push(acc);
        }
        for k in 0..50 {
            let u = k as f64 / 50.0;
            let want: Vec<usize> = (0..w.len())
                .map(|s| {
                    let p = (u + s as f64) / w.len() as f64;
                    cum.iter().position(|&c| c > p).unwrap_or(w.len() - 1)
                })
                .collect();
            assert_eq!(systematic_resample(&w, u).unwrap(), want, "u={u}");
        }
    }

    #[test]
    fn resample_errors() {
        assert!(systematic_resample(&[0.5, 0.6], 0.1).is_err());
        assert!(systematic_resample(&[1.5, -0.5], 0.1).is_err());
        assert!(systematic_resample(&[0.5, 0.5], 1.0).is_err());
        assert!(systematic_resample(&[], 0.1).is_err());
    }

    #[test]
    fn twisted_transition_examples() {
        assert_eq!(twisted_transition(1.7, 0.0, 0.0, 0.3).unwrap(), (1.7, 0.3));
        let (m, v) = twisted_transition(0.0, 0.5, 1.0, 1.0).unwrap();
        assert!(close(m, -0.5, 1e-15) && close(v, 0.5, 1e-15));
        let (_, v) = twisted_transition(0.0, 10.0, 0.0, 0.1).unwrap();
        assert!(close(v, 1.0 / 30.0, 1e-15));
        assert!(twisted_transition(0.0, -5.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn normalizer_examples() {
        let n = |m, a, b, c, v| log_twisted_normalizer(m, &Quadratic::new(a, b, c), v).unwrap();
        assert_eq!(n(2.3, 0.0, 0.0, 0.0, 0.7), 0.0);
        assert!(close(n(0.0, 0.0, 1.0, 0.0, 1.0), 0.5, 1e-15));
        assert!(close(n(1.0, 0.5, 0.0, 0.0, 1.0), -0.5 * 2f64.ln() - 0.25, 1e-15));
        assert!(close(n(1.0, 0.5, 0.0, 0.0, 1.0), -0.5966, 1e-4));
        assert!(log_twisted_normalizer(0.0, &Quadratic::new(-1.0, 0.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn fit_exact_quadratic() {
        let xs: Vec<f64> = (0..40).map(|i| -2.0 + 0.1 * i as f64).collect();
        let lg: Vec<f64> = xs.iter().map(|x| -(2.0 * x * x + 3.0 * x + 1.0)).collect();
        let fit = fit_quadratic_policy(&xs, &lg, -100.0);
        assert!(!fit.constrained && !fit.rank_deficient);
        let q = fit.coeffs;
        assert!(close(q.a, 2.0, 1e-8) && close(q.b, 3.0, 1e-8) && close(q.c, 1.0, 1e-8), "{q:?}");
    }

    #[test]
    fn fit_flat_target() {
        let xs: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let lg = vec![-4.25; 30];
        let q = fit_quadratic_policy(&xs, &lg, -0.5).coeffs;
        assert!(close(q.a, 0.0, 1e-10) && close(q.b, 0.0, 1e-10) && close(q.c, 4.25, 1e-10));
    }

    #[test]
    fn fit_pinned_curvature_matches_normal_equations() {
        let xs: Vec<f64> = (0..25).map(|i| 0.5 + 0.13 * i as f64 + 0.01 * (i as f64).cos()).collect();
        let lg: Vec<f64> = xs.iter().map(|x| -(-5.0 * x * x + 0.7 * x - 2.0)).collect();
        let a_lower = -1.0;
        let fit = fit_quadratic_policy(&xs, &lg, a_lower);
        assert!(fit.constrained);
        let a = a_lower + constraint_slack(a_lower);
        assert_eq!(fit.coeffs.a, a);
        // Oracle: raw 2x2 normal equations for r - a x^2 ~ b x + c.
        let r: Vec<f64> = xs.iter().zip(&lg).map(|(x, l)| -l - a * x * x).collect();
        let (sx, sxx) = (xs.iter().sum::<f64>(), xs.iter().map(|x| x * x).sum::<f64>());
        let (sr, sxr) = (r.iter().sum::<f64>(), xs.iter().zip(&r).map(|(x, r)| x * r).sum::<f64>());
        let n = xs.len() as f64;
        let det = n * sxx - sx * sx;
        let b = (n * sxr - sx * sr) / det;
        let c = (sxx * sr - sx * sxr) / det;
        assert!(close(fit.coeffs.b, b, 1e-8), "{} vs {b}", fit.coeffs.b);
        assert!(close(fit.coeffs.c, c, 1e-8), "{} vs {c}", fit.coeffs.c);
    }

    #[test]
    fn fit_rank_deficient() {
        let xs = vec![1.5; 10];
        let lg = vec![-2.0; 10];
        let fit = fit_quadratic_policy(&xs, &lg, -3.0);
        assert!(fit.rank_deficient);
        assert_eq!(fit.coeffs, Quadratic::new(0.0, 0.0, 2.0));
        let fit = fit_quadratic_policy(&[1.0, 2.0, 1.0, 2.0], &[0.0, 1.0, 0.0, 1.0], -3.0);
        assert!(fit.rank_deficient);
    }

    #[test]
    fn fit_tightly_clustered_particles() {
        // Spread of 1e-5 around -3, as for the first step with psi0 = 1e-10.
        let xs: Vec<f64> = (0..64).map(|i| -3.0 + 1e-5 * ((i as f64) * 0.71).sin()).collect();
        let lg: Vec<f64> = xs.iter().map(|x| -(4.0 * x * x - 1.0 * x + 0.5)).collect();
        let q = fit_quadratic_policy(&xs, &lg, -5e9).coeffs;
        for &x in &xs {
            assert!(close(q.log_value(x), -(4.0 * x * x - x + 0.5), 1e-6));
        }
    }

    fn toy() -> SeriesObservations {
        let cfg = SsmConfig::new(-3.0, 1e-10, 225).unwrap();
        SeriesObservations::new(vec![5, 9, 7, 8, 6], cfg).unwrap()
    }

    #[test]
    fn bpf_single_step_collapsed_prior() {
        let cfg = SsmConfig::new(-3.0, 1e-10, 225).unwrap();
        let s = SeriesObservations::new(vec![7], cfg).unwrap();
        let th = ClusterParams::new(0.4, -3.0).unwrap();
        let want = crate::ssm::g_logpdf(-2.6, 7, &cfg).unwrap();
        for &n in &[2, 17, 256] {
            let mut rng = StreamRng::seed_from_u64(n as u64);
            let (_, e) = bpf(&s, &th, n, &mut rng).unwrap();
            assert!(close(e.log_likelihood, want, 1e-3));
        }
    }

    #[test]
    fn bpf_cloud_invariants() {
        let mut rng = StreamRng::seed_from_u64(3);
        let th = ClusterParams::new(1.0, -4.0).unwrap();
        let (cloud, e) = bpf(&toy(), &th, 50, &mut rng).unwrap();
        assert!(!e.degenerate && e.log_likelihood.is_finite());
        for t in 0..cloud.len() {
            let w = cloud.normalized_weights(t);
            assert!(close(w.iter().sum::<f64>(), 1.0, 1e-9));
            assert!(w.iter().all(|&v| v >= 0.0));
            if t > 0 {
                assert!(cloud.ancestors(t).iter().all(|&a| a < 50));
            }
        }
    }

    #[test]
    fn bpf_all_zero_counts_far_below_baseline() {
        let cfg = SsmConfig::new(-5.0, 1e-10, 225).unwrap();
        let s = SeriesObservations::new(vec![0; 20], cfg).unwrap();
        let th = ClusterParams::new(0.0, -2.0).unwrap();
        let mut rng = StreamRng::seed_from_u64(1);
        let (_, e) = bpf(&s, &th, 64, &mut rng).unwrap();
        assert!(e.log_likelihood.is_finite());
    }

    #[test]
    fn bpf_rejects_single_particle() {
        let mut rng = StreamRng::seed_from_u64(1);
        let th = ClusterParams::new(0.0, -2.0).unwrap();
        assert!(bpf(&toy(), &th, 1, &mut rng).is_err());
        assert!(csmc(&toy(), &th, 8, 0, &mut rng).is_err());
    }

    #[test]
    fn identity_twist_weights_equal_emissions() {
        let s = toy();
        let th = ClusterParams::new(1.0, -4.0).unwrap();
        let mut rng = StreamRng::seed_from_u64(9);
        let (cloud, _) = bpf(&s, &th, 32, &mut rng).unwrap();
        for t in 0..s.len() {
            for (&lw, &x) in cloud.log_weights(t).iter().zip(cloud.positions(t)) {
                assert_eq!(lw, s.log_emission(t, x));
            }
        }
    }

    #[test]
    fn csmc_policy_stays_feasible_and_deterministic() {
        let s = toy();
        for &lp in &[-12.0, -4.0, -0.5] {
            let th = ClusterParams::new(1.0, lp).unwrap();
            let run = |seed| {
                let mut rng = StreamRng::seed_from_u64(seed);
                csmc_with(&s, &th, 64, 3, PolicyMode::Fitted, &mut rng).unwrap()
            };
            let a = run(5);
            assert!(a.policy.is_feasible(1e-10, th.psi()));
            assert!(a.estimate.log_likelihood.is_finite());
            let b = run(5);
            assert_eq!(a.estimate.log_likelihood.to_bits(), b.estimate.log_likelihood.to_bits());
        }
    }

    #[test]
    fn identity_mode_matches_bpf_stream() {
        let s = toy();
        let th = ClusterParams::new(0.3, -6.0).unwrap();
        let mut r1 = StreamRng::seed_from_u64(11);
        let run = csmc_with(&s, &th, 16, 3, PolicyMode::Identity, &mut r1).unwrap();
        let mut r2 = StreamRng::seed_from_u64(11);
        let mut last = None;
        for _ in 0..4 {
            last = Some(bpf(&s, &th, 16, &mut r2).unwrap().1);
        }
        assert_eq!(
            run.estimate.log_likelihood.to_bits(),
            last.unwrap().log_likelihood.to_bits()
        );
        assert!(run.policy.is_identity());
    }
}
