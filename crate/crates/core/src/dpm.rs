//! Metropolis-within-Gibbs sampling for the Dirichlet-process mixture.
//!
//! Each iteration sweeps the cluster assignments with auxiliary candidate
//! clusters (Neal's Algorithm 8) and then moves every cluster's parameters
//! with one particle marginal Metropolis-Hastings step. Every likelihood
//! evaluation draws from its own random stream keyed by what it computes,
//! so traces do not depend on the number of worker threads.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{keyed_stream, sample_log_categorical, StreamRng};
use crate::smc::{bpf, csmc, LikelihoodEstimate};
use crate::ssm::{normal_logpdf, ClusterParams, SeriesObservations};

// Stream tags.
const INIT: u64 = 1;
const ASSIGN_AUX: u64 = 2;
const ASSIGN_LIK: u64 = 3;
const PROPOSE: u64 = 4;
const PMMH_LIK: u64 = 5;

/// Prior on cluster parameters: `mu ~ N(mu_mean, mu_var)`, `log psi ~ U(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseMeasure {
    pub mu_mean: f64,
    /// Variance, not standard deviation.
    pub mu_var: f64,
    pub logpsi_lo: f64,
    pub logpsi_hi: f64,
}

impl Default for BaseMeasure {
    fn default() -> Self {
        Self { mu_mean: 0.0, mu_var: 2.0, logpsi_lo: -15.0, logpsi_hi: 0.0 }
    }
}

impl BaseMeasure {
    pub fn new(mu_mean: f64, mu_var: f64, logpsi_lo: f64, logpsi_hi: f64) -> Result<Self> {
        let b = Self { mu_mean, mu_var, logpsi_lo, logpsi_hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu_mean.is_finite() {
            return Err(Error::InvalidParameter(format!("base mu_mean must be finite, got {}", self.mu_mean)));
        }
        if !(self.mu_var > 0.0 && self.mu_var.is_finite()) {
            return Err(Error::InvalidParameter(format!("base mu_var must be positive, got {}", self.mu_var)));
        }
        if !(self.logpsi_lo < self.logpsi_hi) || !self.logpsi_lo.is_finite() || !self.logpsi_hi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "base log-psi support must satisfy lo < hi, got [{}, {}]",
                self.logpsi_lo, self.logpsi_hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, theta: &ClusterParams) -> bool {
        (self.logpsi_lo..=self.logpsi_hi).contains(&theta.log_psi)
    }
}

/// Draws `theta` from the base measure.
pub fn base_sample<R: Rng + ?Sized>(base: &BaseMeasure, rng: &mut R) -> ClusterParams {
    let z: f64 = rng.sample(StandardNormal);
    let u: f64 = rng.random();
    ClusterParams {
        mu: base.mu_mean + base.mu_var.sqrt() * z,
        log_psi: base.logpsi_lo + (base.logpsi_hi - base.logpsi_lo) * u,
    }
}

/// Base log-density; `-inf` outside the uniform's support.
pub fn base_logpdf(base: &BaseMeasure, theta: &ClusterParams) -> f64 {
    if !base.contains(theta) {
        return f64::NEG_INFINITY;
    }
    normal_logpdf(theta.mu, base.mu_mean, base.mu_var) - (base.logpsi_hi - base.logpsi_lo).ln()
}

fn default_alpha() -> f64 {
    1.0
}
fn default_m() -> usize {
    5
}
fn default_proposal_sd() -> [f64; 2] {
    [0.5, 0.5]
}
fn default_iterations() -> usize {
    10_000
}
fn default_burn_in() -> usize {
    1_000
}
fn default_particles() -> usize {
    64
}
fn default_rounds() -> usize {
    3
}

/// Sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Concentration of the Dirichlet process.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub base: BaseMeasure,
    /// Number of auxiliary candidate clusters per assignment.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Random-walk standard deviation for `(mu, log psi)`.
    #[serde(default = "default_proposal_sd")]
    pub proposal_sd: [f64; 2],
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Particles per likelihood estimate.
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// Policy refinement rounds per controlled SMC estimate.
    #[serde(default = "default_rounds")]
    pub csmc_rounds: usize,
    /// Reuse a cluster's current likelihood estimate in the PMMH denominator
    /// while its members and parameters are unchanged, instead of
    /// re-estimating it every iteration.
    #[serde(default)]
    pub reuse_estimates: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            base: BaseMeasure::default(),
            m: default_m(),
            proposal_sd: default_proposal_sd(),
            iterations: default_iterations(),
            burn_in: default_burn_in(),
            particles: default_particles(),
            csmc_rounds: default_rounds(),
            reuse_estimates: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        self.base.validate()?;
        if self.m < 1 {
            return bad("m must be at least 1".into());
        }
        if self.proposal_sd.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad(format!("proposal_sd entries must be positive, got {:?}", self.proposal_sd));
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if self.burn_in >= self.iterations {
            return bad(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            ));
        }
        if self.particles < 2 {
            return bad(format!("particles must be at least 2, got {}", self.particles));
        }
        if self.csmc_rounds < 1 {
            return bad("csmc_rounds must be at least 1".into());
        }
        Ok(())
    }
}

/// Cluster assignments and per-cluster parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsState {
    pub assignments: Vec<usize>,
    pub params: Vec<ClusterParams>,
}

impl GibbsState {
    /// Every series in one cluster with parameters `theta`.
    pub fn single_cluster(n_series: usize, theta: ClusterParams) -> Self {
        Self { assignments: vec![0; n_series], params: vec![theta] }
    }

    /// All series in one cluster with parameters drawn from the base measure.
    pub fn initial(n_series: usize, base: &BaseMeasure, seed: u64) -> Self {
        let theta = base_sample(base, &mut keyed_stream(seed, &[INIT]));
        Self::single_cluster(n_series, theta)
    }

    pub fn n_clusters(&self) -> usize {
        self.params.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.params.len()];
        for &z in &self.assignments {
            sizes[z] += 1;
        }
        sizes
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&n| self.assignments[n] == k).collect()
    }

    /// Labels lie in `0..K`, every label is used and parameters are finite.
    pub fn validate(&self) -> Result<()> {
        if self.assignments.is_empty() || self.params.is_empty() {
            return Err(Error::InvalidParameter("state needs at least one series and one cluster".into()));
        }
        let k = self.params.len();
        if let Some(&z) = self.assignments.iter().find(|&&z| z >= k) {
            return Err(Error::InvalidParameter(format!("label {z} has no parameters ({k} clusters)")));
        }
        if let Some(empty) = self.cluster_sizes().iter().position(|&s| s == 0) {
            return Err(Error::InvalidParameter(format!("cluster {empty} is empty")));
        }
        if let Some(th) = self.params.iter().find(|t| !t.mu.is_finite() || !t.log_psi.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite cluster parameters {th:?}")));
        }
        Ok(())
    }

    /// Renumbers clusters by order of first appearance and drops unused ones.
    pub fn relabel(&mut self) {
        let mut map = vec![usize::MAX; self.params.len()];
        let mut params = Vec::with_capacity(self.params.len());
        for z in self.assignments.iter_mut() {
            if map[*z] == usize::MAX {
                map[*z] = params.len();
                params.push(self.params[*z]);
            }
            *z = map[*z];
        }
        self.params = params;
    }
}

/// One recorded iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsSample {
    /// 1-based iteration number.
    pub iter: usize,
    pub state: GibbsState,
    /// PMMH outcome per cluster of `state`, in label order.
    pub accepted: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsTrace {
    pub seed: u64,
    pub hyper: Hyperparams,
    pub samples: Vec<GibbsSample>,
}

/// CRP conditional for one series given the others: existing clusters in
/// proportion to their sizes, then `m` auxiliary clusters sharing `alpha`.
pub fn crp_prior_probs(counts: &[usize], alpha: f64, m: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    if m < 1 {
        return Err(Error::InvalidParameter("m must be at least 1".into()));
    }
    let others: usize = counts.iter().sum();
    let denom = others as f64 + alpha;
    let aux = alpha / m as f64 / denom;
    Ok(counts
        .iter()
        .map(|&c| c as f64 / denom)
        .chain(std::iter::repeat_n(aux, m))
        .collect())
}

/// Dirichlet-multinomial conditional for a finite mixture with `K` fixed
/// components: entry `k` is `(counts[k] + alpha[k]) / (sum(counts) + sum(alpha))`.
pub fn finite_mixture_probs(counts: &[usize], alpha: &[f64]) -> Result<Vec<f64>> {
    if counts.len() != alpha.len() {
        return Err(Error::InvalidParameter(format!(
            "{} counts but {} concentration entries",
            counts.len(),
            alpha.len()
        )));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidParameter(format!("concentration entries must be positive, got {a}")));
    }
    let total = counts.iter().sum::<usize>() as f64 + alpha.iter().sum::<f64>();
    Ok(counts.iter().zip(alpha).map(|(&c, &a)| (c as f64 + a) / total).collect())
}

/// Source of `ln p(y | theta)` estimates for the sampler.
pub trait LikelihoodEstimator: Sync {
    fn estimate(
        &self,
        series: &SeriesObservations,
        theta: &ClusterParams,
        rng: &mut StreamRng,
    ) -> Result<LikelihoodEstimate>;
}

/// Controlled SMC.
#[derive(Debug, Clone, Copy)]
pub struct CsmcEstimator {
    pub particles: usize,
    pub rounds: usize,
}

impl CsmcEstimator {
    pub fn from_hyper(hyper: &Hyperparams) -> Self {
        Self { particles: hyper.particles, rounds: hyper.csmc_rounds }
    }
}

impl LikelihoodEstimator for CsmcEstimator {
    fn estimate(&self, series: &SeriesObservations, theta: &ClusterParams, rng: &mut StreamRng) -> Result<LikelihoodEstimate> {
        csmc(series, theta, self.particles, self.rounds, rng)
    }
}

/// Bootstrap particle filter.
#[derive(Debug, Clone, Copy)]
pub struct BpfEstimator {
    pub particles: usize,
}

impl LikelihoodEstimator for BpfEstimator {
    fn estimate(&self, series: &SeriesObservations, theta: &ClusterParams, rng: &mut StreamRng) -> Result<LikelihoodEstimate> {
        bpf(series, theta, self.particles, rng).map(|(_, e)| e)
    }
}

/// Same value for every input; the sampler then targets the prior.
#[derive(Debug, Clone, Copy)]
pub struct ConstantEstimator(pub f64);

impl LikelihoodEstimator for ConstantEstimator {
    fn estimate(&self, _: &SeriesObservations, _: &ClusterParams, _: &mut StreamRng) -> Result<LikelihoodEstimate> {
        Ok(LikelihoodEstimate { log_likelihood: self.0, degenerate: false })
    }
}

/// Adds a fixed log-space offset to another estimator.
#[derive(Debug, Clone, Copy)]
pub struct OffsetEstimator<E> {
    pub inner: E,
    pub offset: f64,
}

impl<E: LikelihoodEstimator> LikelihoodEstimator for OffsetEstimator<E> {
    fn estimate(&self, series: &SeriesObservations, theta: &ClusterParams, rng: &mut StreamRng) -> Result<LikelihoodEstimate> {
        let mut e = self.inner.estimate(series, theta, rng)?;
        e.log_likelihood += self.offset;
        Ok(e)
    }
}

/// Cached PMMH denominator for one cluster.
#[derive(Debug, Clone)]
struct CachedEstimate {
    members: Vec<usize>,
    theta: ClusterParams,
    log_likelihood: f64,
}

/// Outcome of one PMMH step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmmhOutcome {
    pub accepted: bool,
    /// `ln a`; `-inf` for proposals outside the base support.
    pub log_ratio: f64,
    /// Number of filter runs performed.
    pub filter_runs: usize,
}

/// The sampler's fixed context: data, settings, likelihood source and seed.
pub struct Sampler<'a, E> {
    pub data: &'a [SeriesObservations],
    pub hyper: &'a Hyperparams,
    pub estimator: &'a E,
    pub seed: u64,
}

impl<'a, E: LikelihoodEstimator> Sampler<'a, E> {
    pub fn new(data: &'a [SeriesObservations], hyper: &'a Hyperparams, estimator: &'a E, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidParameter("no series to cluster".into()));
        }
        Ok(Self { data, hyper, estimator, seed })
    }

    fn log_likelihood(&self, n: usize, theta: &ClusterParams, key: &[u64]) -> Result<f64> {
        let mut rng = keyed_stream(self.seed, key);
        let e = self.estimator.estimate(&self.data[n], theta, &mut rng)?;
        Ok(if e.degenerate { f64::NEG_INFINITY } else { e.log_likelihood })
    }

    /// Resamples the cluster of series `n`.
    ///
    /// If `n` was alone, its cluster is removed and its parameters become the
    /// first auxiliary candidate; the remaining auxiliary candidates are fresh
    /// base draws. Labels are renumbered by first appearance afterwards.
    pub fn sample_assignment(&self, iter: usize, n: usize, state: &mut GibbsState) -> Result<()> {
        let (iter_key, n_key) = (iter as u64, n as u64);
        let old = state.assignments[n];
        let mut sizes = state.cluster_sizes();
        sizes[old] -= 1;
        let orphan = if sizes[old] == 0 {
            let theta = state.params.remove(old);
            sizes.remove(old);
            for z in state.assignments.iter_mut() {
                if *z > old {
                    *z -= 1;
                }
            }
            Some(theta)
        } else {
            None
        };
        let existing = state.params.len();

        let mut aux_rng = keyed_stream(self.seed, &[ASSIGN_AUX, iter_key, n_key]);
        let mut candidates = state.params.clone();
        candidates.extend(orphan);
        while candidates.len() < existing + self.hyper.m {
            candidates.push(base_sample(&self.hyper.base, &mut aux_rng));
        }

        let prior = crp_prior_probs(&sizes, self.hyper.alpha, self.hyper.m)?;
        let log_lik: Vec<f64> = candidates
            .par_iter()
            .enumerate()
            .map(|(j, theta)| self.log_likelihood(n, theta, &[ASSIGN_LIK, iter_key, n_key, j as u64]))
            .collect::<Result<_>>()?;
        let log_post: Vec<f64> = prior.iter().zip(&log_lik).map(|(p, l)| p.ln() + l).collect();
        let u: f64 = aux_rng.random();
        let choice = sample_log_categorical(&log_post, u)
            .ok_or(Error::DegenerateLikelihood { series: n, iteration: iter })?;

        if choice < existing {
            state.assignments[n] = choice;
        } else {
            state.params.push(candidates[choice]);
            state.assignments[n] = existing;
        }
        state.relabel();
        Ok(())
    }

    /// One PMMH move of cluster `k` with fresh estimates on both sides.
    pub fn pmmh_step(&self, iter: usize, k: usize, state: &mut GibbsState) -> Result<PmmhOutcome> {
        self.pmmh_cached(iter, k, state, None)
    }

    fn pmmh_cached(
        &self,
        iter: usize,
        k: usize,
        state: &mut GibbsState,
        cache: Option<&mut Vec<CachedEstimate>>,
    ) -> Result<PmmhOutcome> {
        let current = state.params[k];
        let mut prop_rng = keyed_stream(self.seed, &[PROPOSE, iter as u64, k as u64]);
        let proposal = random_walk(&current, &self.hyper.proposal_sd, &mut prop_rng);
        let u: f64 = prop_rng.random();
        let members = state.members(k);
        if members.is_empty() {
            return Err(Error::InvalidParameter(format!("cluster {k} has no members")));
        }

        let stream = |n: usize, side: u64| [PMMH_LIK, iter as u64, k as u64, n as u64, side];
        let outcome = self.pmmh_decide(&current, &proposal, u, &members, stream, cache)?;
        if outcome.accepted {
            state.params[k] = proposal;
        }
        Ok(outcome)
    }

    fn pmmh_decide(
        &self,
        current: &ClusterParams,
        proposal: &ClusterParams,
        u: f64,
        members: &[usize],
        stream: impl Fn(usize, u64) -> [u64; 5] + Sync,
        mut cache: Option<&mut Vec<CachedEstimate>>,
    ) -> Result<PmmhOutcome> {
        let base = &self.hyper.base;
        let prior_prop = base_logpdf(base, proposal);
        if prior_prop == f64::NEG_INFINITY {
            return Ok(PmmhOutcome { accepted: false, log_ratio: f64::NEG_INFINITY, filter_runs: 0 });
        }

        let cached = cache.as_ref().and_then(|c| {
            c.iter()
                .find(|e| e.members == members && e.theta == *current)
                .map(|e| e.log_likelihood)
        });
        let sides: &[u64] = if cached.is_some() { &[1] } else { &[0, 1] };
        let jobs: Vec<(usize, u64)> = sides.iter().flat_map(|&s| members.iter().map(move |&n| (n, s))).collect();
        let values: Vec<f64> = jobs
            .par_iter()
            .map(|&(n, side)| {
                let theta = if side == 0 { current } else { proposal };
                self.log_likelihood(n, theta, &stream(n, side))
            })
            .collect::<Result<_>>()?;
        let sum_side = |s: u64| -> f64 { jobs.iter().zip(&values).filter(|(j, _)| j.1 == s).map(|(_, v)| v).sum() };
        let ll_cur = cached.unwrap_or_else(|| sum_side(0));
        let ll_prop = sum_side(1);

        let sd = &self.hyper.proposal_sd;
        let log_ratio = if ll_prop == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else if ll_cur == f64::NEG_INFINITY {
            f64::INFINITY
        } else {
            (prior_prop + ll_prop + proposal_logpdf(proposal, current, sd))
                - (base_logpdf(base, current) + ll_cur + proposal_logpdf(current, proposal, sd))
        };
        let accepted = u.ln() < log_ratio;

        if let Some(c) = cache.as_mut() {
            c.retain(|e| e.members != members);
            c.push(CachedEstimate {
                members: members.to_vec(),
                theta: if accepted { *proposal } else { *current },
                log_likelihood: if accepted { ll_prop } else { ll_cur },
            });
        }
        Ok(PmmhOutcome { accepted, log_ratio, filter_runs: jobs.len() })
    }

    /// Runs `hyper.iterations` sweeps from `init`, handing each sample to
    /// `sink` as soon as it is complete.
    pub fn run_with(&self, init: GibbsState, mut sink: impl FnMut(&GibbsSample) -> Result<()>) -> Result<GibbsState> {
        if init.assignments.len() != self.data.len() {
            return Err(Error::InvalidParameter(format!(
                "initial state covers {} series, data has {}",
                init.assignments.len(),
                self.data.len()
            )));
        }
        init.validate()?;
        let mut state = init;
        state.relabel();
        let mut cache = self.hyper.reuse_estimates.then(Vec::new);
        for iter in 1..=self.hyper.iterations {
            for n in 0..self.data.len() {
                self.sample_assignment(iter, n, &mut state)
                    .map_err(|e| e.context(format!("iteration {iter}, series {n}")))?;
            }
            let mut accepted = Vec::with_capacity(state.n_clusters());
            for k in 0..state.n_clusters() {
                let out = self
                    .pmmh_cached(iter, k, &mut state, cache.as_mut())
                    .map_err(|e| e.context(format!("iteration {iter}, cluster {k}")))?;
                accepted.push(out.accepted);
            }
            if let Some(c) = cache.as_mut() {
                // Only the current clusters can be looked up again.
                let live: Vec<Vec<usize>> = (0..state.n_clusters()).map(|k| state.members(k)).collect();
                c.retain(|e| live.contains(&e.members));
            }
            sink(&GibbsSample { iter, state: state.clone(), accepted })?;
        }
        Ok(state)
    }
}

fn random_walk<R: Rng + ?Sized>(theta: &ClusterParams, sd: &[f64; 2], rng: &mut R) -> ClusterParams {
    let step = |sd: f64, rng: &mut R| Normal::new(0.0, sd).expect("validated sd").sample(rng);
    let mu = theta.mu + step(sd[0], rng);
    let log_psi = theta.log_psi + step(sd[1], rng);
    ClusterParams { mu, log_psi }
}

/// `ln r(to | from)` for the Gaussian random walk.
pub fn proposal_logpdf(to: &ClusterParams, from: &ClusterParams, sd: &[f64; 2]) -> f64 {
    normal_logpdf(to.mu, from.mu, sd[0] * sd[0]) + normal_logpdf(to.log_psi, from.log_psi, sd[1] * sd[1])
}

/// Runs the sampler and keeps every sample.
pub fn gibbs_run<E: LikelihoodEstimator>(
    data: &[SeriesObservations],
    hyper: &Hyperparams,
    estimator: &E,
    init: GibbsState,
    seed: u64,
) -> Result<GibbsTrace> {
    let sampler = Sampler::new(data, hyper, estimator, seed)?;
    let mut samples = Vec::with_capacity(hyper.iterations);
    sampler.run_with(init, |s| {
        samples.push(s.clone());
        Ok(())
    })?;
    Ok(GibbsTrace { seed, hyper: hyper.clone(), samples })
}
