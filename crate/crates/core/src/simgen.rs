//! Synthetic spike counts with known response types, and raster collapsing.
//!
//! Each synthetic neuron fires at a base rate drawn uniformly from
//! `[rate_lo, rate_hi]` Hz and responds to a stimulus at bin `pre_bins`
//! according to its type. Bin counts are binomial over `trials * sub_bins`
//! sub-bins, which is the sum over trials of the per-trial counts.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Dataset, Domain, SeriesRecord, SCHEMA_VERSION};
use crate::numeric::keyed_stream;
use crate::ssm::{estimate_initial_state, SeriesObservations, SsmConfig};

/// The five response types, numbered 1 to 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseType {
    ExcitedSustained = 1,
    InhibitedSustained = 2,
    NonResponsive = 3,
    ExcitedUnsustained = 4,
    InhibitedUnsustained = 5,
}

impl ResponseType {
    pub const ALL: [ResponseType; 5] = [
        Self::ExcitedSustained,
        Self::InhibitedSustained,
        Self::NonResponsive,
        Self::ExcitedUnsustained,
        Self::InhibitedUnsustained,
    ];

    pub fn label(self) -> u32 {
        self as u32
    }

    /// Rate multipliers for the early and late post-stimulus windows.
    pub fn multipliers(self) -> (f64, f64) {
        let e = std::f64::consts::E;
        match self {
            Self::ExcitedSustained => (e, e),
            Self::InhibitedSustained => (1.0 / e, 1.0 / e),
            Self::NonResponsive => (1.0, 1.0),
            Self::ExcitedUnsustained => (e, 1.0),
            Self::InhibitedUnsustained => (1.0 / e, 1.0),
        }
    }
}

fn d_n_per_type() -> usize {
    5
}
fn d_trials() -> u32 {
    45
}
fn d_delta_ms() -> f64 {
    1.0
}
fn d_sub_bins() -> u32 {
    5
}
fn d_pre_bins() -> usize {
    100
}
fn d_post_bins() -> usize {
    300
}
fn d_early_bins() -> usize {
    50
}
fn d_rate_lo() -> f64 {
    10.0
}
fn d_rate_hi() -> f64 {
    15.0
}
fn d_psi0() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "d_n_per_type")]
    pub n_per_type: usize,
    #[serde(default = "d_trials")]
    pub trials: u32,
    /// Sub-bin width in milliseconds.
    #[serde(default = "d_delta_ms")]
    pub delta_ms: f64,
    /// Sub-bins per bin.
    #[serde(default = "d_sub_bins")]
    pub sub_bins: u32,
    #[serde(default = "d_pre_bins")]
    pub pre_bins: usize,
    #[serde(default = "d_post_bins")]
    pub post_bins: usize,
    /// Length of the early response window after the stimulus.
    #[serde(default = "d_early_bins")]
    pub early_bins: usize,
    #[serde(default = "d_rate_lo")]
    pub rate_lo: f64,
    #[serde(default = "d_rate_hi")]
    pub rate_hi: f64,
    /// Shift of the stimulus bin handed to the model, relative to the true onset.
    #[serde(default)]
    pub onset_offset_bins: i64,
    #[serde(default = "d_psi0")]
    pub psi0: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_per_type: d_n_per_type(),
            trials: d_trials(),
            delta_ms: d_delta_ms(),
            sub_bins: d_sub_bins(),
            pre_bins: d_pre_bins(),
            post_bins: d_post_bins(),
            early_bins: d_early_bins(),
            rate_lo: d_rate_lo(),
            rate_hi: d_rate_hi(),
            onset_offset_bins: 0,
            psi0: d_psi0(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_per_type == 0 || self.trials == 0 || self.sub_bins == 0 || self.pre_bins == 0 || self.post_bins == 0 {
            return bad("n_per_type, trials, sub_bins, pre_bins and post_bins must be positive".into());
        }
        if !(self.delta_ms > 0.0 && self.delta_ms.is_finite()) {
            return bad(format!("delta_ms must be positive, got {}", self.delta_ms));
        }
        if !(self.rate_lo > 0.0 && self.rate_lo < self.rate_hi && self.rate_hi.is_finite()) {
            return bad(format!("rates must satisfy 0 < rate_lo < rate_hi, got [{}, {}]", self.rate_lo, self.rate_hi));
        }
        if self.early_bins > self.post_bins {
            return bad(format!("early_bins {} exceeds post_bins {}", self.early_bins, self.post_bins));
        }
        if self.onset_offset_bins.unsigned_abs() as usize >= self.pre_bins.min(self.post_bins) {
            return bad(format!(
                "onset offset {} must be smaller than both pre_bins and post_bins",
                self.onset_offset_bins
            ));
        }
        if !(self.psi0 > 0.0 && self.psi0.is_finite()) {
            return bad(format!("psi0 must be positive, got {}", self.psi0));
        }
        Ok(())
    }

    /// Binomial size of one bin summed over trials.
    pub fn n_trials_bins(&self) -> u32 {
        self.trials * self.sub_bins
    }

    pub fn total_bins(&self) -> usize {
        self.pre_bins + self.post_bins
    }

    /// Bin index handed to the model as the stimulus onset.
    pub fn model_onset(&self) -> usize {
        (self.pre_bins as i64 + self.onset_offset_bins) as usize
    }
}

/// Per-sub-bin spike probability for `rate_hz` at width `delta_ms`.
pub fn spike_probability(rate_hz: f64, delta_ms: f64) -> f64 {
    rate_hz * delta_ms / 1000.0
}

/// Success probability of every bin for a neuron of type `kind` at base rate `rate_hz`.
pub fn probability_schedule(cfg: &SimConfig, kind: ResponseType, rate_hz: f64) -> Result<Vec<f64>> {
    let (early, late) = kind.multipliers();
    (0..cfg.total_bins())
        .map(|t| {
            let mult = if t < cfg.pre_bins {
                1.0
            } else if t < cfg.pre_bins + cfg.early_bins {
                early
            } else {
                late
            };
            let p = spike_probability(rate_hz * mult, cfg.delta_ms);
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!(
                    "spike probability {p} at bin {t} is not below 1; lower the rates or delta_ms"
                )));
            }
            Ok(p)
        })
        .collect()
}

/// Builds the model series from a count vector whose stimulus falls at
/// `onset`: the baseline comes from the `pre_len` bins before `onset` and the
/// latent chain starts at `onset`.
pub fn series_from_counts(counts: &[u32], n_trials_bins: u32, onset: usize, pre_len: usize, psi0: f64) -> Result<SeriesObservations> {
    if onset == 0 || onset >= counts.len() {
        return Err(Error::InvalidParameter(format!(
            "onset {onset} must leave bins on both sides of a series of length {}",
            counts.len()
        )));
    }
    let pre = &counts[onset.saturating_sub(pre_len)..onset];
    let x0 = estimate_initial_state(pre, n_trials_bins)?;
    SeriesObservations::new(counts[onset..].to_vec(), SsmConfig::new(x0, psi0, n_trials_bins)?)
}

/// Draws a labeled dataset: `n_per_type` neurons of each type, grouped by
/// type. Neuron `i` uses its own random stream.
pub fn generate_synthetic(cfg: &SimConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let n_bins = cfg.n_trials_bins();
    let onset = cfg.model_onset();
    let mut series = Vec::new();
    let mut truth = Vec::new();
    for kind in ResponseType::ALL {
        for j in 0..cfg.n_per_type {
            let idx = series.len();
            let mut rng = keyed_stream(seed, &[idx as u64]);
            let rate = rng.random_range(cfg.rate_lo..cfg.rate_hi);
            let probs = probability_schedule(cfg, kind, rate)?;
            let counts: Vec<u32> = probs
                .iter()
                .map(|&p| Binomial::new(n_bins as u64, p).expect("p checked").sample(&mut rng) as u32)
                .collect();
            let model = series_from_counts(&counts, n_bins, onset, cfg.pre_bins, cfg.psi0)
                .map_err(|e| e.context(format!("neuron {idx}")))?;
            series.push(SeriesRecord {
                id: format!("type{}_{j}", kind.label()),
                x0: model.config().x0,
                psi0: cfg.psi0,
                onset,
                counts,
            });
            truth.push(kind.label());
        }
    }
    Ok(Dataset {
        schema_version: SCHEMA_VERSION,
        domain: Domain::Time,
        bin_width_ms: cfg.delta_ms * cfg.sub_bins as f64,
        n_trials_bins: n_bins,
        true_onset: Some(cfg.pre_bins),
        series,
        truth: Some(truth),
    })
}

/// Spike counts indexed by bin and trial, each at most `sub_bins`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    bins: usize,
    trials: usize,
    sub_bins: u32,
    counts: Vec<u32>,
}

impl Raster {
    /// `rows[t][r]` is the count of bin `t` in trial `r`.
    pub fn from_rows(rows: &[Vec<u32>], sub_bins: u32) -> Result<Self> {
        let trials = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || trials == 0 {
            return Err(Error::InvalidParameter("raster needs at least one bin and one trial".into()));
        }
        if let Some(t) = rows.iter().position(|r| r.len() != trials) {
            return Err(Error::InvalidParameter(format!("raster row {t} has {} trials, expected {trials}", rows[t].len())));
        }
        if let Some(c) = rows.iter().flatten().find(|&&c| c > sub_bins) {
            return Err(Error::InvalidParameter(format!("raster count {c} exceeds {sub_bins} sub-bins")));
        }
        Ok(Self { bins: rows.len(), trials, sub_bins, counts: rows.concat() })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn trials(&self) -> usize {
        self.trials
    }

    pub fn get(&self, t: usize, r: usize) -> u32 {
        self.counts[t * self.trials + r]
    }

    /// Binomial size of a count summed over trials.
    pub fn size_over_trials(&self) -> u32 {
        self.trials as u32 * self.sub_bins
    }

    /// Binomial size of a count summed over bins.
    pub fn size_over_time(&self) -> u32 {
        self.bins as u32 * self.sub_bins
    }
}

/// Per-bin totals across trials.
pub fn collapse_over_trials(raster: &Raster) -> Vec<u32> {
    raster.counts.chunks(raster.trials).map(|row| row.iter().sum()).collect()
}

/// Per-trial totals across bins.
pub fn collapse_over_time(raster: &Raster) -> Vec<u32> {
    let mut out = vec![0; raster.trials];
    for row in raster.counts.chunks(raster.trials) {
        for (o, c) in out.iter_mut().zip(row) {
            *o += c;
        }
    }
    out
}

/// Trial-domain series: per-trial totals, baseline from the trials before
/// `onset_trial` (0-based), chain starting at `onset_trial`.
pub fn trial_domain_series(raster: &Raster, onset_trial: usize, psi0: f64) -> Result<SeriesObservations> {
    let y = collapse_over_time(raster);
    series_from_counts(&y, raster.size_over_time(), onset_trial, onset_trial, psi0)
}

/// Time-domain series: per-bin totals, baseline from the `pre_len` bins
/// before `onset_bin`, chain starting at `onset_bin`.
pub fn time_domain_series(raster: &Raster, onset_bin: usize, pre_len: usize, psi0: f64) -> Result<SeriesObservations> {
    let y = collapse_over_trials(raster);
    series_from_counts(&y, raster.size_over_trials(), onset_bin, pre_len, psi0)
}
