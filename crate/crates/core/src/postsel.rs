//! Choosing one clustering from a Gibbs trace.
//!
//! The representative sample is the post-burn-in sample whose co-occurrence
//! matrix is closest in Frobenius norm to the mean co-occurrence matrix.
//! Distances are compared exactly in integer arithmetic.

use serde::{Deserialize, Serialize};

use crate::dpm::{GibbsSample, GibbsState};
use crate::error::{Error, Result};
use crate::ssm::ClusterParams;

/// Square matrix of pairwise same-cluster frequencies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CooccurrenceMatrix {
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::InvalidParameter(format!(
                "{} entries for a {n}x{n} matrix",
                entries.len()
            )));
        }
        let m = Self { n, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// Symmetric, unit diagonal, entries in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 1.0 {
                return Err(Error::InvalidParameter(format!("diagonal entry {i} is {}", self.get(i, i))));
            }
            for j in 0..self.n {
                let v = self.get(i, j);
                if !(0.0..=1.0).contains(&v) || v != self.get(j, i) {
                    return Err(Error::InvalidParameter(format!("entry ({i}, {j}) = {v} breaks symmetry or range")));
                }
            }
        }
        Ok(())
    }
}

/// Binary same-cluster indicator matrix of one assignment vector.
pub fn cooccurrence(z: &[usize]) -> CooccurrenceMatrix {
    let n = z.len();
    let mut entries = Vec::with_capacity(n * n);
    for &a in z {
        entries.extend(z.iter().map(|&b| if a == b { 1.0 } else { 0.0 }));
    }
    CooccurrenceMatrix { n, entries }
}

fn post_burn_in(samples: &[GibbsSample], burn_in: usize) -> Result<&[GibbsSample]> {
    if burn_in >= samples.len() {
        return Err(Error::InvalidParameter(format!(
            "burn-in {burn_in} leaves no samples out of {}",
            samples.len()
        )));
    }
    let kept = &samples[burn_in..];
    let n = kept[0].state.assignments.len();
    if kept.iter().any(|s| s.state.assignments.len() != n) {
        return Err(Error::InvalidParameter("samples disagree on the number of series".into()));
    }
    Ok(kept)
}

/// Pairwise same-cluster counts over the samples.
fn pair_counts(samples: &[GibbsSample]) -> Vec<u64> {
    let n = samples[0].state.assignments.len();
    let mut counts = vec![0u64; n * n];
    for s in samples {
        let z = &s.state.assignments;
        for i in 0..n {
            for j in 0..n {
                counts[i * n + j] += (z[i] == z[j]) as u64;
            }
        }
    }
    counts
}

/// Entrywise mean of the co-occurrence matrices of `samples[burn_in..]`.
pub fn mean_cooccurrence(samples: &[GibbsSample], burn_in: usize) -> Result<CooccurrenceMatrix> {
    let kept = post_burn_in(samples, burn_in)?;
    let n = kept[0].state.assignments.len();
    let total = kept.len() as f64;
    let entries = pair_counts(kept).into_iter().map(|c| c as f64 / total).collect();
    Ok(CooccurrenceMatrix { n, entries })
}

/// The chosen clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedClustering {
    pub assignments: Vec<usize>,
    pub params: Vec<ClusterParams>,
    /// Iteration number of the selected sample.
    pub source_iter: usize,
    /// Number of post-burn-in samples with exactly this co-occurrence matrix.
    pub tie_count: usize,
}

/// Squared Frobenius distance between sample `z` and the mean matrix,
/// scaled by `total^2` so that it is an integer.
fn scaled_distance(z: &[usize], counts: &[u64], total: u64) -> u128 {
    let n = z.len();
    let mut d = 0u128;
    for i in 0..n {
        for j in 0..n {
            let own = if z[i] == z[j] { total } else { 0 };
            let diff = own.abs_diff(counts[i * n + j]) as u128;
            d += diff * diff;
        }
    }
    d
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && (0..a.len()).all(|i| (0..i).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

/// Picks the post-burn-in sample closest to the mean co-occurrence matrix,
/// earliest first on ties. When several samples share its partition their
/// parameters are averaged cluster by cluster.
pub fn select(samples: &[GibbsSample], burn_in: usize) -> Result<SelectedClustering> {
    let kept = post_burn_in(samples, burn_in)?;
    let counts = pair_counts(kept);
    let total = kept.len() as u64;
    let (best, _) = kept
        .iter()
        .enumerate()
        .map(|(i, s)| (i, scaled_distance(&s.state.assignments, &counts, total)))
        .min_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("at least one sample");
    let chosen = &kept[best].state;
    let tied: Vec<&GibbsState> = kept
        .iter()
        .map(|s| &s.state)
        .filter(|s| same_partition(&s.assignments, &chosen.assignments))
        .collect();
    let tie_count = tied.len();
    let (assignments, params) = if tie_count > 1 {
        align_and_average(&tied)?
    } else {
        let mut s = chosen.clone();
        s.relabel();
        (s.assignments, s.params)
    };
    Ok(SelectedClustering { assignments, params, source_iter: kept[best].iter, tie_count })
}

/// Averages `(mu, log psi)` block by block over samples that share one
/// partition, matching clusters through their members so label switching
/// does not matter. Labels of the result follow first appearance.
pub fn align_and_average(samples: &[&GibbsState]) -> Result<(Vec<usize>, Vec<ClusterParams>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidParameter("nothing to average".into()))?;
    let mut reference = (*first).clone();
    reference.relabel();
    let k = reference.n_clusters();
    // The first member of each reference block identifies it in every sample.
    let leaders: Vec<usize> = (0..k)
        .map(|c| reference.assignments.iter().position(|&z| z == c).expect("labels are contiguous"))
        .collect();
    let mut sums = vec![(0.0, 0.0); k];
    for s in samples {
        if !same_partition(&s.assignments, &reference.assignments) {
            return Err(Error::InvalidParameter("samples do not share one partition".into()));
        }
        for (c, &lead) in leaders.iter().enumerate() {
            let th = s.params[s.assignments[lead]];
            sums[c].0 += th.mu;
            sums[c].1 += th.log_psi;
        }
    }
    let j = samples.len() as f64;
    let params = sums.iter().map(|&(m, l)| ClusterParams { mu: m / j, log_psi: l / j }).collect();
    Ok((reference.assignments, params))
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index<A: Eq + std::hash::Hash, B: Eq + std::hash::Hash>(a: &[A], b: &[B]) -> Result<f64> {
    use std::collections::HashMap;
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidParameter(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    let pairs = |c: f64| c * (c - 1.0) / 2.0;
    let mut table: HashMap<(&A, &B), f64> = HashMap::new();
    let mut rows: HashMap<&A, f64> = HashMap::new();
    let mut cols: HashMap<&B, f64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let expected = sum_a * sum_b / pairs(a.len() as f64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both labelings are all-singletons or all-one-block.
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}
