//! Log-space helpers and keyed random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random generator used by every filter and sampler.
pub type StreamRng = ChaCha8Rng;

/// `ln sum exp(v)`; `-inf` for an empty slice or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights in place into probabilities and returns
/// `ln sum exp(log_weights)`. Returns `None` when the maximum is not finite.
pub fn normalize_log_weights(log_weights: &[f64], out: &mut [f64]) -> Option<f64> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut sum = 0.0;
    for (o, lw) in out.iter_mut().zip(log_weights) {
        let w = (lw - max).exp();
        *o = w;
        sum += w;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|w| *w *= inv);
    Some(max + sum.ln())
}

/// Draws an index from unnormalized log-probabilities by max-subtraction and
/// a cumulative scan; entries at `-inf` are never selected. Returns `None`
/// when no entry is finite.
pub fn sample_log_categorical(log_probs: &[f64], u: f64) -> Option<usize> {
    let max = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let weights: Vec<f64> = log_probs.iter().map(|lp| (lp - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if target < acc {
                return Some(i);
            }
        }
    }
    Some(last)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An independent stream for the task identified by `key`, so results do not
/// depend on which worker runs the task or in what order.
pub fn keyed_stream(seed: u64, key: &[u64]) -> StreamRng {
    let mut h = splitmix(seed);
    for &k in key {
        h = splitmix(h ^ splitmix(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}
