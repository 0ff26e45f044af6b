//! Deterministic random streams.
//!
//! Every random draw in the sampler comes from a ChaCha stream keyed by
//! `(seed, iteration, purpose, index)`, so per-subject work can run in
//! parallel and a run can be resumed from a checkpoint without storing
//! generator state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    LatentStates = 2,
    Paths = 3,
    Gibbs = 4,
    SplitMerge = 5,
    Refresh = 6,
    Simulate = 7,
    SimulateTimes = 8,
    Labels = 9,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, iteration: u64, purpose: Purpose, index: u64) -> StreamRng {
        let mut mix = self.seed ^ splitmix64(&mut iteration.wrapping_mul(0xD1B5_4A32_D192_ED03));
        mix ^= (purpose as u64).wrapping_mul(0xA24B_AED4_963E_E407);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut mix).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }
}

/// Index drawn with probability proportional to nonnegative `weights`.
///
/// Returns `None` when the weights do not have a positive finite total.
pub fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
    }
    last
}

/// Normalizes log weights in place into probabilities (max-shifted).
pub fn normalize_log_weights(log_weights: &mut [f64]) {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for w in log_weights.iter_mut() {
        *w = (*w - max).exp();
    }
    let total: f64 = log_weights.iter().sum();
    for w in log_weights.iter_mut() {
        *w /= total;
    }
}
