use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, FrameKey};

/// Frame-level train/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<FrameKey>,
    pub test: Vec<FrameKey>,
}

/// Test-set size for `total` frames under the 9:1 rule: `round(total / 10)`.
pub fn test_size(total: usize) -> usize {
    (total as f64 / 10.0).round() as usize
}

/// Seeded shuffle of the frame keys; the first `round(n / 10)` form the test
/// set. Both halves keep the input order.
pub fn split_frames(keys: &[FrameKey], seed: u64) -> Result<DatasetSplit, DataError> {
    if keys.len() < 10 {
        return Err(DataError::InvalidArgument(format!("need at least 10 frames to split, got {}", keys.len())));
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = test_size(keys.len());
    let mut is_test = vec![false; keys.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (k, t) in keys.iter().zip(is_test) {
        if t {
            test.push(k.clone());
        } else {
            train.push(k.clone());
        }
    }
    Ok(DatasetSplit { seed, train, test })
}
