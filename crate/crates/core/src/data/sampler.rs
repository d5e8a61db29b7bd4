use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Condition, TrainingMode};

/// One target and the conditions forwarded for it in a step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchGroup {
    pub triplet: usize,
    pub conditions: Vec<Condition>,
}

/// Indices into a triplet pool plus the conditions to forward.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Batch {
    pub groups: Vec<BatchGroup>,
}

impl Batch {
    /// Number of forward passes (mixtures) in the batch.
    pub fn n_items(&self) -> usize {
        self.groups.iter().map(|g| g.conditions.len()).sum()
    }

    pub fn items(&self) -> impl Iterator<Item = (usize, Condition)> + '_ {
        self.groups
            .iter()
            .flat_map(|g| g.conditions.iter().map(move |&c| (g.triplet, c)))
    }
}

fn group(mode: TrainingMode, triplet: usize, rng: &mut ChaCha8Rng) -> BatchGroup {
    let conditions = match mode {
        TrainingMode::Shuffled => vec![Condition::ALL[rng.gen_range(0..3)]],
        m => m.group_conditions().to_vec(),
    };
    BatchGroup { triplet, conditions }
}

/// Draw one batch of `batch_size` groups from a pool of `pool_len`
/// triplets. Triplets are drawn without replacement.
///
/// `batch_size` counts targets: a triplec-parallel batch of 4 holds 12
/// mixtures, a shuffled batch of 4 holds 4.
pub fn sample_batch(pool_len: usize, batch_size: usize, mode: TrainingMode, seed: u64) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if batch_size > pool_len {
        return Err(Error::Capacity {
            needed: batch_size,
            available: pool_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, pool_len, batch_size).into_vec();
    let groups = picks.into_iter().map(|t| group(mode, t, &mut rng)).collect();
    Ok(Batch { groups })
}

/// Partition one epoch into batches.
///
/// Group-based modes visit every triplet once. Shuffled mode visits every
/// (triplet, condition) pair once in random order. The last batch may be
/// short.
pub fn epoch_batches(pool_len: usize, batch_size: usize, mode: TrainingMode, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if pool_len == 0 {
        return Err(Error::Capacity {
            needed: 1,
            available: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<BatchGroup> = match mode {
        TrainingMode::Shuffled => {
            let mut pairs: Vec<(usize, Condition)> = (0..pool_len)
                .flat_map(|t| Condition::ALL.into_iter().map(move |c| (t, c)))
                .collect();
            pairs.shuffle(&mut rng);
            pairs
                .into_iter()
                .map(|(triplet, c)| BatchGroup {
                    triplet,
                    conditions: vec![c],
                })
                .collect()
        }
        m => {
            let mut order: Vec<usize> = (0..pool_len).collect();
            order.shuffle(&mut rng);
            order
                .into_iter()
                .map(|triplet| BatchGroup {
                    triplet,
                    conditions: m.group_conditions().to_vec(),
                })
                .collect()
        }
    };
    Ok(groups
        .chunks(batch_size)
        .map(|c| Batch { groups: c.to_vec() })
        .collect())
}
