//! Random sampling with reshuffle over fixed mini-batches.
//!
//! Batch membership is drawn once ([`BatchPlan`]); every epoch then visits
//! the `n` batches in a fresh seeded permutation, so after `B` epochs each
//! batch has been used exactly `B` times and `T = n·B`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::Batch;

const MEMBERSHIP_STREAM: u64 = 0xBA7C;

/// Permutation of `0..n` used in `epoch`. Pure in `(seed, n, epoch)`: the
/// ChaCha stream id is the epoch number, so epochs can be generated in any
/// order.
pub fn epoch_permutation(seed: u64, n: usize, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReshuffleSampler {
    n_batches: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl ReshuffleSampler {
    pub fn new(n_batches: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_batches == 0 || batch_size == 0 {
            return Err(Error::Config(
                "sampler needs at least one non-empty batch".into(),
            ));
        }
        Ok(Self {
            n_batches,
            batch_size,
            seed,
            epoch: 0,
            cursor: 0,
            order: epoch_permutation(seed, n_batches, 0),
        })
    }

    pub fn for_plan(plan: &BatchPlan, seed: u64) -> Result<Self> {
        Self::new(plan.len(), plan.batch_size(), seed)
    }

    pub fn n_batches(&self) -> usize {
        self.n_batches
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Epoch of the next index to be emitted.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Next batch index ξ_k.
    pub fn next_index(&mut self) -> usize {
        if self.cursor == self.n_batches {
            self.epoch += 1;
            self.cursor = 0;
            self.order = epoch_permutation(self.seed, self.n_batches, self.epoch);
        }
        let xi = self.order[self.cursor];
        self.cursor += 1;
        xi
    }

    pub fn next_batch<'p>(&mut self, plan: &'p BatchPlan) -> &'p Batch {
        plan.batch(self.next_index())
    }
}

impl Iterator for ReshuffleSampler {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        Some(self.next_index())
    }
}

/// The dataset cut once into `n = ⌊N / batch_size⌋` equal batches (the last
/// partial batch is dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    batch_size: usize,
    members: Vec<Vec<usize>>,
    batches: Vec<Batch>,
}

impl BatchPlan {
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if dataset.len() < batch_size {
            return Err(Error::Config(format!(
                "dataset has {} samples, fewer than batch_size {batch_size}",
                dataset.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(MEMBERSHIP_STREAM);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let n = dataset.len() / batch_size;
        let members: Vec<Vec<usize>> = order
            .chunks_exact(batch_size)
            .take(n)
            .map(<[usize]>::to_vec)
            .collect();
        let batches = members
            .iter()
            .enumerate()
            .map(|(b, idx)| dataset.gather(idx, b))
            .collect::<Result<_>>()?;
        Ok(Self {
            batch_size,
            members,
            batches,
        })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batch(&self, index: usize) -> &Batch {
        &self.batches[index]
    }

    pub fn members(&self, index: usize) -> &[usize] {
        &self.members[index]
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }
}
