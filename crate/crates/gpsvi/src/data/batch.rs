//! Seeded minibatching with padded behavior matrices.

use super::{DataError, Dataset, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One minibatch, with behaviors padded to the batch's longest sequence.
/// Padded slots hold item id 0 and mask 0; the mask is what keeps them out of
/// attention normalization downstream.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Positions of these records in the source dataset, for diagnostics.
    pub indices: Vec<usize>,
    pub user_ids: Vec<u32>,
    pub group_lists: Vec<Vec<u32>>,
    pub item_ids: Vec<u32>,
    pub context_ids: Vec<u32>,
    pub lengths: Vec<usize>,
    pub l_max: usize,
    /// Row-major `[len(), l_max]`.
    pub behaviors: Vec<u32>,
    /// Row-major `[len(), l_max]`, 1.0 for real positions.
    pub mask: Vec<f64>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }
}

fn build_batch(ds: &Dataset, chunk: &[usize]) -> Batch {
    let l_max = chunk
        .iter()
        .map(|&i| ds.records[i].behaviors.len())
        .max()
        .unwrap_or(0);
    let mut batch = Batch {
        indices: chunk.to_vec(),
        user_ids: Vec::with_capacity(chunk.len()),
        group_lists: Vec::with_capacity(chunk.len()),
        item_ids: Vec::with_capacity(chunk.len()),
        context_ids: Vec::with_capacity(chunk.len()),
        lengths: Vec::with_capacity(chunk.len()),
        l_max,
        behaviors: Vec::with_capacity(chunk.len() * l_max),
        mask: Vec::with_capacity(chunk.len() * l_max),
        labels: Vec::with_capacity(chunk.len()),
    };
    for &i in chunk {
        let r = &ds.records[i];
        batch.user_ids.push(r.user_id);
        batch.group_lists.push(r.group.clone());
        batch.item_ids.push(r.item_id);
        batch.context_ids.push(r.context_id);
        batch.lengths.push(r.behaviors.len());
        batch.labels.push(r.label as f64);
        for l in 0..l_max {
            if l < r.behaviors.len() {
                batch.behaviors.push(r.behaviors[l]);
                batch.mask.push(1.0);
            } else {
                batch.behaviors.push(0);
                batch.mask.push(0.0);
            }
        }
    }
    batch
}

/// Split `ds` into batches after a seeded permutation; the final short batch
/// is kept. Same `(ds, batch_size, shuffle_seed)` always yields the same
/// sequence.
pub fn batch_iter(ds: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(DataError::Config(format!(
            "batch_size must be at least 1, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..ds.records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| build_batch(ds, c)).collect())
}

/// Dataset order preserved, no shuffle — the evaluation path.
pub fn batch_iter_sequential(ds: &Dataset, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(DataError::Config(format!(
            "batch_size must be at least 1, got {batch_size}"
        )));
    }
    let order: Vec<usize> = (0..ds.records.len()).collect();
    Ok(order.chunks(batch_size).map(|c| build_batch(ds, c)).collect())
}
